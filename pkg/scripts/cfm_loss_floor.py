"""Irreducible I-CFM regression loss on two moons.

The conditional target ``x1 - x0`` is random given ``x_t``; the best any
model can do is the marginal field ``E[x1 - x0 | x_t]``.  With the training
set as an empirical data distribution this expectation is a finite mixture,
so the floor ``E|u - E[u | x_t]|^2`` can be estimated by Monte Carlo without
training anything.  Compare against the loss reached by ``two_moons.py``.
"""

import argparse

import numpy as np

from dualflow.data import gen_two_moons
from dualflow.paths import PathSpec


def marginal_target(xt, t, data, sigma):
    """E[x1 - x0 | x_t] under x0 ~ N(0, I), x1 uniform over ``data``."""
    s = (1 - t) ** 2 + sigma**2  # variance of x_t given x1
    diff = xt[:, None, :] - t[:, None, None] * data[None, :, :]
    logw = -0.5 * np.sum(diff**2, axis=2) / s[:, None]
    w = np.exp(logw - logw.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    # E[x0 | x_t, x1] is the Gaussian posterior mean of the source
    x0_hat = (1 - t)[:, None, None] * diff / s[:, None, None]
    return np.einsum("nk,nkd->nd", w, data[None, :, :] - x0_hat)


def loss_floor(data, sigma, n_mc, seed, chunk=500):
    rng = np.random.default_rng(seed)
    total, sq = 0.0, 0.0
    for start in range(0, n_mc, chunk):
        m = min(chunk, n_mc - start)
        x1 = data[rng.integers(0, len(data), m)]
        x0 = rng.standard_normal(x1.shape)
        t = rng.uniform(0, 1, m)
        xt = t[:, None] * x1 + (1 - t)[:, None] * x0 + sigma * rng.standard_normal(x1.shape)
        per_row = np.sum((x1 - x0 - marginal_target(xt, t, data, sigma)) ** 2, axis=1)
        total += per_row.sum()
        sq += (per_row**2).sum()
    mean = total / n_mc
    se = np.sqrt(max(sq / n_mc - mean**2, 0.0) / n_mc)
    return mean, se


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-data", type=int, default=4000)
    ap.add_argument("--n-mc", type=int, default=20_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    data = gen_two_moons(args.n_data, seed=0)
    sigma = PathSpec("icfm").sigma
    mean, se = loss_floor(data, sigma, args.n_mc, args.seed)
    rng = np.random.default_rng(args.seed)
    x0 = rng.standard_normal(data.shape)
    # zero-model loss: E|x1 - x0|^2 plus nothing from sigma (the target ignores eps)
    zero = np.mean(np.sum((data - x0) ** 2, axis=1))
    print(f"sigma={sigma}  zero-model loss ~ {zero:.4f}")
    print(f"irreducible loss floor = {mean:.4f} +/- {se:.4f}")
    print(f"best achievable final/initial ratio ~ {mean / zero:.3f}")


if __name__ == "__main__":
    main()
