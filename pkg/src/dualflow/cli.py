"""Command-line entry point: ``dualflow {train,score,sample,density,gen-data}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .checkpoint import CheckpointError, load_checkpoint
from .config import OUTPUT_ROOT_ENV, ConfigError, RunConfig, apply_override
from .diagnostics import grid_points
from .diffcore import DiffError
from .objectives import TrainingError
from .odeint import SolverConfig, SolverError, log_density, push_forward_sample
from .pipeline import PreparedData, prepare_data, score_dataset, train_and_save, window_for_scoring

log = logging.getLogger("dualflow")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _load_config(args) -> RunConfig:
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as err:
            raise ConfigError(f"config {args.config} is not valid JSON: {err}") from None
    for key in ("objective", "seed", "output_dir"):
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = value
    if args.steps is not None:
        raw.setdefault("optim", {})["steps"] = args.steps
    for assignment in args.set or []:
        apply_override(raw, assignment)
    return RunConfig.from_dict(raw)


def cmd_train(args) -> int:
    config = _load_config(args)
    state, _, out = train_and_save(config)
    print(f"trained {config.objective} for {state.step} steps; "
          f"loss {state.losses[0]:.4g} -> {state.losses[-1]:.4g}" if state.losses else "no steps run")
    print(f"outputs written to {out}")
    return EXIT_OK


def _eval_solver(args, config: RunConfig) -> SolverConfig:
    base = config.eval_solver
    try:
        return SolverConfig(
            args.solver or base.method,
            args.steps if args.steps is not None else base.steps,
            args.atol if args.atol is not None else base.atol,
            args.rtol if args.rtol is not None else base.rtol,
            base.max_steps,
        )
    except ValueError as err:
        raise ConfigError(str(err)) from None


def _checkpoint(args):
    config, state, extra = load_checkpoint(args.checkpoint)
    return config, state, extra.get("norm.mean"), extra.get("norm.std")


def _out_dir(args, checkpoint) -> Path:
    if args.output_dir:
        return Path(args.output_dir)
    return Path(checkpoint).resolve().parent if Path(checkpoint).is_dir() else Path(checkpoint).parent


def cmd_score(args) -> int:
    config, state, mean, std = _checkpoint(args)
    solver = _eval_solver(args, config)
    if args.data:
        series = D.load_series(args.data, args.labels)
        dataset = window_for_scoring(series, config, mean, std)
    else:
        prepared: PreparedData = prepare_data(config)
        if prepared.test is None:
            raise D.DataError("checkpoint's data source has no test split; pass --data")
        dataset = prepared.test
    report = score_dataset(state, dataset, solver, config, args.strategy, args.point_adjust)
    out = _out_dir(args, args.checkpoint)
    path = report.write(out, stem=f"report_{solver.tag}")
    m = report.metrics()
    print(f"[{solver.tag}] solver={solver.method} nfe={report.nfe} windows={m['n_windows']}")
    if report.f1 is None:
        print(f"notice: {report.notice}")
    else:
        print(f"[{solver.tag}] P={report.precision:.4f} R={report.recall:.4f} "
              f"AUC={report.auc:.4f} F1={report.f1:.4f} point_adjust={report.point_adjust}")
    print(f"report written to {path}")
    return EXIT_OK


def _write_csv(path: Path, header: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) for v in row])


def cmd_sample(args) -> int:
    config, state, _, _ = _checkpoint(args)
    solver = _eval_solver(args, config)
    field = state.density_field(args.strategy or config.density.strategy)
    samples = push_forward_sample(field, state.prior, args.n, solver, args.seed)
    path = Path(args.output) if args.output else _out_dir(args, args.checkpoint) / "samples.csv"
    _write_csv(path, [f"x{i}" for i in range(state.prior.dim)], samples)
    print(f"wrote {len(samples)} samples to {path}")
    return EXIT_OK


def cmd_density(args) -> int:
    config, state, _, _ = _checkpoint(args)
    solver = _eval_solver(args, config)
    field = state.density_field(args.strategy or config.density.strategy)
    if args.grid:
        if state.prior.dim != 2:
            raise ConfigError("--grid requires a 2-D model")
        lo, hi, n = args.grid.split(",")
        pts, area = grid_points(float(lo), float(hi), int(n))
    elif args.points:
        pts = D.load_csv(Path(args.points))
        if pts.shape[1] != state.prior.dim:
            raise D.DataError(f"points have {pts.shape[1]} columns, model expects {state.prior.dim}")
        area = None
    else:
        raise ConfigError("density needs --grid or --points")
    logp, nfe = log_density(field, state.prior, pts, solver, config.trace.build())
    dens = np.exp(logp)
    path = Path(args.output) if args.output else _out_dir(args, args.checkpoint) / "density.csv"
    cols = [f"x{i}" for i in range(pts.shape[1])] + ["log_density", "density"]
    _write_csv(path, cols, np.column_stack([pts, logp, dens]))
    msg = f"wrote {len(pts)} densities to {path} (nfe={nfe})"
    if area is not None:
        msg += f"; grid Riemann sum = {dens.sum() * area:.4f}"
    print(msg)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "two-moons":
        pts = D.gen_two_moons(args.n, args.noise_std, args.seed)
        _write_csv(out / "two_moons.csv", ["x0", "x1"], pts)
        print(f"wrote {args.n} points to {out / 'two_moons.csv'}")
        return EXIT_OK
    series = D.gen_telemetry(args.T, args.C, args.anomaly_rate, args.seed,
                             clean_fraction=args.train_fraction)
    train, test = series.split(args.train_fraction)
    D.save_series(train, out / "train.json")
    D.save_series(test, out / "test.json", out / "test_labels.txt")
    print(f"wrote train ({train.length}x{train.channels}) and test ({test.length}x{test.channels}, "
          f"{int(test.labels.sum())} anomalous points) to {out}")
    return EXIT_OK


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--solver", choices=("euler", "dopri5"), help="evaluation solver")
    p.add_argument("--steps", type=int, help="Euler steps")
    p.add_argument("--atol", type=float)
    p.add_argument("--rtol", type=float)
    p.add_argument("--strategy", choices=("auto", "reverse_model", "forward_model"))
    p.add_argument("--output-dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualflow", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a flow from a JSON config")
    p.add_argument("config", nargs="?", help="JSON run config (defaults used when omitted)")
    p.add_argument("--objective")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="optimisation steps")
    p.add_argument("--output-dir", help=f"relative paths resolve under ${OUTPUT_ROOT_ENV} (default runs/)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score windows and report P/R/AUC/F1")
    p.add_argument("checkpoint")
    p.add_argument("--data", help="series header (.json) or CSV; default: config's test split")
    p.add_argument("--labels", help="0/1 labels, one per line")
    p.add_argument("--point-adjust", action="store_true")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("sample", help="draw samples by pushing the prior through the flow")
    p.add_argument("checkpoint")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("density", help="evaluate densities on points or a 2-D grid")
    p.add_argument("checkpoint")
    p.add_argument("--points", help="CSV of points with a header row")
    p.add_argument("--grid", help="lo,hi,n for an n x n grid over [lo,hi]^2")
    p.add_argument("--output")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_density)

    p = sub.add_parser("gen-data", help="write synthetic datasets to files")
    p.add_argument("kind", choices=("telemetry", "two-moons"))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--T", type=int, default=20_000)
    p.add_argument("--C", type=int, default=5)
    p.add_argument("--anomaly-rate", type=float, default=0.05)
    p.add_argument("--train-fraction", type=float, default=0.6)
    p.add_argument("--n", type=int, default=4000)
    p.add_argument("--noise-std", type=float, default=0.05)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (D.DataError, FileNotFoundError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (SolverError, TrainingError, DiffError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
