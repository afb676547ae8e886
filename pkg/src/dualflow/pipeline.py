"""Glue between a RunConfig and the library: data preparation, training, scoring."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as D
from .anomaly import ScoreReport, build_report, score_windows
from .checkpoint import save_checkpoint
from .config import RunConfig
from .objectives import TrainState, fit_prior, train
from .odeint import SolverConfig

log = logging.getLogger(__name__)


@dataclass
class PreparedData:
    train: np.ndarray
    test: D.WindowedDataset | None = None
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None


def prepare_data(config: RunConfig) -> PreparedData:
    dc = config.data
    seed = config.data_seed
    if dc.source == "two_moons":
        return PreparedData(D.gen_two_moons(dc.n, dc.noise_std, seed))
    if dc.source == "telemetry":
        series = D.gen_telemetry(dc.T, dc.C, dc.anomaly_rate, seed, clean_fraction=dc.train_fraction)
        train_series, test_series = series.split(dc.train_fraction)
    else:
        train_series = D.load_series(dc.train_path)
        test_series = D.load_series(dc.test_path, dc.test_labels) if dc.test_path else None
    wins = [D.window(train_series, dc.window)]
    if test_series is not None:
        wins.append(D.window(test_series, dc.window))
    normed, mean, std = D.normalize(*wins)
    return PreparedData(normed[0].windows, normed[1] if len(normed) > 1 else None, mean, std)


def window_for_scoring(series: D.RawSeries, config: RunConfig, mean, std) -> D.WindowedDataset:
    ds = D.window(series, config.data.window)
    if mean is None:
        return ds
    if ds.windows.shape[1] != mean.shape[0]:
        raise D.DataError(
            f"window width {ds.windows.shape[1]} does not match training width {mean.shape[0]}"
        )
    ds.windows = (ds.windows - mean) / std
    return ds


def run_training(config: RunConfig, prepared: PreparedData | None = None,
                 progress_every: int = 0) -> tuple[TrainState, PreparedData]:
    prepared = prepared if prepared is not None else prepare_data(config)

    def cb(step, loss):
        if progress_every and step % progress_every == 0:
            log.info("step %d loss %.6g", step, loss)

    state = train(config.train_config(), prepared.train, config.seed, callback=cb)
    if config.density.fit_prior and config.objective != "mle":
        fit_prior(state, prepared.train, config.eval_solver.build(), config.density.strategy)
    return state, prepared


def norm_tensors(prepared: PreparedData) -> dict[str, np.ndarray]:
    if prepared.norm_mean is None:
        return {}
    return {"norm.mean": prepared.norm_mean, "norm.std": prepared.norm_std}


def write_run(out_dir, config: RunConfig, state: TrainState, prepared: PreparedData,
              seconds: float) -> dict:
    """Write config copy, checkpoint, loss CSV and summary into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config.dumps())
    save_checkpoint(out / "checkpoint", config, state, norm_tensors(prepared))
    with (out / "loss.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, loss in enumerate(state.losses, 1):
            writer.writerow([i, repr(loss)])
    summary = {
        "objective": config.objective,
        "steps": state.step,
        "initial_loss": state.losses[0] if state.losses else None,
        "final_loss": state.losses[-1] if state.losses else None,
        "train_seconds": round(seconds, 3),
        "prior_mean": state.prior.mean.value.tolist(),
        "prior_std": state.prior.std.tolist(),
        "has_reverse_model": state.lam is not None,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def train_and_save(config: RunConfig, out_dir=None) -> tuple[TrainState, PreparedData, Path]:
    out = Path(out_dir) if out_dir is not None else config.resolved_output_dir()
    start = time.perf_counter()
    state, prepared = run_training(config)
    write_run(out, config, state, prepared, time.perf_counter() - start)
    return state, prepared, out


def score_dataset(state: TrainState, dataset: D.WindowedDataset, solver: SolverConfig,
                  config: RunConfig, strategy: str | None = None,
                  apply_point_adjust: bool = False) -> ScoreReport:
    field = state.density_field(strategy or config.density.strategy)
    res = score_windows(field, state.prior, dataset, solver, config.trace.build(), seed=config.seed)
    labels = dataset.labels
    if labels is not None and labels.min() == labels.max():
        labels = None
    report = build_report(res.scores, labels, apply_point_adjust, solver.tag, res.nfe, res.failures)
    if dataset.labels is not None and labels is None:
        report.notice = "labels contain a single class: metrics omitted"
    return report
