"""Synthetic generators, sliding windows with replication padding, and series I/O.

Series files: a JSON header ``{"T", "C", "dtype": "f64", "layout": "row-major"}``
next to a binary file of ``T*C`` little-endian float64 values (``<stem>.bin``
unless the header names one under ``"binary"``).  Labels are plain text, one
``0``/``1`` per line.  CSV with a header row of channel names is also read.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np


class DataError(ValueError):
    pass


@dataclass
class RawSeries:
    values: np.ndarray
    labels: np.ndarray | None = None
    entity: str = "synthetic"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.values.ndim != 2:
            raise DataError(f"series values must be T x C, got shape {self.values.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels).astype(np.int64).ravel()
            if len(self.labels) != self.length:
                raise DataError(
                    f"labels length {len(self.labels)} does not match series length T={self.length}"
                )

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def split(self, fraction: float) -> tuple["RawSeries", "RawSeries"]:
        cut = int(round(self.length * fraction))
        lab = self.labels
        return (
            RawSeries(self.values[:cut], None if lab is None else lab[:cut], self.entity),
            RawSeries(self.values[cut:], None if lab is None else lab[cut:], self.entity),
        )


@dataclass
class WindowedDataset:
    windows: np.ndarray
    labels: np.ndarray | None
    w: int
    channels: int

    def __len__(self) -> int:
        return self.windows.shape[0]


def window(series: RawSeries, w: int) -> WindowedDataset:
    """One window per timestep; row i flattens timesteps i-w+1..i (front replication padded)."""
    if w < 1:
        raise DataError("window size must be >= 1")
    if series.length == 0:
        raise DataError("cannot window an empty series")
    idx = np.arange(series.length)[:, None] + np.arange(1 - w, 1)[None, :]
    np.maximum(idx, 0, out=idx)
    wins = series.values[idx].reshape(series.length, w * series.channels)
    labels = None if series.labels is None else series.labels.copy()
    return WindowedDataset(wins, labels, w, series.channels)


def normalize(train: WindowedDataset, *others: WindowedDataset, std_floor: float = 1e-8):
    """Z-score every dataset with the training columns' mean and std.

    Returns ``([train, *others] normalized, mean, std)``.
    """
    if len(train) == 0:
        raise DataError("training set is empty")
    mean = train.windows.mean(axis=0)
    std = np.maximum(train.windows.std(axis=0), std_floor)
    out = [replace(ds, windows=(ds.windows - mean) / std) for ds in (train, *others)]
    return out, mean, std


def gen_two_moons(n: int, noise_std: float = 0.05, seed: int = 0, return_labels: bool = False):
    """Two interleaved unit half-circles; each point picks a moon with a fair coin."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    angle = rng.uniform(0.0, np.pi, n)
    x = np.where(labels == 0, np.cos(angle), 1.0 - np.cos(angle))
    y = np.where(labels == 0, np.sin(angle), 0.5 - np.sin(angle))
    pts = np.stack([x, y], axis=1) + noise_std * rng.standard_normal((n, 2))
    return (pts, labels) if return_labels else pts


# Telemetry construction constants.
_AR_COEF = 0.8
_NOISE_STD = 0.5
_SHIFT_SIGMAS = 4.0
_BURST_FACTOR = 5.0
_SEGMENT_LEN = (40, 120)
_SEGMENT_GAP = 16


def gen_telemetry(T: int, C: int, anomaly_rate: float = 0.05, seed: int = 0,
                  clean_fraction: float = 0.0) -> RawSeries:
    """Sum-of-sinusoids plus AR(1) noise per channel with injected anomaly segments.

    Anomalies are contiguous segments of either a level shift (+4 channel
    std) or a variance burst (noise x5) across all channels.  Points before
    ``clean_fraction * T`` are never anomalous.  The clean signal depends only
    on ``seed``, so the same seed with ``anomaly_rate=0`` gives the baseline.
    """
    if T < 16:
        raise ValueError("T must be >= 16")
    if not 0.0 <= anomaly_rate <= 0.2:
        raise ValueError("anomaly_rate must lie in [0, 0.2]")
    base_rng, anom_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    steps = np.arange(T)[:, None]
    signal = np.zeros((T, C))
    for _ in range(3):
        period = base_rng.uniform(20.0, 200.0, C)
        amp = base_rng.uniform(0.5, 1.0, C)
        phase = base_rng.uniform(0.0, 2 * np.pi, C)
        signal += amp * np.sin(2 * np.pi * steps / period + phase)
    innov = base_rng.standard_normal((T, C)) * _NOISE_STD * np.sqrt(1 - _AR_COEF**2)
    noise = np.empty((T, C))
    noise[0] = base_rng.standard_normal(C) * _NOISE_STD
    for i in range(1, T):
        noise[i] = _AR_COEF * noise[i - 1] + innov[i]
    chan_std = (signal + noise).std(axis=0)

    labels = np.zeros(T, dtype=np.int64)
    start = int(np.ceil(clean_fraction * T))
    budget = int(round(anomaly_rate * (T - start)))
    values = signal + noise
    placed = 0
    tries = 0
    while placed < budget and tries < 10_000:
        tries += 1
        remaining = budget - placed
        if remaining < _SEGMENT_LEN[0] // 2:
            break
        length = min(int(anom_rng.integers(_SEGMENT_LEN[0], _SEGMENT_LEN[1] + 1)), remaining)
        if start + length >= T:
            break
        a = int(anom_rng.integers(start, T - length))
        b = a + length
        lo, hi = max(start, a - _SEGMENT_GAP), min(T, b + _SEGMENT_GAP)
        if labels[lo:hi].any():
            continue
        if anom_rng.random() < 0.5:
            values[a:b] += _SHIFT_SIGMAS * chan_std
        else:
            values[a:b] = signal[a:b] + _BURST_FACTOR * noise[a:b]
        labels[a:b] = 1
        placed += length
    return RawSeries(values, labels, entity=f"telemetry-{seed}")


# -- I/O ----------------------------------------------------------------------


def save_series(series: RawSeries, header_path, labels_path=None) -> None:
    header_path = Path(header_path)
    bin_path = header_path.with_suffix(".bin")
    header = {
        "T": series.length,
        "C": series.channels,
        "dtype": "f64",
        "layout": "row-major",
        "binary": bin_path.name,
        "entity": series.entity,
    }
    header_path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    bin_path.write_bytes(np.ascontiguousarray(series.values, dtype="<f8").tobytes())
    if labels_path is not None:
        if series.labels is None:
            raise DataError("series has no labels to write")
        Path(labels_path).write_text("".join(f"{int(v)}\n" for v in series.labels))


def _load_header(path: Path) -> tuple[np.ndarray, str]:
    try:
        header = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise DataError(f"malformed header {path}: {err}") from None
    missing = {"T", "C", "dtype", "layout"} - set(header)
    if missing:
        raise DataError(f"malformed header {path}: missing keys {sorted(missing)}")
    if header["dtype"] != "f64" or header["layout"] != "row-major":
        raise DataError(f"malformed header {path}: unsupported dtype/layout")
    T, C = int(header["T"]), int(header["C"])
    bin_path = path.parent / header.get("binary", path.with_suffix(".bin").name)
    raw = bin_path.read_bytes()
    if len(raw) != 8 * T * C:
        raise DataError(f"{bin_path}: expected {T * C} float64 values, found {len(raw) / 8:g}")
    return np.frombuffer(raw, dtype="<f8").reshape(T, C).copy(), header.get("entity", path.stem)


def load_csv(path: Path) -> np.ndarray:
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty CSV")
    try:
        body = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=np.float64)
    except ValueError as err:
        raise DataError(f"{path}: non-numeric CSV value ({err})") from None
    if body.ndim != 2 or body.shape[1] != len(rows[0]):
        raise DataError(f"{path}: rows do not match header of {len(rows[0])} channels")
    return body


def load_labels(path) -> np.ndarray:
    text = Path(path).read_text().split()
    try:
        labels = np.array([int(v) for v in text], dtype=np.int64)
    except ValueError as err:
        raise DataError(f"{path}: labels must be 0/1 integers ({err})") from None
    if np.any((labels != 0) & (labels != 1)):
        raise DataError(f"{path}: labels must be 0 or 1")
    return labels


def load_series(data_path, labels_path=None) -> RawSeries:
    path = Path(data_path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    if path.suffix.lower() == ".csv":
        values, entity = load_csv(path), path.stem
    else:
        values, entity = _load_header(path)
    labels = None
    if labels_path is not None:
        if not Path(labels_path).exists():
            raise DataError(f"no such file: {labels_path}")
        labels = load_labels(labels_path)
    return RawSeries(values, labels, entity)
