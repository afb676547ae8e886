"""Checkpoints: a JSON manifest plus one little-endian float64 blob per tensor.

Layout of a checkpoint directory::

    manifest.json            format_version, config, step, rng_state, tensor index
    <tensor-name>.bin        raw <f8 data, shape recorded in the manifest
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .config import RunConfig
from .objectives import TrainState, init_state

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _tensors(state: TrainState, extra: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {f"theta.{k}": v.value for k, v in state.theta.named_parameters().items()}
    if state.lam is not None:
        out.update({f"lambda.{k}": v.value for k, v in state.lam.named_parameters().items()})
    out.update({f"prior.{k}": v.value for k, v in state.prior.named_parameters().items()})
    out.update(extra)
    return out


def save_checkpoint(directory, config: RunConfig, state: TrainState,
                    extra: dict[str, np.ndarray] | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    for name, arr in sorted(_tensors(state, extra or {}).items()):
        arr = np.ascontiguousarray(arr, dtype="<f8")
        fname = f"{name}.bin"
        (directory / fname).write_bytes(arr.tobytes())
        index.append({"name": name, "shape": list(arr.shape), "file": fname})
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "step": state.step,
        "rng_state": state.rng.bit_generator.state if state.rng is not None else None,
        "tensors": index,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _read_tensor(directory: Path, entry: dict) -> np.ndarray:
    raw = (directory / entry["file"]).read_bytes()
    shape = tuple(entry["shape"])
    if len(raw) != 8 * int(np.prod(shape)):
        raise CheckpointError(f"{entry['file']}: size does not match shape {shape}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()


def load_checkpoint(directory) -> tuple[RunConfig, TrainState, dict[str, np.ndarray]]:
    """Rebuild the run config and trained state; returns ``(config, state, extra_tensors)``."""
    directory = Path(directory)
    if directory.is_file():
        directory = directory.parent
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
    config = RunConfig.from_dict(manifest["config"])
    tensors = {e["name"]: _read_tensor(directory, e) for e in manifest["tensors"]}
    dim = tensors["prior.mean"].shape[0]
    state = init_state(config.train_config(), dim, config.seed)
    targets = {f"theta.{k}": v for k, v in state.theta.named_parameters().items()}
    if state.lam is not None:
        targets.update({f"lambda.{k}": v for k, v in state.lam.named_parameters().items()})
    targets.update({f"prior.{k}": v for k, v in state.prior.named_parameters().items()})
    for name, var in targets.items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {name}")
        if tensors[name].shape != var.shape:
            raise CheckpointError(
                f"tensor {name}: checkpoint shape {tensors[name].shape} does not match model shape {var.shape}"
            )
        var.value = tensors.pop(name)
    state.step = int(manifest["step"])
    if manifest.get("rng_state") is not None:
        state.rng.bit_generator.state = manifest["rng_state"]
    return config, state, tensors
