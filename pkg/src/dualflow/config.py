"""Run configuration: nested dataclasses with strict JSON round-tripping."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .divergence import TraceEstimator
from .objectives import DFM_VARIANTS, OBJECTIVES, TrainConfig
from .odeint import SolverConfig

OUTPUT_ROOT_ENV = "DUALFLOW_OUTPUT_ROOT"
DATA_SOURCES = ("two_moons", "telemetry", "files")
STRATEGIES = ("auto", "reverse_model", "forward_model")


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    embed_dim: int = 8
    out_init_scale: float | None = None


@dataclass
class PathSection:
    sigma: float | None = None


@dataclass
class DfmSection:
    variant: str = "cos_pair"


@dataclass
class OptimSection:
    steps: int = 2000
    batch_size: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999


@dataclass
class SolverSection:
    method: str = "euler"
    steps: int = 4
    atol: float = 1e-1
    rtol: float = 1e-2
    max_steps: int = 10_000

    def build(self) -> SolverConfig:
        return SolverConfig(self.method, self.steps, self.atol, self.rtol, self.max_steps)


@dataclass
class TraceSection:
    kind: str = "hutchinson"
    probes: int = 1
    probe_dist: str = "rademacher"
    seed: int = 0

    def build(self) -> TraceEstimator:
        return TraceEstimator(self.kind, self.probes, self.probe_dist, self.seed)


@dataclass
class DensitySection:
    strategy: str = "auto"
    fit_prior: bool = True


@dataclass
class DataSection:
    source: str = "two_moons"
    seed: int | None = None
    n: int = 4000
    noise_std: float = 0.05
    T: int = 20_000
    C: int = 5
    anomaly_rate: float = 0.05
    window: int = 8
    train_fraction: float = 0.6
    train_path: str | None = None
    test_path: str | None = None
    test_labels: str | None = None


@dataclass
class RunConfig:
    objective: str = "dfm"
    seed: int = 0
    output_dir: str = "run"
    model: ModelSection = field(default_factory=ModelSection)
    path: PathSection = field(default_factory=PathSection)
    dfm: DfmSection = field(default_factory=DfmSection)
    optim: OptimSection = field(default_factory=OptimSection)
    train_solver: SolverSection = field(default_factory=SolverSection)
    eval_solver: SolverSection = field(default_factory=SolverSection)
    trace: TraceSection = field(default_factory=TraceSection)
    density: DensitySection = field(default_factory=DensitySection)
    data: DataSection = field(default_factory=DataSection)

    def validate(self) -> "RunConfig":
        try:
            self.train_config()
            self.eval_solver.build()
        except ValueError as err:
            raise ConfigError(str(err)) from None
        if self.data.source not in DATA_SOURCES:
            raise ConfigError(f"data.source must be one of {DATA_SOURCES}, got {self.data.source!r}")
        if self.density.strategy not in STRATEGIES:
            raise ConfigError(f"density.strategy must be one of {STRATEGIES}")
        if self.density.strategy == "reverse_model" and self.objective != "dfm":
            raise ConfigError("reverse_model density strategy requires objective=dfm")
        if self.data.source == "files" and not self.data.train_path:
            raise ConfigError("data.source=files requires data.train_path")
        if self.data.window < 1 or not 0 < self.data.train_fraction < 1:
            raise ConfigError("data.window must be >= 1 and 0 < data.train_fraction < 1")
        return self

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            objective=self.objective,
            steps=self.optim.steps,
            batch_size=self.optim.batch_size,
            lr=self.optim.lr,
            beta1=self.optim.beta1,
            beta2=self.optim.beta2,
            sigma=self.path.sigma,
            dfm_variant=self.dfm.variant,
            hidden=tuple(self.model.hidden),
            embed_dim=self.model.embed_dim,
            out_init_scale=self.model.out_init_scale,
            solver=self.train_solver.build(),
            trace=self.trace.build(),
        )

    @property
    def data_seed(self) -> int:
        return self.seed if self.data.seed is None else self.data.seed

    def resolved_output_dir(self) -> Path:
        out = Path(self.output_dir)
        if out.is_absolute():
            return out
        return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / out

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        return _build(cls, raw, "config").validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as err:
            raise ConfigError(f"config {path} is not valid JSON: {err}") from None
        return cls.from_dict(raw)


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in raw.items():
        default = fields[name].default_factory if fields[name].default_factory is not dataclasses.MISSING else None
        sub = default() if default is not None else None
        if dataclasses.is_dataclass(sub):
            kwargs[name] = _build(type(sub), value, f"{where}.{name}")
            continue
        expected = type(sub) if sub is not None else type(fields[name].default)
        if value is not None and expected is not type(None) and not _type_ok(value, expected):
            raise ConfigError(f"{where}.{name}: expected {expected.__name__}, got {value!r}")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as err:
        raise ConfigError(f"{where}: {err}") from None


def _type_ok(value, expected) -> bool:
    if expected is bool:
        return isinstance(value, bool)
    if expected is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if expected is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, expected)


def apply_override(raw: dict, assignment: str) -> None:
    """Apply ``dotted.key=value`` (value parsed as JSON, else kept as a string)."""
    if "=" not in assignment:
        raise ConfigError(f"override must look like key=value, got {assignment!r}")
    key, text = assignment.split("=", 1)
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    node = raw
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {key}: {part} is not a section")
    node[parts[-1]] = value


__all__ = ["RunConfig", "ConfigError", "apply_override", "OBJECTIVES", "DFM_VARIANTS", "OUTPUT_ROOT_ENV"]
