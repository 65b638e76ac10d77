"""Run configuration: a JSON file with sections, plus command-line overrides."""

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .solver import SolverConfig
from .train import TrainConfig


@dataclass(frozen=True)
class ModelSection:
    input_shape: tuple = (1, 8, 8)
    pairs_per_stage: int = 3
    squeezes: int = 1
    k_groups: int = 3
    filters: int = 8
    kernel: int = 3
    activation: str = "elu"
    init: str = "identity"
    init_scale: float | None = None
    lam: float = 0.05

    def __post_init__(self):
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"model.input_shape must be (C, H, W), got {self.input_shape}")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ConfigError(f"model.kernel must be odd, got {self.kernel}")
        if self.pairs_per_stage < 1 or self.k_groups < 1 or self.filters < 1 or self.squeezes < 0:
            raise ConfigError("model counts must be positive")
        if self.init not in ("identity", "random"):
            raise ConfigError(f"model.init must be 'identity' or 'random', got {self.init!r}")
        _, h, w = self.input_shape
        if h % (2 ** self.squeezes) or w % (2 ** self.squeezes):
            raise ConfigError(f"{h}x{w} input cannot be squeezed {self.squeezes} times")


@dataclass(frozen=True)
class DataSection:
    source: str = "bars"  # bars | noise | idx
    path: str | None = None
    labels_path: str | None = None
    test_path: str | None = None
    downsample: int = 1
    n_train: int = 2000
    n_test: int = 500
    size: int = 8
    seed: int = 1

    def __post_init__(self):
        if self.source not in ("bars", "noise", "idx"):
            raise ConfigError(f"data.source must be bars, noise or idx, got {self.source!r}")
        if self.source == "idx" and not self.path:
            raise ConfigError("data.path is required when data.source is 'idx'")
        if self.downsample < 1 or self.n_train < 1 or self.n_test < 1:
            raise ConfigError("data counts must be positive")


@dataclass(frozen=True)
class SolverSection:
    alpha: float = 1.0
    max_iters: int = 120
    tol: float = 1e-12
    alphas: tuple = (0.5, 1.0, 1.5)

    def to_config(self, record_trace=False):
        return SolverConfig(self.alpha, self.max_iters, self.tol, record_trace)


@dataclass(frozen=True)
class OutputSection:
    dir: str = "runs/default"


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    solver: SolverSection = field(default_factory=SolverSection)
    output: OutputSection = field(default_factory=OutputSection)
    seed: int = 0

    def to_dict(self):
        return asdict(self)


_SECTIONS = {"model": ModelSection, "data": DataSection, "train": TrainConfig,
             "solver": SolverSection, "output": OutputSection}
_TUPLE_FIELDS = {"input_shape", "alphas"}


def _build(cls, name, values):
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in section {name!r}: {', '.join(unknown)}")
    values = {k: tuple(v) if k in _TUPLE_FIELDS else v for k, v in values.items()}
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section {name!r}: {exc}") from exc


def from_dict(raw):
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - set(_SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    parts = {name: _build(cls, name, raw.get(name, {})) for name, cls in _SECTIONS.items()}
    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    return RunConfig(seed=seed, **parts)


def load(path=None):
    """Parse a JSON config file; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(raw)


def override(cfg, seed=None, out=None, alpha=None, iters=None):
    """Apply command-line flags; flags win over the file."""
    if seed is not None:
        cfg = replace(cfg, seed=seed, train=replace(cfg.train, seed=seed))
    if out is not None:
        cfg = replace(cfg, output=replace(cfg.output, dir=str(out)))
    solver = cfg.solver
    try:
        if alpha is not None:
            solver = replace(solver, alpha=alpha)
        if iters is not None:
            solver = replace(solver, max_iters=iters)
        solver.to_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return replace(cfg, solver=solver)
