"""Run configuration: TOML or JSON, validated with dotted field paths in errors."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import tomli

from .errors import ConfigurationError
from .estimator import DESK_LAYERS
from .hessian import HutchinsonConfig
from .quant import DEFAULT_GRAD_SCALE

__all__ = [
    "DataConfig",
    "LifConfig",
    "TrainConfig",
    "QuantConfig",
    "AllocateConfig",
    "RunConfig",
    "load_config",
    "parse_config",
]


@dataclass(frozen=True)
class DataConfig:
    source: str = "synth"  # "synth" or "sevt"
    n_classes: int = 10
    train_per_class: int = 20
    test_per_class: int = 5
    dims: tuple = (16, 16)
    steps: int = 50
    rate_hi: float = 0.2
    rate_lo: float = 0.05
    manifest: Optional[str] = None  # SEVT manifest JSON, relative to the config file
    dt_us: int = 1000


@dataclass(frozen=True)
class LifConfig:
    alpha: float = 0.9
    u_thres: float = 1.0
    surrogate_beta: float = 1.0


@dataclass(frozen=True)
class TrainConfig:
    lr: tuple = (0.01, 0.3)
    epochs: int = 10
    batch_size: int = 8
    weight_scale: float = 10.0


@dataclass(frozen=True)
class QuantConfig:
    bits: tuple = (8, 8)
    state_bits: Optional[tuple] = None  # defaults to ``bits``
    grad_scale: float = DEFAULT_GRAD_SCALE
    epochs: int = 2
    lr_factor: float = 0.1  # fine-tune step relative to the training step
    calib_size: int = 64


@dataclass(frozen=True)
class AllocateConfig:
    menu: tuple = (4, 8, 16)
    budget_mb: float = float("inf")


_SECTIONS = {
    "data": DataConfig,
    "lif": LifConfig,
    "train": TrainConfig,
    "quant": QuantConfig,
    "hessian": HutchinsonConfig,
    "allocate": AllocateConfig,
}


@dataclass(frozen=True)
class RunConfig:
    seed: int
    out_dir: str = "run"
    threads: int = 1
    layers: tuple = DESK_LAYERS
    data: DataConfig = field(default_factory=DataConfig)
    lif: LifConfig = field(default_factory=LifConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    quant: QuantConfig = field(default_factory=QuantConfig)
    hessian: HutchinsonConfig = field(default_factory=HutchinsonConfig)
    allocate: AllocateConfig = field(default_factory=AllocateConfig)
    base_dir: str = "."  # where relative paths resolve; not part of the snapshot

    def to_dict(self) -> dict:
        d = {"seed": self.seed, "out_dir": self.out_dir, "threads": self.threads}
        d["layers"] = [dict(x) for x in self.layers]
        for name in _SECTIONS:
            d[name] = _plain(dataclasses.asdict(getattr(self, name)))
        return d

    def snapshot(self) -> dict:
        """Everything that influences results (output location and threads excluded)."""
        d = self.to_dict()
        del d["out_dir"], d["threads"]
        return d

    def digest(self) -> str:
        blob = json.dumps(self.snapshot(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def architecture(self) -> list:
        return [dict(x) for x in self.layers]

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def manifest_path(self) -> Optional[Path]:
        if self.data.manifest is None:
            return None
        return Path(self.base_dir) / self.data.manifest


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, float) and x == float("inf"):
        return "inf"
    return x


def _coerce(value, default, path):
    """Convert ``value`` to the type of ``default``; lists become tuples."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if value == "inf":
            return float("inf")
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigurationError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return value  # scalar shorthand, e.g. one lr for all layers
        if not isinstance(value, list):
            raise ConfigurationError(f"{path}: expected a list, got {value!r}")
        return tuple(value)
    return value  # Optional fields without a typed default


def _section(cls, raw, path):
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: expected a table")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(names))
    if unknown:
        raise ConfigurationError(f"{path}.{unknown[0]}: unknown field")
    kw = {}
    for k, v in raw.items():
        f = names[k]
        default = f.default if f.default is not dataclasses.MISSING else None
        if default is None:
            kw[k] = tuple(v) if isinstance(v, list) else v
        else:
            kw[k] = _coerce(v, default, f"{path}.{k}")
    try:
        return cls(**kw)
    except (ValueError, TypeError) as exc:
        raise ConfigurationError(f"{path}: {exc}") from None


def parse_config(raw: dict, base_dir=".") -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError("config root must be a table")
    allowed = {"seed", "out_dir", "threads", "layers"} | set(_SECTIONS)
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigurationError(f"{unknown[0]}: unknown field")
    if "seed" not in raw:
        raise ConfigurationError("seed: required (runs are never seeded from the clock)")
    kw = {
        "seed": _coerce(raw["seed"], 0, "seed"),
        "out_dir": _coerce(raw.get("out_dir", "run"), "", "out_dir"),
        "threads": _coerce(raw.get("threads", 1), 0, "threads"),
        "base_dir": str(base_dir),
    }
    if kw["threads"] < 1:
        raise ConfigurationError("threads: must be >= 1")
    if "layers" in raw:
        layers = raw["layers"]
        if not isinstance(layers, list) or not layers:
            raise ConfigurationError("layers: expected a nonempty list of tables")
        for i, d in enumerate(layers):
            if not isinstance(d, dict):
                raise ConfigurationError(f"layers[{i}]: expected a table")
            unknown = sorted(set(d) - {"kind", "channels", "kernel", "pool", "lif"})
            if unknown:
                raise ConfigurationError(f"layers[{i}].{unknown[0]}: unknown field")
        kw["layers"] = tuple(dict(d) for d in layers)
    for name, cls in _SECTIONS.items():
        if name in raw:
            kw[name] = _section(cls, raw[name], name)
    cfg = RunConfig(**kw)
    _check(cfg)
    return cfg


def _check(cfg: RunConfig):
    d, t, q = cfg.data, cfg.train, cfg.quant
    if d.source not in ("synth", "sevt"):
        raise ConfigurationError(f"data.source: expected 'synth' or 'sevt', got {d.source!r}")
    if d.source == "sevt":
        path = cfg.manifest_path()
        if path is None:
            raise ConfigurationError("data.manifest: required when data.source = 'sevt'")
        if not path.is_file():
            raise ConfigurationError(f"data.manifest: file not found: {path}")
    for name in ("n_classes", "train_per_class", "test_per_class", "steps", "dt_us"):
        if getattr(d, name) < 1:
            raise ConfigurationError(f"data.{name}: must be >= 1")
    if len(d.dims) != 2:
        raise ConfigurationError("data.dims: expected [height, width]")
    if t.epochs < 0 or t.batch_size < 1:
        raise ConfigurationError("train: epochs must be >= 0 and batch_size >= 1")
    n = len(cfg.layers)
    lr = t.lr if isinstance(t.lr, tuple) else (t.lr,)
    if len(lr) not in (1, n):
        raise ConfigurationError(f"train.lr: {len(lr)} values for {n} layers")
    if len(q.bits) != n:
        raise ConfigurationError(f"quant.bits: {len(q.bits)} values for {n} layers")
    if q.state_bits is not None and len(q.state_bits) != n:
        raise ConfigurationError(f"quant.state_bits: {len(q.state_bits)} values for {n} layers")
    if not q.grad_scale > 0:
        raise ConfigurationError("quant.grad_scale: must be > 0")
    if q.epochs < 0 or q.calib_size < 1:
        raise ConfigurationError("quant: epochs must be >= 0 and calib_size >= 1")


def load_config(path) -> RunConfig:
    """Read a ``.toml`` or ``.json`` config file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = json.loads(text) if path.suffix == ".json" else tomli.loads(text)
    except (json.JSONDecodeError, tomli.TOMLDecodeError) as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    return parse_config(raw, base_dir=path.parent)
