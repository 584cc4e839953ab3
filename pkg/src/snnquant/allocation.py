"""Per-layer bit allocation from Hessian traces, with exact weight-size accounting."""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import InfeasibleBudgetError, InputError
from .network import LayerSpec

__all__ = [
    "BitConfig",
    "SizeReport",
    "Candidate",
    "reference_specs",
    "param_counts",
    "model_size",
    "rank_by_trace",
    "enumerate_configs",
    "sensitivity",
    "recommend",
    "configs_csv",
    "MAX_CONFIGS",
]

MAX_CONFIGS = 100_000
MIN_BITS, MAX_BITS = 2, 32


def _check_bits(bits, what):
    for b in bits:
        if isinstance(b, bool) or int(b) != b or not MIN_BITS <= b <= MAX_BITS:
            raise InputError(f"{what} entries must be integers in [{MIN_BITS}, {MAX_BITS}], got {b!r}")


@dataclass(frozen=True)
class BitConfig:
    """Word bits per layer for weights, plus optional state word bits."""

    bits: tuple
    state_bits: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(int(b) for b in self.bits))
        _check_bits(self.bits, "weight bits")
        if self.state_bits is not None:
            object.__setattr__(self, "state_bits", tuple(int(b) for b in self.state_bits))
            _check_bits(self.state_bits, "state bits")
            if len(self.state_bits) != len(self.bits):
                raise InputError("state_bits and bits differ in length")

    def __len__(self):
        return len(self.bits)

    def layer_bits(self):
        """Per-layer :class:`~snnquant.quant.LayerBits`; states default to the weight width."""
        from .quant import LayerBits

        states = self.state_bits or self.bits
        return [LayerBits(w, s) for w, s in zip(self.bits, states)]


@dataclass(frozen=True)
class SizeReport:
    counts: tuple
    layer_bytes: tuple
    total_bytes: int

    @property
    def megabytes(self) -> float:
        return self.total_bytes / 1e6

    @property
    def display_mb(self) -> float:
        return round(self.megabytes, 2)


@dataclass(frozen=True)
class Candidate:
    config: BitConfig
    size: SizeReport
    score: float = math.nan


def reference_specs(input_hw=(32, 32)) -> list[LayerSpec]:
    """Three 7x7 conv layers with 64, 128, 128 channels over 2 polarity channels."""
    h, w = input_hw
    specs = []
    shape = (2, h, w)
    for ch, pool in ((64, 2), (128, 1), (128, 2)):
        spec = LayerSpec("conv", shape, ch, kernel=7, pool=pool)
        specs.append(spec)
        shape = spec.emit_shape
    return specs


def param_counts(specs: Sequence) -> list[int]:
    """Weights per layer; biases and readouts are not counted."""
    out = []
    for s in specs:
        if isinstance(s, dict):
            s = LayerSpec.from_dict(s)
        out.append(int(s.n_weights))
    return out


def model_size(counts: Sequence[int], cfg) -> SizeReport:
    bits = cfg.bits if isinstance(cfg, BitConfig) else tuple(cfg)
    if len(bits) != len(counts):
        raise InputError(f"{len(bits)} bit widths for {len(counts)} layers")
    if any(c < 0 for c in counts):
        raise InputError("parameter counts must be >= 0")
    per = tuple((int(c) * int(b) + 7) // 8 for c, b in zip(counts, bits))
    return SizeReport(tuple(int(c) for c in counts), per, sum(per))


def rank_by_trace(traces: Sequence[float]) -> list[int]:
    """Layer indices ordered from least to most sensitive; ties keep layer order."""
    t = np.asarray(traces, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise InputError(f"traces must be finite, got {list(traces)}")
    return [int(i) for i in np.argsort(t, kind="stable")]


def enumerate_configs(counts: Sequence[int], menu: Sequence[int]) -> list[Candidate]:
    menu = sorted(set(int(b) for b in menu))
    if not menu:
        raise InputError("bit menu is empty")
    _check_bits(menu, "menu")
    n = len(counts)
    if len(menu) ** n > MAX_CONFIGS:
        raise InputError(f"{len(menu)}^{n} configurations exceeds the limit of {MAX_CONFIGS}")
    out = [Candidate(BitConfig(b), model_size(counts, b)) for b in itertools.product(menu, repeat=n)]
    out.sort(key=lambda c: (c.size.total_bytes, c.config.bits))
    return out


def sensitivity(traces: Sequence[float], bits: Sequence[int]) -> float:
    """Trace-weighted quantization noise power, sum of trace * 2^(-2 bits)."""
    if len(traces) != len(bits):
        raise InputError(f"{len(traces)} traces for {len(bits)} layers")
    return float(sum(t * 2.0 ** (-2 * b) for t, b in zip(traces, bits)))


def recommend(traces: Sequence[float], candidates: Sequence[Candidate], max_size_bytes: float = math.inf) -> list[Candidate]:
    """Candidates within the budget, least sensitive first.

    Ties break on smaller size, then on the bit tuple.
    """
    rank_by_trace(traces)  # finiteness check
    if not candidates:
        raise InputError("no candidate configurations")
    fit = [c for c in candidates if c.size.total_bytes <= max_size_bytes]
    if not fit:
        smallest = min(c.size.total_bytes for c in candidates)
        raise InfeasibleBudgetError(f"budget of {max_size_bytes} bytes is below the smallest candidate ({smallest} bytes)")
    scored = [Candidate(c.config, c.size, sensitivity(traces, c.config.bits)) for c in fit]
    scored.sort(key=lambda c: (c.score, c.size.total_bytes, c.config.bits))
    return scored


def configs_csv(candidates: Sequence[Candidate], accuracy: Optional[Sequence[float]] = None) -> str:
    """Rows of ``l1_bits,...,size_mb[,accuracy]`` with sizes in decimal MB to 2 places."""
    if not candidates:
        return ""
    n = len(candidates[0].config)
    header = [f"l{i + 1}_bits" for i in range(n)] + ["size_mb"]
    if accuracy is not None:
        if len(accuracy) != len(candidates):
            raise InputError("one accuracy value per candidate is required")
        header.append("accuracy")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for i, c in enumerate(candidates):
        row = list(c.config.bits) + [f"{c.size.display_mb:.2f}"]
        if accuracy is not None:
            row.append(f"{accuracy[i]:.4f}")
        w.writerow(row)
    return buf.getvalue()
