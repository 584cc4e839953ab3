"""Simulated signed fixed-point quantization.

Values are kept in float64; every quantized value is an integer multiple of
``eps = 2**-frac_bits`` and therefore exactly representable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError, InputError

__all__ = [
    "FixedPointFormat",
    "QuantResult",
    "LayerBits",
    "LayerQuant",
    "QuantPolicy",
    "rng_stream",
    "quantize_stochastic",
    "quantize_nearest",
    "mask_gradient",
    "calibrate_frac_bits",
    "scaled_update",
    "DEFAULT_GRAD_SCALE",
    "EPS_FLOOR",
]

DEFAULT_GRAD_SCALE = 1e3
EPS_FLOOR = 2.0**-20


@dataclass(frozen=True)
class FixedPointFormat:
    word_bits: int
    frac_bits: int

    def __post_init__(self):
        if not 2 <= int(self.word_bits) <= 32:
            raise InputError(f"word_bits must be in [2, 32], got {self.word_bits}")

    @property
    def eps(self) -> float:
        return math.ldexp(1.0, -self.frac_bits)

    @property
    def kmin(self) -> int:
        return -(2 ** (self.word_bits - 1))

    @property
    def kmax(self) -> int:
        return 2 ** (self.word_bits - 1) - 1

    @property
    def range(self) -> tuple[float, float]:
        return self.kmin * self.eps, self.kmax * self.eps


@dataclass
class QuantResult:
    values: np.ndarray
    clamp_mask: np.ndarray


def rng_stream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based (Philox) generator addressed by ``seed`` and an integer key."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def _clip(x, fmt: FixedPointFormat):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InputError("cannot quantize non-finite values")
    lo, hi = fmt.range
    mask = (x < lo) | (x > hi)
    return np.clip(x, lo, hi), mask


def quantize_stochastic(x, fmt: FixedPointFormat, rng: np.random.Generator) -> QuantResult:
    """Round down or up on the ``eps`` grid with probability set by the remainder.

    ``x`` rounds up with probability ``(x - floor_eps(x)) / eps`` so the
    expectation of the result equals the (clamped) input.
    """
    xc, mask = _clip(x, fmt)
    scaled = xc / fmt.eps
    k = np.floor(scaled)
    frac = scaled - k
    k = k + (rng.random(np.shape(scaled)) < frac)
    return QuantResult(k * fmt.eps, mask)


def quantize_nearest(x, fmt: FixedPointFormat) -> QuantResult:
    """Round to the nearest grid point, ties to the even multiple of ``eps``."""
    xc, mask = _clip(x, fmt)
    return QuantResult(np.rint(xc / fmt.eps) * fmt.eps, mask)


def mask_gradient(grad, clamp_mask) -> np.ndarray:
    """Zero the gradient wherever the forward value was clamped."""
    grad = np.asarray(grad)
    clamp_mask = np.asarray(clamp_mask, dtype=bool)
    if grad.shape != clamp_mask.shape:
        raise ConfigurationError(f"gradient shape {grad.shape} != mask shape {clamp_mask.shape}")
    return np.where(clamp_mask, 0.0, grad)


def calibrate_frac_bits(x, word_bits: int) -> FixedPointFormat:
    """Largest ``frac_bits`` whose range still holds ``max|x|``."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise InputError("cannot calibrate on an empty array")
    if not np.all(np.isfinite(x)):
        raise InputError("cannot calibrate on non-finite values")
    m = max(float(np.max(np.abs(x))), EPS_FLOOR)
    fmt = FixedPointFormat(word_bits, word_bits - 1 - math.ceil(math.log2(m)))
    # m in (kmax*eps, 2**(w-1)*eps] sits above the top grid point; give up one bit
    if m > fmt.range[1]:
        fmt = FixedPointFormat(word_bits, fmt.frac_bits - 1)
    return fmt


@dataclass(frozen=True)
class LayerBits:
    """Word widths requested for one layer; ``frac_bits=None`` means calibrate."""

    weight_bits: int
    state_bits: int
    frac_bits: Optional[int] = None

    def to_dict(self) -> dict:
        d = {"weight_bits": self.weight_bits, "state_bits": self.state_bits}
        if self.frac_bits is not None:
            d["frac_bits"] = self.frac_bits
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerBits":
        unknown = set(d) - {"weight_bits", "state_bits", "frac_bits"}
        if unknown:
            raise ConfigurationError(f"unknown quantization keys {sorted(unknown)}")
        try:
            return cls(int(d["weight_bits"]), int(d["state_bits"]), d.get("frac_bits"))
        except KeyError as exc:
            raise ConfigurationError(f"missing quantization key {exc.args[0]!r}") from None


@dataclass(frozen=True)
class LayerQuant:
    """Resolved formats of one layer: weights plus each state variable."""

    weight: FixedPointFormat
    p: FixedPointFormat
    u: FixedPointFormat
    r: FixedPointFormat


@dataclass
class QuantPolicy:
    layers: list[LayerQuant]
    grad_scale: float = DEFAULT_GRAD_SCALE
    bits: list[LayerBits] = field(default_factory=list)

    def __post_init__(self):
        if not self.grad_scale > 0:
            raise InputError(f"grad_scale must be > 0, got {self.grad_scale}")

    def to_dict(self) -> dict:
        fmt = lambda f: [f.word_bits, f.frac_bits]
        return {
            "grad_scale": self.grad_scale,
            "bits": [b.to_dict() for b in self.bits],
            "layers": [{k: fmt(getattr(lq, k)) for k in ("weight", "p", "u", "r")} for lq in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantPolicy":
        try:
            layers = [LayerQuant(**{k: FixedPointFormat(*v) for k, v in lq.items()}) for lq in d["layers"]]
            bits = [LayerBits.from_dict(b) for b in d.get("bits", [])]
            return cls(layers, float(d["grad_scale"]), bits)
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed quantization policy: {exc}") from None


def scaled_update(w, grad, lr: float, fmt: FixedPointFormat, rng, grad_scale=DEFAULT_GRAD_SCALE) -> QuantResult:
    """SGD step with the gradient magnified by ``grad_scale``, stochastically requantized."""
    w = np.asarray(w, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if w.shape != grad.shape:
        raise ConfigurationError(f"weight shape {w.shape} != gradient shape {grad.shape}")
    return quantize_stochastic(w - lr * grad_scale * grad, fmt, rng)
