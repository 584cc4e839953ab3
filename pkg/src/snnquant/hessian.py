"""Layer-wise Hessian trace of the local loss, by Hutchinson probing.

The local loss of layer ``l`` is the summed cross-entropy of its readout over
a span of (batch, time step) records from a full-precision run.  To make the
loss differentiable, each recorded spike ``S`` is replaced by the
straight-through relaxation

    S~(W) = S + phi(u(W)) - phi(U),     u(W) = W p - r,

where ``phi`` is the antiderivative of the surrogate derivative and ``p``,
``r``, ``S``, ``U`` come from the base run (reset trace frozen).  At the
trained weights ``S~ = S`` and the gradient of this loss is exactly the local
weight gradient used for training; its Jacobian is the Hessian used here.
Hessian-vector products are central differences of that closed-form
gradient.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import log_softmax

from .errors import InputError, NumericalError
from .network import Network, _windows, layer_forward_step, _check_targets
from .neuron import surrogate_grad, surrogate_spike
from .quant import rng_stream

__all__ = [
    "HutchinsonConfig",
    "TraceEstimate",
    "LayerRecord",
    "LayerObjective",
    "record_layer",
    "hvp_fd",
    "hutchinson",
    "exact_trace_fd",
    "layer_gradient",
    "hvp",
    "hutchinson_trace",
    "exact_trace",
    "trace_report",
    "trace_csv",
    "EXACT_TRACE_MAX_WEIGHTS",
]

EXACT_TRACE_MAX_WEIGHTS = 200


@dataclass(frozen=True)
class HutchinsonConfig:
    max_iter: int = 200
    max_batch: int = 1
    max_seq: int = 50
    batch_size: int = 16
    seed: int = 0
    fd_step: float = 1e-3
    normalize_probe: bool = False

    def __post_init__(self):
        if self.max_iter < 1 or self.max_batch < 1 or self.max_seq < 1 or self.batch_size < 1:
            raise InputError("max_iter, max_batch, max_seq and batch_size must be >= 1")
        if not self.fd_step > 0:
            raise InputError(f"fd_step must be > 0, got {self.fd_step}")


@dataclass
class TraceEstimate:
    mean: float
    std_err: float
    n_probes: int
    per_probe: list = field(default_factory=list)
    normalized: bool = False
    span: int = 0  # number of (sample, step) records summed into the loss

    @classmethod
    def from_probes(cls, values, normalized=False, span=0) -> "TraceEstimate":
        values = np.asarray(values, dtype=np.float64)
        n = values.size
        se = float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        return cls(float(values.mean()), se, n, values.tolist(), normalized, span)


# ---------------------------------------------------------------- generic estimators


def hvp_fd(grad_fn: Callable, w, v, fd_step: float = 1e-3, *, layer=None) -> np.ndarray:
    """``H v`` by central differences of ``grad_fn`` with step ``h = fd_step / |v|``."""
    w = np.asarray(w, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if not norm > 0:
        raise InputError("probe vector must be nonzero")
    h = fd_step / norm
    out = (np.asarray(grad_fn(w + h * v)) - np.asarray(grad_fn(w - h * v))) / (2.0 * h)
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"non-finite Hessian-vector product (h={h:g}, layer={layer})")
    return out


def _probe(seed, i, shape, normalize):
    v = rng_stream(seed, 20, i).standard_normal(shape)
    if normalize:
        v /= np.linalg.norm(v)
    return v


def hutchinson(grad_fn: Callable, w, cfg: HutchinsonConfig, *, threads: int = 1, layer=None, span=0) -> TraceEstimate:
    """Monte-Carlo ``E[v^T H v]`` over ``cfg.max_iter`` Gaussian probes.

    Probe ``i`` depends only on ``(cfg.seed, i)``, so the result does not
    depend on ``threads``.
    """
    w = np.asarray(w, dtype=np.float64)

    def one(i):
        v = _probe(cfg.seed, i, w.shape, cfg.normalize_probe)
        try:
            z = hvp_fd(grad_fn, w, v, cfg.fd_step, layer=layer)
        except NumericalError as exc:
            raise NumericalError(f"probe {i}: {exc}") from exc
        return float(np.vdot(v, z))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            vals = list(pool.map(one, range(cfg.max_iter)))
    else:
        vals = [one(i) for i in range(cfg.max_iter)]
    return TraceEstimate.from_probes(vals, cfg.normalize_probe, span)


def exact_trace_fd(loss_fn: Callable, w, h: float = 1e-3) -> float:
    """Sum of central second differences of ``loss_fn`` along every coordinate."""
    w = np.asarray(w, dtype=np.float64)
    flat = w.ravel()
    base = float(loss_fn(w))
    total = 0.0
    for k in range(flat.size):
        e = np.zeros_like(flat)
        e[k] = h
        e = e.reshape(w.shape)
        total += (float(loss_fn(w + e)) - 2.0 * base + float(loss_fn(w - e))) / (h * h)
    return total


# ---------------------------------------------------------------- SNN layer objective


@dataclass
class LayerRecord:
    """Base-run quantities of one layer, one row per (sample, step)."""

    p: np.ndarray
    r: np.ndarray
    u: np.ndarray
    s: np.ndarray
    target: np.ndarray

    def __len__(self):
        return self.target.shape[0]

    def select(self, rows) -> "LayerRecord":
        return LayerRecord(self.p[rows], self.r[rows], self.u[rows], self.s[rows], self.target[rows])


def _check_layer(network, index):
    if not (isinstance(index, (int, np.integer)) and 0 <= index < len(network.layers)):
        raise InputError(f"layer index {index} outside [0, {len(network.layers)})")


def record_layer(network: Network, index: int, X, y, max_seq: Optional[int] = None) -> LayerRecord:
    """Run ``X`` in the training form and keep layer ``index``'s state at each step.

    Rows are ordered step-major: row ``n * B + b`` is sample ``b`` at step ``n``.
    """
    _check_layer(network, index)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    batch, steps = X.shape[:2]
    steps = steps if max_seq is None else min(steps, max_seq)
    states = [l.train_state(batch) for l in network.layers[: index + 1]]
    rec = {k: [] for k in "prus"}
    for t in range(steps):
        inp = X[:, t]
        for i in range(index + 1):
            states[i], inp = layer_forward_step(network.layers[i], states[i], inp)
        for k in "prus":
            rec[k].append(getattr(states[index], k))
    return LayerRecord(*(np.concatenate(rec[k]) for k in "prus"), np.tile(y, steps))


class LayerObjective:
    """Relaxed local loss of one layer over a fixed set of records, as a function of ``W``."""

    def __init__(self, layer, record: LayerRecord, scale: float = 1.0):
        self.layer = layer
        self.record = record
        self.scale = scale
        self.target = _check_targets(record.target, layer.n_classes)
        spec = layer.spec
        n = len(record)
        if spec.kind == "dense":
            self.cols = record.p
        else:
            self.cols = _windows(record.p, spec.kernel)
        self._u0 = self._to_cols(record.u)
        self._r = self._to_cols(record.r)
        self._s = self._to_cols(record.s)
        self._phi0 = surrogate_spike(self._u0, layer.lif)
        self._n = n

    def _to_cols(self, a):
        if self.layer.spec.kind == "dense":
            return a
        return a.transpose(0, 2, 3, 1).reshape(-1, a.shape[1])

    def _from_cols(self, a):
        if self.layer.spec.kind == "dense":
            return a
        c, h, w = self.layer.spec.out_shape
        return a.reshape(self._n, h, w, c).transpose(0, 3, 1, 2).reshape(self._n, -1)

    def _forward(self, w):
        wm = np.asarray(w, dtype=np.float64).reshape(self.layer.spec.channels, -1)
        u = self.cols @ wm.T - self._r
        s = self._s + surrogate_spike(u, self.layer.lif) - self._phi0
        logp = log_softmax(self._from_cols(s) @ self.layer.readout.T, axis=1)
        return u, logp

    def loss(self, w) -> float:
        _, logp = self._forward(w)
        return -self.scale * float(logp[np.arange(self._n), self.target].sum())

    def grad(self, w) -> np.ndarray:
        u, logp = self._forward(w)
        err = np.exp(logp)
        err[np.arange(self._n), self.target] -= 1.0
        e = err @ self.layer.readout
        if self.layer.spec.kind != "dense":
            e = self._to_cols(e.reshape((self._n,) + self.layer.spec.out_shape))
        delta = self.scale * e * surrogate_grad(u, self.layer.lif)
        return (delta.T @ self.cols).reshape(self.layer.spec.weight_shape)


def _span(X, y, cfg: HutchinsonConfig):
    n = min(len(X), cfg.max_batch * cfg.batch_size)
    if len(X) < cfg.max_batch * cfg.batch_size:
        raise InputError(
            f"dataset has {len(X)} samples, need {cfg.max_batch} batches of {cfg.batch_size}"
        )
    return np.asarray(X[:n]), np.asarray(y[:n])


def _objective(network, index, X, y, cfg, scale=1.0):
    X, y = _span(X, y, cfg)
    return LayerObjective(network.layers[index], record_layer(network, index, X, y, cfg.max_seq), scale)


def _step_objective(network, index, batch, step):
    Xb, yb = batch
    rec = record_layer(network, index, Xb, yb, step + 1)
    b = len(yb)
    return LayerObjective(network.layers[index], rec.select(slice(step * b, (step + 1) * b)))


def layer_gradient(network: Network, index: int, batch, step: int) -> np.ndarray:
    """Flattened local-loss gradient of layer ``index`` at time ``step`` of ``batch=(X, y)``."""
    _check_layer(network, index)
    obj = _step_objective(network, index, batch, step)
    return obj.grad(network.layers[index].w).ravel()


def hvp(network: Network, index: int, v, batch, step: int, fd_step: float = 1e-3) -> np.ndarray:
    """Flattened ``H v`` of layer ``index``'s local loss at one step; weights are untouched."""
    _check_layer(network, index)
    obj = _step_objective(network, index, batch, step)
    w = network.layers[index].w
    v = np.asarray(v, dtype=np.float64).reshape(w.shape)
    return hvp_fd(obj.grad, w, v, fd_step, layer=index).ravel()


def hutchinson_trace(network: Network, index: int, X, y, cfg: HutchinsonConfig, *, threads: int = 1) -> TraceEstimate:
    """Hessian trace of layer ``index``'s loss summed over ``max_batch x batch_size`` samples
    and the first ``max_seq`` steps."""
    _check_layer(network, index)
    obj = _objective(network, index, X, y, cfg)
    return hutchinson(obj.grad, network.layers[index].w, cfg, threads=threads, layer=index, span=len(obj.record))


def exact_trace(network: Network, index: int, X, y, cfg: HutchinsonConfig, h: float = 1e-3) -> float:
    """Brute-force trace over the same span as :func:`hutchinson_trace` (small layers only)."""
    _check_layer(network, index)
    n_w = network.layers[index].spec.n_weights
    if n_w > EXACT_TRACE_MAX_WEIGHTS:
        raise InputError(f"layer {index} has {n_w} weights; exact trace allows {EXACT_TRACE_MAX_WEIGHTS}")
    obj = _objective(network, index, X, y, cfg)
    return exact_trace_fd(obj.loss, network.layers[index].w, h)


def trace_report(network: Network, X, y, cfg: HutchinsonConfig, *, threads: int = 1) -> list[TraceEstimate]:
    return [hutchinson_trace(network, i, X, y, cfg, threads=threads) for i in range(len(network.layers))]


def trace_csv(estimates: Sequence[TraceEstimate]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["layer", "trace_mean", "trace_stderr", "n_probes", "normalized"])
    for i, est in enumerate(estimates):
        wr.writerow([i + 1, repr(est.mean), repr(est.std_err), est.n_probes, str(est.normalized).lower()])
    return buf.getvalue()


def read_trace_csv(text: str) -> list[TraceEstimate]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows or set(rows[0]) != {"layer", "trace_mean", "trace_stderr", "n_probes", "normalized"}:
        raise InputError("not a trace table (expected layer,trace_mean,trace_stderr,n_probes,normalized)")
    rows.sort(key=lambda r: int(r["layer"]))
    return [
        TraceEstimate(float(r["trace_mean"]), float(r["trace_stderr"]), int(r["n_probes"]), [], r["normalized"] == "true")
        for r in rows
    ]
