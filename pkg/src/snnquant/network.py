"""Dense and convolutional spiking layers with per-layer local classifiers.

Every layer owns a frozen random readout that maps its spikes to class
scores.  Training is local: each layer descends the cross-entropy of its own
readout, using the trace-form weight gradient, and no gradient crosses
layer boundaries or time steps.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import log_softmax

from .errors import ConfigurationError, InputError, NumericalError
from .neuron import (
    BackSignal,
    InferState,
    LifParams,
    TrainState,
    fire,
    step_inference,
    surrogate_grad,
    update_traces,
)
from .quant import (
    LayerBits,
    LayerQuant,
    QuantPolicy,
    DEFAULT_GRAD_SCALE,
    calibrate_frac_bits,
    FixedPointFormat,
    mask_gradient,
    quantize_nearest,
    quantize_stochastic,
    rng_stream,
    scaled_update,
)

logger = logging.getLogger(__name__)

EVAL_CHUNK = 64


@dataclass(frozen=True)
class LayerSpec:
    """Shape description of one layer.

    For ``kind="conv"`` the layer is a stride-1, same-padded cross-correlation
    with a ``kernel x kernel`` filter followed by ``pool x pool`` max
    downsampling of the emitted spikes.  For ``kind="dense"``, ``in_shape`` is
    flattened and ``channels`` is the number of neurons.
    """

    kind: str
    in_shape: tuple
    channels: int
    kernel: int = 1
    pool: int = 1
    lif: LifParams = field(default_factory=LifParams)

    def __post_init__(self):
        object.__setattr__(self, "in_shape", tuple(int(d) for d in self.in_shape))
        if self.kind not in ("dense", "conv"):
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.channels < 1:
            raise ConfigurationError("channels must be >= 1")
        if self.kind == "conv":
            if len(self.in_shape) != 3:
                raise ConfigurationError(f"conv layer needs (C, H, W) input, got {self.in_shape}")
            if self.kernel < 1 or self.kernel % 2 == 0:
                raise ConfigurationError(f"conv kernel must be odd, got {self.kernel}")
            _, h, w = self.in_shape
            if self.pool < 1 or h % self.pool or w % self.pool:
                raise ConfigurationError(f"pool {self.pool} does not divide {h}x{w}")
        elif self.pool != 1:
            raise ConfigurationError("dense layers do not pool")

    @property
    def fan_in(self) -> int:
        if self.kind == "dense":
            return math.prod(self.in_shape)
        return self.in_shape[0] * self.kernel * self.kernel

    @property
    def weight_shape(self) -> tuple:
        if self.kind == "dense":
            return (self.channels, math.prod(self.in_shape))
        return (self.channels, self.in_shape[0], self.kernel, self.kernel)

    @property
    def out_shape(self) -> tuple:
        if self.kind == "dense":
            return (self.channels,)
        return (self.channels,) + self.in_shape[1:]

    @property
    def emit_shape(self) -> tuple:
        if self.kind == "dense":
            return self.out_shape
        _, h, w = self.in_shape
        return (self.channels, h // self.pool, w // self.pool)

    @property
    def trace_shape(self) -> tuple:
        return (math.prod(self.in_shape),) if self.kind == "dense" else self.in_shape

    @property
    def n_weights(self) -> int:
        return math.prod(self.weight_shape)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "in_shape": list(self.in_shape),
            "channels": self.channels,
            "kernel": self.kernel,
            "pool": self.pool,
            "lif": {
                "alpha": self.lif.alpha,
                "u_thres": self.lif.u_thres,
                "surrogate_beta": self.lif.surrogate_beta,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        d["lif"] = LifParams(**d.get("lif", {}))
        return cls(**d)


def _windows(p, k):
    pad = k // 2
    pp = np.pad(p, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(pp, (k, k), axis=(2, 3))  # B, C, H, W, k, k
    b, c, h, w = p.shape
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * k * k)


class SpikingLayer:
    """Weights, frozen readout and the weight-application rule of one layer."""

    def __init__(self, spec: LayerSpec, w: np.ndarray, readout: np.ndarray):
        w = np.asarray(w, dtype=np.float64)
        readout = np.asarray(readout, dtype=np.float64)
        if w.shape != spec.weight_shape:
            raise ConfigurationError(f"weights {w.shape} do not match spec {spec.weight_shape}")
        if readout.ndim != 2 or readout.shape[1] != math.prod(spec.out_shape):
            raise ConfigurationError(f"readout {readout.shape} does not match {spec.out_shape}")
        self.spec = spec
        self.w = w
        self.readout = readout
        self._cols = None

    @property
    def lif(self) -> LifParams:
        return self.spec.lif

    @property
    def n_classes(self) -> int:
        return self.readout.shape[0]

    def prepare_input(self, spikes):
        """Reshape incoming spikes ``(B, ...)`` to this layer's trace shape."""
        spikes = np.asarray(spikes, dtype=np.float64)
        shape = (spikes.shape[0],) + self.spec.trace_shape
        if math.prod(spikes.shape[1:]) != math.prod(self.spec.trace_shape):
            raise ConfigurationError(
                f"input of shape {spikes.shape[1:]} does not fit layer input {self.spec.in_shape}"
            )
        return spikes.reshape(shape)

    def _columns(self, x):
        # forward and gradient of one step share the same trace array
        cached = self._cols
        if cached is not None and cached[0] is x:
            return cached[1]
        cols = _windows(x, self.spec.kernel)
        self._cols = (x, cols)
        return cols

    def apply_weights(self, x, w=None):
        """Synaptic current ``W x`` for a batch of traces or spikes."""
        w = self.w if w is None else w
        if self.spec.kind == "dense":
            return x @ w.T
        b = x.shape[0]
        _, h, wd = self.spec.in_shape
        out = self._columns(x) @ w.reshape(w.shape[0], -1).T
        return out.reshape(b, h, wd, -1).transpose(0, 3, 1, 2)

    def weight_grad(self, delta, p):
        """Sum over the batch of ``delta_i * p_j`` lifted to the weight layout."""
        if self.spec.kind == "dense":
            return delta.T @ p
        o = self.spec.channels
        d2 = delta.transpose(0, 2, 3, 1).reshape(-1, o)
        return (d2.T @ self._columns(p)).reshape(self.spec.weight_shape)

    def emit(self, s):
        k = self.spec.pool
        if k == 1:
            return s
        b, c, h, w = s.shape
        return s.reshape(b, c, h // k, k, w // k, k).max(axis=(3, 5))

    def train_state(self, batch: int) -> TrainState:
        return TrainState.zeros((batch,) + self.spec.trace_shape, (batch,) + self.spec.out_shape)

    def infer_state(self, batch: int) -> InferState:
        return InferState.zeros((batch,) + self.spec.out_shape)


class Network:
    def __init__(self, layers: Sequence[SpikingLayer], n_classes: int):
        layers = list(layers)
        if not layers:
            raise ConfigurationError("a network needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if math.prod(a.spec.emit_shape) != math.prod(b.spec.trace_shape):
                raise ConfigurationError(
                    f"layer emitting {a.spec.emit_shape} cannot feed input {b.spec.in_shape}"
                )
        for layer in layers:
            if layer.n_classes != n_classes:
                raise ConfigurationError("readout class count differs from network n_classes")
        self.layers = layers
        self.n_classes = int(n_classes)

    @classmethod
    def build(cls, specs: Sequence[LayerSpec], n_classes: int, seed: int, weight_scale: float = 1.0):
        """Random init: weights ``U(-a, a)`` with ``a = weight_scale * sqrt(3 / fan_in)``
        scaled by ``1 - alpha`` to offset trace gain; readouts ``N(0, 1/fan_in)``."""
        layers = []
        for i, spec in enumerate(specs):
            rng = rng_stream(seed, 0, i)
            a = weight_scale * math.sqrt(3.0 / spec.fan_in) * (1.0 - spec.lif.alpha)
            w = rng.uniform(-a, a, size=spec.weight_shape)
            n_out = math.prod(spec.out_shape)
            readout = rng.normal(0.0, 1.0 / math.sqrt(n_out), size=(n_classes, n_out))
            layers.append(SpikingLayer(spec, w, readout))
        return cls(layers, n_classes)

    @property
    def specs(self) -> list[LayerSpec]:
        return [layer.spec for layer in self.layers]

    @property
    def input_shape(self) -> tuple:
        return self.layers[0].spec.in_shape

    def get_weights(self) -> list[np.ndarray]:
        return [layer.w.copy() for layer in self.layers]

    def set_weights(self, weights):
        for layer, w in zip(self.layers, weights):
            layer.w = np.array(w, dtype=np.float64)

    def copy(self) -> "Network":
        return Network(
            [SpikingLayer(l.spec, l.w.copy(), l.readout.copy()) for l in self.layers], self.n_classes
        )


# ---------------------------------------------------------------- single steps


def layer_forward_step(layer: SpikingLayer, state, in_spikes):
    """Advance ``layer`` by one step in whichever form ``state`` belongs to.

    Returns ``(new_state, emitted_spikes)``; emitted spikes are pooled for conv
    layers.  The neuron spikes themselves are ``new_state.s`` (training form)
    or ``fire(new_state.u)`` (inference form).
    """
    x = layer.prepare_input(in_spikes)
    if isinstance(state, TrainState):
        if state.p.shape != x.shape:
            raise ConfigurationError(f"state traces {state.p.shape} do not match input {x.shape}")
        p, r = update_traces(state, layer.lif, x)
        u = layer.apply_weights(p) - r
        s = fire(u, layer.lif)
        return TrainState(p, r, u, s), layer.emit(s)
    if isinstance(state, InferState):
        if state.u.shape[1:] != layer.spec.out_shape:
            raise ConfigurationError(f"state {state.u.shape} does not match layer {layer.spec.out_shape}")
        new, s = step_inference(state, layer.lif, layer.apply_weights(x))
        return new, layer.emit(s)
    raise ConfigurationError(f"unknown state type {type(state).__name__}")


def quantized_step(layer: SpikingLayer, state: TrainState, in_spikes, lq: LayerQuant, rng=None, w_q=None):
    """One training-form step with every state variable and the weights quantized.

    Stochastic rounding when ``rng`` is given, nearest rounding otherwise.
    ``w_q`` may carry an already quantized weight array.  Returns
    ``(new_state, emitted_spikes, u_clamp_mask)``.
    """

    def q(x, fmt):
        return quantize_stochastic(x, fmt, rng) if rng is not None else quantize_nearest(x, fmt)

    x = layer.prepare_input(in_spikes)
    if w_q is None:
        w_q = q(layer.w, lq.weight).values
    p, r = update_traces(state, layer.lif, x)
    p = q(p, lq.p).values
    r = q(r, lq.r).values
    uq = q(layer.apply_weights(p, w_q) - r, lq.u)
    s = fire(uq.values, layer.lif)
    return TrainState(p, r, uq.values, s), layer.emit(s), uq.clamp_mask


# ---------------------------------------------------------------- readouts and loss


def readout_scores(layer: SpikingLayer, out_spikes):
    """Class scores from the time-averaged spikes; ``out_spikes`` is ``(T, ..., *out_shape)``."""
    out_spikes = np.asarray(out_spikes, dtype=np.float64)
    if out_spikes.shape[0] < 1:
        raise InputError("need at least one time step")
    n = math.prod(layer.spec.out_shape)
    mean = out_spikes.mean(axis=0)
    lead = mean.shape[: mean.ndim - len(layer.spec.out_shape)]
    return mean.reshape(lead + (n,)) @ layer.readout.T


def _check_targets(target, n_classes):
    target = np.asarray(target)
    if target.dtype.kind not in "iu" or np.any(target < 0) or np.any(target >= n_classes):
        raise InputError(f"targets must be integers in [0, {n_classes})")
    return target


def local_loss_terms(layer: SpikingLayer, spikes, target):
    """Per-sample cross-entropy and spike-gradient for one step.

    ``spikes`` is ``(B, *out_shape)`` (possibly real-valued).  Returns
    ``(loss[B], e[B, *out_shape])``.
    """
    target = _check_targets(target, layer.n_classes)
    b = spikes.shape[0]
    flat = spikes.reshape(b, -1)
    scores = flat @ layer.readout.T
    logp = log_softmax(scores, axis=1)
    loss = -logp[np.arange(b), target]
    err = np.exp(logp)
    err[np.arange(b), target] -= 1.0
    return loss, (err @ layer.readout).reshape(spikes.shape)


def local_loss_and_backsignal(layer: SpikingLayer, spikes, target):
    """Mean cross-entropy over the batch and the per-sample :class:`BackSignal`."""
    spikes = np.asarray(spikes, dtype=np.float64)
    loss, e = local_loss_terms(layer, spikes, np.atleast_1d(target))
    return float(loss.mean()), BackSignal(e)


# ---------------------------------------------------------------- unrolling


@dataclass
class EpochReport:
    loss: list[float]
    accuracy: list[float]

    def to_dict(self) -> dict:
        return {"loss": list(self.loss), "accuracy": list(self.accuracy)}


def _unroll(network, xb, yb=None, *, mode="training", policy=None, rngs=None, learn=False, w_q=None, offset=0):
    """Run one batch over all time steps.

    Returns per-layer spike counts, per-layer summed losses (if ``yb``) and
    per-layer summed weight gradients (if ``learn``).
    """
    batch, steps = xb.shape[:2]
    layers = network.layers
    if mode == "training":
        states = [l.train_state(batch) for l in layers]
    elif mode == "inference":
        if policy is not None:
            raise ConfigurationError("quantized stepping uses the training form")
        states = [l.infer_state(batch) for l in layers]
    else:
        raise InputError(f"mode must be 'training' or 'inference', got {mode!r}")
    counts = [np.zeros((batch,) + l.spec.out_shape) for l in layers]
    losses = np.zeros(len(layers))
    grads = [np.zeros(l.spec.weight_shape) for l in layers] if learn else None
    for t in range(steps):
        inp = xb[:, t]
        for i, layer in enumerate(layers):
            u_mask = None
            if policy is not None:
                rng = rngs[i] if rngs is not None else None
                states[i], inp, u_mask = quantized_step(
                    layer, states[i], inp, policy.layers[i], rng, None if w_q is None else w_q[i]
                )
            else:
                states[i], inp = layer_forward_step(layer, states[i], inp)
            st = states[i]
            s = st.s if mode == "training" else fire(st.u, layer.lif)
            counts[i] += s
            if yb is None:
                continue
            loss, e = local_loss_terms(layer, s, yb)
            if not np.all(np.isfinite(loss)):
                bad = int(np.flatnonzero(~np.isfinite(loss))[0])
                raise NumericalError(f"non-finite loss at layer {i}, step {t}, sample {offset + bad}")
            losses[i] += loss.sum()
            if learn:
                delta = e * surrogate_grad(st.u, layer.lif)
                if u_mask is not None:
                    delta = mask_gradient(delta, u_mask)
                grads[i] += layer.weight_grad(delta, st.p)
    return counts, losses, grads


def _predictions(network, counts, steps):
    return [
        np.argmax((c.reshape(c.shape[0], -1) / steps) @ l.readout.T, axis=1)
        for l, c in zip(network.layers, counts)
    ]


def train_epoch(
    network: Network,
    X,
    y,
    lr: float,
    *,
    batch_size: int = 32,
    seed: int = 0,
    epoch: int = 0,
    policy: Optional[QuantPolicy] = None,
) -> EpochReport:
    """One pass of local SGD over ``(X, y)``, updating ``network`` in place.

    ``X`` is ``(N, T, *input_shape)``.  With a ``policy`` the forward pass is
    quantized with stochastic rounding and weights are updated with the scaled,
    requantized rule.  ``lr`` is a scalar or one rate per layer.  Returns mean
    per-layer loss and training accuracy.
    """
    X = np.asarray(X)
    y = np.asarray(y)
    n = X.shape[0]
    if n == 0:
        raise InputError("empty dataset")
    steps = X.shape[1]
    lrs = np.broadcast_to(np.asarray(lr, dtype=np.float64), (len(network.layers),))
    order = rng_stream(seed, 1, epoch).permutation(n)
    loss_sum = np.zeros(len(network.layers))
    correct = np.zeros(len(network.layers))
    for bi, start in enumerate(range(0, n, batch_size)):
        idx = order[start : start + batch_size]
        xb = X[idx].astype(np.float64)
        yb = y[idx]
        rngs = w_q = w_masks = None
        if policy is not None:
            rngs = [rng_stream(seed, 2, epoch, bi, i) for i in range(len(network.layers))]
            wq = [quantize_stochastic(l.w, lq.weight, r) for l, lq, r in zip(network.layers, policy.layers, rngs)]
            w_q = [q.values for q in wq]
            w_masks = [q.clamp_mask for q in wq]
        counts, losses, grads = _unroll(
            network, xb, yb, policy=policy, rngs=rngs, learn=True, w_q=w_q, offset=start
        )
        loss_sum += losses
        for i, pred in enumerate(_predictions(network, counts, steps)):
            correct[i] += np.sum(pred == yb)
        scale = 1.0 / (len(idx) * steps)
        for i, layer in enumerate(network.layers):
            g = grads[i] * scale
            if policy is None:
                layer.w = layer.w - lrs[i] * g
            else:
                g = mask_gradient(g, w_masks[i])
                layer.w = scaled_update(
                    w_q[i], g, lrs[i], policy.layers[i].weight, rngs[i], policy.grad_scale
                ).values
    report = EpochReport(list(loss_sum / (n * steps)), list(correct / n))
    logger.debug("epoch %d: loss=%s acc=%s", epoch, report.loss, report.accuracy)
    return report


def predict_layers(network: Network, X, *, mode="training", policy=None, threads: int = 1):
    """Per-layer predicted labels, shape ``(n_layers, N)``.

    Samples are processed in fixed-size chunks so results do not depend on
    ``threads``.
    """
    X = np.asarray(X)
    steps = X.shape[1]
    starts = list(range(0, X.shape[0], EVAL_CHUNK))

    def run(start):
        xb = X[start : start + EVAL_CHUNK].astype(np.float64)
        counts, _, _ = _unroll(network, xb, mode=mode, policy=policy)
        return _predictions(network, counts, steps)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    if not parts:
        return np.zeros((len(network.layers), 0), dtype=int)
    return np.stack([np.concatenate([p[i] for p in parts]) for i in range(len(network.layers))])


def evaluate(network: Network, X, y, *, mode="training", policy=None, threads: int = 1) -> list[float]:
    """Fraction of samples each layer's readout classifies correctly."""
    y = np.asarray(y)
    preds = predict_layers(network, X, mode=mode, policy=policy, threads=threads)
    return [float(np.mean(p == y)) for p in preds]


# ---------------------------------------------------------------- quantization setup


def state_ranges(network: Network, X) -> list[dict[str, float]]:
    """Largest ``|p|``, ``|u|``, ``|r|`` per layer over a full-precision pass of ``X``."""
    X = np.asarray(X, dtype=np.float64)
    batch, steps = X.shape[:2]
    states = [l.train_state(batch) for l in network.layers]
    out = [dict(p=0.0, u=0.0, r=0.0) for _ in network.layers]
    for t in range(steps):
        inp = X[:, t]
        for i, layer in enumerate(network.layers):
            states[i], inp = layer_forward_step(layer, states[i], inp)
            for k in "pur":
                out[i][k] = max(out[i][k], float(np.max(np.abs(getattr(states[i], k)))))
    return out


def calibrate_policy(network: Network, X_calib, bits: Sequence[LayerBits], grad_scale=DEFAULT_GRAD_SCALE) -> QuantPolicy:
    """Resolve word widths into formats using weight and state ranges of ``X_calib``."""
    bits = list(bits)
    if len(bits) != len(network.layers):
        raise ConfigurationError(f"{len(bits)} bit entries for {len(network.layers)} layers")
    ranges = state_ranges(network, X_calib)
    layers = []
    for layer, b, rg in zip(network.layers, bits, ranges):
        if b.frac_bits is None:
            wf = calibrate_frac_bits(layer.w, b.weight_bits)
        else:
            wf = FixedPointFormat(b.weight_bits, int(b.frac_bits))
        sf = {k: calibrate_frac_bits(np.array([rg[k]]), b.state_bits) for k in "pur"}
        layers.append(LayerQuant(weight=wf, **sf))
    return QuantPolicy(layers, grad_scale, bits)


def snap_weights(network: Network, policy: QuantPolicy):
    """Round the weights onto their grids (nearest) before quantized fine-tuning."""
    for layer, lq in zip(network.layers, policy.layers):
        layer.w = quantize_nearest(layer.w, lq.weight).values
