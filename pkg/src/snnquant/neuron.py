"""Simplified leaky integrate-and-fire neuron.

Two forms of the same dynamics are provided:

* the *training* form keeps a presynaptic trace ``p``, a reset trace ``r``,
  the membrane potential ``u`` and the spike ``s``.  Because ``u = W p - r``,
  the derivative of ``u`` with respect to a weight is the presynaptic trace
  itself, which is what makes local (forward-only) learning possible;
* the *inference* form keeps only ``u`` and resets it to zero after a spike.

Starting from zero state, both produce identical potentials and spikes.
All arrays may carry arbitrary leading batch dimensions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InputError, StateCorruptionError

__all__ = [
    "LifParams",
    "InferState",
    "TrainState",
    "BackSignal",
    "fire",
    "step_inference",
    "update_traces",
    "step_training",
    "surrogate_grad",
    "surrogate_spike",
    "local_weight_grad",
]


@dataclass(frozen=True)
class LifParams:
    """Neuron constants.

    ``alpha`` is the per-step decay, ``u_thres`` the firing threshold and
    ``surrogate_beta`` the sharpness of the fast-sigmoid surrogate.
    """

    alpha: float = 0.97
    u_thres: float = 1.0
    surrogate_beta: float = 10.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise InputError(f"alpha must lie in (0, 1), got {self.alpha}")
        # a non-positive threshold would make the zero initial state count as a spike
        if not (math.isfinite(self.u_thres) and self.u_thres > 0):
            raise InputError(f"u_thres must be finite and > 0, got {self.u_thres}")
        if not (math.isfinite(self.surrogate_beta) and self.surrogate_beta > 0):
            raise InputError(f"surrogate_beta must be > 0, got {self.surrogate_beta}")


@dataclass(frozen=True)
class InferState:
    u: np.ndarray

    @classmethod
    def zeros(cls, shape) -> "InferState":
        return cls(np.zeros(shape))


@dataclass(frozen=True)
class TrainState:
    p: np.ndarray
    r: np.ndarray
    u: np.ndarray
    s: np.ndarray

    @classmethod
    def zeros(cls, in_shape, out_shape) -> "TrainState":
        return cls(
            p=np.zeros(in_shape),
            r=np.zeros(out_shape),
            u=np.zeros(out_shape),
            s=np.zeros(out_shape),
        )


@dataclass(frozen=True)
class BackSignal:
    """Loss gradient arriving at each neuron's spike output."""

    e: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.e)):
            raise InputError("BackSignal contains non-finite entries")


def fire(u: np.ndarray, params: LifParams) -> np.ndarray:
    """Heaviside step with ``Theta(0) = 1``."""
    return (u >= params.u_thres).astype(np.float64)


def _check_finite(name, x):
    if not np.isfinite(x).all():
        raise StateCorruptionError(f"non-finite values in {name}")


def step_inference(state: InferState, params: LifParams, weighted_input):
    """Advance the single-variable form by one step.

    The previous spike is recovered from ``u`` itself (a neuron fired last
    step iff its potential reached threshold), so no extra state is kept.

    Returns ``(new_state, spikes)``.
    """
    u = state.u
    weighted_input = np.asarray(weighted_input, dtype=np.float64)
    _check_finite("u", u)
    _check_finite("weighted_input", weighted_input)
    fired = u >= params.u_thres
    u_new = np.where(fired, 0.0, params.alpha * u) + weighted_input
    return InferState(u_new), fire(u_new, params)


def update_traces(state: TrainState, params: LifParams, in_spikes):
    """Return the next presynaptic and reset traces ``(p, r)``.

    ``r`` uses the potential and spike of the previous step.
    """
    a = params.alpha
    p = a * state.p + in_spikes
    r = a * state.r + a * state.u * state.s
    return p, r


def step_training(state: TrainState, params: LifParams, weights, in_spikes) -> TrainState:
    """Advance the trace form of a dense layer by one step.

    ``weights`` has shape ``(n_out, n_in)``; ``in_spikes`` is ``(..., n_in)``.
    """
    weights = np.asarray(weights, dtype=np.float64)
    in_spikes = np.asarray(in_spikes, dtype=np.float64)
    if weights.ndim != 2 or weights.shape[1] != state.p.shape[-1]:
        raise ConfigurationError(
            f"weights of shape {weights.shape} do not match trace width {state.p.shape[-1]}"
        )
    if in_spikes.shape[-1] != state.p.shape[-1]:
        raise ConfigurationError(
            f"input width {in_spikes.shape[-1]} does not match trace width {state.p.shape[-1]}"
        )
    p, r = update_traces(state, params, in_spikes)
    u = p @ weights.T - r
    return TrainState(p=p, r=r, u=u, s=fire(u, params))


def surrogate_grad(u, params: LifParams):
    """Fast-sigmoid derivative ``1 / (beta |u - thres| + 1)^2``; peaks at 1."""
    d = np.abs(np.asarray(u, dtype=np.float64) - params.u_thres)
    return 1.0 / (params.surrogate_beta * d + 1.0) ** 2


def surrogate_spike(u, params: LifParams):
    """Antiderivative of :func:`surrogate_grad` that vanishes at threshold."""
    d = np.asarray(u, dtype=np.float64) - params.u_thres
    return d / (params.surrogate_beta * np.abs(d) + 1.0)


def local_weight_grad(back: BackSignal, state: TrainState, params: LifParams) -> np.ndarray:
    """Per-step weight gradient ``e_i * sigma'(u_i) * p_j``.

    Leading batch dimensions are summed over.  No temporal backpropagation:
    the presynaptic trace already is ``du/dW``.
    """
    e = np.asarray(back.e, dtype=np.float64)
    if e.shape != state.u.shape:
        raise ConfigurationError(f"BackSignal shape {e.shape} != state shape {state.u.shape}")
    if e.shape[:-1] != state.p.shape[:-1]:
        raise ConfigurationError("batch dimensions of e and p differ")
    delta = e * surrogate_grad(state.u, params)
    p = np.asarray(state.p, dtype=np.float64)
    return delta.reshape(-1, delta.shape[-1]).T @ p.reshape(-1, p.shape[-1])
