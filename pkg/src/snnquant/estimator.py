"""scikit-learn style front end for the locally trained spiking network."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_spike_tensor, check_spikes_labels
from .errors import InputError
from .hessian import HutchinsonConfig, trace_report
from .network import (
    LayerSpec,
    Network,
    calibrate_policy,
    predict_layers,
    snap_weights,
    train_epoch,
)
from .neuron import LifParams
from .quant import DEFAULT_GRAD_SCALE, LayerBits

DESK_LAYERS = (
    {"kind": "conv", "channels": 8, "kernel": 5, "pool": 2},
    {"kind": "conv", "channels": 16, "kernel": 5, "pool": 1},
)
DESK_LR = (0.01, 0.3)


def build_specs(layers, input_shape, lif: LifParams) -> list[LayerSpec]:
    """Chain layer descriptions (dicts) into specs starting from ``input_shape``."""
    specs = []
    shape = tuple(input_shape)
    for i, d in enumerate(layers):
        d = dict(d)
        own_lif = d.pop("lif", None)
        layer_lif = LifParams(**own_lif) if own_lif else lif
        try:
            spec = LayerSpec(in_shape=shape, lif=layer_lif, **d)
        except TypeError as exc:
            raise InputError(f"layer {i}: {exc}") from None
        specs.append(spec)
        shape = spec.emit_shape
    return specs


class SpikingClassifier(ClassifierMixin, BaseEstimator):
    """Spiking network classifier trained with per-layer local losses.

    Parameters
    ----------
    layers : sequence of dict
        Layer descriptions ``{"kind", "channels", "kernel", "pool"}``, optionally
        with a per-layer ``"lif"`` dict overriding the neuron constants.
    alpha, u_thres, surrogate_beta : float
        Neuron constants shared by all layers.
    lr : float or sequence of float
        SGD learning rate, optionally one per layer.
    epochs, batch_size : int
    weight_scale : float
        Initial weight amplitude, see :meth:`Network.build`.
    eval_mode : {"training", "inference"}
        Neuron form used by :meth:`predict`.
    random_state : int
    threads : int
        Evaluation fan-out; results do not depend on it.

    Attributes
    ----------
    network_ : Network
    classes_ : ndarray
    history_ : list of EpochReport
    quant_policy_ : QuantPolicy or None
    """

    def __init__(
        self,
        layers=DESK_LAYERS,
        alpha=0.9,
        u_thres=1.0,
        surrogate_beta=1.0,
        lr=DESK_LR,
        epochs=10,
        batch_size=8,
        weight_scale=10.0,
        eval_mode="training",
        random_state=0,
        threads=1,
    ):
        self.layers = layers
        self.alpha = alpha
        self.u_thres = u_thres
        self.surrogate_beta = surrogate_beta
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.weight_scale = weight_scale
        self.eval_mode = eval_mode
        self.random_state = random_state
        self.threads = threads

    def _encode(self, y):
        idx = np.searchsorted(self.classes_, y)
        idx = np.clip(idx, 0, len(self.classes_) - 1)
        if not np.all(self.classes_[idx] == y):
            raise InputError("labels contain classes unseen during fit")
        return idx

    def _lr(self):
        lr = np.asarray(self.lr, dtype=np.float64)
        if lr.ndim and lr.shape[0] != len(self.network_.layers):
            raise InputError(f"{lr.shape[0]} learning rates for {len(self.network_.layers)} layers")
        return lr

    def fit(self, X, y, n_classes=None):
        X, y = check_spikes_labels(X, y)
        self.classes_ = np.unique(y) if n_classes is None else np.arange(n_classes)
        lif = LifParams(self.alpha, self.u_thres, self.surrogate_beta)
        self.input_shape_ = tuple(X.shape[2:])
        specs = build_specs(self.layers, self.input_shape_, lif)
        self.network_ = Network.build(specs, len(self.classes_), self.random_state, self.weight_scale)
        self.quant_policy_ = None
        self.history_ = []
        return self.partial_fit(X, y, epochs=self.epochs)

    def partial_fit(self, X, y, epochs=1):
        """Continue full-precision training for ``epochs`` more epochs."""
        check_is_fitted(self, "network_")
        X, y = check_spikes_labels(X, y, self.input_shape_)
        yi = self._encode(y)
        lr = self._lr()
        for _ in range(epochs):
            ep = len(self.history_)
            self.history_.append(
                train_epoch(self.network_, X, yi, lr, batch_size=self.batch_size, seed=self.random_state, epoch=ep)
            )
        return self

    def finetune_quantized(
        self, X, y, bits, *, epochs=2, lr=None, lr_factor=0.1, grad_scale=DEFAULT_GRAD_SCALE, calib_size=64
    ):
        """Quantize with per-layer ``bits`` (:class:`LayerBits`) and fine-tune.

        Formats are calibrated on the first ``calib_size`` samples, weights are
        snapped to their grid, then training continues with stochastic rounding
        and the gradient scaled by ``grad_scale``.  ``lr`` defaults to
        ``lr_factor`` times the training rate, divided by ``grad_scale`` so the
        effective step is ``lr_factor`` times the full-precision one.
        """
        check_is_fitted(self, "network_")
        X, y = check_spikes_labels(X, y, self.input_shape_)
        yi = self._encode(y)
        bits = [b if isinstance(b, LayerBits) else LayerBits.from_dict(b) for b in bits]
        policy = calibrate_policy(self.network_, X[:calib_size], bits, grad_scale)
        snap_weights(self.network_, policy)
        lr = self._lr() * lr_factor / grad_scale if lr is None else np.asarray(lr, dtype=np.float64)
        for e in range(epochs):
            train_epoch(
                self.network_, X, yi, lr, batch_size=self.batch_size, seed=self.random_state,
                epoch=1000 + e, policy=policy,
            )
        self.quant_policy_ = policy
        return self

    def predict_layers(self, X):
        """Labels predicted by every layer's readout, shape ``(n_layers, N)``."""
        check_is_fitted(self, "network_")
        X = check_spike_tensor(X, self.input_shape_)
        policy = self.quant_policy_
        mode = "training" if policy is not None else self.eval_mode
        return self.classes_[predict_layers(self.network_, X, mode=mode, policy=policy, threads=self.threads)]

    def predict(self, X):
        return self.predict_layers(X)[-1]

    def score_layers(self, X, y):
        check_is_fitted(self, "network_")
        X, y = check_spikes_labels(X, y, self.input_shape_)
        return [float(np.mean(p == y)) for p in self.predict_layers(X)]

    def hessian_traces(self, X, y, config: HutchinsonConfig = HutchinsonConfig()):
        """Per-layer Hutchinson estimates of the local-loss Hessian trace."""
        check_is_fitted(self, "network_")
        X, y = check_spikes_labels(X, y, self.input_shape_)
        return trace_report(self.network_, X, self._encode(y), config, threads=self.threads)
