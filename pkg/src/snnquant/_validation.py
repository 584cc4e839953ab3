"""Input checks shared by the estimator and the command line."""

import numpy as np

from .errors import InputError


def check_spike_tensor(X, input_shape=None):
    """Return ``X`` as a ``(N, T, ...)`` array of zeros and ones."""
    X = np.asarray(X)
    if X.ndim < 3:
        raise InputError(f"expected spikes shaped (N, T, ...), got {X.shape}")
    if X.shape[1] < 1:
        raise InputError("need at least one time step")
    if input_shape is not None and tuple(X.shape[2:]) != tuple(input_shape):
        raise InputError(f"sample shape {X.shape[2:]} differs from fitted shape {tuple(input_shape)}")
    if X.dtype != np.uint8 and X.dtype != bool:
        if not np.all((X == 0) | (X == 1)):
            raise InputError("spike tensors must be binary")
    return X


def check_spikes_labels(X, y, input_shape=None):
    X = check_spike_tensor(X, input_shape)
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != X.shape[0]:
        raise InputError(f"labels of shape {y.shape} do not match {X.shape[0]} samples")
    if X.shape[0] == 0:
        raise InputError("empty dataset")
    return X, y
