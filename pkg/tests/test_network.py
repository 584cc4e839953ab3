import math

import numpy as np
import pytest

from snnquant.errors import ConfigurationError, InputError, NumericalError
from snnquant.events import synth_dataset
from snnquant.network import (
    LayerSpec,
    Network,
    SpikingLayer,
    evaluate,
    layer_forward_step,
    local_loss_and_backsignal,
    local_loss_terms,
    predict_layers,
    readout_scores,
    train_epoch,
)
from snnquant.neuron import InferState, LifParams, TrainState, step_training
from snnquant.quant import rng_stream


def _conv_net(seed=0, n_classes=4, ws=10.0):
    lif = LifParams(alpha=0.9, surrogate_beta=1.0)
    specs = [
        LayerSpec("conv", (2, 8, 8), 4, kernel=3, pool=2, lif=lif),
        LayerSpec("conv", (4, 4, 4), 6, kernel=3, pool=1, lif=lif),
    ]
    return Network.build(specs, n_classes, seed=seed, weight_scale=ws)


def _naive_conv(x, w):
    """Same-padded stride-1 cross-correlation, written out with loops."""
    b, c, h, wd = x.shape
    o, _, k, _ = w.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((b, o, h, wd))
    for n in range(b):
        for oc in range(o):
            for i in range(h):
                for j in range(wd):
                    out[n, oc, i, j] = np.sum(xp[n, :, i : i + k, j : j + k] * w[oc])
    return out


def test_layer_spec_validation():
    with pytest.raises(ConfigurationError):
        LayerSpec("conv", (2, 8, 8), 4, kernel=4)
    with pytest.raises(ConfigurationError):
        LayerSpec("conv", (2, 9, 9), 4, kernel=3, pool=2)
    with pytest.raises(ConfigurationError):
        LayerSpec("dense", (10,), 4, pool=2)
    with pytest.raises(ConfigurationError):
        LayerSpec("pool", (10,), 4)
    s = LayerSpec("conv", (2, 8, 8), 4, kernel=3, pool=2)
    assert s.weight_shape == (4, 2, 3, 3) and s.out_shape == (4, 8, 8) and s.emit_shape == (4, 4, 4)
    assert LayerSpec.from_dict(s.to_dict()) == s


def test_network_rejects_incompatible_chain():
    a = LayerSpec("dense", (10,), 5)
    b = LayerSpec("dense", (6,), 3)
    layers = [SpikingLayer(s, np.zeros(s.weight_shape), np.zeros((2, s.channels))) for s in (a, b)]
    with pytest.raises(ConfigurationError):
        Network(layers, 2)


def test_conv_matches_loop_oracle(rng):
    spec = LayerSpec("conv", (3, 6, 5), 4, kernel=3)
    layer = SpikingLayer(spec, rng.normal(size=spec.weight_shape), np.zeros((2, math.prod(spec.out_shape))))
    x = rng.random((2, 3, 6, 5))
    np.testing.assert_allclose(layer.apply_weights(x), _naive_conv(x, layer.w), rtol=1e-12)


def test_conv_weight_grad_matches_loop(rng):
    spec = LayerSpec("conv", (2, 5, 5), 3, kernel=3)
    layer = SpikingLayer(spec, np.zeros(spec.weight_shape), np.zeros((2, math.prod(spec.out_shape))))
    p = rng.random((2, 2, 5, 5))
    delta = rng.normal(size=(2, 3, 5, 5))
    g = layer.weight_grad(delta, p)
    # d/dW of sum(delta * conv(p, W)) by finite differences (linear, so exact)
    ref = np.zeros(spec.weight_shape)
    for idx in np.ndindex(*spec.weight_shape):
        e = np.zeros(spec.weight_shape)
        e[idx] = 1.0
        ref[idx] = np.sum(delta * _naive_conv(p, e))
    np.testing.assert_allclose(g, ref, rtol=1e-10, atol=1e-12)


def test_1x1_conv_is_dense_step(rng):
    lif = LifParams(alpha=0.8)
    conv = LayerSpec("conv", (1, 1, 1), 1, kernel=1, lif=lif)
    w = np.array([[[[0.7]]]])
    layer = SpikingLayer(conv, w, np.zeros((2, 1)))
    st = layer.train_state(1)
    ref = TrainState.zeros((1,), (1,))
    for _ in range(30):
        x = (rng.random((1, 1, 1, 1)) < 0.5).astype(float)
        st, _ = layer_forward_step(layer, st, x)
        ref = step_training(ref, lif, w.reshape(1, 1), x.reshape(1, 1))
        assert st.u.ravel()[0] == ref.u.ravel()[0]


def test_dense_matches_matmul_oracle(rng):
    spec = LayerSpec("dense", (7,), 4, lif=LifParams(alpha=0.7))
    w = rng.normal(size=(4, 7))
    layer = SpikingLayer(spec, w, np.zeros((3, 4)))
    st = layer.train_state(2)
    p = np.zeros((2, 7))
    r = np.zeros((2, 4))
    u = np.zeros((2, 4))
    s = np.zeros((2, 4))
    for _ in range(25):
        x = (rng.random((2, 7)) < 0.4).astype(float)
        st, out = layer_forward_step(layer, st, x)
        r = 0.7 * r + 0.7 * u * s
        p = 0.7 * p + x
        u = np.array([[sum(w[i, j] * p[b, j] for j in range(7)) for i in range(4)] for b in range(2)]) - r
        s = (u >= 1.0).astype(float)
        np.testing.assert_allclose(st.u, u, atol=1e-12)
        np.testing.assert_array_equal(out, s)


def test_zero_input_gives_no_spikes():
    net = _conv_net()
    X = np.zeros((3, 10, 2, 8, 8))
    states = [l.train_state(3) for l in net.layers]
    for t in range(10):
        inp = X[:, t]
        for i, layer in enumerate(net.layers):
            states[i], inp = layer_forward_step(layer, states[i], inp)
            assert not inp.any()


def test_state_shape_mismatch():
    net = _conv_net()
    with pytest.raises(ConfigurationError):
        layer_forward_step(net.layers[0], net.layers[1].train_state(1), np.zeros((1, 2, 8, 8)))
    with pytest.raises(ConfigurationError):
        layer_forward_step(net.layers[0], InferState(np.zeros((1, 3))), np.zeros((1, 2, 8, 8)))


def test_readout_scores_properties(rng):
    spec = LayerSpec("dense", (3,), 5)
    b = rng.normal(size=(4, 5))
    layer = SpikingLayer(spec, np.zeros(spec.weight_shape), b)
    assert not readout_scores(layer, np.zeros((6, 5))).any()
    s = (rng.random((7, 5)) < 0.5).astype(float)
    np.testing.assert_allclose(readout_scores(layer, s), readout_scores(layer, np.concatenate([s, s])))
    onehot = np.zeros((1, 5))
    onehot[0, 2] = 1
    np.testing.assert_allclose(readout_scores(layer, onehot), b[:, 2])


def test_local_loss_examples(rng):
    spec = LayerSpec("dense", (3,), 5)
    layer = SpikingLayer(spec, np.zeros(spec.weight_shape), np.zeros((10, 5)))
    loss, back = local_loss_and_backsignal(layer, np.ones((1, 5)), 3)
    assert loss == pytest.approx(math.log(10))
    b = np.zeros((3, 5))
    b[1, 0] = 100.0
    layer2 = SpikingLayer(spec, np.zeros(spec.weight_shape), b)
    loss2, _ = local_loss_and_backsignal(layer2, np.eye(5)[:1], 1)
    assert loss2 < 1e-30
    with pytest.raises(InputError):
        local_loss_and_backsignal(layer2, np.eye(5)[:1], 3)


def test_backsignal_matches_finite_difference(rng):
    spec = LayerSpec("dense", (3,), 6)
    layer = SpikingLayer(spec, np.zeros(spec.weight_shape), rng.normal(size=(4, 6)))
    s = rng.random((1, 6))
    _, e = local_loss_terms(layer, s, np.array([2]))
    h = 1e-6
    for k in range(6):
        d = np.zeros_like(s)
        d[0, k] = h
        fd = (local_loss_terms(layer, s + d, np.array([2]))[0][0] - local_loss_terms(layer, s - d, np.array([2]))[0][0]) / (2 * h)
        assert fd == pytest.approx(e[0, k], rel=1e-5, abs=1e-9)


def _toy_data(seed=0, n_classes=4, per_class=3, steps=12):
    d = synth_dataset(n_classes, per_class, dims=(8, 8), steps=steps, seed=seed)
    return d.X, d.y


def test_lr_zero_keeps_weights():
    net = _conv_net()
    X, y = _toy_data()
    before = net.get_weights()
    train_epoch(net, X, y, 0.0, batch_size=4)
    for a, b in zip(before, net.get_weights()):
        assert np.array_equal(a, b)


def test_readouts_frozen_and_locality():
    net = _conv_net()
    X, y = _toy_data()
    ro = [l.readout.copy() for l in net.layers]
    w1 = net.layers[1].w.copy()
    train_epoch(net, X, y, [0.05, 0.0], batch_size=4)
    assert all(np.array_equal(a, l.readout) for a, l in zip(ro, net.layers))
    assert np.array_equal(w1, net.layers[1].w)


def test_learning_in_one_layer_leaves_other_untouched():
    net = _conv_net()
    X, y = _toy_data()
    w0 = net.layers[0].w.copy()
    train_epoch(net, X, y, [0.0, 0.3], batch_size=4)
    assert np.array_equal(w0, net.layers[0].w)


def test_training_is_deterministic():
    X, y = _toy_data()
    nets = [_conv_net(), _conv_net()]
    reps = [train_epoch(n, X, y, [0.01, 0.3], batch_size=4, seed=5) for n in nets]
    assert reps[0].loss == reps[1].loss
    for a, b in zip(nets[0].get_weights(), nets[1].get_weights()):
        assert np.array_equal(a, b)


def test_modes_give_identical_predictions():
    net = _conv_net(ws=20.0)
    X, _ = _toy_data()
    a = predict_layers(net, X, mode="training")
    b = predict_layers(net, X, mode="inference")
    np.testing.assert_array_equal(a, b)
    with pytest.raises(InputError):
        predict_layers(net, X, mode="bogus")


def test_threads_do_not_change_predictions():
    net = _conv_net(ws=20.0)
    d = synth_dataset(4, 40, dims=(8, 8), steps=6, seed=1)
    np.testing.assert_array_equal(predict_layers(net, d.X, threads=1), predict_layers(net, d.X, threads=3))


def test_random_network_near_chance():
    lif = LifParams(alpha=0.9)
    net = Network.build([LayerSpec("conv", (2, 8, 8), 4, kernel=3, lif=lif)], 10, seed=3, weight_scale=20)
    d = synth_dataset(10, 20, dims=(8, 8), steps=10, seed=3)
    acc = evaluate(net, d.X, d.y)[0]
    assert abs(acc - 0.1) <= 0.1  # 200 samples: about 5 standard errors


def test_nan_loss_reports_location():
    net = _conv_net()
    net.layers[1].readout[0, 0] = np.nan
    X, y = _toy_data()
    with pytest.raises(NumericalError, match="layer 1, step 0"):
        train_epoch(net, X, y, 0.1, batch_size=4)


def test_empty_dataset_rejected():
    with pytest.raises(InputError):
        train_epoch(_conv_net(), np.zeros((0, 5, 2, 8, 8)), np.zeros(0, dtype=int), 0.1)


def test_single_sample_overfits():
    lif = LifParams(alpha=0.9, surrogate_beta=1.0)
    net = Network.build([LayerSpec("dense", (20,), 8, lif=lif)], 3, seed=2, weight_scale=20.0)
    x = (rng_stream(9, 0).random((1, 20, 20)) < 0.3).astype(np.uint8)
    y = np.array([2])
    for ep in range(30):
        train_epoch(net, x, y, 1.0, batch_size=1, epoch=ep)
    assert predict_layers(net, x)[-1][0] == 2


def test_loss_decreases_on_two_class_stream():
    wins = 0
    for seed in range(5):
        lif = LifParams(alpha=0.9, surrogate_beta=1.0)
        net = Network.build([LayerSpec("conv", (2, 8, 8), 4, kernel=3, lif=lif)], 2, seed=seed, weight_scale=10.0)
        d = synth_dataset(2, 8, dims=(8, 8), steps=20, seed=seed)
        losses = [train_epoch(net, d.X, d.y, 0.1, batch_size=4, seed=seed, epoch=e).loss[0] for e in range(5)]
        wins += losses[-1] < losses[0]
    assert wins >= 4
