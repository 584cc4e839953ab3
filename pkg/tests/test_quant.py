import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from snnquant.errors import ConfigurationError, InputError
from snnquant.network import LayerSpec, Network, layer_forward_step, quantized_step
from snnquant.neuron import LifParams
from snnquant.quant import (
    EPS_FLOOR,
    FixedPointFormat,
    LayerBits,
    LayerQuant,
    QuantPolicy,
    calibrate_frac_bits,
    mask_gradient,
    quantize_nearest,
    quantize_stochastic,
    rng_stream,
    scaled_update,
)

F42 = FixedPointFormat(4, 2)


def test_format_derived_fields():
    assert F42.eps == 0.25 and F42.range == (-2.0, 1.75)
    assert FixedPointFormat(8, -2).eps == 4.0
    with pytest.raises(InputError):
        FixedPointFormat(1, 0)
    with pytest.raises(InputError):
        FixedPointFormat(33, 0)


def test_stochastic_example_probabilities():
    q = quantize_stochastic(np.full(200_000, 0.3), F42, rng_stream(0, 1))
    assert set(np.unique(q.values)) == {0.25, 0.5}
    assert np.mean(q.values == 0.5) == pytest.approx(0.2, abs=0.005)
    assert not q.clamp_mask.any()


def test_on_grid_is_fixed_point(rng):
    q = quantize_stochastic(np.full(1000, 0.75), F42, rng)
    assert np.all(q.values == 0.75) and not q.clamp_mask.any()


def test_clamp_examples(rng):
    q = quantize_stochastic(np.array([2.5, -3.0, 1.0]), F42, rng)
    assert q.values.tolist() == [1.75, -2.0, 1.0]
    assert q.clamp_mask.tolist() == [True, True, False]
    assert quantize_nearest(np.array([2.5]), F42).clamp_mask[0]


def test_nearest_examples():
    assert quantize_nearest(np.array([0.3]), F42).values[0] == 0.25
    assert quantize_nearest(np.array([0.375]), F42).values[0] == 0.5
    assert quantize_nearest(np.array([0.125]), F42).values[0] == 0.0


@pytest.mark.parametrize("fn", [quantize_nearest, lambda x, f: quantize_stochastic(x, f, rng_stream(0))])
def test_non_finite_rejected(fn):
    with pytest.raises(InputError):
        fn(np.array([np.nan]), F42)


@given(arrays(np.float64, 20, elements=st.floats(-100, 100)), st.integers(2, 16), st.integers(-4, 12))
def test_nearest_idempotent_and_representable(x, word, frac):
    fmt = FixedPointFormat(word, frac)
    q = quantize_nearest(x, fmt).values
    np.testing.assert_array_equal(quantize_nearest(q, fmt).values, q)
    k = q / fmt.eps
    assert np.all(k == np.round(k)) and np.all((k >= fmt.kmin) & (k <= fmt.kmax))


@settings(max_examples=50)
@given(arrays(np.float64, 50, elements=st.floats(-10, 10)), st.integers(0, 2**32 - 1))
def test_stochastic_support(x, seed):
    fmt = FixedPointFormat(6, 2)
    q = quantize_stochastic(x, fmt, rng_stream(seed))
    lo = np.floor(np.clip(x, *fmt.range) / fmt.eps) * fmt.eps
    inside = ~q.clamp_mask
    assert np.all((q.values[inside] == lo[inside]) | (q.values[inside] == lo[inside] + fmt.eps))
    assert np.all(np.isin(q.values[q.clamp_mask], fmt.range))


def test_mask_gradient(rng):
    g = rng.normal(size=(4, 5))
    assert np.array_equal(mask_gradient(g, np.zeros_like(g, bool)), g)
    assert not mask_gradient(g, np.ones_like(g, bool)).any()
    m = rng.random((4, 5)) < 0.5
    out = mask_gradient(g, m)
    for idx in np.ndindex(*g.shape):
        assert out[idx] == (0.0 if m[idx] else g[idx])
    with pytest.raises(ConfigurationError):
        mask_gradient(g, m[:3])


def test_clamped_coordinates_are_exactly_masked(rng):
    x = rng.normal(scale=3, size=200)
    q = quantize_stochastic(x, F42, rng)
    g = mask_gradient(np.ones(200), q.clamp_mask)
    assert np.array_equal(g == 0, (x < -2) | (x > 1.75))


def test_calibrate_examples():
    assert calibrate_frac_bits(np.array([0.9, -0.2]), 8) == FixedPointFormat(8, 7)
    fmt = calibrate_frac_bits(np.zeros(5), 8)
    assert fmt.eps <= EPS_FLOOR and fmt.range[0] < 0 < fmt.range[1]
    # 1.0 sits above the top grid point of frac=7, so one bit is given up
    assert calibrate_frac_bits(np.array([1.0]), 8) == FixedPointFormat(8, 6)
    with pytest.raises(InputError):
        calibrate_frac_bits(np.array([]), 8)
    with pytest.raises(InputError):
        calibrate_frac_bits(np.array([np.inf]), 8)


@given(arrays(np.float64, 30, elements=st.floats(-1e4, 1e4)), st.integers(2, 24))
def test_calibrated_format_never_clamps(x, word):
    fmt = calibrate_frac_bits(x, word)
    assert not quantize_nearest(x, fmt).clamp_mask.any()


def test_fidelity_monotone_in_frac_bits(rng):
    x = rng.uniform(-1, 1, 5000)
    errs = [np.mean(np.abs(quantize_nearest(x, FixedPointFormat(16, f)).values - x)) for f in range(0, 14)]
    assert all(b <= a for a, b in zip(errs, errs[1:]))
    serrs = [
        np.mean(np.abs(quantize_stochastic(x, FixedPointFormat(16, f), rng_stream(3, f)).values - x))
        for f in range(0, 14, 3)
    ]
    assert all(b <= a for a, b in zip(serrs, serrs[1:]))


def test_rng_streams_are_addressable():
    a = rng_stream(7, 1, 2).random(5)
    assert np.array_equal(a, rng_stream(7, 1, 2).random(5))
    assert not np.array_equal(a, rng_stream(7, 2, 1).random(5))
    assert not np.array_equal(a, rng_stream(8, 1, 2).random(5))


def test_policy_round_trip_and_validation():
    f = FixedPointFormat(8, 5)
    pol = QuantPolicy([LayerQuant(f, f, f, f)], 1e3, [LayerBits(8, 8)])
    assert QuantPolicy.from_dict(pol.to_dict()) == pol
    with pytest.raises(InputError):
        QuantPolicy([], grad_scale=0.0)
    with pytest.raises(ConfigurationError):
        QuantPolicy.from_dict({"layers": []})
    with pytest.raises(ConfigurationError):
        LayerBits.from_dict({"weight_bits": 8, "state_bits": 8, "exp": 1})
    assert LayerBits.from_dict({"weight_bits": 4, "state_bits": 8}) == LayerBits(4, 8)


def test_scaled_update_zero_grad(rng):
    w = quantize_nearest(rng.normal(size=50), F42).values
    np.testing.assert_array_equal(scaled_update(w, np.zeros(50), 0.1, F42, rng).values, w)
    with pytest.raises(ConfigurationError):
        scaled_update(w, np.zeros(49), 0.1, F42, rng)


def test_scaled_update_subgrid_step_moves_in_expectation():
    fmt = FixedPointFormat(16, 8)
    w = np.zeros(100_000)
    step = 0.1 * fmt.eps  # far below eps / 2: nearest rounding would never move
    g = np.full_like(w, -step / (0.01 * 1e3))
    out = scaled_update(w, g, 0.01, fmt, rng_stream(5), grad_scale=1e3).values
    assert not quantize_nearest(w + step, fmt).values.any()
    assert out.mean() == pytest.approx(step, abs=4 * fmt.eps / 2 / np.sqrt(w.size))


def test_scaled_update_grad_scale_arithmetic():
    fmt = FixedPointFormat(16, 8)
    g = np.full(100_000, -1e-3 * fmt.eps)
    out = scaled_update(np.zeros_like(g), g, 1.0, fmt, rng_stream(6)).values
    assert out.mean() == pytest.approx(fmt.eps, abs=1e-12)


def _layer(seed=0, kind="dense"):
    lif = LifParams(alpha=0.9)
    spec = LayerSpec("dense", (12,), 6, lif=lif) if kind == "dense" else LayerSpec("conv", (2, 6, 6), 3, kernel=3, lif=lif)
    return Network.build([spec], 4, seed=seed, weight_scale=10.0).layers[0]


@pytest.mark.parametrize("kind", ["dense", "conv"])
def test_wide_format_matches_float_step(kind, rng):
    layer = _layer(kind=kind)
    fmt = FixedPointFormat(32, 26)  # range +-32
    lq = LayerQuant(fmt, fmt, fmt, fmt)
    a = layer.train_state(3)
    b = layer.train_state(3)
    for _ in range(40):
        x = (rng.random((3,) + layer.spec.in_shape) < 0.3).astype(float)
        a, sa = layer_forward_step(layer, a, x)
        b, sb, _ = quantized_step(layer, b, x, lq)
        assert np.max(np.abs(a.u - b.u)) <= 1e-6
        np.testing.assert_array_equal(sa, sb)


def test_two_bit_weights_still_run(rng):
    layer = _layer()
    wf = FixedPointFormat(2, 4)
    sf = FixedPointFormat(16, 8)
    lq = LayerQuant(wf, sf, sf, sf)
    st_ = layer.train_state(2)
    for _ in range(20):
        st_, s, _ = quantized_step(layer, st_, (rng.random((2, 12)) < 0.5).astype(float), lq, rng)
        assert np.all(np.isfinite(st_.u))
    grid = quantize_nearest(layer.w, wf).values
    assert set(np.unique(grid / wf.eps)) <= {-2.0, -1.0, 0.0, 1.0}


def test_quantized_states_are_on_grid(rng):
    layer = _layer()
    wf, pf, uf, rf = FixedPointFormat(8, 5), FixedPointFormat(8, 4), FixedPointFormat(8, 3), FixedPointFormat(8, 3)
    lq = LayerQuant(wf, pf, uf, rf)
    st_ = layer.train_state(2)
    for _ in range(15):
        st_, _, _ = quantized_step(layer, st_, (rng.random((2, 12)) < 0.5).astype(float), lq, rng)
        for arr, f in ((st_.p, pf), (st_.u, uf), (st_.r, rf)):
            k = arr / f.eps
            assert np.all(k == np.round(k))
