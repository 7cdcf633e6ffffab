import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fanet import functional as F
from fanet.attention import (FIAM, FSAM, ExcitationParams, SEBlock, bottleneck_width, fastidious_excite,
                             fiam_conv_width)
from fanet.autograd import Tensor, backward, precision
from fanet.errors import ShapeError
from fanet.gradcheck import finite_diff_check

from conftest import leaf


def excite_oracle(x, s, g):
    out = np.empty_like(x)
    n, c, h, w = x.shape
    for i in range(n):
        for j in range(c):
            for r in range(h):
                for q in range(w):
                    v = x[i, j, r, q]
                    out[i, j, r, q] = s[i, j] * v if v > g[i, j] else v
    return out


def sig(v):
    return 1.0 / (1.0 + np.exp(-v))


def params(s, g):
    return ExcitationParams(Tensor(np.asarray(s, dtype=np.float64)), Tensor(np.asarray(g, dtype=np.float64)))


def zero_weights(module):
    for p in module.parameters():
        p.data[...] = 0.0


# -- fastidious excitation ----------------------------------------------------

def test_excite_example():
    x = Tensor(np.array([[[[0.2, 0.8], [0.5, 0.9]]]]))
    out = fastidious_excite(x, params([[0.5]], [[0.5]]))
    np.testing.assert_allclose(out.data[0, 0], [[0.2, 0.4], [0.5, 0.45]])


def test_excite_identity_cases(rng):
    x = rng.uniform(-2, 2, (2, 3, 4, 4))
    g = rng.uniform(0, 1, (2, 3))
    np.testing.assert_array_equal(fastidious_excite(Tensor(x), params(np.ones((2, 3)), g)).data, x)
    np.testing.assert_array_equal(
        fastidious_excite(Tensor(x), params(rng.uniform(0, 1, (2, 3)), np.full((2, 3), x.max()))).data, x)


def test_excite_matches_scalar_loop(rng):
    for _ in range(50):
        x = rng.uniform(-1, 2, (2, 3, 3, 3))
        s, g = rng.uniform(0, 1, (2, 3)), rng.uniform(0, 1, (2, 3))
        got = fastidious_excite(Tensor(x), params(s, g)).data
        np.testing.assert_array_equal(got, excite_oracle(x, s, g))


def test_excite_modes_forward_identical(rng):
    x = rng.uniform(-1, 2, (2, 4, 5, 5))
    p = params(rng.uniform(0, 1, (2, 4)), rng.uniform(0, 1, (2, 4)))
    a = fastidious_excite(Tensor(x), p, "hard").data
    b = fastidious_excite(Tensor(x), p, "surrogate", tau=0.3).data
    assert a.tobytes() == b.tobytes()


def test_excite_shape_and_mode_errors():
    x = Tensor(np.ones((1, 2, 3, 3)))
    with pytest.raises(ShapeError):
        fastidious_excite(x, params([[0.5]], [[0.5]]))
    with pytest.raises(ValueError):
        fastidious_excite(x, params([[0.5, 0.5]], [[0.5, 0.5]]), "straight-through")


def _excite_inputs(rng, margin=1e-2):
    """Features with no value within ``margin`` of its channel threshold."""
    g = rng.uniform(0.2, 0.8, (2, 3))
    x = rng.uniform(-1, 2, (2, 3, 4, 4))
    close = np.abs(x - g[:, :, None, None]) < margin
    x[close] += 3 * margin
    return x, g


def test_hard_grad_of_s_is_masked_sum(rng):
    x, g = _excite_inputs(rng)
    s = leaf(rng.uniform(0, 1, (2, 3)))
    gt = leaf(g)
    backward(F.sum(fastidious_excite(Tensor(x), ExcitationParams(s, gt), "hard")))
    expect = (x * (x > g[:, :, None, None])).sum(axis=(2, 3))
    np.testing.assert_allclose(s.grad, expect)
    assert np.all(gt.grad == 0.0)


@pytest.mark.parametrize("mode", ["hard", "surrogate"])
def test_excite_gradcheck(rng, mode):
    with precision("double"):
        for trial in range(20):
            r = np.random.default_rng([5, trial])
            x_np, g_np = _excite_inputs(r)
            x, s, g = leaf(x_np), leaf(r.uniform(0.05, 0.95, (2, 3))), leaf(g_np)
            w = Tensor(r.uniform(-1, 1, x.shape))
            if mode == "hard":
                # mask is piecewise constant: compare s and x only, away from the threshold
                err = finite_diff_check(lambda: F.sum(F.mul(fastidious_excite(x, ExcitationParams(s, g), "hard"), w)),
                                        [x, s])
            else:
                # the surrogate differentiates a smooth proxy: check against that proxy
                def proxy():
                    s4 = F.reshape(s, (2, 3, 1, 1))
                    m = F.sigmoid(F.scale(F.sub(x, F.reshape(g, (2, 3, 1, 1))), 1 / 0.1))
                    return F.sum(F.mul(F.add(x, F.mul(F.mul(F.sub(s4, Tensor(1.0)), x), m)), w))
                err = finite_diff_check(proxy, [x, s, g], eps=1e-5)  # steep sigmoid: smaller step
                xs, ss, gs = x.grad.copy(), s.grad.copy(), g.grad.copy()
                for t in (x, s, g):
                    t.grad = None
                backward(F.sum(F.mul(fastidious_excite(x, ExcitationParams(s, g), "surrogate", 0.1), w)))
                np.testing.assert_allclose(x.grad, xs, rtol=1e-12, atol=1e-14)
                np.testing.assert_allclose(s.grad, ss, rtol=1e-12, atol=1e-14)
                np.testing.assert_allclose(g.grad, gs, rtol=1e-12, atol=1e-14)
            assert err < 1e-5


def test_surrogate_threshold_gradient_nonzero(rng):
    x, g_np = _excite_inputs(rng)
    g = leaf(g_np)
    backward(F.sum(fastidious_excite(Tensor(x), ExcitationParams(Tensor(np.full((2, 3), 0.5)), g))))
    assert np.all(np.abs(g.grad) > 0)


channel_maps = arrays(np.float64, (1, 3, 4, 4), elements=st.floats(-5, 5, allow_nan=False))
unit = st.floats(1e-3, 1 - 1e-3)


@settings(max_examples=60, deadline=None)
@given(channel_maps, st.lists(unit, min_size=3, max_size=3), st.lists(unit, min_size=3, max_size=3))
def test_ratio_takes_values_one_or_s(x, s, g):
    s, g = np.array([s]), np.array([g])
    out = fastidious_excite(Tensor(x), params(s, g)).data
    nz = x != 0
    ratio = np.where(nz, out / np.where(nz, x, 1), 1.0)
    for c in range(3):
        vals = ratio[0, c][nz[0, c]]
        ok = np.isclose(vals, 1.0, atol=1e-12) | np.isclose(vals, s[0, c], atol=1e-12)
        assert ok.all()


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (1, 3, 4, 4), elements=st.floats(0, 5)),
       st.lists(unit, min_size=3, max_size=3), st.lists(unit, min_size=3, max_size=3))
def test_suppression_on_nonnegative_input(x, s, g):
    out = fastidious_excite(Tensor(x), params([s], [g])).data
    assert np.all(out <= x)


# -- FSAM ------------------------------------------------------------------------

def fsam_oracle(x, m):
    z = x.mean(axis=(2, 3))
    branch = lambda w1, w2: sig(np.maximum(z @ w1.T, 0) @ w2.T)  # noqa: E731
    return branch(m.w1s.data, m.w2s.data), branch(m.w1g.data, m.w2g.data)


def test_fsam_bottleneck_and_params():
    m = FSAM(64, r=3)
    assert m.hidden == bottleneck_width(64, 3) == 21
    assert bottleneck_width(2, 3) == 1
    names = [n for n, _ in m.named_parameters()]
    assert names == ["w1s", "w2s", "w1g", "w2g"]
    assert len({id(p) for p in m.parameters()}) == 4


def test_fsam_zero_weights_half(rng):
    with precision("double"):
        m = FSAM(6)
    zero_weights(m)
    p = m(Tensor(rng.uniform(-2, 2, (2, 6, 4, 4))))
    assert np.all(p.s.data == 0.5) and np.all(p.g.data == 0.5)


def test_fsam_spatially_invariant_on_constants():
    with precision("double"):
        m = FSAM(5); m.initialize(3)
        a = m(Tensor(np.full((1, 5, 4, 4), 0.7)))
        b = m(Tensor(np.full((1, 5, 8, 2), 0.7)))
    np.testing.assert_allclose(a.s.data, b.s.data, rtol=1e-14)
    np.testing.assert_allclose(a.g.data, b.g.data, rtol=1e-14)


def test_fsam_matches_formula(rng):
    with precision("double"):
        m = FSAM(9); m.initialize(7)
        x = rng.uniform(-2, 2, (3, 9, 5, 5))
        p = m(Tensor(x))
    s, g = fsam_oracle(x, m)
    np.testing.assert_allclose(p.s.data, s, rtol=1e-12)
    np.testing.assert_allclose(p.g.data, g, rtol=1e-12)


def test_fsam_squeeze_is_linear(rng):
    with precision("double"):
        m = FSAM(4)
        x = rng.uniform(-2, 2, (2, 4, 3, 3))
        np.testing.assert_allclose(m.squeeze(Tensor(2.5 * x)).data, 2.5 * m.squeeze(Tensor(x)).data, rtol=1e-13)


def test_fsam_gradcheck(rng):
    with precision("double"):
        m = FSAM(6, r=3); m.initialize(1)
        x = leaf(rng.uniform(-2, 2, (2, 6, 3, 3)))
        w = Tensor(rng.uniform(-1, 1, (2, 6)))

        def f():
            p = m(x)
            return F.sum(F.mul(F.add(p.s, p.g), w))
        assert finite_diff_check(f, [x] + m.parameters()) < 1e-5


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 6, 3, 3), elements=st.floats(-10, 10)), st.integers(0, 2 ** 16))
def test_fsam_range(x, seed):
    with precision("double"):
        m = FSAM(6); m.initialize(seed)
        p = m(Tensor(x))
    # sigmoid saturates to exactly 0/1 in floating point only for |a| > ~37
    assert np.all((p.s.data >= 0) & (p.s.data <= 1)) and np.all((p.g.data >= 0) & (p.g.data <= 1))


# -- FIAM ------------------------------------------------------------------------

def test_fiam_widths():
    assert fiam_conv_width(1024) == 1228
    assert fiam_conv_width(5) == 6
    assert fiam_conv_width(128) == 153


def fiam_oracle(x0, m):
    w = m.conv.weight.data
    b = m.conv.bias.data
    conv = np.maximum(F.conv2d(Tensor(x0), Tensor(w), Tensor(b), stride=2, padding=1, strict=False).data, 0)
    zs = zg = conv.mean(axis=(2, 3))
    out = []
    for n in range(1, m.levels + 1):
        a_s, a_g = zs @ getattr(m, f"ws{n}").data.T, zg @ getattr(m, f"wg{n}").data.T
        out.append((sig(a_s), sig(a_g)))
        zs, zg = np.maximum(a_s, 0), np.maximum(a_g, 0)
    return out


def test_fiam_matches_recurrence(rng):
    with precision("double"):
        m = FIAM(8, [6, 4, 3, 2]); m.initialize(2)
        x0 = rng.uniform(-2, 2, (2, 8, 6, 6))
        got = m(Tensor(x0))
    assert m.d0 == 9 and len(got) == 4
    for (s, g), p in zip(fiam_oracle(x0, m), got):
        np.testing.assert_allclose(p.s.data, s, rtol=1e-12)
        np.testing.assert_allclose(p.g.data, g, rtol=1e-12)


def test_fiam_levels_deepest_first_dims():
    with precision("double"):
        m = FIAM(16, [8, 4, 2, 1]); m.initialize(0)
        out = m(Tensor(np.ones((1, 16, 2, 2))))
    assert [p.channels for p in out] == [8, 4, 2, 1]


def test_fiam_zero_weights():
    with precision("double"):
        m = FIAM(4, [3, 2])
    zero_weights(m)
    out = m(Tensor(np.ones((1, 4, 4, 4))))
    assert all(np.all(p.s.data == 0.5) and np.all(p.g.data == 0.5) for p in out)


def test_fiam_shared_preactivation_gives_zero_next_level_when_negative():
    # with negative level-1 pre-activations, relu zeroes Z1 so level 2 sees zero input
    with precision("double"):
        m = FIAM(2, [2, 2]); m.initialize(0)
        m.conv.weight.data[...] = 0.0
        m.conv.bias.data[...] = 1.0
        m.ws1.data[...] = -1.0
        m.wg1.data[...] = -1.0
        out = m(Tensor(np.ones((1, 2, 4, 4))))
    np.testing.assert_allclose(out[0].s.data, sig(-2.0))
    assert np.all(out[1].s.data == 0.5) and np.all(out[1].g.data == 0.5)


def test_fiam_symmetric_chains(rng):
    with precision("double"):
        m = FIAM(4, [3, 2, 2]); m.initialize(9)
        for n in range(1, 4):
            getattr(m, f"wg{n}").data[...] = getattr(m, f"ws{n}").data
        out = m(Tensor(rng.uniform(-2, 2, (2, 4, 4, 4))))
    for p in out:
        np.testing.assert_array_equal(p.s.data, p.g.data)


def test_fiam_gradcheck(rng):
    with precision("double"):
        m = FIAM(3, [4, 2]); m.initialize(4)
        x0 = leaf(rng.uniform(-2, 2, (2, 3, 4, 4)))
        ws = [Tensor(rng.uniform(-1, 1, (2, 4))), Tensor(rng.uniform(-1, 1, (2, 2)))]

        def f():
            total = None
            for p, w in zip(m(x0), ws):
                term = F.sum(F.mul(F.add(p.s, p.g), w))
                total = term if total is None else F.add(total, term)
            return total
        assert finite_diff_check(f, [x0] + m.parameters()) < 1e-5


# -- SE ------------------------------------------------------------------------------

def test_se_zero_weights_halves(rng):
    with precision("double"):
        m = SEBlock(6)
    zero_weights(m)
    x = rng.uniform(-2, 2, (2, 6, 3, 3))
    np.testing.assert_allclose(m(Tensor(x)).data, 0.5 * x)


def test_se_is_thresholdless_excitation(rng):
    with precision("double"):
        m = SEBlock(6); m.initialize(5)
        x = Tensor(rng.uniform(-2, 2, (2, 6, 3, 3)))
        gate = m.gate(x)
        via_excite = fastidious_excite(x, ExcitationParams(gate, Tensor(np.full((2, 6), -np.inf))))
    np.testing.assert_array_equal(m(x).data, via_excite.data)


def test_se_matches_formula(rng):
    with precision("double"):
        m = SEBlock(6); m.initialize(8)
        x = rng.uniform(-2, 2, (2, 6, 3, 3))
        got = m(Tensor(x)).data
    gate = sig(np.maximum(x.mean(axis=(2, 3)) @ m.w1.data.T, 0) @ m.w2.data.T)
    np.testing.assert_allclose(got, x * gate[:, :, None, None], rtol=1e-12)


def test_se_gradcheck(rng):
    with precision("double"):
        m = SEBlock(6); m.initialize(2)
        x = leaf(rng.uniform(-2, 2, (2, 6, 3, 3)))
        w = Tensor(rng.uniform(-1, 1, x.shape))
        assert finite_diff_check(lambda: F.sum(F.mul(m(x), w)), [x] + m.parameters()) < 1e-5


def test_optional_fc_bias():
    assert len(FSAM(6, fc_bias=True).parameters()) == 8
    assert len(SEBlock(6, fc_bias=True).parameters()) == 4
    assert len(FIAM(4, [3, 2], fc_bias=True).parameters()) == 2 + 8
