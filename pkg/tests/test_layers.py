import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import numeric_grad, rel_error
from lithonet.errors import ShapeError, UsageError
from lithonet.layers import (
    GAP,
    SPP,
    Conv3x3,
    Dense,
    Dropout,
    MaxPool,
    PyramidSpec,
    ReLU,
    SoftmaxOutput,
    bin_edges,
    dropout_forward,
    gap_forward,
    gap_over_spp,
    spp_backward,
    spp_forward,
)

SPEC = PyramidSpec()

# bins of a 4x4 map written out by hand: whole map, quadrants, single cells
HAND_BINS_4x4 = (
    [(slice(0, 4), slice(0, 4))]
    + [(slice(r, r + 2), slice(c, c + 2)) for r in (0, 2) for c in (0, 2)]
    + [(slice(r, r + 1), slice(c, c + 1)) for r in range(4) for c in range(4)]
)


def test_pyramid_has_21_bins():
    assert SPEC.bins == 21 == 1 + 4 + 16


class TestSPP:
    @settings(max_examples=60, deadline=None)
    @given(h=st.integers(4, 300), w=st.integers(4, 300), c=st.integers(1, 4))
    def test_length_independent_of_extent(self, h, w, c):
        x = np.random.default_rng(h * 1000 + w).normal(size=(c, h, w))
        assert spp_forward(x, SPEC).shape == (21 * c,)

    @pytest.mark.parametrize("h,w", [(4, 4), (17, 9), (64, 64), (150, 200)])
    def test_32_channels_give_672(self, h, w):
        assert spp_forward(np.zeros((32, h, w))).shape == (672,)

    def test_constant_input(self):
        np.testing.assert_array_equal(spp_forward(np.full((3, 11, 7), 2.5)), np.full(63, 2.5))

    def test_single_maximum_wins_one_bin_per_level(self, rng):
        x = rng.uniform(0, 1, size=(1, 4, 4))
        x[0, 2, 1] = 10.0
        out = spp_forward(x)
        assert out[0] == 10.0
        assert (out[1:5] == 10.0).sum() == 1
        assert (out[5:21] == 10.0).sum() == 1

    def test_matches_hand_enumerated_bins(self, rng):
        x = rng.normal(size=(2, 4, 4))
        expected = [x[ch][rs, cs].max() for ch in range(2) for rs, cs in HAND_BINS_4x4]
        np.testing.assert_array_equal(spp_forward(x), expected)

    def test_too_small(self):
        with pytest.raises(ShapeError, match="at least 4x4"):
            spp_forward(np.zeros((1, 3, 10)))

    @settings(max_examples=100, deadline=None)
    @given(size=st.integers(1, 300), grid=st.integers(1, 8))
    def test_bins_cover_extent(self, size, grid):
        if size < grid:
            return
        edges = bin_edges(size, grid)
        covered = np.zeros(size, dtype=int)
        for lo, hi in edges:
            assert 0 <= lo < hi <= size
            covered[lo:hi] += 1
        assert covered.min() >= 1
        # floor cores partition the axis exactly
        cores = [((i * size) // grid, ((i + 1) * size) // grid) for i in range(grid)]
        assert cores[0][0] == 0 and cores[-1][1] == size
        assert all(a[1] == b[0] for a, b in zip(cores, cores[1:]))
        assert all(lo <= clo and chi <= hi for (lo, hi), (clo, chi) in zip(edges, cores))

    def test_backward_zero(self, rng):
        x = rng.normal(size=(2, 6, 6))
        assert not spp_backward(x, SPEC, np.zeros(42)).any()

    def test_backward_accumulates_on_multi_bin_winner(self, rng):
        x = rng.uniform(0, 1, size=(1, 4, 4))
        x[0, 1, 3] = 10.0
        g = rng.normal(size=21)
        won = np.flatnonzero(spp_forward(x) == 10.0)
        grad = spp_backward(x, SPEC, g)
        assert len(won) == 3
        assert grad[0, 1, 3] == pytest.approx(g[won].sum(), rel=1e-14)

    @pytest.mark.parametrize("shape", [(1, 4, 4), (3, 9, 7), (4, 16, 16)])
    def test_finite_differences(self, rng, shape):
        x = rng.normal(size=shape)
        probe = rng.normal(size=shape[0] * 21)

        def loss():
            return float(spp_forward(x) @ probe)

        grad = spp_backward(x, SPEC, probe)
        # cells that win no bin have zero gradient both ways
        assert rel_error(grad.reshape(-1), numeric_grad(loss, x), floor=1e-6).max() < 1e-5

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            spp_backward(rng.normal(size=(2, 5, 5)), SPEC, np.zeros(21))


class TestGAP:
    def test_constant(self):
        np.testing.assert_array_equal(gap_forward(np.full((2, 5, 3), 4.0)), [4.0, 4.0])

    def test_hand_mean(self):
        assert gap_forward(np.array([[[0.0, 2.0], [4.0, 6.0]]]))[0] == 3.0

    def test_32_channels(self, rng):
        assert gap_forward(rng.normal(size=(32, 13, 29))).shape == (32,)

    def test_layer_backward(self, rng):
        x = rng.normal(size=(2, 3, 5, 4))
        layer = GAP()
        probe = rng.normal(size=(2, 3))

        def loss():
            return float((layer.forward(x) * probe).sum())

        layer.forward(x)
        grad = layer.backward(probe)
        assert rel_error(grad.reshape(-1), numeric_grad(loss, x)).max() < 1e-5


class TestGapOverSpp:
    def test_hand_case(self, rng):
        x = rng.normal(size=(1, 4, 4))
        maxima = [x[0][rs, cs].max() for rs, cs in HAND_BINS_4x4]
        assert gap_over_spp(x)[0] == pytest.approx(sum(maxima) / 21, rel=1e-14)

    def test_constant(self):
        np.testing.assert_allclose(gap_over_spp(np.full((3, 8, 8), -1.25)), [-1.25] * 3)

    @settings(max_examples=40, deadline=None)
    @given(h=st.integers(4, 80), w=st.integers(4, 80))
    def test_equals_mean_of_spp_bins(self, h, w):
        x = np.random.default_rng(h + 7 * w).normal(size=(5, h, w))
        np.testing.assert_allclose(gap_over_spp(x), spp_forward(x).reshape(5, 21).mean(axis=1), rtol=1e-14)

    def test_spp_then_gap_layers_agree(self, rng):
        x = rng.normal(size=(2, 32, 9, 12))
        out = GAP().forward(SPP().forward(x))
        assert out.shape == (2, 32)
        np.testing.assert_allclose(out, gap_over_spp(x), rtol=1e-14)


class TestDropout:
    def test_inference_identity(self, rng):
        x = rng.normal(size=(4, 7))
        out, mask = dropout_forward(x, 0.5, train=False)
        np.testing.assert_array_equal(out, x)
        assert mask is None

    def test_p_zero(self, rng):
        x = rng.normal(size=10)
        out, mask = dropout_forward(x, 0.0, train=True, rng=rng)
        np.testing.assert_array_equal(out, x)
        assert mask.all()

    def test_statistics(self):
        x = np.full(100_000, 2.0)
        out, mask = dropout_forward(x, 0.5, train=True, rng=np.random.default_rng(0))
        assert 0.49 <= mask.mean() <= 0.51
        assert abs(out.mean() - 2.0) / 2.0 < 0.02

    @pytest.mark.parametrize("p", [-0.1, 1.0, 1.5])
    def test_bad_probability(self, p):
        with pytest.raises(ShapeError):
            dropout_forward(np.zeros(3), p, train=True, rng=np.random.default_rng(0))

    def test_same_stream_same_mask(self):
        x = np.ones(50)
        a, _ = dropout_forward(x, 0.5, True, np.random.default_rng(9))
        b, _ = dropout_forward(x, 0.5, True, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)

    def test_layer_backward_uses_mask(self, rng):
        layer = Dropout(0.5)
        x = rng.normal(size=(3, 8))
        out = layer.forward(x, train=True, rng=np.random.default_rng(1))
        g = layer.backward(np.ones_like(x))
        np.testing.assert_array_equal(g == 0, out == 0)
        np.testing.assert_allclose(g[g != 0], 2.0)


def _layers():
    return [
        (Conv3x3(2, 3), (2, 2, 6, 6)),
        (ReLU(), (2, 3, 4, 4)),
        (MaxPool(), (2, 3, 6, 6)),
        (SPP(), (2, 3, 8, 8)),
        (GAP(), (2, 3, 5, 5)),
        (Dense(12, 4), (2, 3, 2, 2)),
        (Dropout(0.5), (2, 10)),
        (SoftmaxOutput(), (2, 3)),
    ]


@pytest.mark.parametrize("layer,shape", _layers(), ids=lambda v: getattr(v, "kind", ""))
def test_zero_cotangent_gives_zero_gradients(rng, layer, shape):
    for p in layer.params:
        p[...] = rng.normal(size=p.shape)
    out = layer.forward(rng.normal(size=shape), train=True, rng=rng)
    gx = layer.backward(np.zeros_like(out))
    assert gx.shape == shape and not gx.any()
    assert all(not g.any() for g in layer.grads)


@pytest.mark.parametrize("layer,shape", _layers(), ids=lambda v: getattr(v, "kind", ""))
def test_backward_needs_forward(layer, shape):
    with pytest.raises(UsageError):
        layer.backward(np.zeros(1))


@pytest.mark.parametrize("layer,shape", _layers(), ids=lambda v: getattr(v, "kind", ""))
def test_per_sample_output_shape(rng, layer, shape):
    out = layer.forward(rng.normal(size=shape), train=False)
    assert out.shape[1:] == layer.output_shape(shape[1:])


def test_parameterized_kinds_own_weight_and_bias():
    for layer, _ in _layers():
        assert len(layer.params) == (2 if isinstance(layer, (Conv3x3, Dense)) else 0)


@pytest.mark.parametrize("layer,shape", [
    (Conv3x3(1, 4), (1, 1, 8, 8)),
    (Conv3x3(3, 2), (2, 3, 7, 9)),
    (Dense(12, 5), (3, 12)),
    (SoftmaxOutput(), (3, 4)),
    (SPP(), (2, 2, 9, 10)),
    (MaxPool(), (2, 2, 6, 6)),
], ids=lambda v: getattr(v, "kind", ""))
def test_layer_finite_differences(rng, layer, shape):
    x = rng.normal(size=shape)
    for p in layer.params:
        p[...] = rng.normal(size=p.shape)
    probe = rng.normal(size=layer.forward(x).shape)

    def loss():
        return float((layer.forward(x) * probe).sum())

    layer.forward(x)
    gx = layer.backward(probe)
    checks = [(x, gx)] + list(zip(layer.params, [g.copy() for g in layer.grads]))
    for arr, grad in checks:
        idx = rng.choice(arr.size, size=min(arr.size, 20), replace=False)
        assert rel_error(grad.reshape(-1)[idx], numeric_grad(loss, arr, idx), floor=1e-6).max() < 1e-5
