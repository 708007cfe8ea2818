import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffvicl.core import Latent
from diffvicl.errors import DegenerateStatisticsError, DimensionError
from diffvicl.guidance import NoisePrediction, adain, blend_factor, channel_moments, swap_guide


def rand_pred(seed, shape=(4, 8, 8), source="default"):
    rng = np.random.default_rng(seed)
    return NoisePrediction(rng.standard_normal(shape).astype(np.float32), source=source)


class TestSwapGuide:
    def test_first_step_returns_default_exactly(self):
        d, m = rand_pred(0), rand_pred(1, source="modified")
        out = swap_guide(d, m, t=70, T=70, gamma=3.5)
        assert np.array_equal(out.eta, d.eta)
        assert out.source == "combined"

    def test_zero_gamma_disables_guidance(self):
        d, m = rand_pred(2), rand_pred(3, source="modified")
        for t in (1, 35, 70):
            assert np.array_equal(swap_guide(d, m, t=t, T=70, gamma=0.0).eta, d.eta)

    def test_documented_scalar_case(self):
        d = NoisePrediction(np.zeros((1, 1, 1), np.float32))
        m = NoisePrediction(np.ones((1, 1, 1), np.float32), source="modified")
        out = swap_guide(d, m, t=1, T=70, gamma=3.5)
        assert out.eta[0, 0, 0] == pytest.approx(3.45, abs=1e-6)

    def test_identical_inputs_pass_through_at_every_t(self):
        d = rand_pred(4)
        m = NoisePrediction(d.eta.copy(), source="modified")
        for t in range(1, 11):
            assert np.allclose(swap_guide(d, m, t=t, T=10, gamma=3.5).eta, d.eta, atol=1e-6)

    @given(gamma=st.floats(0, 10), T=st.integers(1, 100))
    @settings(max_examples=40)
    def test_blend_grows_as_denoising_progresses(self, gamma, T):
        weights = [blend_factor(t, T, gamma) for t in range(T, 0, -1)]
        assert all(w >= 0 for w in weights)
        assert all(b >= a for a, b in zip(weights, weights[1:]))
        assert weights[0] == 0.0

    @given(seed=st.integers(0, 1000), t=st.integers(1, 10), a=st.floats(-2, 2), b=st.floats(-2, 2))
    @settings(max_examples=30)
    def test_affine_in_both_inputs(self, seed, t, a, b):
        d, m = rand_pred(seed), rand_pred(seed + 1, source="modified")
        w = blend_factor(t, 10, 3.5)
        expected = d.eta + np.float32(w) * (m.eta - d.eta)
        out = swap_guide(d, m, t=t, T=10, gamma=3.5)
        assert np.allclose(out.eta, expected, atol=1e-6)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            swap_guide(rand_pred(0), rand_pred(1, shape=(4, 4, 4), source="modified"), t=1, T=10, gamma=1.0)

    def test_step_position_bounds(self):
        with pytest.raises(ValueError):
            blend_factor(0, 10, 1.0)
        with pytest.raises(ValueError):
            blend_factor(11, 10, 1.0)

    def test_non_finite_prediction_rejected(self):
        with pytest.raises(ValueError):
            NoisePrediction(np.full((1, 1, 1), np.inf, np.float32))


class TestAdain:
    def test_self_normalization_is_identity(self):
        z = Latent(np.random.default_rng(0).standard_normal((4, 8, 8)).astype(np.float32))
        out = adain(z, z)
        assert np.allclose(out.values, z.values, atol=1e-5)

    def test_affine_form(self):
        # channel values {-1, 1}: mean 0, spread 1; target {-1, 5}: mean 2, spread 3
        z_d = np.zeros((1, 2, 2), np.float32)
        z_d[0] = [[-1, 1], [1, -1]]
        z_b = np.zeros((1, 2, 2), np.float32)
        z_b[0] = [[-1, 5], [5, -1]]
        out = adain(Latent(z_d), Latent(z_b))
        assert np.allclose(out.values, 3.0 * z_d + 2.0, atol=1e-5)

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=40)
    def test_output_moments_match_target(self, seed):
        rng = np.random.default_rng(seed)
        z_d = Latent((rng.standard_normal((4, 8, 8)) * 3 + 1).astype(np.float32))
        z_b = Latent((rng.standard_normal((4, 8, 8)) * 0.5 - 2).astype(np.float32))
        out = adain(z_d, z_b)
        # independent moment oracle over spatial positions
        for c in range(4):
            assert out.values[c].mean() == pytest.approx(z_b.values[c].mean(), abs=1e-5)
            assert out.values[c].std() == pytest.approx(z_b.values[c].std(), abs=1e-5)

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=30)
    def test_idempotent_onto_target_statistics(self, seed):
        rng = np.random.default_rng(seed)
        z_d = Latent(rng.standard_normal((4, 8, 8)).astype(np.float32))
        z_b = Latent(rng.standard_normal((4, 8, 8)).astype(np.float32))
        once = adain(z_d, z_b)
        twice = adain(once, z_b)
        assert np.max(np.abs(twice.values - once.values)) <= 1e-5

    def test_constant_channel_raises_naming_channels(self):
        z_d = np.random.default_rng(1).standard_normal((3, 4, 4)).astype(np.float32)
        z_d[1] = 7.0
        z_b = np.random.default_rng(2).standard_normal((3, 4, 4)).astype(np.float32)
        with pytest.raises(DegenerateStatisticsError) as err:
            adain(Latent(z_d), Latent(z_b))
        assert err.value.channels == (1,)

    def test_identity_substitution_for_degenerate_channels(self):
        z_d = np.random.default_rng(3).standard_normal((3, 4, 4)).astype(np.float32)
        z_d[1] = 7.0
        z_b = np.random.default_rng(4).standard_normal((3, 4, 4)).astype(np.float32)
        out = adain(Latent(z_d), Latent(z_b), on_degenerate="identity")
        assert np.array_equal(out.values[1], z_d[1])  # untouched channel
        assert out.values[0].mean() == pytest.approx(z_b[0].mean(), abs=1e-5)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            adain(Latent(np.zeros((4, 8, 8), np.float32)), Latent(np.zeros((4, 4, 4), np.float32)))

    def test_channel_moments_oracle(self):
        v = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
        mean, std = channel_moments(v)
        assert mean[0, 0, 0] == pytest.approx(v[0].mean())
        assert std[1, 0, 0] == pytest.approx(v[1].std())
