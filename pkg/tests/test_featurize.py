import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from featservo.featurize import (
    CHROMA_REFERENCES,
    STD_FLOOR,
    Standardizer,
    build_pyramid,
    downsample,
    featurize,
    fit_standardizer,
    n_feature_channels,
    raw_features,
)

finite = st.floats(-10, 10, allow_nan=False, width=64)


class TestFeaturize:
    def test_zero_observation_pixel_identity(self):
        out = featurize(np.zeros((3, 32, 32)), "pixel", Standardizer.identity(3))
        assert out.shape == (3, 32, 32)
        assert np.all(out == 0)

    def test_observation_at_mean_is_zero(self, rng):
        mean = rng.uniform(0, 1, 3)
        obs = np.broadcast_to(mean[:, None, None], (3, 16, 16))
        out = featurize(obs, "pixel", Standardizer(mean, rng.uniform(0.5, 2, 3)))
        np.testing.assert_array_equal(out, 0.0)

    def test_exact_colour_match_is_channel_maximum(self, rng):
        obs = rng.uniform(0, 1, (3, 16, 16))
        obs[:, 5, 7] = CHROMA_REFERENCES[0]
        raw = raw_features(obs, "chroma")
        # Gaussian similarity at zero distance is exp(0) = 1
        assert raw[0, 5, 7] == 1.0
        assert raw[0, 5, 7] == raw[0].max()

    def test_chroma_channel_count(self):
        out = featurize(np.zeros((3, 8, 8)), "chroma", Standardizer.identity(n_feature_channels("chroma")))
        assert out.shape == (len(CHROMA_REFERENCES) + 1, 8, 8)

    def test_unknown_featurizer(self):
        with pytest.raises(ValueError, match="unknown featurizer"):
            featurize(np.zeros((3, 8, 8)), "vgg", Standardizer.identity(3))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            featurize(np.zeros((4, 8, 8)), "pixel", Standardizer.identity(4))
        with pytest.raises(ValueError):
            featurize(np.zeros((3, 8, 8)), "pixel", Standardizer.identity(2))

    def test_non_finite_rejected(self):
        obs = np.zeros((3, 4, 4))
        obs[0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            featurize(obs, "pixel", Standardizer.identity(3))

    @pytest.mark.parametrize("name", ["pixel", "chroma"])
    def test_deterministic(self, rng, name):
        obs = rng.uniform(0, 1, (3, 16, 16))
        std = Standardizer(rng.uniform(size=n_feature_channels(name)), rng.uniform(1, 2, n_feature_channels(name)))
        a = featurize(obs, name, std)
        b = featurize(obs.copy(), name, std)
        assert a.tobytes() == b.tobytes()

    def test_batch_matches_single(self, rng):
        obs = rng.uniform(0, 1, (4, 3, 8, 8))
        std = Standardizer.identity(5)
        batch = featurize(obs, "chroma", std)
        for i in range(4):
            np.testing.assert_array_equal(batch[i], featurize(obs[i], "chroma", std))


class TestDownsample:
    def test_halves_resolution(self, rng):
        assert downsample(rng.standard_normal((5, 32, 32))).shape == (5, 16, 16)

    def test_constant(self):
        np.testing.assert_array_equal(downsample(np.full((2, 8, 8), 3.25)), 3.25)

    def test_two_by_two_mean(self):
        out = downsample(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        assert out.shape == (1, 1, 1)
        assert out[0, 0, 0] == 2.5

    def test_odd_resolution(self):
        with pytest.raises(ValueError, match="odd"):
            downsample(np.zeros((1, 5, 5)))

    @settings(max_examples=50, deadline=None)
    @given(
        x=arrays(np.float64, (2, 8, 8), elements=finite),
        y=arrays(np.float64, (2, 8, 8), elements=finite),
        a=finite,
        b=finite,
    )
    def test_linear(self, x, y, a, b):
        lhs = downsample(a * x + b * y)
        rhs = a * downsample(x) + b * downsample(y)
        scale = max(1.0, np.abs(lhs).max())
        assert np.abs(lhs - rhs).max() <= 1e-12 * scale


class TestPyramid:
    def test_depth_zero(self, rng):
        fm = rng.standard_normal((3, 32, 32))
        pyr = build_pyramid(fm, 0)
        assert len(pyr) == 1
        assert pyr[0] is fm or np.array_equal(pyr[0], fm)

    def test_resolutions(self, rng):
        pyr = build_pyramid(rng.standard_normal((3, 32, 32)), 2)
        assert [p.shape[-1] for p in pyr] == [32, 16, 8]

    @pytest.mark.parametrize("levels", [0, 1, 3, 5])
    def test_constant_map(self, levels):
        for p in build_pyramid(np.full((2, 32, 32), -1.5), levels):
            np.testing.assert_array_equal(p, -1.5)

    def test_indivisible(self):
        with pytest.raises(ValueError, match="divisible"):
            build_pyramid(np.zeros((1, 12, 12)), 3)

    @settings(max_examples=30, deadline=None)
    @given(levels=st.integers(0, 4), channels=st.integers(1, 3))
    def test_level_resolution_law(self, levels, channels):
        pyr = build_pyramid(np.ones((channels, 32, 32)), levels)
        assert len(pyr) == levels + 1
        for l, p in enumerate(pyr):
            assert p.shape == (channels, 32 >> l, 32 >> l)


class TestStandardizer:
    def test_identical_samples_floor(self, rng):
        obs = rng.uniform(size=(3, 4, 4))
        raw = np.stack([obs, obs])
        # constant per channel as well, so the std is exactly zero
        raw[:] = raw[:, :, :1, :1]
        s = fit_standardizer(raw)
        np.testing.assert_array_equal(s.std, STD_FLOOR)
        np.testing.assert_allclose(s.mean, obs[:, 0, 0])

    def test_population_convention(self):
        raw = np.stack([np.zeros((1, 2, 2)), np.full((1, 2, 2), 2.0)])
        s = fit_standardizer(raw)
        assert s.mean[0] == 1.0
        assert s.std[0] == 1.0

    def test_empty(self):
        with pytest.raises(ValueError, match="nonempty"):
            fit_standardizer(np.zeros((0, 3, 4, 4)))

    def test_refit_on_standardized_output(self, rng):
        raw = rng.normal(3.0, 2.5, size=(20, 4, 8, 8))
        out = fit_standardizer(raw).apply(raw)
        again = fit_standardizer(out)
        np.testing.assert_allclose(again.mean, 0.0, atol=1e-9)
        np.testing.assert_allclose(again.std, 1.0, atol=1e-6)

    def test_dict_round_trip(self, rng):
        s = Standardizer(rng.standard_normal(5), rng.uniform(0.1, 1, 5))
        t = Standardizer.from_dict(s.to_dict())
        np.testing.assert_array_equal(s.mean, t.mean)
        np.testing.assert_array_equal(s.std, t.std)

    def test_rejects_non_positive_std(self):
        with pytest.raises(ValueError):
            Standardizer(np.zeros(2), np.array([1.0, 0.0]))
