import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _fd import analytic_grad, check_grad
from faststamp import metrics
from faststamp.data import toy_images
from faststamp.errors import ConfigError, ShapeError
from faststamp.tensor import Tensor, mean
from faststamp.transforms import (
    FILTER_PRESETS, Transform, TransformSpec, color_contrast, default_benign, default_malicious,
    filter_preset, gaussian_blur, jpeg_approx_diff, jpeg_roundtrip, local_tamper, quality_tables,
    sample_rectangle, sample_transform,
)


@pytest.fixture(scope="module")
def crops():
    return toy_images(6, size=(64, 64), seed=3, split="test").astype(np.float64) / 255.0


def test_quality_tables_libjpeg_scaling():
    lq50, _ = quality_tables(50)
    assert lq50[0, 0] == 16 and lq50[7, 7] == 99
    lq100, cq100 = quality_tables(100)
    assert lq100.min() == lq100.max() == 1 and cq100.max() == 1
    lq10, _ = quality_tables(10)
    assert lq10[0, 0] == (16 * 500 + 50) // 100
    with pytest.raises(ValueError):
        quality_tables(0)


def test_jpeg_approx_constant_q100():
    x = np.full((3, 16, 16), 0.3)
    x[1] = 0.7
    y = jpeg_approx_diff(Tensor(x), 100).data
    assert np.max(np.abs(y - x)) < 1 / 255


def test_jpeg_approx_errors_and_range(crops):
    with pytest.raises(ShapeError):
        jpeg_approx_diff(Tensor(np.zeros((3, 12, 16))), 75)
    with pytest.raises(ValueError):
        jpeg_approx_diff(Tensor(crops[0]), 75, rounding="soft")
    y = jpeg_approx_diff(Tensor(crops), 30).data
    assert y.min() >= 0 and y.max() <= 1


def test_jpeg_approx_ste_gradient_matches_surrogate_fd():
    rng = np.random.default_rng(0)
    x = rng.uniform(0.3, 0.7, size=(1, 3, 8, 16))

    def build(rounding):
        return lambda t: mean(jpeg_approx_diff(t, 75, rounding=rounding))

    # the straight-through path back-propagates the rounding-free surrogate
    (g_ste,) = analytic_grad(build("ste"), [x])
    (g_none,) = analytic_grad(build("none"), [x])
    np.testing.assert_allclose(g_ste, g_none, rtol=1e-12, atol=1e-15)
    assert check_grad(build("none"), [x]) < 1e-3


def test_jpeg_approx_tracks_real_codec(crops):
    for q in (50, 75):
        approx = jpeg_approx_diff(Tensor(crops), q).data
        exact = jpeg_roundtrip(crops, q)
        assert np.mean(np.abs(approx - exact)) < 0.02


def test_jpeg_roundtrip_constant_q100_identical():
    x = np.full((3, 16, 16), 77 / 255)
    assert np.array_equal(jpeg_roundtrip(x, 100), x)


def test_jpeg_roundtrip_quality_monotone(crops):
    img = crops[0]
    values = [metrics.psnr(img, jpeg_roundtrip(img, q)) for q in (95, 85, 75, 50, 25, 10)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_jpeg_roundtrip_subsampling_and_errors(crops):
    assert jpeg_roundtrip(crops[0], 75, "4:2:0").shape == crops[0].shape
    with pytest.raises(ValueError):
        jpeg_roundtrip(crops[0], 101)
    with pytest.raises(ShapeError):
        jpeg_roundtrip(np.zeros((3, 10, 16)), 75)


def test_identity_like_settings(crops):
    x = Tensor(crops[:2])
    assert np.array_equal(gaussian_blur(x, 0.0).data, crops[:2])
    assert np.array_equal(color_contrast(x).data, crops[:2])
    assert Transform("identity")(x) is x
    const = np.full((3, 16, 16), 0.42)
    np.testing.assert_allclose(gaussian_blur(Tensor(const), 2.0, 7).data, const, rtol=1e-12)


def test_blur_and_color_validation():
    with pytest.raises(ValueError):
        gaussian_blur(Tensor(np.zeros((3, 8, 8))), 1.0, ksize=4)
    with pytest.raises(ValueError):
        color_contrast(Tensor(np.zeros((3, 8, 8))), contrast=-1)
    with pytest.raises(ValueError):
        filter_preset(Tensor(np.zeros((3, 8, 8))), "sepia")


def _interior(shape):
    rng = np.random.default_rng(sum(shape))
    return rng.uniform(0.35, 0.65, size=shape)


GRAD_CASES = {
    "blur": lambda t: mean(gaussian_blur(t, 0.8, 5)),
    "color": lambda t: mean(color_contrast(t, 0.05, 1.1, 1.2, 8.0)),
    "warm": lambda t: mean(filter_preset(t, "warm")),
    "desaturate": lambda t: mean(filter_preset(t, "desaturate")),
    "tamper_mean": lambda t: mean(local_tamper(t, 0.2, "mean", np.random.default_rng(0))[0]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_differentiable_transform_gradients(name):
    assert check_grad(GRAD_CASES[name], [_interior((1, 3, 8, 8))]) < 1e-3


@pytest.mark.parametrize("preset", sorted(FILTER_PRESETS))
def test_presets_stay_in_range(preset, crops):
    y = filter_preset(Tensor(crops), preset).data
    assert y.min() >= 0 and y.max() <= 1 and y.shape == crops.shape


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 1.0), st.sampled_from(["mean", "blur", "other"]))
@settings(max_examples=25, deadline=None)
def test_tamper_leaves_outside_untouched(seed, area, fill):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(2, 3, 16, 16))
    y, mask = local_tamper(Tensor(x), area, fill, rng)
    outside = np.broadcast_to(mask == 0, x.shape)
    assert np.array_equal(y.data[outside], x[outside])
    target = round(area * 256)
    assert abs(mask[0].sum() - target) <= max(1, int(0.05 * target))


def test_tamper_examples():
    x = np.random.default_rng(1).uniform(size=(3, 16, 16))
    y, mask = local_tamper(Tensor(x), 1.0, "mean")
    np.testing.assert_allclose(y.data, np.broadcast_to(x.mean(axis=(1, 2), keepdims=True), x.shape))
    assert mask.shape == (1, 16, 16) and mask.min() == 1
    y, mask = local_tamper(Tensor(x), 0.001, "mean")
    assert np.array_equal(y.data, x) and mask.sum() == 0
    other = np.zeros_like(x)
    y, mask = local_tamper(x, 0.5, "other", np.random.default_rng(0), other)
    assert np.all(y.data[np.broadcast_to(mask == 1, x.shape)] == 0)
    with pytest.raises(ShapeError):
        local_tamper(Tensor(x), 0.5, "other", other=np.zeros((3, 8, 8)))
    with pytest.raises(ValueError):
        sample_rectangle(16, 16, 0.0, np.random.default_rng(0))


def test_transform_accepts_arrays(crops):
    out = Transform("local_tamper", {"area": 0.2, "fill": "other"})(crops[0], np.random.default_rng(0), crops[1])
    assert isinstance(out, np.ndarray)
    assert isinstance(Transform("jpeg_roundtrip", {"quality": 75})(crops[0]), np.ndarray)
    with pytest.raises(ConfigError):
        Transform("rotate")(crops[0])


def test_sampling_single_entry_and_reproducible():
    only = [TransformSpec("gaussian_blur", 1.0, {"sigma": [0.3, 1.0], "ksize": 5})]
    rng = np.random.default_rng(0)
    assert all(sample_transform(only, rng).kind == "gaussian_blur" for _ in range(20))
    a = [sample_transform(default_benign(), np.random.default_rng(9)).describe() for _ in range(3)]
    r1, r2 = np.random.default_rng(4), np.random.default_rng(4)
    seq1 = [sample_transform(default_benign(), r1).describe() for _ in range(50)]
    seq2 = [sample_transform(default_benign(), r2).describe() for _ in range(50)]
    assert seq1 == seq2 and len(set(a)) == 1
    with pytest.raises(ConfigError):
        sample_transform([], rng)


def test_sampling_frequencies_match_weights():
    dist = default_benign()
    w = np.array([s.weight for s in dist])
    p = w / w.sum()
    rng = np.random.default_rng(123)
    n = 10_000
    kinds = [sample_transform(dist, rng).kind for _ in range(n)]
    counts = np.array([kinds.count(s.kind) for s in dist])
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) < 3 * sigma)
    chi2 = np.sum((counts - n * p) ** 2 / (n * p))
    assert chi2 < 16.27  # 99.9% quantile, 3 degrees of freedom


def test_spec_validation():
    with pytest.raises(ConfigError):
        TransformSpec("rotate")
    with pytest.raises(ConfigError):
        TransformSpec("jpeg_approx", 1.0, {"quality": [0, 90]})
    with pytest.raises(ConfigError):
        TransformSpec("local_tamper", 1.0, {"area": 1.5})
    with pytest.raises(ConfigError):
        TransformSpec("identity", 0.0)
    with pytest.raises(ConfigError):
        TransformSpec.from_dict({"kind": "identity", "strength": 2})
    d = default_malicious()[0].to_dict()
    assert TransformSpec.from_dict(d) == default_malicious()[0]
