import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from faststamp import metrics
from faststamp.errors import ShapeError
from faststamp.metrics import MetricsReport, bpp, bra, full_conv_macs, mac_count, psnr, sepconv_macs, ssim
from faststamp.model import TOY_CONFIG, ModelConfig

skm = pytest.importorskip("skimage.metrics")


def test_psnr_examples():
    x = np.random.default_rng(0).uniform(0.2, 0.8, (3, 8, 8))
    assert psnr(x, x) == math.inf
    assert psnr(x, x + 0.1) == pytest.approx(20.0, abs=1e-9)
    y = np.clip(x + np.random.default_rng(1).normal(0, 0.05, x.shape), 0, 1)
    assert psnr(x, y) == psnr(y, x)
    with pytest.raises(ShapeError):
        psnr(x, x[:, :4])


def test_psnr_matches_reference():
    rng = np.random.default_rng(2)
    x, y = rng.uniform(size=(3, 16, 16)), rng.uniform(size=(3, 16, 16))
    assert psnr(x, y) == pytest.approx(skm.peak_signal_noise_ratio(x, y, data_range=1.0), rel=1e-12)


def test_psnr_decreases_with_noise_amplitude():
    rng = np.random.default_rng(3)
    x, n = rng.uniform(size=(3, 16, 16)), rng.normal(size=(3, 16, 16))
    values = [psnr(x, x + a * n) for a in (0.01, 0.02, 0.05, 0.1, 0.3)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_ssim_examples():
    rng = np.random.default_rng(4)
    x = rng.uniform(size=(3, 32, 32))
    assert ssim(x, x) == 1.0
    checker = (np.indices((32, 32)).sum(0) // 4 % 2).astype(float)[None].repeat(3, 0)
    assert ssim(checker, 1 - checker) < 0.5
    y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
    assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-12)
    with pytest.raises(ShapeError):
        ssim(x[:, :10, :10], x[:, :10, :10])


@pytest.mark.parametrize("seed", range(3))
def test_ssim_matches_reference_implementation(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(3, 40, 36))
    y = np.clip(x + rng.normal(0, 0.08, x.shape), 0, 1)
    ref = skm.structural_similarity(metrics.to_luma(x), metrics.to_luma(y), data_range=1.0,
                                    gaussian_weights=True, sigma=1.5, use_sample_covariance=False)
    assert ssim(x, y) == pytest.approx(ref, abs=1e-10)


def test_to_luma_rec601():
    x = np.zeros((3, 2, 2))
    x[1] = 1.0
    np.testing.assert_allclose(metrics.to_luma(x), 0.587)


def test_bra_examples():
    s = np.array([0, 1, 1, 0, 1])
    assert bra(s, s) == 100.0
    assert bra(s, 1 - s) == 0.0
    assert bra(s, np.array([0.2, 0.7, 0.5, 0.49, 0.1])) == 80.0
    with pytest.raises(ShapeError):
        bra(s, s[:3])


def test_bra_random_guesses_near_half():
    rng = np.random.default_rng(5)
    n = 20_000
    value = bra(rng.integers(0, 2, n), rng.integers(0, 2, n))
    half_width = 100 * 3.29 * math.sqrt(0.25 / n)  # 99.9% binomial interval
    assert abs(value - 50.0) < half_width


@given(st.lists(st.integers(0, 1), min_size=1, max_size=64), st.integers(0, 2**32 - 1))
@settings(max_examples=50)
def test_bra_permutation_invariant(bits, seed):
    s = np.array(bits)
    rng = np.random.default_rng(seed)
    s_hat = rng.uniform(size=s.size)
    p = rng.permutation(s.size)
    assert bra(s, s_hat) == bra(s[p], s_hat[p])
    assert 0.0 <= bra(s, s_hat) <= 100.0


def test_bpp_rows():
    assert f"{bpp(30, 128, 128, 3):.1e}" == "6.1e-04"
    assert f"{bpp(256, 128, 128, 3):.1e}" == "5.2e-03"
    assert bpp(128, 128, 128, 3) == pytest.approx(2.604e-3, rel=1e-3)
    assert bpp(16, 64, 64, 3) == 16 / (64 * 64 * 3)
    with pytest.raises(ValueError):
        bpp(16, 0, 64, 3)


def test_metrics_report_invariants_and_roundtrip():
    r = MetricsReport(psnr=math.inf, ssim=0.95, bra=100.0, bpp=1e-3, macs={"total": 5}, label="x")
    rec = r.to_record()
    assert rec["psnr"] == metrics.PSNR_CAP
    back = MetricsReport.from_record(rec)
    assert back.ssim == 0.95 and back.macs == {"total": 5}
    for bad in (dict(ssim=1.5), dict(bra=101.0), dict(bpp=0.0)):
        kw = dict(psnr=30.0, ssim=0.9, bra=99.0, bpp=1e-3) | bad
        with pytest.raises(ValueError):
            MetricsReport(**kw)


def test_mac_examples():
    assert sepconv_macs(2, 3, 4, 4, 3)[1] == 96
    assert sepconv_macs(2, 3, 1, 1, 3) == (18, 6)
    assert full_conv_macs(2, 3, 1, 1, 1) == 6


@pytest.mark.parametrize("config", [ModelConfig(), TOY_CONFIG], ids=["default", "toy"])
@pytest.mark.parametrize("part", ["encoder", "decoder"])
def test_separable_cheaper_than_full(config, part):
    layers, total = mac_count(config, part)
    convs = {k: v for k, v in layers.items() if "depthwise" in v}
    assert convs
    for name, v in convs.items():
        if name == "dec.head":
            # a single output channel: K*K*Cin + Cin exceeds K*K*Cin, so the
            # separable form is one pointwise pass more expensive here
            assert v["depthwise"] + v["pointwise"] == v["full_equivalent"] + v["pointwise"]
            continue
        assert v["depthwise"] + v["pointwise"] < v["full_equivalent"]
    assert total > 0


def test_message_linear_macs():
    layers, _ = mac_count(ModelConfig(), "encoder")
    assert layers["enc.msg"]["linear"] == 16 * 16 * 128
