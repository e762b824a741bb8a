import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from faststamp import metrics
from faststamp.errors import ConfigError, IntegrityError, ShapeError, ShapeMismatchError
from faststamp.model import (
    TOY_CONFIG, BitMessage, ModelConfig, decode, encode, encoder_forward, init_params, load_checkpoint,
    param_count, save_checkpoint, secret_upsample,
)
from faststamp.tensor import Tensor

MICRO = ModelConfig(image_size=(16, 16), message_length=8, grid=(4, 4), enc_down=(4, 8), enc_strides=(2, 2),
                    enc_up=(4, 4), dec_down=(4, 8, 8), dec_strides=(2, 2, 1), dec_up=(8, 4, 4))


@pytest.fixture(scope="module")
def default_params():
    return init_params(0)


@pytest.fixture(scope="module")
def toy_params():
    return init_params(0, TOY_CONFIG)


def test_default_parameter_budget(default_params):
    per, total = param_count(default_params, "encoder")
    assert 40_000 <= total <= 55_000
    assert per["enc.msg.w"] == 128 * 16 * 16 == 32768
    assert default_params.tensors["enc.msg.w"].shape == (256, 128)


def test_init_deterministic_and_bn_defaults():
    a, b = init_params(7, MICRO), init_params(7, MICRO)
    c = init_params(8, MICRO)
    assert all(np.array_equal(a.tensors[n].data, b.tensors[n].data) for n in a.tensors)
    assert any(not np.array_equal(a.tensors[n].data, c.tensors[n].data) for n in a.tensors if n.endswith(".pw"))
    for n, buf in a.buffers.items():
        if n.endswith(".bn.var"):
            assert np.all(buf == 1)
        if n.endswith(".bn.mean"):
            assert np.all(buf == 0)
    for n, t in a.tensors.items():
        if n.endswith(".bn.scale"):
            assert np.all(t.data == 1)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(image_size=(100, 100))
    with pytest.raises(ConfigError):
        ModelConfig(enc_down=(8, 12, 32, 64, 64))
    with pytest.raises(ConfigError):
        ModelConfig(kernel_size=4)
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"bogus": 1})
    assert ModelConfig.from_dict(TOY_CONFIG.to_dict()) == TOY_CONFIG


def test_encoder_stage_sizes_default():
    sizes = ModelConfig().stage_sizes("encoder")
    assert sizes == [(128, 128), (64, 64), (32, 32), (16, 16), (8, 8), (4, 4)]
    assert ModelConfig().stage_sizes("decoder")[-1] == (4, 4)


def test_trace_shapes_and_skip_sizes(toy_params):
    trace = []
    x = Tensor(np.full((1, 3, 64, 64), 0.5, dtype=np.float32))
    encoder_forward(toy_params, x, Tensor(np.zeros((1, 16), dtype=np.float32)), trace=trace)
    spatial = [shape[-2:] for _, shape in trace]
    assert spatial == [(32, 32), (16, 16), (8, 8), (4, 4), (2, 2), (4, 4), (8, 8), (16, 16), (32, 32), (64, 64)]


def test_secret_plane_matches_brute_force_projection():
    p = init_params(3, MICRO, dtype=np.float64)
    s = np.array([1, 0, 1, 1, 0, 0, 1, 0])
    w, b = p.tensors["enc.msg.w"].data, p.tensors["enc.msg.b"].data
    f, gw = MICRO.upsample_factor, MICRO.grid[1]
    rows = [(i // f) * gw + j // f for i in range(16) for j in range(16)]
    want = (w[rows] @ s + b[rows]).reshape(16, 16)
    got = secret_upsample(s, p)
    assert got.shape == (1, 16, 16)
    np.testing.assert_allclose(got[0], want, rtol=1e-12)
    blocks = got[0].reshape(4, f, 4, f)
    assert np.all(blocks == blocks[:, :1, :, :1])


def test_zero_message_zero_bias_gives_zero_plane():
    p = init_params(0, MICRO)
    p.tensors["enc.msg.b"].data[:] = 0
    assert np.all(secret_upsample(np.zeros(8), p) == 0)
    with pytest.raises(ShapeError):
        secret_upsample(np.zeros(7), p)


def test_default_encode_shape_and_range(default_params):
    x = np.random.default_rng(0).uniform(size=(3, 128, 128))
    y = encode(x, BitMessage.random(128, np.random.default_rng(1)), default_params)
    assert y.shape == (3, 128, 128)
    assert y.min() >= 0 and y.max() <= 1
    assert decode(y, default_params).shape == (128,)


@given(st.integers(0, 2**32 - 1), st.floats(0, 1))
@settings(max_examples=10, deadline=None)
def test_encode_range_and_purity(seed, level):
    rng = np.random.default_rng(seed)
    p = init_params(seed % 1000, MICRO)
    for t in p.tensors.values():
        t.data = t.data * rng.uniform(1, 20)  # large weights stress the tanh bound
    x = np.clip(rng.uniform(size=(2, 3, 16, 16)) * level, 0, 1)
    s = rng.integers(0, 2, size=(2, 8))
    y1, y2 = encode(x, s, p), encode(x, s, p)
    assert np.array_equal(y1, y2)
    assert y1.min() >= 0 and y1.max() <= 1
    d = decode(y1, p)
    assert d.shape == (2, 8) and d.min() >= 0 and d.max() <= 1


def test_input_validation(toy_params):
    with pytest.raises(ValueError):
        encode(np.full((3, 64, 64), 1.5), np.zeros(16), toy_params)
    with pytest.raises(ShapeError):
        encode(np.zeros((3, 32, 32)), np.zeros(16), toy_params)
    with pytest.raises(ShapeError):
        decode(np.zeros((1, 64, 64)), toy_params)
    with pytest.raises(ShapeError):
        encode(np.zeros((2, 3, 64, 64)), np.zeros((1, 16)), toy_params)


def test_untrained_bra_is_chance():
    rng = np.random.default_rng(11)
    bits, soft = [], []
    for seed in range(4):
        p = init_params(seed, MICRO)
        x = rng.uniform(size=(64, 3, 16, 16))
        s = rng.integers(0, 2, size=(64, 8))
        bits.append(s)
        soft.append(decode(encode(x, s, p), p))
    value = metrics.bra(np.concatenate(bits).ravel(), np.concatenate(soft).ravel())  # 2048 bits
    assert abs(value - 50.0) <= 5.0


def test_bit_message_hex():
    m = BitMessage([1, 0, 1, 0, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 1])
    assert m.to_hex() == "af01"
    assert BitMessage.from_hex("AF01", 16) == m
    assert BitMessage.from_hex("0x5", 3).bits.tolist() == [1, 0, 1]
    for bad in ("af0", "zz01", "af011"):
        with pytest.raises(ValueError):
            BitMessage.from_hex(bad, 16)
    with pytest.raises(ValueError):
        BitMessage.from_hex("f", 3)
    with pytest.raises(ValueError):
        BitMessage([0, 2])


@given(st.lists(st.integers(0, 1), min_size=1, max_size=130))
def test_bit_message_hex_roundtrip(bits):
    m = BitMessage(bits)
    assert BitMessage.from_hex(m.to_hex(), len(bits)) == m


def test_checkpoint_roundtrip_byte_identical(tmp_path):
    p = init_params(5, MICRO)
    save_checkpoint(p, tmp_path / "a")
    q = load_checkpoint(tmp_path / "a")
    save_checkpoint(q, tmp_path / "b")
    for f in ("weights.bin", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert q.config == MICRO
    assert all(np.array_equal(p.buffers[n], q.buffers[n]) for n in p.buffers)


def test_checkpoint_errors(tmp_path):
    p = init_params(5, MICRO)
    save_checkpoint(p, tmp_path / "ck")
    with pytest.raises(ShapeMismatchError):
        load_checkpoint(tmp_path / "ck", config=ModelConfig(**{**MICRO.to_dict(), "message_length": 4}))
    blob = tmp_path / "ck" / "weights.bin"
    raw = bytearray(blob.read_bytes())
    raw[10] ^= 0xFF
    blob.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "ck")
