import json
import os
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from faststamp import checkpoint, data, imageio
from faststamp.errors import (
    ConfigError, ImageFormatError, IntegrityError, ManifestError, TruncatedBlobError, TruncatedFileError,
)
from faststamp.config import RunConfig

# ------------------------------------------------------------ images

P6_2X2 = b"P6\n# fixture\n2 2\n255\n" + bytes([255, 0, 0, 0, 255, 0, 0, 0, 255, 51, 102, 204])


def test_p6_fixture_decodes_to_known_floats(tmp_path):
    path = tmp_path / "f.ppm"
    path.write_bytes(P6_2X2)
    x = imageio.read_image(str(path))
    assert x.shape == (3, 2, 2)
    np.testing.assert_array_equal(x[:, 0, 0], [1.0, 0.0, 0.0])
    np.testing.assert_array_equal(x[:, 0, 1], [0.0, 1.0, 0.0])
    np.testing.assert_array_equal(x[:, 1, 0], [0.0, 0.0, 1.0])
    np.testing.assert_allclose(x[:, 1, 1], [0.2, 0.4, 0.8], rtol=0, atol=1e-15)


@given(arrays(np.uint8, st.tuples(st.just(3), st.integers(1, 9), st.integers(1, 9))),
       st.sampled_from([".png", ".ppm"]))
@settings(max_examples=30, deadline=None)
def test_roundtrip_pixel_exact(tmp_path_factory, img, ext):
    path = str(tmp_path_factory.mktemp("rt") / f"a{ext}")
    imageio.write_image(path, img)
    assert np.array_equal(imageio.read_image_u8(path), img)
    imageio.write_image(path, img / 255.0)
    assert np.array_equal(imageio.read_image_u8(path), img)


def test_write_quantizes_by_rounding(tmp_path):
    path = str(tmp_path / "q.png")
    imageio.write_image(path, np.full((3, 1, 1), 0.5))
    assert imageio.read_image_u8(path).ravel().tolist() == [128, 128, 128]
    with pytest.raises(ValueError):
        imageio.write_image(path, np.full((3, 1, 1), 1.5))


def test_png_rejections(tmp_path):
    gray = tmp_path / "g.png"
    Image.fromarray(np.zeros((4, 4), np.uint8), "L").save(gray)
    with pytest.raises(ImageFormatError):
        imageio.read_image(str(gray))
    rgba = tmp_path / "a.png"
    Image.fromarray(np.zeros((4, 4, 4), np.uint8), "RGBA").save(rgba)
    with pytest.raises(ImageFormatError):
        imageio.read_image(str(rgba))
    inter = tmp_path / "i.png"
    Image.fromarray(np.zeros((4, 4, 3), np.uint8), "RGB").save(inter)
    raw = bytearray(inter.read_bytes())
    raw[28] = 1  # interlace flag in IHDR
    inter.write_bytes(bytes(raw))
    with pytest.raises(ImageFormatError):
        imageio.read_image(str(inter))
    notpng = tmp_path / "n.png"
    notpng.write_bytes(b"hello")
    with pytest.raises(ImageFormatError):
        imageio.read_image(str(notpng))


def test_truncated_files(tmp_path):
    good = tmp_path / "t.png"
    imageio.write_png(str(good), np.random.default_rng(0).integers(0, 256, (3, 16, 16)).astype(np.uint8))
    raw = good.read_bytes()
    good.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(TruncatedFileError):
        imageio.read_image(str(good))
    ppm = tmp_path / "t.ppm"
    ppm.write_bytes(P6_2X2[:-3])
    with pytest.raises(TruncatedFileError):
        imageio.read_image(str(ppm))
    ppm.write_bytes(b"P6\n2 2")
    with pytest.raises(TruncatedFileError):
        imageio.read_image(str(ppm))


def test_ppm_rejections(tmp_path):
    p = tmp_path / "x.ppm"
    p.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(ImageFormatError):
        imageio.read_image(str(p))
    p.write_bytes(b"P6\n1 1\n65535\n" + bytes(6))
    with pytest.raises(ImageFormatError):
        imageio.read_image(str(p))
    with pytest.raises(ImageFormatError):
        imageio.read_image(str(tmp_path / "x.jpg"))


def test_directory_loading(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(3):
        imageio.write_image(str(tmp_path / f"{i}.png"), rng.integers(0, 256, (3, 8, 8)).astype(np.uint8))
    (tmp_path / "notes.txt").write_text("ignored")
    assert [os.path.basename(p) for p in imageio.list_images(str(tmp_path))] == ["0.png", "1.png", "2.png"]
    arr = imageio.load_image_dir(str(tmp_path), (8, 8))
    assert arr.shape == (3, 3, 8, 8) and arr.max() <= 1
    with pytest.raises(ImageFormatError):
        imageio.load_image_dir(str(tmp_path), (16, 16))
    imageio.write_image(str(tmp_path / "3.png"), np.zeros((3, 4, 4), np.uint8))
    with pytest.raises(ImageFormatError):
        imageio.load_image_dir(str(tmp_path))
    (tmp_path / "sub").mkdir()
    with pytest.raises(FileNotFoundError):
        imageio.load_image_dir(str(tmp_path / "sub"))


# ------------------------------------------------------------ toy corpus


def test_toy_images_deterministic_and_split():
    a = data.toy_images(6, (32, 32), seed=1)
    assert a.dtype == np.uint8 and a.shape == (6, 3, 32, 32)
    assert np.array_equal(a, data.toy_images(6, (32, 32), seed=1))
    assert not np.array_equal(a, data.toy_images(6, (32, 32), seed=1, split="test"))
    with pytest.raises(ValueError):
        data.toy_images(2, split="val")


def test_crops_stay_inside_their_band():
    photo = np.zeros((300, 500, 3), np.uint8)
    photo[:, 350:] = 255  # right 30% white
    rng = np.random.default_rng(0)
    train = [data._crop(photo, 32, rng, (0.0, data.TRAIN_FRACTION)) for _ in range(100)]
    test = [data._crop(photo, 32, rng, (data.TRAIN_FRACTION, 1.0)) for _ in range(100)]
    assert max(c.max() for c in train) < 64
    assert min(c.min() for c in test) > 192


def test_procedural_fallback_shape():
    img = data.procedural_image((24, 40), np.random.default_rng(0))
    assert img.shape == (3, 24, 40) and img.dtype == np.uint8


def test_make_toy_dataset(tmp_path):
    paths = data.make_toy_dataset(str(tmp_path), n_train=3, n_test=2, size=(16, 16), seed=0)
    assert data.load_dataset(paths["train"], (16, 16)).shape == (3, 3, 16, 16)
    assert len(imageio.list_images(paths["test"])) == 2


# ------------------------------------------------------------ checkpoint container


@pytest.fixture
def ckpt(tmp_path):
    recs = [("a", "param", np.arange(6, dtype=np.float32).reshape(2, 3)), ("b", "buffer", np.ones(4))]
    checkpoint.write(str(tmp_path / "c"), recs, {"note": "x"})
    return tmp_path / "c"


def test_checkpoint_roundtrip(ckpt):
    meta, dtype, recs = checkpoint.read(str(ckpt))
    assert meta == {"note": "x"} and dtype == "float32"
    assert [r[0] for r in recs] == ["a", "b"] and recs[0][2].shape == (2, 3)
    assert np.array_equal(recs[0][2], np.arange(6).reshape(2, 3))


def test_checkpoint_error_kinds(ckpt):
    blob = ckpt / "weights.bin"
    raw = blob.read_bytes()
    blob.write_bytes(raw[:-4])
    with pytest.raises(TruncatedBlobError):
        checkpoint.read(str(ckpt))
    blob.write_bytes(raw + b"\0")
    with pytest.raises(IntegrityError):
        checkpoint.read(str(ckpt))
    blob.write_bytes(raw)
    man = json.loads((ckpt / "manifest.json").read_text())
    man["crc32"] = zlib.crc32(raw) ^ 1
    (ckpt / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(IntegrityError):
        checkpoint.read(str(ckpt))
    (ckpt / "manifest.json").write_text("{not json")
    with pytest.raises(ManifestError):
        checkpoint.read(str(ckpt))
    del man["dtype"]
    (ckpt / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(ManifestError):
        checkpoint.read(str(ckpt))
    with pytest.raises(ManifestError):
        checkpoint.read(str(ckpt.parent / "missing"))


def test_int32_checkpoint_range(tmp_path):
    checkpoint.write(str(tmp_path / "i"), [("q", "param", np.array([-5, 7]))], {}, dtype="int32")
    _, dtype, recs = checkpoint.read(str(tmp_path / "i"))
    assert dtype == "int32" and recs[0][2].tolist() == [-5, 7]
    with pytest.raises(ValueError):
        checkpoint.write(str(tmp_path / "j"), [("q", "param", np.array([2**31]))], {}, dtype="int32")


# ------------------------------------------------------------ run configuration


def test_run_config_defaults_and_roundtrip(tmp_path):
    cfg = RunConfig()
    assert cfg.model_config().message_length == 16 and cfg.fixed_spec().name == "Q6.10"
    path = tmp_path / "run.json"
    cfg.dump(str(path))
    assert RunConfig.load(str(path)).to_dict() == cfg.to_dict()


def test_run_config_rejects_unknown_keys():
    for bad in ({"extra": 1}, {"train": {"learning_rate": 1}}, {"model": {"depth": 3}},
                {"quant": {"bits": 16}}, {"paths": {"cache": "x"}}, {"transforms": {"odd": []}},
                {"transforms": {"benign": [{"kind": "identity", "strength": 1}]}}, {"seed": "zero"}):
        with pytest.raises(ConfigError):
            RunConfig.from_dict(bad)


def test_run_config_invalid_values(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"quant": {"qformat": "Q20.20"}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train": {"mode": "fragile"}})
    p = tmp_path / "bad.json"
    p.write_text("{oops")
    with pytest.raises(ConfigError):
        RunConfig.load(str(p))


def test_precedence_defaults_file_flags(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"seed": 5, "train": {"iterations": 300, "lr": 1e-3},
                                "paths": {"out_dir": "from_file"}}))
    base = RunConfig.load(str(path))
    tc = base.train_config()
    assert (tc.seed, tc.iterations, tc.lr, tc.out_dir, tc.batch_size) == (5, 300, 1e-3, "from_file", 8)
    over = base.override(seed=9, train={"iterations": 50, "lr": None}, paths={"out_dir": "flag"})
    tc = over.train_config()
    assert (tc.seed, tc.iterations, tc.lr, tc.out_dir) == (9, 50, 1e-3, "flag")


def test_transform_overrides_reach_training():
    cfg = RunConfig.from_dict({"transforms": {"benign": [{"kind": "identity"}]}, "train": {"mode": "semi_fragile"}})
    benign, malicious = cfg.train_config().transform_banks()
    assert [t.kind for t in benign] == ["identity"] and malicious[0].kind == "local_tamper"
