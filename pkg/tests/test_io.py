import dataclasses

import numpy as np
import pytest
from PIL import Image

from scd2te import io as sio
from scd2te.errors import FormatError, IntegrityError, ManifestError
from scd2te.pipeline import predict_image


def write_pgm(path, arr, maxval=255):
    h, w = arr.shape
    body = arr.astype(">u2" if maxval > 255 else np.uint8).tobytes()
    path.write_bytes(f"P5\n# comment\n{w} {h}\n{maxval}\n".encode() + body)


def test_pgm_all_white(tmp_path):
    p = tmp_path / "w.pgm"
    write_pgm(p, np.full((3, 4), 255))
    assert np.array_equal(sio.load_image(p), np.ones((3, 4)))


def test_pgm_sixteen_bit(tmp_path):
    p = tmp_path / "d.pgm"
    write_pgm(p, np.array([[0, 500, 1000]]), maxval=1000)
    assert np.allclose(sio.load_image(p), [[0.0, 0.5, 1.0]])


def test_mask_values(tmp_path):
    p = tmp_path / "m.png"
    Image.fromarray(np.array([[0, 255], [255, 0]], dtype=np.uint8)).save(p)
    assert sio.load_mask(p).tolist() == [[0, 1], [1, 0]]
    q = tmp_path / "m7.pgm"
    write_pgm(q, np.array([[0, 7]]))
    assert sio.load_mask(q).tolist() == [[0, 1]]


def test_png_to_pgm_roundtrip(tmp_path, rng):
    arr = rng.integers(0, 256, (9, 13)).astype(np.uint8)
    Image.fromarray(arr).save(tmp_path / "a.png")
    x = sio.load_image(tmp_path / "a.png")
    sio.save_pgm(tmp_path / "a.pgm", np.round(x * 255).astype(np.uint8))
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5")
    assert np.array_equal(sio.load_image(tmp_path / "a.pgm"), x)


def test_rgb_luminance_and_per_channel(tmp_path):
    rgb = np.zeros((2, 2, 3), dtype=np.uint8)
    rgb[0, 0] = (255, 0, 0)
    rgb[1, 1] = (0, 0, 255)
    Image.fromarray(rgb).save(tmp_path / "c.png")
    lum = sio.load_image(tmp_path / "c.png")
    assert lum[0, 0] == pytest.approx(0.299) and lum[1, 1] == pytest.approx(0.114)
    per = sio.load_image(tmp_path / "c.png", "per_channel")
    assert per.shape == (2, 2, 3) and per[1, 1, 2] == 1.0


def test_unsupported_and_missing(tmp_path):
    Image.fromarray(np.zeros((4, 4), dtype=np.uint8)).save(tmp_path / "x.bmp")
    with pytest.raises(FormatError, match="x.bmp"):
        sio.load_image(tmp_path / "x.bmp")
    with pytest.raises(FormatError, match="nope.png"):
        sio.load_image(tmp_path / "nope.png")
    (tmp_path / "p3.pgm").write_text("P2\n2 1\n255\n0 255\n")
    with pytest.raises(FormatError):
        sio.load_image(tmp_path / "p3.pgm")


# -- manifests ------------------------------------------------------------------

def touch(tmp_path, *names):
    for n in names:
        (tmp_path / n).write_bytes(b"")


def test_manifest_empty(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("")
    assert sio.load_manifest(p).entries == ()


def test_manifest_fixture(tmp_path):
    touch(tmp_path, "a.png", "a_m.png", "b.png", "b_m.png", "c.png", "d.png", "d_m.png")
    p = tmp_path / "m.csv"
    p.write_text("# split,organ,image,mask\n"
                 "train,liver,a.png,a_m.png\n"
                 "validation,liver,b.png,b_m.png\n\n"
                 "same_test,kidney,c.png   # no mask\n"
                 "different_test,colon,d.png,d_m.png\n")
    m = sio.load_manifest(p)
    assert [(e.split, e.organ) for e in m.entries] == [
        ("train", "liver"), ("validation", "liver"), ("same_test", "kidney"),
        ("different_test", "colon")]
    assert m.entries[2].mask_path is None
    assert m.entries[0].image_path == str(tmp_path / "a.png")
    q = tmp_path / "again.csv"
    q.write_text(m.to_text())
    assert sio.load_manifest(q) == m


def test_manifest_errors(tmp_path):
    touch(tmp_path, "a.png", "a_m.png")
    cases = {
        "train,liver,a.png\n": "line|:1",
        "bogus,liver,a.png,a_m.png\n": "split",
        "train,liver\n": ":1",
        "train,liver,a.png,a_m.png\nsame_test,x,a.png\n": "duplicate",
        "\ntrain,liver,zz.png,a_m.png\n": ":2",
    }
    for text, pattern in cases.items():
        p = tmp_path / "m.csv"
        p.write_text(text)
        with pytest.raises(ManifestError, match=pattern):
            sio.load_manifest(p)


# -- model file -----------------------------------------------------------------

def test_model_roundtrip_bytes(tiny_model, tmp_path):
    p = tmp_path / "m.scd2te"
    sio.save_model(tiny_model, p)
    data = p.read_bytes()
    assert data[:6] == b"SCD2TE" and int.from_bytes(data[6:8], "little") == 1
    loaded = sio.load_model(p)
    sio.save_model(loaded, tmp_path / "again.scd2te")
    assert (tmp_path / "again.scd2te").read_bytes() == data


def test_model_roundtrip_predictions(tiny_model, tiny_corpus, tmp_path):
    p = tmp_path / "m.scd2te"
    sio.save_model(tiny_model, p)
    loaded = sio.load_model(p)
    image = tiny_corpus[1][0][0]
    s0, m0 = predict_image(tiny_model, image)
    s1, m1 = predict_image(loaded, image)
    assert np.array_equal(s0, s1) and np.array_equal(m0, m1)


def test_model_corruption_detected(tiny_model):
    data = bytearray(sio.model_bytes(tiny_model))
    for pos in (30, len(data) // 2, len(data) - 20):
        bad = bytearray(data)
        bad[pos] ^= 0x01
        with pytest.raises(IntegrityError, match="block|magic"):
            sio.model_from_bytes(bytes(bad))
    with pytest.raises(IntegrityError, match="truncated"):
        sio.model_from_bytes(bytes(data[:-7]))
    with pytest.raises(IntegrityError, match="magic"):
        sio.model_from_bytes(b"NOTMDL" + bytes(data[6:]))


def test_model_unknown_version(tiny_model):
    data = bytearray(sio.model_bytes(tiny_model))
    data[6:8] = (99).to_bytes(2, "little")
    with pytest.raises(IntegrityError, match="version"):
        sio.model_from_bytes(bytes(data))


def test_model_file_has_little_endian_floats(tiny_model):
    data = sio.model_bytes(tiny_model)
    atoms = tiny_model.layers[0].dictionary.atoms
    assert atoms.astype("<f8").tobytes() in data


def test_config_json_roundtrip(tiny_model):
    cfg = tiny_model.config
    assert sio.config_from_dict(sio.config_to_dict(cfg)) == cfg
    changed = dataclasses.replace(cfg, threshold=0.4)
    assert sio.config_from_dict(sio.config_to_dict(changed)).threshold == 0.4
