import numpy as np
import pytest
from PIL import Image

from photorefine.errors import ValidationError
from photorefine.fileio import (
    read_color,
    read_json,
    read_mask,
    read_pfm,
    read_ply,
    write_color,
    write_json,
    write_mask,
    write_pfm,
    write_ply,
)


def test_pfm_round_trip(tmp_path, rng):
    for shape in ((5, 7), (5, 7, 3)):
        data = rng.normal(size=shape).astype(np.float32).astype(float)
        write_pfm(tmp_path / "a.pfm", data)
        back = read_pfm(tmp_path / "a.pfm")
        assert back.shape == shape and np.array_equal(back, data)


def test_pfm_stores_rows_bottom_up(tmp_path):
    data = np.array([[1.0, 2.0], [3.0, 4.0]])
    write_pfm(tmp_path / "a.pfm", data)
    raw = (tmp_path / "a.pfm").read_bytes()
    body = np.frombuffer(raw[raw.index(b"-1.0\n") + 5 :], "<f4")
    assert body.tolist() == [3.0, 4.0, 1.0, 2.0]


def test_pfm_big_endian_and_errors(tmp_path):
    data = np.array([[1.5, -2.0]], ">f4")
    (tmp_path / "b.pfm").write_bytes(b"Pf\n2 1\n1.0\n" + data.tobytes())
    assert read_pfm(tmp_path / "b.pfm").tolist() == [[1.5, -2.0]]
    (tmp_path / "c.pfm").write_bytes(b"P6\n2 1\n255\n")
    with pytest.raises(ValidationError):
        read_pfm(tmp_path / "c.pfm")
    (tmp_path / "d.pfm").write_bytes(b"Pf\n2 2\n-1.0\n" + b"\0" * 8)
    with pytest.raises(ValidationError):
        read_pfm(tmp_path / "d.pfm")
    with pytest.raises(ValidationError):
        write_pfm(tmp_path / "e.pfm", np.zeros((2, 2, 2)))


def test_mask_round_trip(tmp_path, rng):
    mask = rng.random((6, 9)) > 0.5
    for name in ("m.pgm", "m.png"):
        write_mask(tmp_path / name, mask)
        assert np.array_equal(read_mask(tmp_path / name), mask)


def test_color_png_and_inverse_gamma(tmp_path):
    px = np.array([[[0.0, 0.5, 1.0]]])
    write_color(tmp_path / "c.png", px)
    assert np.asarray(Image.open(tmp_path / "c.png")).tolist() == [[[0, 128, 255]]]
    lin = read_color(tmp_path / "c.png")
    assert lin[0, 0].tolist() == pytest.approx([0.0, 128 / 255, 1.0])
    g = read_color(tmp_path / "c.png", inverse_gamma=True)
    assert g[0, 0, 1] == pytest.approx((128 / 255) ** 2.2)
    write_pfm(tmp_path / "c.pfm", np.full((2, 2, 3), 0.25))
    assert np.allclose(read_color(tmp_path / "c.pfm", inverse_gamma=True), 0.25)


def test_ply_round_trip(tmp_path, rng):
    v = rng.normal(size=(10, 3)).astype(np.float32).astype(float)
    f = rng.integers(0, 10, (6, 3))
    n = rng.normal(size=(10, 3)).astype(np.float32).astype(float)
    write_ply(tmp_path / "a.ply", v, f, n)
    v2, f2, n2 = read_ply(tmp_path / "a.ply")
    assert np.array_equal(v2, v) and np.array_equal(f2, f) and np.array_equal(n2, n)
    write_ply(tmp_path / "b.ply", v, f)
    assert read_ply(tmp_path / "b.ply")[2] is None
    (tmp_path / "c.ply").write_bytes(b"obj\n")
    with pytest.raises(ValidationError):
        read_ply(tmp_path / "c.ply")


def test_json_round_trip(tmp_path):
    obj = {"b": [1, 2.5], "a": {"x": "y"}}
    write_json(tmp_path / "a.json", obj)
    assert read_json(tmp_path / "a.json") == obj
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(ValidationError):
        read_json(tmp_path / "bad.json")
    with pytest.raises(ValueError):
        write_json(tmp_path / "nan.json", {"x": float("nan")})
