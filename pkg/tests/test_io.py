import json

import numpy as np
import pytest
import torch

from progressive3d import io
from progressive3d.mesh import build_icosphere


def test_png_round_trip(tmp_path):
    img = torch.rand(3, 9, 7)
    io.save_png(tmp_path / "a.png", img)
    back = io.load_png(tmp_path / "a.png")
    assert back.shape == (3, 9, 7)
    assert float((back - img).abs().max()) <= 0.5 / 255 + 1e-6
    gray = np.linspace(0, 1, 20).reshape(4, 5)
    io.save_png(tmp_path / "g.png", gray)
    assert io.load_png(tmp_path / "g.png", mode="L").shape == (4, 5)
    assert not list(tmp_path.glob("*.tmp"))


def test_png_clips_and_handles_nan(tmp_path):
    io.save_png(tmp_path / "c.png", np.array([[-1.0, 2.0, np.nan]]))
    np.testing.assert_array_equal(io.load_png(tmp_path / "c.png", mode="L").numpy(), [[0, 1, 0]])


def test_pfm_round_trip(tmp_path):
    d = np.arange(12, dtype=np.float32).reshape(3, 4) / 7
    io.write_pfm(tmp_path / "d.pfm", d)
    np.testing.assert_array_equal(io.read_pfm(tmp_path / "d.pfm"), d)
    # rows are stored bottom-up
    raw = (tmp_path / "d.pfm").read_bytes()
    last_row = np.frombuffer(raw[-16:], dtype="<f4")
    np.testing.assert_array_equal(last_row, d[0])
    with pytest.raises(ValueError):
        io.write_pfm(tmp_path / "x.pfm", np.zeros((2, 2, 2)))


def test_obj_round_trip(tmp_path):
    t = build_icosphere(2)
    v = t.vertices * 1.3
    io.write_obj(tmp_path / "m.obj", v, t)
    verts, back = io.read_obj(tmp_path / "m.obj")
    np.testing.assert_allclose(verts, v, atol=1e-8)
    np.testing.assert_array_equal(back.faces, t.faces)
    np.testing.assert_array_equal(back.faces_uv, t.faces_uv)
    np.testing.assert_allclose(back.uv, t.uv, atol=1e-8)


def test_obj_rejects_quads_and_missing_uv(tmp_path):
    (tmp_path / "q.obj").write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    with pytest.raises(ValueError, match="triangle"):
        io.read_obj(tmp_path / "q.obj")
    (tmp_path / "n.obj").write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nf 1 2 3\n")
    with pytest.raises(ValueError, match="texture"):
        io.read_obj(tmp_path / "n.obj")


def test_load_camera(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"azimuth": 30, "elevation": 10, "distance": 3.5, "fov": 40}))
    cam = io.load_camera(tmp_path / "c.json", image_size=48)
    assert (cam.azimuth, cam.elevation, cam.distance, cam.fov, cam.image_size) == (30, 10, 3.5, 40, 48)
