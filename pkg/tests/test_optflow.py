import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import textured
from crossgan.dataset import Frame, VideoSequence
from crossgan.errors import FlowFormatError, NumericError, ShapeError
from crossgan.optflow import (DEFAULT_RANGE, FlowCache, FlowConfig, FlowField, FlowImage, FlowRange,
                              decode_flow, encode_flow, estimate_flow, load_precomputed_flow,
                              write_flow)


def _epe(f, dx, dy):
    return np.hypot(f.u - dx, f.v - dy)


@pytest.mark.parametrize("dx,dy", [(2, 0), (0, 1), (1, -1), (-2, 1), (3, 0)])
def test_constant_translation(dx, dy):
    a = textured(64, 64, seed=abs(dx) + 3 * abs(dy))
    b = np.roll(a, (dy, dx), axis=(0, 1))
    f = estimate_flow(a, b)
    assert _epe(f, dx, dy).mean() <= 0.25


def test_identical_frames_give_zero_flow():
    a = textured(48, 64, seed=3)
    f = estimate_flow(a, a)
    assert max(np.abs(f.u).max(), np.abs(f.v).max()) <= 0.05


def test_flow_sign_convention():
    # content moving right and down gives positive u and v
    a = textured(64, 64, seed=1)
    f = estimate_flow(a, np.roll(a, (1, 2), axis=(0, 1)))
    assert f.u.mean() > 1.5 and f.v.mean() > 0.5


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        estimate_flow(textured(32, 32), textured(32, 40))


def test_accepts_frames():
    a = textured(32, 32, seed=2)
    fa, fb = Frame(a, 0, "v"), Frame(np.roll(a, 1, axis=1), 1, "v")
    f = estimate_flow(fa, fb)
    assert f.shape == (32, 32)


# --------------------------------------------------------------------------
# encoding

def test_encode_three_four_five():
    f = FlowField(np.full((2, 2), 3.0), np.full((2, 2), 4.0))
    raw = encode_flow(f, FlowRange((-10, -10, 0), (10, 10, 10))).raw()
    assert np.allclose(raw[..., 2], 5.0, atol=1e-6)


def test_encode_zero_field():
    raw = encode_flow(FlowField(np.zeros((3, 3)), np.zeros((3, 3)))).raw()
    assert np.allclose(raw, 0.0, atol=1e-6)


def test_encode_maps_range_to_unit_interval():
    rng = FlowRange((-2.0, -1.0, 0.0), (2.0, 3.0, 4.0))
    f = FlowField(np.array([[-2.0, 2.0]]), np.array([[-1.0, 3.0]]))
    ch = encode_flow(f, rng).channels
    assert np.allclose(ch[..., 0], [-1, 1]) and np.allclose(ch[..., 1], [-1, 1])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, (6, 7), elements=st.floats(-4, 4, width=32)),
       arrays(np.float32, (6, 7), elements=st.floats(-4, 4, width=32)))
def test_magnitude_channel(u, v):
    img = encode_flow(FlowField(u, v), DEFAULT_RANGE)
    expected = np.sqrt(u.astype(np.float64) ** 2 + v.astype(np.float64) ** 2)
    assert np.abs(img.raw()[..., 2] - expected).max() <= 1e-6
    assert np.abs(FlowField(u, v).magnitude() - expected).max() <= 1e-6


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, (5, 5), elements=st.floats(-4, 4, width=32)),
       arrays(np.float32, (5, 5), elements=st.floats(-4, 4, width=32)))
def test_round_trip(u, v):
    back = decode_flow(encode_flow(FlowField(u, v)))
    tol = (DEFAULT_RANGE.hi[0] - DEFAULT_RANGE.lo[0]) / 255
    assert np.abs(back.u - u).max() <= tol and np.abs(back.v - v).max() <= tol


def test_non_finite_rejected():
    u = np.zeros((2, 2))
    u[0, 0] = np.nan
    with pytest.raises(NumericError):
        encode_flow(FlowField(u, np.zeros((2, 2))))


def test_range_fit_uses_percentiles_and_min_span():
    r = np.random.default_rng(0)
    f = FlowField(r.uniform(-3, 3, (50, 50)), np.zeros((50, 50)))
    fit = FlowRange.fit([f])
    assert fit.lo[0] == pytest.approx(np.percentile(f.u, 1), rel=1e-9)
    assert fit.hi[0] == pytest.approx(np.percentile(f.u, 99), rel=1e-9)
    # v is constant: its span is widened to one pixel around zero
    assert fit.lo[1] == pytest.approx(-0.5) and fit.hi[1] == pytest.approx(0.5)
    assert FlowRange.from_dict(fit.to_dict()) == fit


def test_resize_rescales_displacements():
    f = FlowField(np.full((8, 8), 1.0), np.full((8, 8), 2.0))
    g = f.resized((16, 32))
    assert g.shape == (16, 32)
    assert np.allclose(g.u, 4.0) and np.allclose(g.v, 4.0)


# --------------------------------------------------------------------------
# FLO1 container and cache

def test_write_load_identical(tmp_path):
    r = np.random.default_rng(1)
    f = FlowField(r.normal(size=(5, 9)), r.normal(size=(5, 9)))
    write_flow(tmp_path / "a.flo", f)
    g = load_precomputed_flow(tmp_path / "a.flo")
    assert np.array_equal(f.u, g.u) and np.array_equal(f.v, g.v)
    data = (tmp_path / "a.flo").read_bytes()
    assert data[:4] == b"FLO1" and len(data) == 12 + 2 * 4 * 45


def test_truncated_and_mismatched_files(tmp_path):
    f = FlowField(np.ones((4, 4)), np.ones((4, 4)))
    write_flow(tmp_path / "a.flo", f)
    data = (tmp_path / "a.flo").read_bytes()
    (tmp_path / "t.flo").write_bytes(data[:-4])
    with pytest.raises(FlowFormatError):
        load_precomputed_flow(tmp_path / "t.flo")
    (tmp_path / "m.flo").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(FlowFormatError):
        load_precomputed_flow(tmp_path / "m.flo")
    (tmp_path / "h.flo").write_bytes(data[:4] + (5).to_bytes(4, "little") + data[8:])
    with pytest.raises(FlowFormatError):
        load_precomputed_flow(tmp_path / "h.flo")


def test_cache_persists(tmp_path):
    a = textured(32, 32, seed=4)
    video = VideoSequence([Frame(a, 0, "v1"), Frame(np.roll(a, 1, axis=1), 1, "v1")])
    cfg = FlowConfig(levels=2, warps=1)
    first = FlowCache(tmp_path, cfg).get(video, 0)
    files = list(tmp_path.rglob("*.flo"))
    assert len(files) == 1 and cfg.digest() in str(files[0])
    again = FlowCache(tmp_path, cfg).get(video, 0)
    assert np.array_equal(first.u, again.u)
    other = FlowConfig(levels=3, warps=1)
    assert other.digest() != cfg.digest()
