import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from eegflow.errors import NumericalError, ValidationError
from eegflow.optflow import (FlowParams, FlowVideo, flow_hue, flow_to_hsv, flow_two_frame, poly_expansion,
                             rescale_u8, video_flows, video_to_flow)

INTERIOR = (slice(6, -6), slice(6, -6))
SHIFTS = [(1, 0), (-1, 0), (0, 1), (0, -1), (2, 0), (-2, 0), (0, 2), (0, -2)]


def smooth_field(seed, size=32, sigma=3.0):
    f = ndimage.gaussian_filter(np.random.default_rng(seed).standard_normal((size, size)), sigma, mode="wrap")
    return f / f.std()


def shifted(f, dx, dy):
    return np.roll(np.roll(f, dx, axis=1), dy, axis=0)


def best_integer_shift(f1, f2, reach=4):
    """Exhaustive circular cross-correlation over integer shifts."""
    best, arg = -np.inf, None
    for dy in range(-reach, reach + 1):
        for dx in range(-reach, reach + 1):
            score = np.sum(shifted(f1, dx, dy) * f2)
            if score > best:
                best, arg = score, (dx, dy)
    return arg


def lstsq_expansion(frame, sigma=1.1, radius=3):
    """Per-pixel weighted least-squares fit with mirrored borders."""
    t = np.arange(-radius, radius + 1, dtype=float)
    g = np.exp(-t**2 / (2 * sigma**2))
    yy, xx = np.meshgrid(t, t, indexing="ij")
    w = np.sqrt(np.outer(g, g).reshape(-1))
    B = np.stack([np.ones(xx.size), xx.ravel(), yy.ravel(), xx.ravel() ** 2, yy.ravel() ** 2,
                  (xx * yy).ravel()], axis=1)
    padded = np.pad(frame, radius, mode="reflect")
    h, wd = frame.shape
    coef = np.empty((h, wd, 6))
    for i in range(h):
        for j in range(wd):
            patch = padded[i:i + 2 * radius + 1, j:j + 2 * radius + 1].reshape(-1)
            coef[i, j] = np.linalg.lstsq(B * w[:, None], patch * w, rcond=None)[0]
    return coef


class TestPolyExpansion:
    def test_constant(self):
        e = poly_expansion(np.full((20, 20), 4.2))
        assert np.abs(e.A).max() <= 1e-9 and np.abs(e.b).max() <= 1e-9
        np.testing.assert_allclose(e.c, 4.2, atol=1e-9)

    def test_linear(self):
        yy, xx = np.mgrid[0:24, 0:24].astype(float)
        e = poly_expansion(2 * xx + 3 * yy)
        inner = (slice(4, -4), slice(4, -4))
        np.testing.assert_allclose(e.b[inner], np.broadcast_to([2.0, 3.0], e.b[inner].shape), atol=1e-6)
        assert np.abs(e.A[inner]).max() <= 1e-6

    def test_matches_lstsq_oracle(self):
        frame = np.random.default_rng(0).standard_normal((14, 17))
        e = poly_expansion(frame)
        ref = lstsq_expansion(frame)
        np.testing.assert_allclose(e.c, ref[..., 0], atol=1e-10)
        np.testing.assert_allclose(e.b, ref[..., 1:3], atol=1e-10)
        np.testing.assert_allclose(e.A[..., 0, 0], ref[..., 3], atol=1e-10)
        np.testing.assert_allclose(e.A[..., 1, 1], ref[..., 4], atol=1e-10)
        np.testing.assert_allclose(e.A[..., 0, 1], ref[..., 5] / 2, atol=1e-10)
        np.testing.assert_array_equal(e.A[..., 0, 1], e.A[..., 1, 0])

    def test_stack(self):
        frames = np.random.default_rng(1).standard_normal((3, 12, 12))
        e = poly_expansion(frames)
        np.testing.assert_allclose(e.b[1], poly_expansion(frames[1]).b, atol=1e-13)

    def test_too_small(self):
        with pytest.raises(ValidationError):
            poly_expansion(np.zeros((3, 3)), radius=3)


class TestTwoFrame:
    def test_identity(self):
        f = smooth_field(0)
        assert np.abs(flow_two_frame(f, f)).max() == 0

    @pytest.mark.parametrize("dx,dy", SHIFTS)
    def test_shift_recovery(self, dx, dy):
        for seed in range(3):
            f1 = smooth_field(seed)
            f2 = shifted(f1, dx, dy)
            assert best_integer_shift(f1, f2) == (dx, dy)
            d = flow_two_frame(f1, f2)
            assert d.shape == (2, 32, 32)
            assert abs(d[0][INTERIOR].mean() - dx) <= 0.25
            assert abs(d[1][INTERIOR].mean() - dy) <= 0.25

    @pytest.mark.parametrize("dx,dy", SHIFTS)
    def test_antisymmetry(self, dx, dy):
        f1 = smooth_field(7)
        f2 = shifted(f1, dx, dy)
        fwd, back = flow_two_frame(f1, f2), flow_two_frame(f2, f1)
        assert np.abs(fwd + back).mean() <= 0.3

    @settings(max_examples=15, deadline=None)
    @given(st.floats(0.01, 100.0), st.integers(0, 1000))
    def test_brightness_scale(self, s, seed):
        f1 = smooth_field(seed)
        f2 = shifted(f1, 1, 0) + 0.1 * smooth_field(seed + 1)
        np.testing.assert_allclose(flow_two_frame(s * f1, s * f2), flow_two_frame(f1, f2), atol=1e-6)

    def test_magnitude_clamp(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            f1, f2 = rng.standard_normal((2, 32, 32)) * rng.uniform(0.1, 10, (2, 1, 1))
            d = flow_two_frame(f1, f2, smooth_radius=2)
            assert np.all(np.isfinite(d))
            assert np.hypot(d[0], d[1]).max() <= 2 + 1e-12

    def test_flat_region_zero(self):
        f1 = np.zeros((32, 32))
        f2 = np.zeros((32, 32))
        f2[10, 10] = 1e-300
        assert np.abs(flow_two_frame(f1, np.zeros((32, 32)))).max() == 0
        assert np.all(np.isfinite(flow_two_frame(f1, f2)))

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            flow_two_frame(np.zeros((32, 32)), np.zeros((32, 30)))
        with pytest.raises(ValidationError):
            FlowParams(iterations=0)

    def test_stack_equals_pairs(self):
        rng = np.random.default_rng(4)
        a, b = rng.standard_normal((2, 3, 32, 32))
        both = flow_two_frame(a, b)
        for k in range(3):
            np.testing.assert_allclose(both[k], flow_two_frame(a[k], b[k]), atol=1e-12)


class TestU8:
    def test_constant(self):
        enc = rescale_u8(np.full((2, 3, 2, 4, 4), 0.7))
        assert np.all(enc.data == 0) and enc.lo == enc.hi == 0.7

    def test_endpoints_and_midpoint(self):
        enc = rescale_u8(np.array([-1.0, 0.0, 1.0]))
        assert enc.data.tolist() == [0, 128, 255]
        assert (enc.lo, enc.hi) == (-1.0, 1.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.01, 50))
    def test_roundtrip(self, seed, scale):
        x = np.random.default_rng(seed).standard_normal((5, 12, 2, 8, 8)) * scale
        enc = rescale_u8(x)
        assert enc.data.dtype == np.uint8 and enc.data.min() == 0 and enc.data.max() == 255
        assert np.abs(enc.decode() - x).max() <= (x.max() - x.min()) / 255

    def test_non_finite(self):
        with pytest.raises(NumericalError):
            rescale_u8(np.array([0.0, np.inf]))


class TestHsv:
    def test_zero_is_black(self):
        assert np.all(flow_to_hsv(np.zeros((2, 8, 8))) == 0)

    def test_uniform_right_is_red(self):
        img = flow_to_hsv(np.stack([np.ones((4, 4)), np.zeros((4, 4))]))
        assert np.all(img == np.array([255, 0, 0], dtype=np.uint8))

    def test_vertical_hues(self):
        assert flow_hue(np.array(0.0), np.array(1.0)) == pytest.approx(90.0)
        assert flow_hue(np.array(0.0), np.array(-1.0)) == pytest.approx(270.0)
        up = flow_to_hsv(np.stack([np.zeros((1, 1)), np.ones((1, 1))]))[0, 0]
        down = flow_to_hsv(np.stack([np.zeros((1, 1)), -np.ones((1, 1))]))[0, 0]
        assert up.tolist() == [128, 255, 0]  # hue 90: chartreuse
        assert down.tolist() == [128, 0, 255]  # hue 270: violet, 127.5 rounds to even

    @settings(max_examples=40, deadline=None)
    @given(st.floats(-5, 5), st.floats(-5, 5), st.floats(1e-3, 1e3))
    def test_hue_scale_invariant(self, dx, dy, s):
        h1 = flow_hue(np.array(dx), np.array(dy))
        h2 = flow_hue(np.array(s * dx), np.array(s * dy))
        assert min(abs(h1 - h2), 360 - abs(h1 - h2)) <= 1e-9
        assert 0 <= h1 < 360

    def test_value_relative_to_max(self):
        flow = np.zeros((2, 1, 2))
        flow[0, 0] = [1.0, 2.0]
        img = flow_to_hsv(flow)
        assert img[0, 1].max() == 255 and img[0, 0].max() == 128


class TestVideo:
    def test_thirteen_frames_give_twelve(self):
        video = np.random.default_rng(0).standard_normal((5, 13, 32, 32))
        fv = video_to_flow(video)
        assert fv.flow.shape == (5, 12, 2, 32, 32) and fv.n_pairs == 12
        assert fv.u8.data.shape == fv.flow.shape
        assert fv.hsv().shape == (5, 12, 32, 32, 3)

    def test_static(self):
        frame = smooth_field(1)
        fv = video_to_flow(np.broadcast_to(frame, (5, 13, 32, 32)))
        assert np.all(fv.flow == 0)
        assert np.all(fv.hsv() == 0)

    def test_two_frames(self):
        a, b = smooth_field(2), smooth_field(3)
        fv = video_to_flow(np.stack([a, b])[None])
        np.testing.assert_allclose(fv.flow[0, 0], flow_two_frame(a, b), atol=1e-12)

    def test_pairs_share_expansions(self):
        video = np.random.default_rng(5).standard_normal((2, 3, 6, 32, 32))
        flows = video_flows(video)
        assert flows.shape == (2, 3, 5, 2, 32, 32)
        for p in range(5):
            np.testing.assert_allclose(flows[1, 2, p], flow_two_frame(video[1, 2, p], video[1, 2, p + 1]),
                                       atol=1e-12)

    def test_single_frame_rejected(self):
        with pytest.raises(ValidationError):
            video_flows(np.zeros((1, 32, 32)))

    def test_flowvideo_from_array(self):
        fv = FlowVideo(np.zeros((1, 1, 2, 8, 8)))
        assert fv.u8.lo == fv.u8.hi == 0.0
