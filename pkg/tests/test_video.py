import numpy as np
import pytest

import elrnet.video as video
from elrnet.video import (
    FlowField,
    VideoTensor,
    bicubic_resize,
    build_flow_stack,
    compute_flow,
    elr_target_shape,
    encode_flow_color,
    encode_flow_stacks,
    make_sample,
    normalize_video,
    preprocess_video,
    resize_temporal_spline,
    rgb_to_gray,
    stack_indices,
)


def smooth_image(seed, shape=(32, 32)):
    """Band-limited random image: natural-ish content for resampling tests."""
    rng = np.random.default_rng(seed)
    field = rng.random((8, 8))
    img = bicubic_resize(field[:, :, None], shape)[:, :, 0]
    return (img - img.min()) / (img.max() - img.min() + 1e-9)


def gaussian_blob(cx, cy, amplitude=10.0, sigma=4.0, size=32):
    yy, xx = np.mgrid[0:size, 0:size]
    return amplitude * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma ** 2))


# ---------------------------------------------------------------------------
# bicubic resampling

def test_resize_identity():
    img = np.random.default_rng(0).random((12, 15, 3))
    out = bicubic_resize(img, (12, 15))
    np.testing.assert_allclose(out, img, atol=1e-6)


def test_resize_constant_image_stays_constant():
    img = np.full((10, 8, 1), 0.37)
    for target in ((5, 4), (20, 16), (10, 8), (3, 17)):
        out = bicubic_resize(img, target)
        np.testing.assert_allclose(out, 0.37, atol=1e-6)


def test_resize_linear_ramp_preserved_on_upscale():
    ramp = np.tile(np.arange(16, dtype=np.float64), (8, 1))[:, :, None]
    up = bicubic_resize(ramp, (16, 32))
    # interior columns follow the half-pixel-centered linear map exactly
    expected = (np.arange(32) + 0.5) * 0.5 - 0.5
    np.testing.assert_allclose(up[4, 4:-4, 0], expected[4:-4], atol=1e-4)


def test_resize_rejects_degenerate_target():
    img = np.zeros((8, 8, 1))
    with pytest.raises(ValueError, match="at least 2x2"):
        bicubic_resize(img, (1, 8))


def test_resize_information_floor():
    # 32x32 -> 16x12 -> 32x32 -> 16x12 must reproduce the first decimation
    img = smooth_image(1)[:, :, None]
    small_1 = bicubic_resize(img, (16, 12))
    up = bicubic_resize(small_1, (32, 32))
    small_2 = bicubic_resize(up, (16, 12))
    mae = np.abs(small_1 - small_2).mean()
    assert mae < 0.02


def test_elr_target_shape_preserves_aspect():
    assert elr_target_shape(240, 320) == (12, 16)   # landscape
    assert elr_target_shape(320, 240) == (16, 12)
    assert elr_target_shape(64, 64) == (16, 12)


# ---------------------------------------------------------------------------
# normalization

def test_normalize_constant_video_is_zero():
    frames = np.full((5, 4, 4, 3), 9.0, dtype=np.float32)
    out, stats = normalize_video(frames)
    np.testing.assert_array_equal(out, 0.0)
    assert stats.video_std == pytest.approx(1e-8)


def test_normalize_removes_per_pixel_temporal_mean():
    rng = np.random.default_rng(2)
    frames = rng.random((7, 6, 6, 3)).astype(np.float64)
    out, _ = normalize_video(frames)
    assert np.abs(out.mean(axis=0)).max() < 1e-6


def test_normalize_scale_invariance():
    rng = np.random.default_rng(3)
    frames = rng.random((6, 5, 5, 1)).astype(np.float64)
    out1, _ = normalize_video(frames)
    out2, _ = normalize_video(2.0 * frames)
    np.testing.assert_allclose(out1, out2, atol=1e-6)


def test_normalize_needs_two_frames():
    with pytest.raises(ValueError, match="at least 2"):
        normalize_video(np.zeros((1, 4, 4, 1)))


# ---------------------------------------------------------------------------
# temporal spline

def test_spline_aligned_length_is_identity():
    rng = np.random.default_rng(4)
    frames = rng.random((100, 3, 3, 1))
    out = resize_temporal_spline(frames, 100)
    np.testing.assert_allclose(out, frames, atol=1e-6)


def test_spline_constant_video_stays_constant():
    frames = np.full((7, 2, 2, 1), 1.25)
    out = resize_temporal_spline(frames, 100)
    np.testing.assert_allclose(out, 1.25, atol=1e-9)


def test_spline_reproduces_linear_trajectories():
    t = np.arange(10, dtype=np.float64)
    frames = (2.0 * t - 3.0)[:, None, None, None] * np.ones((1, 2, 2, 1))
    out = resize_temporal_spline(frames, 25)
    xs = np.linspace(0, 9, 25)
    expected = (2.0 * xs - 3.0)[:, None, None, None] * np.ones((1, 2, 2, 1))
    np.testing.assert_allclose(out, expected, atol=1e-9)


def test_spline_rejects_single_frame():
    with pytest.raises(ValueError, match="at least 2"):
        resize_temporal_spline(np.zeros((1, 2, 2, 1)), 100)


# ---------------------------------------------------------------------------
# optical flow

def test_flow_zero_for_identical_frames():
    img = gaussian_blob(15.0, 17.0)
    flow = compute_flow(img, img)
    assert np.abs(flow.u).max() < 1e-3
    assert np.abs(flow.v).max() < 1e-3


def test_flow_recovers_one_pixel_rightward_shift():
    a = gaussian_blob(15.5, 15.5)
    b = gaussian_blob(16.5, 15.5)
    flow = compute_flow(a, b)
    region = gaussian_blob(16.0, 15.5, 1.0) > 0.5
    assert abs(flow.u[region].mean() - 1.0) < 0.3
    assert abs(flow.v[region].mean()) < 0.2


def test_flow_recovers_two_pixel_downward_shift():
    a = gaussian_blob(15.5, 14.5)
    b = gaussian_blob(15.5, 16.5)
    flow = compute_flow(a, b)
    region = gaussian_blob(15.5, 15.5, 1.0) > 0.5
    assert abs(flow.v[region].mean() - 2.0) < 0.5


def test_flow_rejects_mismatched_shapes():
    with pytest.raises(ValueError, match="equal-shape"):
        compute_flow(np.zeros((8, 8)), np.zeros((8, 9)))


def test_flow_result_is_finite():
    rng = np.random.default_rng(5)
    flow = compute_flow(rng.random((16, 16)), rng.random((16, 16)))
    assert np.isfinite(flow.u).all() and np.isfinite(flow.v).all()


# ---------------------------------------------------------------------------
# flow color encoding

def test_encode_zero_flow_is_white():
    flow = FlowField(np.zeros((4, 4)), np.zeros((4, 4)))
    rgb = encode_flow_color(flow)
    np.testing.assert_allclose(rgb, 1.0)


def test_encode_rightward_cap_magnitude_is_red():
    flow = FlowField(np.full((2, 2), 8.0), np.zeros((2, 2)))
    rgb = encode_flow_color(flow, magnitude_cap=8.0)
    np.testing.assert_allclose(rgb[..., 0], 1.0, atol=1e-6)
    np.testing.assert_allclose(rgb[..., 1], 0.0, atol=1e-6)
    np.testing.assert_allclose(rgb[..., 2], 0.0, atol=1e-6)


def test_encode_magnitude_clamps_at_cap():
    at_cap = encode_flow_color(FlowField(np.array([[8.0]]), np.array([[0.0]])))
    beyond = encode_flow_color(FlowField(np.array([[16.0]]), np.array([[0.0]])))
    np.testing.assert_allclose(at_cap, beyond)


def test_encode_rotation_consistency_at_cardinal_angles():
    m = 8.0
    # rotating the flow vector by 120 degrees shifts hue by 120 degrees
    for angle in (0.0, 2 * np.pi / 3, 4 * np.pi / 3):
        u = np.array([[m * np.cos(angle)]])
        v = np.array([[m * np.sin(angle)]])
        rgb = encode_flow_color(FlowField(u, v))
        rotated = encode_flow_color(FlowField(
            np.array([[m * np.cos(angle + 2 * np.pi / 3)]]),
            np.array([[m * np.sin(angle + 2 * np.pi / 3)]])))
        np.testing.assert_allclose(np.roll(rgb[0, 0], 1), rotated[0, 0], atol=1e-9)


def test_encode_rejects_bad_cap():
    with pytest.raises(ValueError, match="positive"):
        encode_flow_color(FlowField(np.zeros((2, 2)), np.zeros((2, 2))), magnitude_cap=0)


# ---------------------------------------------------------------------------
# flow stacks

def test_stack_indices_clamp_at_edges():
    assert stack_indices(0, 3) == (0, 0, 0, 0, 0, 0, 1, 2, 2, 2, 2)
    assert stack_indices(5, 100) == tuple(range(0, 11))
    with pytest.raises(ValueError, match="at least one"):
        stack_indices(0, 0)


def test_stack_has_33_channels():
    flows = [FlowField(np.zeros((8, 8)), np.zeros((8, 8))) for _ in range(4)]
    stack = build_flow_stack(flows, 1)
    assert stack.encoded.shape == (8, 8, 33)


def test_stack_mean_subtraction_cancels_global_motion():
    rng = np.random.default_rng(6)
    fields = rng.normal(size=(1, 11, 8, 8, 2))
    shifted = fields + np.array([3.0, -2.0])        # constant global motion
    np.testing.assert_allclose(encode_flow_stacks(fields), encode_flow_stacks(shifted),
                               atol=1e-6)
    centered = fields - fields.mean(axis=(1, 2, 3), keepdims=True)
    assert abs(centered[..., 0].mean()) < 1e-6
    assert abs(centered[..., 1].mean()) < 1e-6


def test_build_flow_stack_matches_batched_encoder():
    rng = np.random.default_rng(7)
    arr = rng.normal(size=(6, 8, 8, 2)).astype(np.float32)
    stack = build_flow_stack(arr, 3)
    idx = list(stack_indices(3, 6))
    batched = encode_flow_stacks(arr[idx][None])[0]
    np.testing.assert_allclose(stack.encoded, batched, atol=1e-6)


# ---------------------------------------------------------------------------
# full pipeline

def moving_video(n_frames=8, size=32, seed=8):
    rng = np.random.default_rng(seed)
    base = smooth_image(seed, (size, size))
    frames = np.stack([np.roll(base, t, axis=1) for t in range(n_frames)])
    return (frames[..., None] * np.array([0.9, 1.0, 0.8])).astype(np.float32)


def test_preprocess_shapes_and_sample_contract():
    frames = moving_video()
    for resolution in ("elr", "hr"):
        pre = preprocess_video(frames, resolution)
        assert pre.rgb.shape == (8, 32, 32, 3)
        assert pre.flows.shape == (7, 32, 32, 2)
        rgb, stack = make_sample(pre, 3)
        assert rgb.shape == (32, 32, 3)
        assert stack.encoded.shape == (32, 32, 33)
    with pytest.raises(ValueError, match="out of range"):
        make_sample(preprocess_video(frames, "hr"), 99)


def test_elr_and_hr_renditions_differ():
    frames = moving_video()
    elr = preprocess_video(frames, "elr")
    hr = preprocess_video(frames, "hr")
    assert np.abs(elr.rgb - hr.rgb).mean() > 1e-3


def test_flow_computed_on_normalized_upscaled_frames(monkeypatch):
    """Pipeline order audit: flow inputs are the normalized 32x32 frames."""
    frames = moving_video()
    captured = []
    real = video.compute_flow

    def spy(a, b, *args, **kw):
        captured.append((a.copy(), b.copy()))
        return real(a, b, *args, **kw)

    monkeypatch.setattr(video, "compute_flow", spy)
    pre = preprocess_video(frames, "elr")
    assert len(captured) == 7

    small = video._resize_frames(frames, (16, 12))
    up = video._resize_frames(small, (32, 32))
    normalized, _ = normalize_video(up)
    expected_gray = rgb_to_gray(normalized)
    np.testing.assert_allclose(captured[0][0], expected_gray[0], atol=1e-6)
    np.testing.assert_allclose(captured[0][1], expected_gray[1], atol=1e-6)
    # and not the raw originals
    assert np.abs(captured[0][0] - rgb_to_gray(frames)[0]).mean() > 1e-3


def test_preprocess_rejects_unknown_resolution():
    with pytest.raises(ValueError, match="resolution"):
        preprocess_video(moving_video(), "4k")


def test_video_tensor_validation():
    with pytest.raises(ValueError, match="frames"):
        VideoTensor(np.zeros((3, 4, 4)))        # missing channel dim
    with pytest.raises(ValueError, match="finite"):
        VideoTensor(np.full((2, 4, 4, 1), np.nan))
    VideoTensor(np.zeros((2, 4, 4, 3)), subject_id="s01", label=3)


def test_rgb_to_gray_luma_weights():
    frame = np.zeros((1, 1, 3))
    frame[0, 0] = [1.0, 0.0, 0.0]
    assert rgb_to_gray(frame)[0, 0] == pytest.approx(0.299)
