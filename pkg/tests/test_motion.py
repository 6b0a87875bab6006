import numpy as np
import pytest

from hoiavatar.motion import (
    BACKGROUND,
    CLASS_COLORS,
    JOINT_COLORS,
    K,
    KeypointClampWarning,
    MotionFormatError,
    MotionSequence,
    ObjectBoxFrame,
    PoseFrame,
    load_motion,
    parse_motion,
    render_motion,
    render_motion_frame,
    save_motion,
)


def one_box(box=(0.25, 0.25, 0.75, 0.75), cls="cup"):
    return ObjectBoxFrame([0], [cls], np.array([box], dtype=float), np.array([True]))


def test_single_box_draws_exactly_its_outline():
    img = render_motion_frame(None, one_box(), (256, 256))
    colored = (img != np.array(BACKGROUND, dtype=np.uint8)).any(-1)
    expected = np.zeros((256, 256), dtype=bool)
    lo, hi = 64, 191
    w = 2
    expected[lo:hi + 1, lo:lo + w] = True
    expected[lo:hi + 1, hi - w + 1:hi + 1] = True
    expected[lo:lo + w, lo:hi + 1] = True
    expected[hi - w + 1:hi + 1, lo:hi + 1] = True
    assert np.array_equal(colored, expected)
    assert (img[colored] == np.array(CLASS_COLORS["cup"], dtype=np.uint8)).all()


def test_rendering_is_deterministic(hoi_episode):
    m = hoi_episode.motion
    assert np.array_equal(render_motion(m.poses, m.objects), render_motion(m.poses, m.objects))
    assert np.array_equal(m.rendered, render_motion(m.poses, m.objects, (256, 256)))


def test_degenerate_box_rejected():
    with pytest.raises(ValueError):
        render_motion_frame(None, one_box((0.5, 0.2, 0.5, 0.6)))


def test_out_of_range_keypoint_clamped_with_warning():
    kp = np.full((K, 2), 0.5)
    kp[0] = (1.3, -0.2)
    with pytest.warns(KeypointClampWarning):
        img = render_motion_frame(PoseFrame(kp, np.ones(K, bool)), None, (64, 64))
    assert (img[0:3, 61:64] == JOINT_COLORS[0]).all(-1).any()


def test_parse_roundtrip_within_one_pixel(world):
    for rec in world[:6]:
        m = rec.motion
        frames = m.rendered
        p = parse_motion(frames, list(zip(m.object_ids, m.object_classes)))
        px = 256
        assert p.visibility.all()
        assert np.abs(p.keypoints - m.keypoints).max() * px <= 1.0
        assert p.presence.all()
        assert np.abs(p.boxes - m.boxes).max() * px <= 1.0


def test_absent_object_marked_not_present():
    img = render_motion_frame(None, one_box(cls="cup"), (64, 64))
    p = parse_motion(img, [(0, "cup"), (1, "ball")])
    assert p.presence[0].tolist() == [True, False]


def test_scattered_class_pixels_are_not_a_box():
    rng = np.random.default_rng(0)
    img = np.zeros((32, 32, 3), np.uint8)
    img[:] = BACKGROUND
    ys, xs = rng.integers(0, 32, (2, 60))
    img[ys, xs] = CLASS_COLORS["cup"]
    assert not parse_motion(img, [(0, "cup")]).presence.any()


def test_small_canvas_boxes_survive_outline_check(world):
    for rec in world:
        m = rec.motion
        p = parse_motion(render_motion(m.poses, m.objects, (32, 32)), list(zip(m.object_ids, m.object_classes)))
        assert (p.presence == m.presence).all()


def test_motion_document_roundtrip(tmp_path, hoi_episode):
    m = hoi_episode.motion
    save_motion(m, tmp_path / "m.json")
    back = load_motion(tmp_path / "m.json")
    assert np.allclose(back.keypoints, m.keypoints, atol=1e-6)
    assert np.allclose(back.boxes, m.boxes, atol=1e-6)
    assert back.command == m.command and back.task == m.task
    assert back.object_classes == m.object_classes


def test_bad_document_rejected(tmp_path):
    (tmp_path / "x.json").write_text('{"format": "something-else"}')
    with pytest.raises(MotionFormatError):
        load_motion(tmp_path / "x.json")


def test_keypoint_shape_validated():
    with pytest.raises(MotionFormatError):
        MotionSequence(np.zeros((2, K - 1, 2)), np.zeros((2, 0, 4)))
