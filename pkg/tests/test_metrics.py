import json
import sys

import numpy as np
import pytest

from hoiavatar.metrics import (
    UNAVAILABLE,
    ExternalAdapter,
    MetricError,
    MetricReport,
    box_tracking_error,
    dynamic_degree,
    hand_region,
    laplacian_sharpness,
    motion_pi,
    parse_video_boxes,
    pixel_interaction,
)
from hoiavatar.motion import CLASS_COLORS, K, WRISTS, ObjectBoxFrame, PoseFrame
from hoiavatar.synthworld import random_walk_motion, script_motion


def _frame(wrist, box=(0.4, 0.4, 0.6, 0.6)):
    kp = np.full((K, 2), 0.1)
    kp[WRISTS[0]] = wrist
    return PoseFrame(kp, np.ones(K, bool)), ObjectBoxFrame([0], ["cup"], np.array([box]), np.array([True]))


@pytest.mark.parametrize("wrist,hit", [((0.5, 0.5), 1.0), ((0.39, 0.5), 1.0), ((0.3, 0.5), 0.0)])
def test_pixel_interaction_contact(wrist, hit):
    p, b = _frame(wrist)
    assert pixel_interaction([b], [p], "touch the cup") == hit


def test_pixel_interaction_missing_target():
    p, b = _frame((0.5, 0.5))
    with pytest.raises(MetricError):
        pixel_interaction([b], [p], "touch the ball")
    with pytest.raises(MetricError):
        pixel_interaction([b], [p], "wave")


def test_undetected_target_counts_as_miss():
    p, b = _frame((0.5, 0.5))
    b2 = ObjectBoxFrame([0], ["cup"], b.boxes, np.array([False]))
    assert pixel_interaction([b, b2], [p, p], "touch the cup") == 0.5


def test_scripted_motion_reaches_ceiling(world):
    for rec in world:
        if rec.spec.task == "HOI":
            assert motion_pi(script_motion(rec.spec), window=rec.spec.interaction_window()) == 1.0


def test_random_walk_is_low(world):
    rng = np.random.default_rng(0)
    hoi = [r for r in world if r.spec.task == "HOI"]
    pis = [motion_pi(random_walk_motion(r.spec, rng), window=r.spec.interaction_window()) for r in hoi]
    assert np.mean(pis) < 0.2


def test_dynamic_degree():
    assert dynamic_degree(np.zeros((3, 4, 4, 3), np.uint8)) == 0
    f = np.zeros((2, 4, 4, 3), np.uint8)
    f[1] = 255
    assert dynamic_degree(f) == 1.0
    with pytest.raises(MetricError):
        dynamic_degree(f[:1])


def test_sharpness():
    mask = np.ones((8, 8), bool)
    flat = np.full((1, 8, 8, 3), 100, np.uint8)
    assert laplacian_sharpness(flat, mask) == 0
    checker = (np.indices((8, 8)).sum(0) % 2 * 255).astype(np.uint8)
    assert laplacian_sharpness(np.repeat(checker[None, ..., None], 3, -1), mask) > 0
    with pytest.raises(MetricError):
        laplacian_sharpness(flat, np.zeros((8, 8), bool))


def test_hand_region_covers_wrists(hoi_episode):
    m = hoi_episode.motion
    region = hand_region(m, (64, 64))
    x, y = (m.keypoints[0, WRISTS[0]] * 64).astype(int).clip(0, 63)
    assert region[0, y, x]


def test_video_boxes_on_ground_truth(world):
    errs = []
    for rec in world:
        r = box_tracking_error(rec.video, rec.motion)
        assert r.failure_rate == 0
        errs.append(r.error_px)
    assert max(errs) < 1.5


def test_tracking_unavailable_on_blank(hoi_episode):
    blank = np.full_like(hoi_episode.video, 255)
    assert box_tracking_error(blank, hoi_episode.motion).error_px == UNAVAILABLE


def test_parse_video_boxes_square():
    f = np.full((1, 16, 16, 3), 255, np.uint8)
    f[0, 4:8, 2:10] = CLASS_COLORS["box"]
    boxes, found = parse_video_boxes(f, ["box", "cup"])
    assert found.tolist() == [[True, False]]
    assert np.allclose(boxes[0, 0], [2 / 16, 4 / 16, 10 / 16, 8 / 16])


def test_external_adapter_unconfigured():
    assert ExternalAdapter("vlm_qa").score([{"id": "a"}]) == {"a": UNAVAILABLE}


def test_external_adapter_subprocess():
    script = "import json,sys; r=json.load(sys.stdin); print(json.dumps({'scores': {e['id']: 0.5 for e in r['episodes']}}))"
    out = ExternalAdapter("clip_re", [sys.executable, "-c", script]).score([{"id": "a"}, {"id": "b"}])
    assert out == {"a": 0.5, "b": 0.5}


def test_external_adapter_failure():
    with pytest.raises(MetricError):
        ExternalAdapter("clip_re", [sys.executable, "-c", "raise SystemExit(3)"]).score([{"id": "a"}])


def test_report_aggregation_and_unavailable():
    rep = MetricReport()
    rep.add("e1", pi=1.0, dd=0.2)
    rep.add("e0", pi=0.0, box_err=UNAVAILABLE)
    agg = rep.aggregate()
    assert agg["pi"] == 0.5 and agg["dd"] == 0.2 and agg["box_err"] == UNAVAILABLE
    tsv = rep.to_tsv().splitlines()
    assert tsv[1].startswith("e0") and tsv[-1].startswith("MEAN")
    assert json.loads(rep.to_json())["aggregate"]["vlm_qa"] == UNAVAILABLE
    assert "unavailable" in rep.table()
