import numpy as np
import pytest
import torch

from conftest import tiny_config
from hoiavatar.backbone import ShapeError, patchify
from hoiavatar.dualstream import (
    DualStreamModel,
    GenerationRequest,
    InferenceKind,
    InferenceMode,
    ModeError,
    derive_seed,
)
from hoiavatar.pim import StreamConfig


def _request(rec, mode, **kw):
    base = dict(reference=rec.reference, command=rec.spec.command, task=rec.spec.task, mode=mode,
                audio=rec.audio, motion=rec.motion, face_mask=rec.face_mask, n_frames=rec.spec.n_frames,
                seed=3, steps=2)
    base.update(kw)
    return GenerationRequest(**base)


@pytest.mark.parametrize("mode,flags,ok", [
    (InferenceKind.T2MV, dict(), True),
    (InferenceKind.TA2V, dict(), False),
    (InferenceKind.TA2V, dict(audio=True), True),
    (InferenceKind.TA2MV, dict(audio=True), True),
    (InferenceKind.TAM2V, dict(audio=True), False),
    (InferenceKind.TAM2V, dict(audio=True, motion=True), True),
])
def test_mode_validation(mode, flags, ok):
    m = InferenceMode(mode, **flags)
    if ok:
        m.validate()
    else:
        with pytest.raises(ModeError):
            m.validate()


def test_reference_required():
    with pytest.raises(ModeError):
        InferenceMode(InferenceKind.T2MV).validate(has_reference=False)


def test_layer_count_mismatch_rejected():
    with pytest.raises(ShapeError):
        DualStreamModel(tiny_config(aim=StreamConfig(dim=32, heads=2, layers=3, patch=8, mlp_mult=2)))


def test_derive_seed_named_and_stable():
    assert derive_seed(1, "video") == derive_seed(1, "video")
    assert derive_seed(1, "video") != derive_seed(1, "motion")


def test_timestep_mismatch_rejected(tiny_model, hoi_episode):
    req = _request(hoi_episode, "T2MV")
    cond = tiny_model._conditions(req, req.inference_mode())
    zv = patchify(torch.zeros(1, 8, 64, 64, 3), 8)
    zm = patchify(torch.zeros(1, 8, 32, 32, 3), 8)
    with pytest.raises(ValueError):
        tiny_model.joint_denoise_step(zv, zm, (0.5, 0.4), cond)


def test_fresh_model_video_ignores_motion_latent(tiny_model, hoi_episode):
    req = _request(hoi_episode, "TA2MV")
    cond = tiny_model._conditions(req, req.inference_mode())
    zv = patchify(torch.randn(1, 8, 64, 64, 3), 8)
    a = tiny_model.joint_denoise_step(zv, patchify(torch.randn(1, 8, 32, 32, 3), 8), 0.5, cond)[0]
    b = tiny_model.joint_denoise_step(zv, patchify(torch.randn(1, 8, 32, 32, 3), 8), 0.5, cond)[0]
    assert torch.equal(a.data, b.data)


def test_motion_stream_never_sees_audio(tiny_model, hoi_episode):
    for p in tiny_model.parameters():
        torch.nn.init.normal_(p, std=0.02)
    req = _request(hoi_episode, "TA2MV")
    cond = tiny_model._conditions(req, req.inference_mode())
    cond2 = dict(cond)
    cond2["audio"] = type(cond["audio"])(torch.randn_like(cond["audio"].features), cond["audio"].window_half_width)
    zv = patchify(torch.randn(1, 8, 64, 64, 3), 8)
    zm = patchify(torch.randn(1, 8, 32, 32, 3), 8)
    va, ma = tiny_model.joint_denoise_step(zv, zm, 0.5, cond)
    vb, mb = tiny_model.joint_denoise_step(zv, zm, 0.5, cond2)
    assert torch.equal(ma.data, mb.data)
    assert not torch.equal(va.data, vb.data)


@pytest.mark.parametrize("mode", ["T2MV", "TA2V", "TA2MV", "TAM2V"])
def test_generate_modes(tiny_model, hoi_episode, mode):
    res = tiny_model.generate(_request(hoi_episode, mode))
    assert res.video.shape == (8, 64, 64, 3) and res.video.dtype == np.uint8
    assert res.mode.value == mode
    assert res.motion is not None
    assert res.motion_auxiliary == (mode == "TA2V")
    if mode == "TAM2V":
        assert res.motion_frames is None
    else:
        assert res.motion_frames.shape == (8, 32, 32, 3)


def test_generate_repeatable(tiny_model, hoi_episode):
    a = tiny_model.generate(_request(hoi_episode, "T2MV"))
    b = tiny_model.generate(_request(hoi_episode, "T2MV"))
    assert np.array_equal(a.video, b.video) and np.array_equal(a.motion_frames, b.motion_frames)


def test_t2mv_and_ta2mv_share_motion(tiny_model, hoi_episode):
    for p in tiny_model.parameters():
        torch.nn.init.normal_(p, std=0.02)
    a = tiny_model.generate(_request(hoi_episode, "T2MV", audio=None, face_mask=None))
    b = tiny_model.generate(_request(hoi_episode, "TA2MV"))
    assert np.array_equal(a.motion_frames, b.motion_frames)


def test_frame_range_enforced(tiny_model, hoi_episode):
    with pytest.raises(ModeError):
        tiny_model.generate(_request(hoi_episode, "T2MV", n_frames=4))


def test_driving_length_checked(tiny_model, world):
    rec = world[0]
    other = next(r for r in world if r is not rec)
    motion = type(rec.motion)(np.concatenate([other.motion.keypoints] * 2), np.concatenate([other.motion.boxes] * 2),
                              other.motion.object_ids, other.motion.object_classes)
    with pytest.raises(ModeError):
        tiny_model.generate(_request(rec, "TAM2V", motion=motion))


def test_tam2v_without_motion_refused(tiny_model, hoi_episode):
    with pytest.raises(ModeError):
        tiny_model.generate(_request(hoi_episode, "TAM2V", motion=None))
