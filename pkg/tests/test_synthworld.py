import numpy as np
import pytest

from hoiavatar.motion import OBJECT_CLASSES
from hoiavatar.synthworld import (
    SceneError,
    SceneObject,
    SceneSpec,
    WorldConfig,
    build_dataset,
    frame_rms,
    load_dataset,
    mouth_activity,
    read_wav,
    split_combos,
    synth_audio,
    write_dataset,
    write_wav,
)


def test_split_combos_disjoint_and_covering():
    s = split_combos(WorldConfig())
    assert not (s["train"] & s["test"]) and not (s["train"] & s["val"]) and not (s["val"] & s["test"])
    train_classes = {c for _, c in s["train"]}
    train_templates = {t for t, _ in s["train"]}
    assert train_classes == set(OBJECT_CLASSES)
    assert train_templates == {t for t, _ in s["test"]}


def test_unseen_class_held_out():
    cfg = WorldConfig(n_train=20, n_val=2, n_test=10, test_unseen_class=True)
    held = cfg.classes[-1]
    recs = build_dataset(cfg, np.random.default_rng(0))
    assert all(held not in [o.cls for o in r.spec.objects] for r in recs if r.split != "test")


def test_dataset_is_deterministic(world):
    again = build_dataset(WorldConfig(n_train=8, n_val=2, n_test=6), np.random.default_rng(7))
    for a, b in zip(world, again):
        assert a.spec.command == b.spec.command
        assert np.array_equal(a.video, b.video)
        assert np.array_equal(a.audio.samples, b.audio.samples)


def test_test_combos_unseen_in_train(world):
    train = {r.spec.combo for r in world if r.split == "train"}
    assert not train & {r.spec.combo for r in world if r.split == "test"}


def test_hoi_target_present(world):
    for r in world:
        if r.spec.task == "HOI":
            assert r.spec.command.split()[-1] in [o.cls for o in r.spec.objects]


def test_scene_validation():
    obj = SceneObject(0, "cup", (0.3, 0.3), (0.1, 0.1))
    with pytest.raises(SceneError):
        SceneSpec((0.5, 0.62), [obj], "touch the", target_id=5)
    with pytest.raises(SceneError):
        SceneSpec((0.5, 0.62), [obj, SceneObject(1, "cup", (0.7, 0.3), (0.1, 0.1))], "bow")
    with pytest.raises(SceneError):
        SceneSpec((0.5, 0.62), [], "bow")
    with pytest.raises(SceneError):
        SceneSpec((0.5, 0.62), [obj], "juggle")


def test_audio_envelope_rms():
    env = [0.0, 0.5, 1.0, 0.25]
    track = synth_audio(env, 2560, np.random.default_rng(0))
    assert np.allclose(frame_rms(track, 4), env, atol=1e-4)


def test_mouth_follows_audio(world):
    corr = []
    for r in world:
        env = np.asarray(r.spec.envelope)
        if env.std() > 0:
            corr.append(np.corrcoef(env, mouth_activity(r.video, r.face_mask))[0, 1])
    assert np.mean(corr) > 0.8


def test_wav_roundtrip(tmp_path, hoi_episode):
    write_wav(hoi_episode.audio, tmp_path / "a.wav")
    back = read_wav(tmp_path / "a.wav")
    assert back.sample_rate == hoi_episode.audio.sample_rate
    assert np.abs(back.samples - hoi_episode.audio.samples).max() < 1e-3


def test_dataset_disk_roundtrip(tmp_path, world):
    m1 = write_dataset(world[:3], tmp_path / "a", seed=7)
    m2 = write_dataset(world[:3], tmp_path / "b", seed=7)
    assert m1["hash"] == m2["hash"]
    back = load_dataset(tmp_path / "a")
    for a, b in zip(world[:3], back):
        assert np.array_equal(a.video, b.video)
        assert np.array_equal(a.face_mask, b.face_mask)
        assert a.spec.command == b.spec.command
        assert np.allclose(a.motion.boxes, b.motion.boxes, atol=1e-6)


def test_load_rejects_foreign_directory(tmp_path):
    (tmp_path / "manifest.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_dataset(tmp_path)
