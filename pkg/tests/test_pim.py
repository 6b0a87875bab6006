import numpy as np
import pytest
import torch

from hoiavatar.backbone import ShapeError, grid_positions, patchify
from hoiavatar.pim import (
    PIM,
    CommandEncoder,
    CommandVocab,
    CurriculumConfig,
    CurriculumMode,
    Mode,
    OutOfVocabularyError,
    StreamConfig,
    Task,
    build_conditioning,
    prepend_reference,
    sample_curriculum,
)
from hoiavatar.synthworld import vocabulary_words


@pytest.fixture
def encoder():
    torch.manual_seed(0)
    return CommandEncoder(CommandVocab(vocabulary_words()), 16)


def test_task_changes_only_final_token(encoder):
    a = build_conditioning("pick up the cup", Task.ACTION, encoder)
    b = build_conditioning("pick up the cup", Task.HOI, encoder)
    assert a.tokens.shape == (1, 5, 16)
    assert torch.equal(a.tokens[:, :4], b.tokens[:, :4])
    assert not torch.equal(a.f_task, b.f_task)


def test_empty_command_is_task_token_only(encoder):
    c = build_conditioning("", "HOI", encoder)
    assert c.tokens.shape == (1, 1, 16)
    assert torch.equal(c.tokens[0, 0], encoder.task.weight[list(Task).index(Task.HOI)])


def test_different_commands_same_task(encoder):
    a = build_conditioning("touch the cup", "HOI", encoder)
    b = build_conditioning("push the box", "HOI", encoder)
    assert torch.equal(a.f_task, b.f_task)
    assert not torch.equal(a.tokens[:, :3], b.tokens[:, :3])


def test_out_of_vocabulary(encoder):
    with pytest.raises(OutOfVocabularyError):
        build_conditioning("juggle the cup", "HOI", encoder)


def test_batch_padding_mask(encoder):
    c = encoder(["bow", "pick up the cup"], ["ACTION", "HOI"])
    assert c.mask.sum(1).tolist() == [2, 5]
    assert torch.equal(c.f_task[0], encoder.task.weight[0])


def test_prepend_reference_counts_and_positions():
    ref = patchify(torch.zeros(1, 1, 32, 32, 3), 8)
    mot = patchify(torch.zeros(1, 5, 32, 32, 3), 8)
    seq = prepend_reference(ref, mot)
    assert seq.positions.shape[0] == 6 * 16
    assert int((seq.positions[:, 0] == -1).sum()) == 16
    ref_set = {tuple(p) for p in seq.positions[:16].tolist()}
    assert ref_set == {(-1, i + 4, j + 4) for i in range(4) for j in range(4)}
    assert ref_set.isdisjoint({tuple(p) for p in seq.positions[16:].tolist()})


def test_prepend_reference_spatial_mismatch():
    with pytest.raises(ShapeError):
        prepend_reference(patchify(torch.zeros(1, 1, 16, 16, 3), 8), patchify(torch.zeros(1, 2, 32, 32, 3), 8))


def test_detection_requires_single_frame():
    with pytest.raises(ValueError):
        CurriculumMode(Mode.DETECTION, 8)
    assert CurriculumMode(Mode.DETECTION, 1).loss_frames().tolist() == [1.0]
    assert CurriculumMode(Mode.CONTINUATION, 3).loss_frames().tolist() == [0.0, 1.0, 1.0]


def test_curriculum_degenerate_config():
    rng = np.random.default_rng(0)
    assert all(sample_curriculum(rng, CurriculumConfig(1, 0, 0)).mode is Mode.CONTINUATION for _ in range(200))


def test_curriculum_invalid_config():
    with pytest.raises(ValueError):
        sample_curriculum(np.random.default_rng(0), CurriculumConfig(-1, 1, 1))


def test_curriculum_frequencies():
    rng = np.random.default_rng(3)
    draws = [sample_curriculum(rng, CurriculumConfig(0.5, 0.3, 0.2), 8) for _ in range(100_000)]
    freq = {m: np.mean([d.mode is m for d in draws]) for m in Mode}
    assert abs(freq[Mode.CONTINUATION] - 0.5) < 0.01
    assert abs(freq[Mode.PERCEPTION_GEN] - 0.3) < 0.01
    assert abs(freq[Mode.DETECTION] - 0.2) < 0.01
    assert all(d.target_length == 1 for d in draws if d.mode is Mode.DETECTION)


def _pim_inputs(frames=3):
    torch.manual_seed(1)
    m = PIM(StreamConfig(dim=32, heads=2, layers=3, patch=8, mlp_mult=2), 16)
    z = patchify(torch.randn(2, frames, 32, 32, 3), 8)
    ref = patchify(torch.randn(2, 1, 32, 32, 3), 8)
    return m, z, ref


def test_pim_forward_shapes_and_residuals(encoder):
    m, z, ref = _pim_inputs()
    cond = encoder(["bow", "tap the cup"], ["ACTION", "HOI"])
    pred, res = m(z, ref, cond, torch.tensor([0.3, 0.7]))
    assert pred.data.shape == z.data.shape
    assert len(res) == 3
    assert res.entries[0].shape == (2, 3 * 16, 32)
    assert res.grid == (3, 4, 4)


def test_pim_mode_length_mismatch(encoder):
    m, z, ref = _pim_inputs()
    with pytest.raises(ShapeError):
        m(z, ref, None, torch.tensor([0.5, 0.5]), CurriculumMode(Mode.DETECTION, 1))


def test_pim_deterministic(encoder):
    m, z, ref = _pim_inputs()
    a = m(z, ref, None, torch.tensor([0.5, 0.5]))
    b = m(z, ref, None, torch.tensor([0.5, 0.5]))
    assert torch.equal(a[0].data, b[0].data)
    assert all(torch.equal(x, y) for x, y in zip(a[1].entries, b[1].entries))


def test_pim_reference_path_is_live():
    m, z, ref = _pim_inputs()
    for p in m.parameters():
        torch.nn.init.normal_(p, std=0.05)
    a = m(z, ref, None, torch.tensor([0.5, 0.5]))[0].data
    b = m(z, ref.with_data(torch.zeros_like(ref.data)), None, torch.tensor([0.5, 0.5]))[0].data
    assert (a - b).abs().mean() > 0
