import pytest
import torch

from hoiavatar.flowmatch import (
    euler_sample,
    fm_loss,
    frame_loss_mask,
    make_flow_sample,
    reconstruct_clean,
    sample_timesteps,
)


def test_endpoints_of_path():
    z0 = torch.randn(2, 5, 3)
    eps = torch.randn(2, 5, 3)
    assert torch.equal(make_flow_sample(z0, 0.0, eps=eps).zt, z0)
    assert torch.equal(make_flow_sample(z0, 1.0, eps=eps).zt, eps)


def test_timestep_outside_unit_interval_rejected():
    with pytest.raises(ValueError):
        make_flow_sample(torch.zeros(1, 2, 2), 1.5)


def test_exact_prediction_has_zero_loss():
    fs = make_flow_sample(torch.randn(3, 4, 6), torch.rand(3), torch.Generator().manual_seed(0))
    assert fm_loss(fs.target.clone(), fs).item() == 0.0


def test_reconstruction_identity():
    g = torch.Generator().manual_seed(1)
    z0 = torch.randn(4, 7, 5, dtype=torch.float64, generator=g)
    t = torch.rand(4, dtype=torch.float64, generator=g)
    fs = make_flow_sample(z0, t, g)
    assert torch.allclose(reconstruct_clean(fs.zt, fs.target, t), z0, atol=1e-12)


def test_masked_loss_ignores_masked_tokens():
    pred = torch.zeros(1, 4, 2)
    tgt = torch.zeros(1, 4, 2)
    tgt[0, 3] = 10.0
    mask = torch.tensor([[1.0, 1.0, 1.0, 0.0]])
    assert fm_loss(pred, tgt, mask).item() == 0.0


def test_empty_mask_rejected():
    with pytest.raises(ValueError):
        fm_loss(torch.zeros(1, 2, 2), torch.zeros(1, 2, 2), torch.zeros(1, 2))


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        fm_loss(torch.zeros(1, 2, 2), torch.zeros(1, 3, 2))


def test_frame_masks():
    m = frame_loss_mask(2, 3, 2, first_only=True)
    assert m[0].tolist() == [1, 1, 0, 0, 0, 0]
    m = frame_loss_mask(1, 3, 2, skip_first=True)
    assert m[0].tolist() == [0, 0, 1, 1, 1, 1]


def test_sample_timesteps_in_range():
    t = sample_timesteps(1000, torch.Generator().manual_seed(0))
    assert t.min() >= 0 and t.max() <= 1


def test_euler_needs_a_step():
    with pytest.raises(ValueError):
        euler_sample(lambda z, t, c: z, torch.zeros(2), steps=0)


@pytest.mark.parametrize("steps", [1, 3, 17, 50])
def test_euler_exact_on_constant_field(steps):
    v = torch.tensor([0.3, -1.2], dtype=torch.float64)
    z1 = torch.tensor([1.0, 2.0], dtype=torch.float64)
    out = euler_sample(lambda z, t, c: v, z1, steps)
    assert torch.allclose(out, z1 - v, atol=1e-12)


def test_euler_joint_tuple():
    a, b = torch.ones(2), torch.zeros(3)
    out = euler_sample(lambda z, t, c: (torch.ones_like(z[0]), -torch.ones_like(z[1])), (a, b), 4)
    assert torch.allclose(out[0], torch.zeros(2)) and torch.allclose(out[1], torch.ones(3))


def test_guidance_scale_one_matches_conditional():
    z = torch.randn(4, dtype=torch.float64)

    def field(x, t, c):
        return x * (2.0 if c == "cond" else 0.5) + t

    plain = euler_sample(field, z, 5, "cond")
    guided = euler_sample(field, z, 5, "cond", guidance_scale=1.0, null_cond="null")
    assert torch.allclose(plain, guided, atol=1e-12)
