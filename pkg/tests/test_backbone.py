import pytest
import torch

from hoiavatar.backbone import (
    Attention,
    DiTBlock,
    LatentGrid,
    NonFiniteError,
    PositionIndex,
    ResidualStack,
    RopeConfig,
    ShapeError,
    ZeroLinear,
    apply_rope,
    grid_positions,
    patchify,
    reference_positions,
    rope_remap_reference,
    unpatchify,
)


def test_patchify_roundtrip_lossless():
    x = torch.randn(2, 3, 16, 24, 3)
    g = patchify(x, 8)
    assert g.data.shape == (2, 3, 2, 3, 192)
    assert torch.equal(unpatchify(g, 8), x)


def test_patchify_rejects_indivisible():
    with pytest.raises(ShapeError):
        patchify(torch.zeros(1, 10, 16, 3), 8)


def test_grid_positions_row_major():
    p = grid_positions(2, 2, 3)
    assert p.shape == (12, 3)
    assert p[0].tolist() == [0, 0, 0]
    assert p[4].tolist() == [0, 1, 1]
    assert p[6].tolist() == [1, 0, 0]


def test_latent_grid_position_count_checked():
    with pytest.raises(ShapeError):
        LatentGrid(torch.zeros(1, 2, 2, 2, 4), grid_positions(1, 2, 2))


def test_reference_remap_offsets_past_grid():
    assert rope_remap_reference(PositionIndex(0, 1, 2), grid_w=4, grid_h=4) == (-1, 5, 6)
    ref = reference_positions(4, 4)
    assert (ref[:, 0] == -1).all()
    assert {tuple(r) for r in ref.tolist()} == {(-1, i + 4, j + 4) for i in range(4) for j in range(4)}


@pytest.mark.parametrize("head_dim,expected", [(6, (2, 2, 2)), (16, (8, 4, 4)), (32, (12, 10, 10))])
def test_rope_axis_split(head_dim, expected):
    dims = RopeConfig(head_dim).axis_dims()
    assert dims == expected
    assert sum(dims) == head_dim


@pytest.mark.parametrize("head_dim", [4, 7])
def test_rope_rejects_small_or_odd(head_dim):
    with pytest.raises(ShapeError):
        RopeConfig(head_dim).axis_dims()


def test_rope_preserves_norm():
    cfg = RopeConfig(12)
    x = torch.randn(5, 12, dtype=torch.float64)
    pos = torch.tensor([[0, 0, 0], [1, 2, 3], [-1, 5, 6], [3, 1, 0], [7, 7, 7]])
    y = apply_rope(x, pos, cfg)
    assert torch.allclose(x.norm(dim=-1), y.norm(dim=-1))


def test_zero_linear_starts_at_zero():
    z = ZeroLinear(7, 5)
    assert torch.count_nonzero(z(torch.randn(3, 7))) == 0


def test_dit_block_identity_at_init_without_cond():
    blk = DiTBlock(16, 2, 8)
    x = torch.randn(2, 6, 16)
    out = blk(x, grid_positions(1, 2, 3), torch.randn(2, 16))
    assert torch.equal(out, x)


def test_dit_block_rejects_non_finite():
    blk = DiTBlock(16, 2, 8)
    x = torch.randn(1, 4, 16)
    x[0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteError):
        blk(x, grid_positions(1, 2, 2), torch.randn(1, 16))


def test_dit_block_mid_hook_called():
    blk = DiTBlock(16, 2, 8)
    seen = []
    blk(torch.randn(1, 4, 16), grid_positions(1, 2, 2), torch.randn(1, 16), mid_hook=lambda h: seen.append(h) or h)
    assert len(seen) == 1


def test_attention_mask_blocks_context():
    attn = Attention(8, 2, context_dim=4)
    x = torch.randn(1, 3, 8)
    ctx = torch.randn(1, 2, 4)
    mask = torch.tensor([[True, False]])[:, None, None, :]
    a = attn(x, context=ctx, attn_mask=mask)
    ctx2 = ctx.clone()
    ctx2[0, 1] = 100.0
    assert torch.equal(a, attn(x, context=ctx2, attn_mask=mask))


def test_residual_stack_telescopes():
    outs = [torch.randn(1, 4, 8) for _ in range(3)]
    rs = ResidualStack.from_outputs(outs, (1, 2, 2))
    assert torch.equal(rs.entries[0], outs[0])
    assert torch.allclose(rs.final_output(), outs[-1], atol=1e-6)


def test_residual_stack_identical_layers_give_zero_entry():
    h = torch.randn(1, 4, 8)
    rs = ResidualStack.from_outputs([h, h.clone()], (1, 2, 2))
    assert torch.count_nonzero(rs.entries[1]) == 0
