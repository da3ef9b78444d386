import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from explora import autograd as ag
from explora.autograd import ContractError, NumericError, Tensor, grad_check
from explora.peft import Partition
from explora.vit import (VIT_L, Block, MAEDecoder, ViTConfig, ViTModel, attention_summary, classify,
                         cls_attention_map, param_count, param_shapes, patchify, pos_interp_matrix,
                         unpatchify)

VITL = ViTConfig(**VIT_L)
TINY = ViTConfig(image_size=16, patch_size=4, depth=2, dim=16, heads=2, dtype="float64")


# --- parameter accounting against the published ViT-L table ------------------

# (unfrozen blocks, rank, published trainable count in millions)
TABLE_ROWS = [
    ({24}, 0, 12.7),         # [L], r=0
    ({23, 24}, 0, 25.3),     # [L-1, L], r=0
    ({24}, 8, 13.4),         # [L], r=8, Q/V
    ({24}, 32, 15.7),        # [L], r=32
    ({24}, 64, 18.7),        # [L], r=64
    ({23, 24}, 64, 31.1),    # [L-1, L], r=64
    ({1}, 64, 18.7),         # [1], r=64: same count wherever the block sits
    ({9}, 64, 18.7),
]


@pytest.mark.parametrize("blocks,rank,published", TABLE_ROWS)
def test_vitl_counts_match_published_table(blocks, rank, published):
    n = param_count(VITL, Partition(frozenset(blocks), rank))["trainable"]
    assert abs(n / 1e6 - published) / published < 0.02


def test_lora_only_r8_qv_is_0_8m():
    n = param_count(VITL, Partition(frozenset(), 8, norms_unfrozen=False))["trainable"]
    assert n == 24 * 2 * 8 * (1024 + 1024)          # 786,432
    assert abs(n / 1e6 - 0.8) / 0.8 < 0.02


def test_vitl_total_is_about_303m():
    total = sum(int(np.prod(s)) for s in param_shapes(VITL).values())
    assert total / 1e6 == pytest.approx(303.3, rel=0.01)


def test_counts_by_hand_for_one_block():
    # one full block: 4 attention projections (d*d + d) + MLP (2*4d*d + 4d + d) + 2 norms (2*2d)
    d = 1024
    block = 4 * (d * d + d) + (4 * d * d + 4 * d) + (4 * d * d + d) + 4 * d
    c = param_count(VITL, Partition(frozenset({24}), 0, norms_unfrozen=False))
    assert c["by_category"]["block_full"] == block


def test_analytic_count_matches_instantiated_model():
    from explora.peft import inject
    cfg = ViTConfig(depth=3, dim=32, heads=4)
    part = Partition(frozenset({2}), 4, frozenset({"Q", "V", "MLP"}))
    model = inject(ViTModel(cfg), part)
    assert param_count(cfg, part)["trainable"] == model.num_params(trainable_only=True)
    assert param_count(cfg, part)["trainable"] + param_count(cfg, part)["frozen"] == model.num_params()


@settings(max_examples=30, deadline=None)
@given(st.sets(st.integers(1, 6), max_size=6), st.integers(0, 16), st.integers(0, 16))
def test_count_is_monotone_in_rank_and_blocks(blocks, r1, r2):
    cfg = ViTConfig()
    lo, hi = sorted((r1, r2))
    a = param_count(cfg, Partition(frozenset(blocks), lo))["trainable"]
    b = param_count(cfg, Partition(frozenset(blocks), hi))["trainable"]
    assert a <= b
    more = frozenset(blocks) | {1}
    assert param_count(cfg, Partition(more, lo))["trainable"] >= a


def test_classify_categories():
    p = Partition(frozenset({2}), 4, extra_trainable=frozenset({"patch_embed"}))
    assert classify("blocks.1.mlp.fc1.weight", p) == "block_full"
    assert classify("blocks.0.mlp.fc1.weight", p) is None
    assert classify("blocks.0.attn.q.lora.A", p) == "lora"
    assert classify("blocks.0.norm1.weight", p) == "norm"
    assert classify("norm.bias", p) == "norm"
    assert classify("patch_embed.0.weight", p) == "extra"
    assert classify("pos_embed.0", p) is None


# --- patches ------------------------------------------------------------------

def test_patch_counts_at_224_and_32():
    assert VITL.num_patches == 196
    assert patchify(np.zeros((3, 224, 224)), VITL)[0].shape == (196, 768)
    desk = ViTConfig()
    assert patchify(np.zeros((3, 32, 32)), desk)[0].shape == (16, 192)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_patchify_unpatchify_roundtrip(seed):
    cfg = ViTConfig(image_size=16, patch_size=4, in_channels=5, channel_groups=[[0, 2], [1, 3, 4]])
    x = np.random.default_rng(seed).random((2, 5, 16, 16))
    assert np.array_equal(unpatchify(patchify(x, cfg), cfg), x)


def test_patch_layout_is_row_major_channel_first():
    cfg = ViTConfig(image_size=4, patch_size=2, in_channels=1, depth=1, dim=4, heads=1)
    x = np.arange(16.0).reshape(1, 4, 4)
    p = patchify(x, cfg)[0]
    assert p[0].tolist() == [0, 1, 4, 5]
    assert p[1].tolist() == [2, 3, 6, 7]
    assert p[2].tolist() == [8, 9, 12, 13]


def test_pos_interpolation_identity_and_rows_sum_to_one():
    assert np.allclose(pos_interp_matrix(4, 4), np.eye(16))
    m = pos_interp_matrix(4, 6)
    assert m.shape == (36, 16)
    assert m.sum(axis=1) == pytest.approx(np.ones(36))


def test_model_accepts_other_crop_sizes():
    m = ViTModel(TINY)
    with ag.no_grad():
        out = m(np.zeros((2, 3, 8, 8)))
    assert out.patches.shape == (2, 4, 16)


# --- blocks and attention ------------------------------------------------------

def test_block_with_zeroed_output_projections_is_identity():
    rng = np.random.default_rng(0)
    blk = Block(8, 2, 32, rng, np.float64)
    for lin in (blk.attn.o, blk.mlp.fc2):
        lin.weight.data[:] = 0
        lin.bias.data[:] = 0
    x = rng.standard_normal((2, 5, 8))
    with ag.no_grad():
        y, _ = blk(Tensor(x))
    assert np.array_equal(y.data, x)


def test_attention_rows_are_distributions():
    m = ViTModel(TINY)
    with ag.no_grad():
        out = m(np.random.default_rng(1).standard_normal((2, 3, 16, 16)), collect=("attn", [1, 2]))
    for s in out.attn.values():
        assert s.shape == (2, 2, 17, 17)
        assert s.sum(-1) == pytest.approx(np.ones((2, 2, 17)), abs=1e-12)
    assert cls_attention_map(out.attn[1]).shape == (2, 16)


def test_patch_outputs_are_permutation_equivariant_without_positions():
    m = ViTModel(TINY)
    for p in m.pos_embed:
        p.data[:] = 0
    x = np.random.default_rng(2).standard_normal((1, 3, 16, 16))
    perm = np.random.default_rng(3).permutation(16)
    with ag.no_grad():
        base = m(x)
        tok = m.embed(x)
    # permute tokens by permuting patches in image space
    pp = patchify(x, TINY)[0][:, perm]
    xp = unpatchify([pp], TINY)
    with ag.no_grad():
        moved = m(xp)
    assert np.allclose(moved.patches.data[0], base.patches.data[0][perm], atol=1e-10)
    assert np.allclose(moved.cls.data, base.cls.data, atol=1e-10)
    assert tok.shape == (1, 16, 16)


def test_visible_idx_drops_tokens():
    m = ViTModel(TINY)
    vis = np.array([[0, 3, 5, 9]] * 2)
    with ag.no_grad():
        out = m(np.zeros((2, 3, 16, 16)), visible_idx=vis)
    assert out.patches.shape == (2, 4, 16)
    assert out.tokens_processed == 4


def test_all_blocks_collects_every_depth():
    m = ViTModel(TINY)
    with ag.no_grad():
        out = m(np.zeros((1, 3, 16, 16)), collect="all_blocks")
    assert len(out.blocks) == 2 and out.blocks[0].shape == (1, 17, 16)


def test_nonfinite_activation_names_the_block():
    m = ViTModel(TINY)
    m.blocks[1].mlp.fc1.weight.data[0, 0] = np.nan
    with pytest.raises(NumericError, match="block 2"):
        with ag.no_grad():
            m(np.ones((1, 3, 16, 16)))


def test_rejects_wrong_channel_count():
    with pytest.raises(ContractError):
        ViTModel(TINY).embed(np.zeros((1, 4, 16, 16)))


def test_config_validation():
    with pytest.raises(ContractError):
        ViTConfig(image_size=30, patch_size=8)
    with pytest.raises(ContractError):
        ViTConfig(dim=30, heads=4)
    with pytest.raises(ContractError):
        ViTConfig(in_channels=4, channel_groups=[[0, 1], [1, 2]])


def test_grouped_model_has_one_embedding_per_group():
    cfg = ViTConfig(image_size=16, patch_size=4, in_channels=6, channel_groups=[[0, 1, 2], [3, 4, 5]],
                    depth=1, dim=16, heads=2)
    m = ViTModel(cfg)
    with ag.no_grad():
        out = m(np.zeros((1, 6, 16, 16)))
    assert len(m.patch_embed) == 2 and out.patches.shape == (1, 32, 16)


def test_mae_decoder_output_shapes():
    cfg = TINY
    enc, dec = ViTModel(cfg), MAEDecoder(cfg, dim=8, depth=1, heads=2)
    keep = np.sort(np.random.default_rng(0).permutation(16)[:4])[None].repeat(2, 0)
    masked = np.array([np.setdiff1d(np.arange(16), k) for k in keep])
    ids_restore = np.argsort(np.concatenate([keep, masked], axis=1), axis=1)
    with ag.no_grad():
        lat = enc(np.zeros((2, 3, 16, 16)), visible_idx=keep)
        latent = ag.concat([lat.cls[:, None], lat.patches], axis=1)
        pred = dec(latent, ids_restore)
    assert [p.shape for p in pred] == [(2, 16, 48)]


# --- gradients through a whole block -------------------------------------------

def _sharp_block(rng):
    """A block with O(1) weights so attention is far from uniform and every gradient is sizeable."""
    blk = Block(8, 2, 16, rng, np.float64)
    for _, p in blk.named_parameters():
        p.data[:] = rng.standard_normal(p.shape) * (0.5 if p.ndim == 2 else 0.3) + (1.0 if p.ndim == 1 else 0)
    return blk


def _block_param_check(name):
    rng = np.random.default_rng(5)
    blk = _sharp_block(rng)
    x = Tensor(rng.standard_normal((2, 4, 8)))
    w = Tensor(rng.uniform(0.5, 1.5, (2, 4, 8)))
    owner, attr = blk, name.split(".")
    for a in attr[:-1]:
        owner = getattr(owner, a)
    orig = getattr(owner, attr[-1])

    def fn(t):
        setattr(owner, attr[-1], t)
        try:
            y, _ = blk(x)
            return ag.tsum(ag.mul(y - x, w))      # drop the constant residual term
        finally:
            setattr(owner, attr[-1], orig)

    return grad_check(fn, orig.data)


@pytest.mark.parametrize("name", ["norm1.weight", "attn.q.weight", "attn.k.weight", "attn.v.bias",
                                  "attn.o.weight", "norm2.bias", "mlp.fc1.weight", "mlp.fc2.bias"])
def test_full_block_parameter_gradients(name):
    assert _block_param_check(name) < 1e-4


def test_key_bias_gradient_is_identically_zero():
    # q.(k + b) shifts each attention row by a constant, which softmax cancels
    rng = np.random.default_rng(5)
    blk = _sharp_block(rng)
    x = Tensor(rng.standard_normal((2, 4, 8)))
    with ag.Tape() as tape:
        y, _ = blk(x)
        loss = ag.tsum(ag.mul(y, Tensor(rng.uniform(0.5, 1.5, (2, 4, 8)))))
    tape.backward(loss)
    assert np.abs(blk.attn.k.bias.grad).max() < 1e-12
    assert np.abs(blk.attn.q.bias.grad).max() > 1e-3


def test_full_block_input_gradient():
    rng = np.random.default_rng(6)
    blk = _sharp_block(rng)
    w = Tensor(rng.uniform(0.5, 1.5, (2, 4, 8)))
    assert grad_check(lambda t: ag.tsum(ag.mul(blk(t)[0], w)), rng.standard_normal((2, 4, 8))) < 1e-4


# --- attention visualisation ----------------------------------------------------

def test_attention_summary_rescales_to_unit_interval():
    s = np.random.default_rng(0).random(50)
    out = attention_summary(s)
    assert out.min() == 0 and out.max() == 1


def test_attention_summary_constant_map_unchanged():
    s = np.full(10, 0.3)
    assert np.array_equal(attention_summary(s), s)


def test_attention_summary_clips_outliers_with_reference_stats():
    # one 10x outlier among nine ones, clipped against reference (mean 1, std 0.1) at 5 sigma
    s = np.ones(10)
    s[3] = 10.0
    s[0] = 0.95
    out = attention_summary(s, 5.0, stats=(1.0, 0.1))
    # clipped to 1.5: the outlier no longer dominates the rescaled map
    assert out[3] == 1.0
    assert out[1] == pytest.approx((1.0 - 0.95) / (1.5 - 0.95))


def test_attention_summary_in_sample_stats_cannot_clip_a_single_outlier_of_ten():
    # with in-sample statistics the largest possible z-score among n values is sqrt(n-1) = 3 < 5
    s = np.ones(10)
    s[3] = 1e6
    z = (s.max() - s.mean()) / s.std()
    assert z == pytest.approx(3.0)
    out = attention_summary(s, 5.0)
    assert out[3] == 1.0 and out[0] == 0.0


def test_attention_summary_rejects_bad_sigma():
    with pytest.raises(ContractError):
        attention_summary(np.ones(3), 0.0)
