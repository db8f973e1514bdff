import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from editforge.lora import (
    FreezeSchedule,
    LoraLayer,
    SamplerConfig,
    ToyBlock,
    batch_loss,
    block_forward,
    block_grads,
    grad_check,
    load_block,
    lora_forward,
    lora_init,
    lora_merge,
    lora_unmerge,
    make_block,
    randomize_adapters,
    run_check,
    sample_instructions,
    save_block,
    train_step,
)


# -- layer basics ----------------------------------------------------------


def test_zero_init_b_gives_exact_base_forward():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(8, 8))
    layer = lora_init(8, 8, 2, alpha=4.0, seed=1)
    x = rng.normal(size=8)
    assert np.array_equal(lora_forward(w, layer, x), w @ x)


def test_init_deterministic_by_seed():
    l1 = lora_init(16, 16, 4, 2.0, seed=42)
    l2 = lora_init(16, 16, 4, 2.0, seed=42)
    assert np.array_equal(l1.a_matrix, l2.a_matrix)


def test_rank_bound_enforced():
    with pytest.raises(ValueError):
        lora_init(8, 8, 9, 1.0, seed=0)


def test_hand_computed_forward():
    # d=2, W=I, A=[[1,0]], B=[[0],[1]], alpha=r=1, x=(1,0) -> (1,1)
    w = np.eye(2)
    layer = LoraLayer(
        a_matrix=np.array([[1.0, 0.0]]),
        b_matrix=np.array([[0.0], [1.0]]),
        rank=1,
        alpha=1.0,
        placement="qkv_fused",
    )
    out = lora_forward(w, layer, np.array([1.0, 0.0]))
    assert np.allclose(out, [1.0, 1.0], atol=0, rtol=0)


def test_delta_linear_in_alpha():
    rng = np.random.default_rng(3)
    w = rng.normal(size=(6, 6))
    x = rng.normal(size=6)
    l1 = lora_init(6, 6, 2, alpha=1.0, seed=5)
    l1.b_matrix = rng.normal(size=l1.b_matrix.shape)
    l2 = LoraLayer(l1.a_matrix.copy(), l1.b_matrix.copy(), 2, alpha=2.0, placement="qkv_fused")
    d1 = lora_forward(w, l1, x) - w @ x
    d2 = lora_forward(w, l2, x) - w @ x
    assert np.allclose(d2, 2 * d1)


@given(
    d=st.integers(4, 16),
    r=st.integers(1, 4),
    alpha=st.floats(0.5, 16.0),
    scale=st.integers(2, 8),
)
@settings(max_examples=40, deadline=None)
def test_alpha_over_rank_scaling_law(d, r, alpha, scale):
    # for fixed B.A, delta is linear in alpha and inversely linear in rank
    rng = np.random.default_rng(d * 100 + r)
    a = rng.normal(size=(r, d))
    b = rng.normal(size=(d, r))
    base = LoraLayer(a, b, r, alpha, "attn_out_proj").delta()
    scaled_alpha = LoraLayer(a, b, r, alpha * scale, "attn_out_proj").delta()
    assert np.allclose(scaled_alpha, scale * base, rtol=1e-12)
    if r * scale <= d:
        a2 = np.vstack([a] + [np.zeros_like(a)] * (scale - 1))
        b2 = np.hstack([b] + [np.zeros_like(b)] * (scale - 1))
        bigger_rank = LoraLayer(a2, b2, r * scale, alpha, "attn_out_proj").delta()
        assert np.allclose(bigger_rank, base / scale, rtol=1e-12)


# -- merge / unmerge ------------------------------------------------------------


def test_merge_equivalence_random_instances():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(20):
        d = int(rng.integers(4, 65))
        r = int(rng.integers(1, min(d, 8) + 1))
        w = rng.normal(size=(d, d))
        layer = lora_init(d, d, r, float(rng.uniform(0.5, 8)), seed=int(rng.integers(1e6)))
        layer.b_matrix = rng.normal(size=layer.b_matrix.shape)
        merged = lora_merge(w, layer)
        for _ in range(5):
            x = rng.normal(size=d)
            ref = lora_forward(w, layer, x)
            got = merged @ x
            worst = max(worst, np.max(np.abs(ref - got)) / np.max(np.abs(ref)))
    assert worst <= 1e-10


def test_merge_roundtrip():
    rng = np.random.default_rng(9)
    w = rng.normal(size=(64, 64))
    layer = lora_init(64, 64, 4, 8.0, seed=2)
    layer.b_matrix = rng.normal(size=layer.b_matrix.shape)
    rt = lora_unmerge(lora_merge(w, layer), layer)
    assert np.linalg.norm(rt - w) / np.linalg.norm(w) <= 1e-12


def test_merge_with_zero_b_is_bitwise_identity():
    rng = np.random.default_rng(11)
    w = rng.normal(size=(16, 16))
    layer = lora_init(16, 16, 2, 4.0, seed=3)
    assert np.array_equal(lora_merge(w, layer), w)


# -- block forward ----------------------------------------------------------------


def test_fresh_adapters_change_no_output_bit():
    block = make_block(width=16, heads=4, seed=21)
    bare = ToyBlock(
        w_qkv=block.w_qkv.copy(), w_o=block.w_o.copy(), w_p=block.w_p.copy(),
        heads=4, width=16,
    )
    x = np.random.default_rng(22).normal(size=(6, 16))
    assert np.array_equal(block_forward(block, x), block_forward(bare, x))


def test_single_token_hand_attention():
    # one token, h=1, identity weights: attention of a single token returns
    # its value vector, so the block is W_p @ W_o @ v = v with identities
    d = 2
    block = ToyBlock(
        w_qkv=np.vstack([np.eye(d)] * 3), w_o=np.eye(d), w_p=np.eye(d), heads=1, width=d
    )
    x = np.array([[0.3, -1.2]])
    out = block_forward(block, x)
    assert np.allclose(out, x, rtol=0, atol=1e-15)


def test_duplicate_tokens_attention_symmetry():
    block = make_block(width=8, heads=2, seed=33)
    randomize_adapters(block, 34)
    token = np.random.default_rng(35).normal(size=8)
    x = np.vstack([token, token])
    out = block_forward(block, x)
    assert np.allclose(out[0], out[1], rtol=0, atol=1e-12)


def test_width_mismatch_rejected():
    block = make_block(width=8, heads=2, seed=1)
    with pytest.raises(ValueError):
        block_forward(block, np.zeros((3, 9)))


# -- gradients ------------------------------------------------------------------


@pytest.mark.parametrize("stage", ["stage1", "stage2"])
def test_grad_check_against_finite_differences(stage):
    block = make_block(width=8, heads=2, seed=40)
    randomize_adapters(block, 41)
    rng = np.random.default_rng(42)
    x = rng.normal(size=(4, 8))
    t = rng.normal(size=(4, 8))
    report = grad_check(block, FreezeSchedule(stage), x, t)
    assert report["max_rel_error"] <= 1e-6


def test_stage2_report_only_consistency_layers():
    block = make_block(width=8, heads=2, seed=43)
    randomize_adapters(block, 44)
    rng = np.random.default_rng(45)
    _, grads = block_grads(block, rng.normal(size=(3, 8)), rng.normal(size=(3, 8)), FreezeSchedule("stage2"))
    layers = {key.split(".")[0] for key in grads}
    assert layers == {"consistency_o", "consistency_p"}


def test_base_weights_never_in_gradient_report():
    block = make_block(width=8, heads=2, seed=46)
    randomize_adapters(block, 47)
    rng = np.random.default_rng(48)
    for stage in ("stage1", "stage2"):
        _, grads = block_grads(
            block, rng.normal(size=(3, 8)), rng.normal(size=(3, 8)), FreezeSchedule(stage)
        )
        assert all(k.split(".")[0] in {"pattern_shift", "consistency_o", "consistency_p"} for k in grads)
        assert not any("w_qkv" in k or "w_o" in k or "w_p" in k for k in grads)


# -- training steps -----------------------------------------------------------------


def _batch(d, seed):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(4, d)), rng.normal(size=(4, d))


def test_stage2_step_freezes_pattern_shift_bitwise():
    block = make_block(width=8, heads=2, seed=50)
    randomize_adapters(block, 51)
    ps_a = block.adapters.pattern_shift.a_matrix.copy()
    ps_b = block.adapters.pattern_shift.b_matrix.copy()
    base = block.w_qkv.copy()
    before_cons = block.adapters.consistency_o.a_matrix.copy()
    report = train_step(block, FreezeSchedule("stage2"), _batch(8, 52), 0.05)
    assert not report["diverged"]
    assert np.array_equal(ps_a, block.adapters.pattern_shift.a_matrix)
    assert np.array_equal(ps_b, block.adapters.pattern_shift.b_matrix)
    assert np.array_equal(base, block.w_qkv)
    assert not np.array_equal(before_cons, block.adapters.consistency_o.a_matrix)


def test_zero_learning_rate_changes_nothing():
    block = make_block(width=8, heads=2, seed=53)
    randomize_adapters(block, 54)
    snapshot = {k: (l.a_matrix.copy(), l.b_matrix.copy()) for k, l in block.adapters.layers().items()}
    train_step(block, FreezeSchedule("stage1"), _batch(8, 55), 0.0)
    for name, layer in block.adapters.layers().items():
        assert np.array_equal(snapshot[name][0], layer.a_matrix)
        assert np.array_equal(snapshot[name][1], layer.b_matrix)


def test_stage1_training_smoke_convergence():
    block = make_block(width=8, heads=2, seed=56)
    randomize_adapters(block, 57)
    batch = _batch(8, 58)
    losses = [batch_loss(block, *batch)]
    for _ in range(50):
        report = train_step(block, FreezeSchedule("stage1"), batch, 0.01)
        losses.append(report["loss"])
    decreases = sum(1 for a, b in zip(losses, losses[1:]) if b < a)
    assert decreases >= 45


def test_empty_batch_rejected():
    block = make_block(width=8, heads=2, seed=59)
    with pytest.raises(ValueError):
        train_step(block, FreezeSchedule("stage1"), (np.zeros((0, 8)), np.zeros((0, 8))), 0.1)


# -- sampler --------------------------------------------------------------------------


def _bank():
    rows = []
    for lang in ("en", "zh"):
        for style in ("declarative", "synonym", "interrogative", "passive"):
            for i in range(3):
                rows.append(
                    {"pair_id": f"p{i}", "text": f"{lang}-{style}-{i}", "language": lang, "style": style}
                )
    return rows


def test_sampler_all_english_when_ratio_zero():
    out = sample_instructions(_bank(), SamplerConfig(zh_ratio=0.0, seed=1), 200)
    assert all(row["language"] == "en" for row in out)


def test_sampler_ratio_statistics():
    out = sample_instructions(_bank(), SamplerConfig(zh_ratio=0.5, seed=7), 10_000)
    zh = sum(1 for row in out if row["language"] == "zh") / len(out)
    assert 0.48 <= zh <= 0.52


def test_sampler_single_style_weight():
    config = SamplerConfig(
        zh_ratio=0.3,
        style_weights={"declarative": 1.0, "synonym": 0, "interrogative": 0, "passive": 0},
        seed=3,
    )
    out = sample_instructions(_bank(), config, 500)
    assert all(row["style"] == "declarative" for row in out)


def test_sampler_deterministic_by_seed():
    c = SamplerConfig(zh_ratio=0.5, seed=11)
    assert sample_instructions(_bank(), c, 100) == sample_instructions(_bank(), c, 100)


def test_sampler_empty_zh_pool_errors():
    en_only = [r for r in _bank() if r["language"] == "en"]
    with pytest.raises(ValueError):
        sample_instructions(en_only, SamplerConfig(zh_ratio=0.5, seed=1), 10)


def test_sampler_config_invariants():
    with pytest.raises(ValueError):
        SamplerConfig(zh_ratio=1.5)
    with pytest.raises(ValueError):
        SamplerConfig(zh_ratio=0.5, style_weights={"declarative": 0.0})


# -- snapshots & self-check --------------------------------------------------------------


def test_snapshot_roundtrip(tmp_path):
    block = make_block(width=16, heads=4, seed=60)
    randomize_adapters(block, 61)
    path = tmp_path / "block.npz"
    save_block(block, path)
    loaded = load_block(path)
    x = np.random.default_rng(62).normal(size=(5, 16))
    assert np.array_equal(block_forward(block, x), block_forward(loaded, x))


def test_run_check_passes():
    assert run_check(seed=0)["passed"]
