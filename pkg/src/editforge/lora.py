"""Low-rank adapters on a toy attention block, with freeze schedules.

Desk-scale verification that the hierarchical adapter architecture is
trainable as specified: one pattern-shifting adapter on the fused QKV
projection, two consistency adapters on the projections after attention,
a frozen base, two-stage freeze schedules, merge/unmerge, analytic
gradients checked against central finite differences, and the mixed
Chinese-English instruction sampler. Everything is float64 and
deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

PLACEMENTS = ("qkv_fused", "attn_out_proj", "post_attn_proj_2")

FD_STEP = 1e-5


@dataclass
class LoraLayer:
    a_matrix: np.ndarray  # (r, d_in)
    b_matrix: np.ndarray  # (d_out, r)
    rank: int
    alpha: float
    placement: str

    def __post_init__(self):
        if self.placement not in PLACEMENTS:
            raise ValueError(f"unknown placement: {self.placement}")
        d_out, r_b = self.b_matrix.shape
        r_a, d_in = self.a_matrix.shape
        if r_a != self.rank or r_b != self.rank:
            raise ValueError("matrix shapes inconsistent with rank")
        if self.rank > min(d_in, d_out):
            raise ValueError(f"rank {self.rank} exceeds min(d_in, d_out)")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return self.scaling * (self.b_matrix @ self.a_matrix)


def lora_init(
    d_in: int, d_out: int, rank: int, alpha: float, seed: int, placement: str = "qkv_fused"
) -> LoraLayer:
    """Seeded A with scale 1/sqrt(d_in), B zero: the delta starts exactly 0."""
    if rank < 1 or rank > min(d_in, d_out):
        raise ValueError(f"rank must lie in [1, {min(d_in, d_out)}]")
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(rank, d_in))
    b = np.zeros((d_out, rank))
    return LoraLayer(a_matrix=a, b_matrix=b, rank=rank, alpha=alpha, placement=placement)


def lora_forward(w: np.ndarray, layer: Optional[LoraLayer], x: np.ndarray) -> np.ndarray:
    if layer is None:
        return w @ x
    if layer.a_matrix.shape[1] != w.shape[1] or layer.b_matrix.shape[0] != w.shape[0]:
        raise ValueError("adapter shape incompatible with base weight")
    return w @ x + layer.scaling * (layer.b_matrix @ (layer.a_matrix @ x))


def lora_merge(w: np.ndarray, layer: LoraLayer) -> np.ndarray:
    if layer.delta().shape != w.shape:
        raise ValueError("adapter delta shape incompatible with base weight")
    return w + layer.delta()


def lora_unmerge(w_merged: np.ndarray, layer: LoraLayer) -> np.ndarray:
    if layer.delta().shape != w_merged.shape:
        raise ValueError("adapter delta shape incompatible with merged weight")
    return w_merged - layer.delta()


@dataclass
class AdapterSet:
    pattern_shift: LoraLayer  # qkv_fused
    consistency_o: LoraLayer  # attn_out_proj
    consistency_p: LoraLayer  # post_attn_proj_2

    def __post_init__(self):
        if self.pattern_shift.placement != "qkv_fused":
            raise ValueError("pattern_shift adapter must sit at qkv_fused")
        if self.consistency_o.placement != "attn_out_proj":
            raise ValueError("consistency_o adapter must sit at attn_out_proj")
        if self.consistency_p.placement != "post_attn_proj_2":
            raise ValueError("consistency_p adapter must sit at post_attn_proj_2")

    def layers(self) -> dict[str, LoraLayer]:
        return {
            "pattern_shift": self.pattern_shift,
            "consistency_o": self.consistency_o,
            "consistency_p": self.consistency_p,
        }


@dataclass
class ToyBlock:
    w_qkv: np.ndarray  # (3d, d), frozen
    w_o: np.ndarray  # (d, d), frozen
    w_p: np.ndarray  # (d, d), frozen
    heads: int
    width: int
    adapters: Optional[AdapterSet] = None

    def __post_init__(self):
        d = self.width
        if d % self.heads != 0:
            raise ValueError("width must be divisible by head count")
        if self.w_qkv.shape != (3 * d, d) or self.w_o.shape != (d, d) or self.w_p.shape != (d, d):
            raise ValueError("base weight shapes inconsistent with width")
        # the backbone is frozen: nothing in this module may write these
        for w in (self.w_qkv, self.w_o, self.w_p):
            w.setflags(write=False)


def make_block(width: int, heads: int, seed: int, rank: int = 2, alpha: float = 4.0) -> ToyBlock:
    rng = np.random.default_rng(seed)
    d = width
    block = ToyBlock(
        w_qkv=rng.normal(0, 1.0 / math.sqrt(d), size=(3 * d, d)),
        w_o=rng.normal(0, 1.0 / math.sqrt(d), size=(d, d)),
        w_p=rng.normal(0, 1.0 / math.sqrt(d), size=(d, d)),
        heads=heads,
        width=d,
    )
    block.adapters = AdapterSet(
        pattern_shift=lora_init(d, 3 * d, rank, alpha, seed + 1, "qkv_fused"),
        consistency_o=lora_init(d, d, rank, alpha, seed + 2, "attn_out_proj"),
        consistency_p=lora_init(d, d, rank, alpha, seed + 3, "post_attn_proj_2"),
    )
    return block


def randomize_adapters(block: ToyBlock, seed: int, scale: float = 0.1) -> None:
    """Give A and B nonzero values (for gradient and freeze tests)."""
    rng = np.random.default_rng(seed)
    for layer in block.adapters.layers().values():
        layer.a_matrix = rng.normal(0, scale, size=layer.a_matrix.shape)
        layer.b_matrix = rng.normal(0, scale, size=layer.b_matrix.shape)


def _effective_weights(block: ToyBlock):
    if block.adapters is None:
        return block.w_qkv, block.w_o, block.w_p
    ads = block.adapters
    return (
        block.w_qkv + ads.pattern_shift.delta(),
        block.w_o + ads.consistency_o.delta(),
        block.w_p + ads.consistency_p.delta(),
    )


def _softmax(s: np.ndarray) -> np.ndarray:
    z = s - s.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_internals(block: ToyBlock, x: np.ndarray) -> dict:
    n, d = x.shape
    if d != block.width:
        raise ValueError(f"input width {d} does not match block width {block.width}")
    h, dh = block.heads, block.width // block.heads
    w_qkv, w_o, w_p = _effective_weights(block)
    qkv = x @ w_qkv.T
    q, k, v = qkv[:, :d], qkv[:, d : 2 * d], qkv[:, 2 * d :]
    qh = q.reshape(n, h, dh).transpose(1, 0, 2)
    kh = k.reshape(n, h, dh).transpose(1, 0, 2)
    vh = v.reshape(n, h, dh).transpose(1, 0, 2)
    s = qh @ kh.transpose(0, 2, 1) / math.sqrt(dh)
    p = _softmax(s)
    oh = p @ vh
    o = oh.transpose(1, 0, 2).reshape(n, d)
    y1 = o @ w_o.T
    y = y1 @ w_p.T
    return {
        "x": x, "w_qkv": w_qkv, "w_o": w_o, "w_p": w_p,
        "qh": qh, "kh": kh, "vh": vh, "p": p, "o": o, "y1": y1, "y": y,
        "n": n, "h": h, "dh": dh,
    }


def block_forward(block: ToyBlock, x: np.ndarray) -> np.ndarray:
    """Multi-head attention + two post projections, adapters included."""
    return _forward_internals(block, x)["y"]


def batch_loss(block: ToyBlock, x: np.ndarray, target: np.ndarray) -> float:
    y = block_forward(block, x)
    return 0.5 * float(np.sum((y - target) ** 2))


@dataclass
class FreezeSchedule:
    stage: str

    _TRAINABLE = {
        "stage1": ("pattern_shift", "consistency_o", "consistency_p"),
        "stage2": ("consistency_o", "consistency_p"),
    }

    def __post_init__(self):
        if self.stage not in self._TRAINABLE:
            raise ValueError(f"unknown stage: {self.stage}")

    def trainable_layers(self) -> tuple[str, ...]:
        return self._TRAINABLE[self.stage]

    def frozen_layers(self) -> tuple[str, ...]:
        return tuple(
            name for name in ("pattern_shift", "consistency_o", "consistency_p")
            if name not in self._TRAINABLE[self.stage]
        )


def block_grads(
    block: ToyBlock, x: np.ndarray, target: np.ndarray, schedule: FreezeSchedule
) -> tuple[float, dict[str, np.ndarray]]:
    """Backprop the squared-error loss to the schedule's trainable adapters.

    Returns (loss, grads) where grads maps "<layer>.a" / "<layer>.b" to
    arrays; frozen layers and base weights never appear.
    """
    it = _forward_internals(block, x)
    n, h, dh = it["n"], it["h"], it["dh"]
    d = block.width

    dy = it["y"] - target
    loss = 0.5 * float(np.sum(dy**2))
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss")

    dw_p = dy.T @ it["y1"]
    dy1 = dy @ it["w_p"]
    dw_o = dy1.T @ it["o"]
    do = dy1 @ it["w_o"]

    doh = do.reshape(n, h, dh).transpose(1, 0, 2)
    dp = doh @ it["vh"].transpose(0, 2, 1)
    dvh = it["p"].transpose(0, 2, 1) @ doh
    ds = it["p"] * (dp - (dp * it["p"]).sum(axis=-1, keepdims=True))
    dqh = ds @ it["kh"] / math.sqrt(dh)
    dkh = ds.transpose(0, 2, 1) @ it["qh"] / math.sqrt(dh)

    dq = dqh.transpose(1, 0, 2).reshape(n, d)
    dk = dkh.transpose(1, 0, 2).reshape(n, d)
    dv = dvh.transpose(1, 0, 2).reshape(n, d)
    dqkv = np.concatenate([dq, dk, dv], axis=1)
    dw_qkv = dqkv.T @ x

    effective_grads = {"pattern_shift": dw_qkv, "consistency_o": dw_o, "consistency_p": dw_p}
    grads: dict[str, np.ndarray] = {}
    for name in schedule.trainable_layers():
        layer = block.adapters.layers()[name]
        g = effective_grads[name]
        grads[f"{name}.b"] = layer.scaling * (g @ layer.a_matrix.T)
        grads[f"{name}.a"] = layer.scaling * (layer.b_matrix.T @ g)
    return loss, grads


def grad_check(
    block: ToyBlock,
    schedule: FreezeSchedule,
    x: np.ndarray,
    target: np.ndarray,
    step: float = FD_STEP,
) -> dict:
    """Compare analytic gradients to central finite differences.

    Only schedule-trainable parameters are perturbed; the report lists the
    max relative error per parameter and asserts frozen layers have no
    gradient entries.
    """
    loss, analytic = block_grads(block, x, target, schedule)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    report = {"stage": schedule.stage, "loss": loss, "per_param": {}, "max_rel_error": 0.0}
    layers = block.adapters.layers()
    for name in schedule.frozen_layers():
        assert f"{name}.a" not in analytic and f"{name}.b" not in analytic
    for key, grad in analytic.items():
        layer_name, mat_name = key.split(".")
        mat = layers[layer_name].a_matrix if mat_name == "a" else layers[layer_name].b_matrix
        worst = 0.0
        for idx in np.ndindex(mat.shape):
            orig = mat[idx]
            mat[idx] = orig + step
            lp = batch_loss(block, x, target)
            mat[idx] = orig - step
            lm = batch_loss(block, x, target)
            mat[idx] = orig
            numeric = (lp - lm) / (2 * step)
            denom = max(1.0, abs(grad[idx]), abs(numeric))
            worst = max(worst, abs(grad[idx] - numeric) / denom)
        report["per_param"][key] = worst
        report["max_rel_error"] = max(report["max_rel_error"], worst)
    return report


def train_step(
    block: ToyBlock,
    schedule: FreezeSchedule,
    batch: tuple[np.ndarray, np.ndarray],
    learning_rate: float,
) -> dict:
    """One plain gradient-descent step on the schedule's trainable adapters."""
    x, target = batch
    if x.size == 0:
        raise ValueError("batch must be non-empty")
    try:
        loss, grads = block_grads(block, x, target, schedule)
    except FloatingPointError:
        return {"loss": float("nan"), "diverged": True, "update_norms": {}}
    if any(not np.all(np.isfinite(g)) for g in grads.values()):
        return {"loss": loss, "diverged": True, "update_norms": {}}
    layers = block.adapters.layers()
    norms: dict[str, float] = {}
    for key, grad in grads.items():
        layer_name, mat_name = key.split(".")
        layer = layers[layer_name]
        update = learning_rate * grad
        if mat_name == "a":
            layer.a_matrix = layer.a_matrix - update
        else:
            layer.b_matrix = layer.b_matrix - update
        norms[key] = float(np.linalg.norm(update))
    return {"loss": loss, "diverged": False, "update_norms": norms}


# -- mixed-language instruction sampling -------------------------------------


@dataclass
class SamplerConfig:
    zh_ratio: float
    style_weights: dict[str, float] = field(
        default_factory=lambda: {"declarative": 1.0, "synonym": 1.0, "interrogative": 1.0, "passive": 1.0}
    )
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.zh_ratio <= 1.0:
            raise ValueError("zh_ratio must lie in [0, 1]")
        if any(w < 0 for w in self.style_weights.values()):
            raise ValueError("style weights must be nonnegative")
        if not any(w > 0 for w in self.style_weights.values()):
            raise ValueError("style weights must not all be zero")


def sample_instructions(bank: list[dict], config: SamplerConfig, n: int) -> list[dict]:
    """Seeded stream: language by zh_ratio, style by weights within language."""
    pools: dict[str, dict[str, list[dict]]] = {"en": {}, "zh": {}}
    for row in bank:
        pools[row["language"]].setdefault(row["style"], []).append(row)

    def language_pool(lang: str):
        styled = {
            s: rows
            for s, rows in pools[lang].items()
            if config.style_weights.get(s, 0.0) > 0 and rows
        }
        return styled

    need = ["en"] if config.zh_ratio < 1.0 else []
    if config.zh_ratio > 0.0:
        need.append("zh")
    prepared = {}
    for lang in need:
        styled = language_pool(lang)
        if not styled:
            raise ValueError(f"no sampleable instructions for language {lang}")
        styles = sorted(styled)
        weights = np.array([config.style_weights[s] for s in styles], dtype=float)
        prepared[lang] = (styles, weights / weights.sum(), styled)

    rng = np.random.default_rng(config.seed)
    out = []
    for _ in range(n):
        lang = "zh" if rng.random() < config.zh_ratio else "en"
        styles, probs, styled = prepared[lang]
        style = styles[rng.choice(len(styles), p=probs)]
        rows = styled[style]
        out.append(rows[rng.integers(len(rows))])
    return out


# -- snapshots ----------------------------------------------------------------


def save_block(block: ToyBlock, path: Path | str) -> None:
    """Snapshot base weights and adapters to one .npz with a header."""
    ads = block.adapters.layers()
    arrays = {"w_qkv": block.w_qkv, "w_o": block.w_o, "w_p": block.w_p}
    header = {"width": block.width, "heads": block.heads}
    for name, layer in ads.items():
        arrays[f"{name}.a"] = layer.a_matrix
        arrays[f"{name}.b"] = layer.b_matrix
        header[f"{name}.rank"] = layer.rank
        header[f"{name}.alpha"] = layer.alpha
    np.savez(path, header=np.array([repr(header)], dtype=object), **arrays)


def load_block(path: Path | str) -> ToyBlock:
    data = np.load(path, allow_pickle=True)
    header = eval(data["header"][0])  # trusted local snapshot file
    placements = {
        "pattern_shift": "qkv_fused",
        "consistency_o": "attn_out_proj",
        "consistency_p": "post_attn_proj_2",
    }
    layers = {
        name: LoraLayer(
            a_matrix=data[f"{name}.a"],
            b_matrix=data[f"{name}.b"],
            rank=int(header[f"{name}.rank"]),
            alpha=float(header[f"{name}.alpha"]),
            placement=placement,
        )
        for name, placement in placements.items()
    }
    return ToyBlock(
        w_qkv=data["w_qkv"].copy(),
        w_o=data["w_o"].copy(),
        w_p=data["w_p"].copy(),
        heads=int(header["heads"]),
        width=int(header["width"]),
        adapters=AdapterSet(**{
            "pattern_shift": layers["pattern_shift"],
            "consistency_o": layers["consistency_o"],
            "consistency_p": layers["consistency_p"],
        }),
    )


# -- self-check used by the `lora check` CLI -----------------------------------


def run_check(seed: int = 0) -> dict:
    """Full invariant sweep: identity, merge, freeze, gradient correctness."""
    rng = np.random.default_rng(seed)
    results = {}

    block = make_block(width=16, heads=4, seed=seed)
    x = rng.normal(size=(5, 16))
    bare = ToyBlock(
        w_qkv=block.w_qkv.copy(), w_o=block.w_o.copy(), w_p=block.w_p.copy(),
        heads=block.heads, width=block.width,
    )
    results["zero_init_identity"] = bool(
        np.array_equal(block_forward(block, x), block_forward(bare, x))
    )

    w = rng.normal(size=(64, 64))
    layer = lora_init(64, 64, 4, 8.0, seed + 7, "attn_out_proj")
    layer.b_matrix = rng.normal(size=layer.b_matrix.shape)
    merged = lora_merge(w, layer)
    worst = 0.0
    for _ in range(20):
        v = rng.normal(size=64)
        ref = lora_forward(w, layer, v)
        got = merged @ v
        worst = max(worst, float(np.max(np.abs(ref - got)) / (np.max(np.abs(ref)) + 1e-300)))
    results["merge_max_rel_error"] = worst
    rt = lora_unmerge(merged, layer)
    results["roundtrip_rel_error"] = float(np.linalg.norm(rt - w) / np.linalg.norm(w))

    block = make_block(width=8, heads=2, seed=seed + 1)
    randomize_adapters(block, seed + 2)
    x = rng.normal(size=(4, 8))
    t = rng.normal(size=(4, 8))
    before_ps = (block.adapters.pattern_shift.a_matrix.copy(),
                 block.adapters.pattern_shift.b_matrix.copy())
    for _ in range(20):
        train_step(block, FreezeSchedule("stage2"), (x, t), 0.01)
    results["freeze_pattern_shift_unchanged"] = bool(
        np.array_equal(before_ps[0], block.adapters.pattern_shift.a_matrix)
        and np.array_equal(before_ps[1], block.adapters.pattern_shift.b_matrix)
    )

    block = make_block(width=8, heads=2, seed=seed + 3)
    randomize_adapters(block, seed + 4)
    for stage in ("stage1", "stage2"):
        report = grad_check(block, FreezeSchedule(stage), x, t)
        results[f"grad_max_rel_error_{stage}"] = report["max_rel_error"]

    results["passed"] = (
        results["zero_init_identity"]
        and results["merge_max_rel_error"] <= 1e-10
        and results["roundtrip_rel_error"] <= 1e-12
        and results["freeze_pattern_shift_unchanged"]
        and results["grad_max_rel_error_stage1"] <= 1e-6
        and results["grad_max_rel_error_stage2"] <= 1e-6
    )
    return results
