import io
import itertools

import pytest
from PIL import Image

from conftest import make_png

from editforge.construct import (
    ConstructError,
    ConstructionDeferred,
    InContextLayout,
    TemplateSpec,
    build_auxiliary_info,
    build_expert_pair,
    enumerate_pairings,
    expert_edit,
    gen_instruction,
    lora_flow,
    refine_instruction,
    split_incontext,
    template_apply,
)
from editforge.mocks import ExpertGrayscale, ExpertIdentity, ExpertInvert, instruct_echo
from editforge.records import EditPair, InstructionRecord, make_pair_id


# -- auxiliary info -----------------------------------------------------------


def test_auxiliary_info_populates_both_channels():
    aux = build_auxiliary_info([("cup", 2), ("table", 1)], ["remove the {object}"])
    assert aux.object_counts == [("cup", 2), ("table", 1)]
    assert "remove the cup" in aux.predefined_instructions


def test_zero_count_dropped_and_empty_bank_errors():
    with pytest.raises(ConstructError) as exc:
        build_auxiliary_info([("cup", 0)], [])
    assert exc.value.reason == "no_edit_affordance"


def test_applicable_bounded_by_cross_product():
    categories = [(f"cat{i}", 1) for i in range(5)]
    bank = [f"verb{j} the {{object}}" for j in range(10)]
    aux = build_auxiliary_info(categories, bank)
    # independent oracle: brute-force cross product
    oracle = {t.replace("{object}", c) for t, (c, _) in itertools.product(bank, categories)}
    assert set(aux.predefined_instructions) <= oracle
    assert len(aux.predefined_instructions) <= 50
    names = {c for c, _ in categories}
    for instruction in aux.predefined_instructions:
        assert any(name in instruction for name in names)


# -- instruction generation ------------------------------------------------------


def test_gen_instruction_echoes_first_template(client, image_in_store):
    client.register_mock("vlm", instruct_echo)
    aux = build_auxiliary_info([("cup", 1)], ["remove the {object}"])
    instruction, task = gen_instruction(image_in_store, aux, client, "vlm")
    assert instruction == "remove the cup"
    assert task == "object_remove"


def test_gen_instruction_constrained_mock(client, image_in_store):
    client.register_mock("vlm", instruct_echo)
    aux = build_auxiliary_info([("hat", 1)], ["add a red hat"])
    instruction, _ = gen_instruction(image_in_store, aux, client, "vlm")
    assert "red hat" in instruction


def test_gen_instruction_adapter_down_defers(client, image_in_store):
    client.register_mock("vlm", lambda req: {"status": "retryable_error"})
    aux = build_auxiliary_info([("cup", 1)], ["remove the {object}"])
    with pytest.raises(ConstructionDeferred):
        gen_instruction(image_in_store, aux, client, "vlm")


# -- expert edits ----------------------------------------------------------------


def test_identity_expert_discards_pair_with_no_change(client, corpus_store, pair_store, image_in_store):
    client.register_mock("vlm", instruct_echo)
    client.register_mock("expert", ExpertIdentity(corpus_store))
    pair = build_expert_pair(
        image_in_store, [("cup", 1)], ["remove the {object}"], client, corpus_store, pair_store
    )
    assert pair is None
    audits = pair_store.audits()
    assert audits and audits[0]["reason"] == "no_change"


def test_grayscale_expert_produces_pair(client, corpus_store, pair_store, image_in_store):
    client.register_mock("vlm", instruct_echo)
    client.register_mock("expert", ExpertGrayscale(corpus_store))
    pair = build_expert_pair(
        image_in_store, [("cup", 1)], ["remove the {object}"], client, corpus_store, pair_store
    )
    assert pair is not None
    assert pair.method == "expert"
    assert pair.edited_id != pair.source_id
    assert pair_store.get_pair(pair.pair_id) is not None


def test_expert_cache_replay_counts_one_call(client, corpus_store, image_in_store):
    mock = client.register_mock("expert", ExpertGrayscale(corpus_store))
    d1 = expert_edit(image_in_store, "gray it", "expert", client, corpus_store)
    d2 = expert_edit(image_in_store, "gray it", "expert", client, corpus_store)
    assert d1 == d2
    assert mock.call_count == 1


def test_expert_bad_output(client, corpus_store, image_in_store):
    client.register_mock("expert", lambda req: {"image_digest": "deadbeef" * 8})
    with pytest.raises(ConstructError) as exc:
        expert_edit(image_in_store, "x", "expert", client, corpus_store)
    assert exc.value.reason == "expert_bad_output"


# -- refinement -------------------------------------------------------------------


def _pair(source="a" * 64, edited="b" * 64, instruction="remove the cup"):
    return EditPair(
        pair_id=make_pair_id(source, edited, instruction, "expert"),
        source_id=source,
        edited_id=edited,
        instruction=InstructionRecord(primary_en=instruction),
        task="object_remove",
        method="expert",
    )


def test_refine_keeps_seed_in_provenance(client):
    client.register_mock(
        "vlm", lambda req: {"instruction": req.payload["instruction"] + " in the left region"}
    )
    pair = refine_instruction(_pair(), client, "vlm")
    assert pair.instruction.primary_en == "remove the cup in the left region"
    assert {"step": "seed", "text": "remove the cup"} in pair.instruction.provenance


def test_refine_failure_flags_unrefined(client):
    client.register_mock("vlm", lambda req: {"status": "fatal_error"})
    pair = refine_instruction(_pair(), client, "vlm")
    assert pair.instruction.primary_en == "remove the cup"
    assert "unrefined" in pair.flags


def test_refine_batch_fault_injection(client):
    calls = {"n": 0}

    def sometimes(req):
        calls["n"] += 1
        if calls["n"] == 4:
            return {"status": "fatal_error"}
        return {"instruction": req.payload["instruction"] + " precisely"}

    client.register_mock("vlm", sometimes)
    pairs = [_pair(edited=f"{i:064x}") for i in range(10)]
    refined = [refine_instruction(p, client, "vlm") for p in pairs]
    unrefined = [p for p in refined if "unrefined" in p.flags]
    assert len(refined) == 10
    assert len(unrefined) == 1


# -- templates ----------------------------------------------------------------------


def _pixels(blobs, digest):
    import numpy as np

    return np.asarray(Image.open(io.BytesIO(blobs.get(digest))).convert("RGB"))


def test_watermark_pair_oriented_for_removal(corpus_store, pair_store):
    digest = corpus_store.put(make_png(512, 512, stripes=16))
    spec = TemplateSpec(
        kind="watermark_overlay",
        payload={"text": "SAMPLE"},
        region=(10, 10, 100, 40),
        direction="forward_is_remove",
    )
    pair = template_apply(digest, spec, corpus_store, pair_store)
    assert pair.method == "template"
    assert pair.task == "watermark_remove"
    assert pair.instruction.primary_en == "remove the watermark"
    assert pair.region_mask is not None
    # mask matches source dimensions and the declared rectangle
    mask = Image.open(pair_store.mask_dir / f"{pair.pair_id}.png")
    assert mask.size == (512, 512)
    assert mask.getpixel((10, 10)) != 0
    assert mask.getpixel((9, 9)) == 0
    # the watermark lives on the pair's source; the target is clean
    import numpy as np

    src = _pixels(corpus_store, pair.source_id)
    dst = _pixels(corpus_store, pair.edited_id)
    mask_arr = np.asarray(mask).astype(bool)
    differs = (src != dst).any(axis=2)
    assert not (differs & ~mask_arr).any()  # outside the mask: byte-identical
    assert (differs & mask_arr).any()  # the edit actually changed the region


def test_identity_lighting_curve_rejected_no_change(corpus_store, pair_store):
    digest = corpus_store.put(make_png(64, 64, stripes=4))
    spec = TemplateSpec(
        kind="lighting_adjust", payload={"curve": list(range(256))}, region=(0, 0, 32, 32)
    )
    with pytest.raises(ConstructError) as exc:
        template_apply(digest, spec, corpus_store, pair_store)
    assert exc.value.reason == "no_change"


def test_text_overlay_instruction_mentions_exact_string(corpus_store, pair_store):
    digest = corpus_store.put(make_png(128, 128))
    spec = TemplateSpec(
        kind="text_overlay", payload={"text": "SALE"}, region=(20, 20, 60, 20),
        direction="forward_is_add",
    )
    pair = template_apply(digest, spec, corpus_store, pair_store)
    assert '"SALE"' in pair.instruction.primary_en
    assert pair.task == "text_edit"


def test_template_region_out_of_bounds(corpus_store, pair_store):
    digest = corpus_store.put(make_png(64, 64))
    spec = TemplateSpec(kind="text_overlay", payload={"text": "X"}, region=(60, 60, 20, 20))
    with pytest.raises(ConstructError) as exc:
        template_apply(digest, spec, corpus_store, pair_store)
    assert exc.value.reason == "region_out_of_bounds"


def test_monotone_curve_enforced():
    bad = list(range(256))
    bad[100] = 5
    with pytest.raises(ValueError):
        TemplateSpec(kind="lighting_adjust", payload={"curve": bad}, region=(0, 0, 8, 8))


# -- in-context splitting --------------------------------------------------------------


def _sheet(corpus_store, w, h, tiles):
    """Horizontal/vertical concat sheet with visually distinct tiles."""
    img = Image.new("RGB", (w, h))
    tw = w // tiles[1]
    th = h // tiles[0]
    for r in range(tiles[0]):
        for c in range(tiles[1]):
            color = (40 * (r + 1), 60 * (c + 1), 30 * (r + c + 1))
            img.paste(Image.new("RGB", (tw, th), color), (c * tw, r * th))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return corpus_store.put(buf.getvalue())


def test_one_row_two_cols_yields_one_pair(client, corpus_store, pair_store):
    client.register_mock("vlm", instruct_echo)
    digest = _sheet(corpus_store, 1024, 512, (1, 2))
    pairs = split_incontext(
        digest, InContextLayout(rows=1, cols=2), client, corpus_store, pair_store
    )
    assert len(pairs) == 1
    tile = Image.open(io.BytesIO(corpus_store.get(pairs[0].source_id)))
    assert tile.size == (512, 512)
    assert pairs[0].method == "in_context"


def brute_force_pairings(n, pairing):
    if pairing == "adjacent":
        return [(i, i + 1) for i in range(n) if i + 1 < n]
    return [(0, k) for k in range(n) if k >= 1]


@pytest.mark.parametrize("rows,cols", [(1, 2), (2, 2), (2, 3), (3, 3)])
@pytest.mark.parametrize("pairing", ["adjacent", "first_vs_each"])
def test_pair_count_law_vs_enumerator(rows, cols, pairing):
    n = rows * cols
    assert enumerate_pairings(n, pairing) == brute_force_pairings(n, pairing)
    assert len(enumerate_pairings(n, pairing)) == n - 1


def test_2x2_adjacent_three_pairs(client, corpus_store, pair_store):
    client.register_mock("vlm", instruct_echo)
    digest = _sheet(corpus_store, 256, 256, (2, 2))
    pairs = split_incontext(
        digest, InContextLayout(rows=2, cols=2, pairing="adjacent"), client, corpus_store, pair_store
    )
    assert len(pairs) == 3


def test_2x2_first_vs_each_shares_source(client, corpus_store, pair_store):
    client.register_mock("vlm", instruct_echo)
    digest = _sheet(corpus_store, 256, 256, (2, 2))
    pairs = split_incontext(
        digest,
        InContextLayout(rows=2, cols=2, pairing="first_vs_each"),
        client,
        corpus_store,
        pair_store,
    )
    assert len(pairs) == 3
    assert len({p.source_id for p in pairs}) == 1


def test_layout_mismatch_beyond_tolerance(client, corpus_store, pair_store):
    digest = _sheet(corpus_store, 102, 48, (1, 2))
    with pytest.raises(ConstructError) as exc:
        split_incontext(
            digest, InContextLayout(rows=1, cols=4), client, corpus_store, pair_store
        )
    assert exc.value.reason == "layout_mismatch"


# -- lora flow -----------------------------------------------------------------------


def _seeds(n):
    return [_pair(edited=f"{i:064x}") for i in range(n)]


def test_lora_flow_call_accounting(client, corpus_store, pair_store):
    client.register_mock("vlm", instruct_echo)
    trainer = client.register_mock("trainer", ExpertInvert(corpus_store))
    raws = []
    for i in range(100):
        raws.append((corpus_store.put(make_png(32, 32, color=(i, 100, 50))), "invert the colors"))
    pairs = lora_flow(_seeds(30), raws, client, pair_store)
    assert len(pairs) == 100
    assert trainer.call_count == 101  # 1 train + 100 infer
    assert all(p.method == "lora_flow" for p in pairs)


def test_lora_flow_insufficient_seeds(client, pair_store):
    with pytest.raises(ConstructError) as exc:
        lora_flow(_seeds(10), [], client, pair_store)
    assert exc.value.reason == "insufficient_seeds"


def test_lora_flow_infer_faults_are_skipped(client, corpus_store, pair_store):
    client.register_mock("vlm", instruct_echo)
    inner = ExpertInvert(corpus_store)
    calls = {"n": 0}

    def flaky(req):
        if req.kind == "expert_train":
            return inner(req)
        calls["n"] += 1
        if calls["n"] in (3, 7):
            return {"status": "fatal_error"}
        return inner(req)

    client.register_mock("trainer", flaky)
    raws = [
        (corpus_store.put(make_png(32, 32, color=(i, 3, 201))), "invert the colors")
        for i in range(100)
    ]
    pairs = lora_flow(_seeds(30), raws, client, pair_store)
    assert len(pairs) == 98
    skipped = [a for a in pair_store.audits() if a["event"] == "lora_flow_skipped"]
    assert len(skipped) == 2


def test_lora_flow_train_failure_aborts(client, corpus_store, pair_store):
    def trainer(req):
        if req.kind == "expert_train":
            return {"status": "fatal_error"}
        raise AssertionError("no inference may run after a failed train step")

    client.register_mock("trainer", trainer)
    with pytest.raises(ConstructError) as exc:
        lora_flow(_seeds(30), [("f" * 64, "x")], client, pair_store)
    assert exc.value.reason == "train_failed"
