"""Single `editforge` command line wiring all modules together."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import evalbench, lora, pipeline, pref_service
from .adapters import AdapterClient
from .corpus import CollectionPolicy, CorpusStore, filter_collection, ingest
from .construct import InContextLayout, TemplateSpec, lora_flow, split_incontext, template_apply
from .filter_augment import (
    FilterThresholds,
    augment_instructions,
    compile_instruction_bank,
    decide_pair,
    export_review_queue,
    import_review_results,
    score_pair,
)
from .mocks import build_mock
from .records import PairStore
from .util import read_jsonl


@click.group()
def main():
    """Instruction-editing data pipeline and evaluation workbench."""


def _client(cache_dir: Path, blobs, bindings: dict[str, str]) -> AdapterClient:
    client = AdapterClient(cache_dir=cache_dir, blobs=blobs, backoff_base=0.05)
    for adapter_id, spec in bindings.items():
        if spec == "env":
            client.register_from_env(adapter_id)
        else:
            client.register_mock(adapter_id, build_mock(spec, blobs))
    return client


def _parse_bindings(pairs: tuple[str, ...]) -> dict[str, str]:
    out = {}
    for item in pairs:
        adapter_id, _, spec = item.partition("=")
        out[adapter_id] = spec or "env"
    return out


# -- corpus -------------------------------------------------------------------


@main.group()
def corpus():
    """Source image collection."""


@corpus.command("ingest")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--store", "store_dir", required=True, type=click.Path())
def corpus_ingest(manifest, store_dir):
    report = ingest(manifest, CorpusStore(store_dir))
    click.echo(json.dumps(report, indent=2))


@corpus.command("filter")
@click.option("--store", "store_dir", required=True, type=click.Path(exists=True))
@click.option("--min-width", default=512, type=int)
@click.option("--min-height", default=512, type=int)
@click.option("--min-aesthetic", default=5.0, type=float)
@click.option("--no-aesthetic", is_flag=True, default=False)
@click.option("--adapter", "adapters", multiple=True, help="id=mockspec or id=env")
def corpus_filter(store_dir, min_width, min_height, min_aesthetic, no_aesthetic, adapters):
    store = CorpusStore(store_dir)
    policy = CollectionPolicy(
        min_width=min_width,
        min_height=min_height,
        min_aesthetic=min_aesthetic,
        require_aesthetic=not no_aesthetic,
    )
    client = None
    if policy.require_aesthetic:
        client = _client(Path(store_dir) / "cache", store, _parse_bindings(adapters))
    partition = filter_collection(store, policy, client)
    click.echo(json.dumps(partition, indent=2))


# -- construct ------------------------------------------------------------------


@main.group()
def construct():
    """Editing pair construction."""


@construct.command("template")
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True))
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--pairs", "pairs_dir", required=True, type=click.Path())
@click.option("--image", "image_ids", multiple=True, help="source image digest(s)")
def construct_template(spec_path, corpus_dir, pairs_dir, image_ids):
    corpus_store = CorpusStore(corpus_dir)
    pair_store = PairStore(pairs_dir)
    raw = json.loads(Path(spec_path).read_text())
    spec = TemplateSpec(
        kind=raw["kind"],
        payload=raw["payload"],
        region=tuple(raw["region"]),
        direction=raw.get("direction", "forward_is_add"),
    )
    targets = list(image_ids) or [img.id for img in corpus_store.images()]
    made = []
    for image_id in targets:
        made.append(template_apply(image_id, spec, corpus_store, pair_store).pair_id)
    click.echo(json.dumps({"pairs": made}, indent=2))


@construct.command("incontext")
@click.option("--layout", required=True, help="RxC, e.g. 2x2")
@click.option("--pairing", default="adjacent", type=click.Choice(["adjacent", "first_vs_each"]))
@click.option("--gutter", default=0, type=int)
@click.option("--sheet", required=True, type=click.Path(exists=True))
@click.option("--corpus", "corpus_dir", required=True, type=click.Path())
@click.option("--pairs", "pairs_dir", required=True, type=click.Path())
@click.option("--adapter", "adapters", multiple=True)
def construct_incontext(layout, pairing, gutter, sheet, corpus_dir, pairs_dir, adapters):
    rows, _, cols = layout.lower().partition("x")
    corpus_store = CorpusStore(corpus_dir)
    pair_store = PairStore(pairs_dir)
    client = _client(Path(pairs_dir) / "cache", corpus_store, _parse_bindings(adapters))
    digest = corpus_store.put(Path(sheet).read_bytes())
    made = split_incontext(
        digest,
        InContextLayout(rows=int(rows), cols=int(cols), gutter=gutter, pairing=pairing),
        client,
        corpus_store,
        pair_store,
    )
    click.echo(json.dumps({"pairs": [p.pair_id for p in made]}, indent=2))


@construct.command("loraflow")
@click.option("--seeds", "pairs_dir", required=True, type=click.Path(exists=True))
@click.option("--raws", "raws_manifest", required=True, type=click.Path(exists=True))
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--adapter", "adapters", multiple=True)
def construct_loraflow(pairs_dir, raws_manifest, corpus_dir, adapters):
    pair_store = PairStore(pairs_dir)
    corpus_store = CorpusStore(corpus_dir)
    client = _client(Path(pairs_dir) / "cache", corpus_store, _parse_bindings(adapters))
    raws = [(r["image_digest"], r["instruction"]) for r in read_jsonl(raws_manifest)]
    made = lora_flow(pair_store.pairs(), raws, client, pair_store)
    click.echo(json.dumps({"pairs": [p.pair_id for p in made]}, indent=2))


# -- filter / augment -----------------------------------------------------------


@main.group("filter")
def filter_group():
    """Quality scoring and threshold decisions."""


@filter_group.command("score")
@click.option("--pairs", "pairs_dir", required=True, type=click.Path(exists=True))
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--judge", default="judge")
@click.option("--adapter", "adapters", multiple=True)
def filter_score(pairs_dir, corpus_dir, judge, adapters):
    pair_store = PairStore(pairs_dir)
    client = _client(Path(pairs_dir) / "cache", CorpusStore(corpus_dir), _parse_bindings(adapters))
    scored = 0
    for pair in pair_store.pairs(status="raw"):
        score_pair(pair, client, judge, pair_store)
        scored += 1
    click.echo(json.dumps({"scored": scored}))


@filter_group.command("decide")
@click.option("--pairs", "pairs_dir", required=True, type=click.Path(exists=True))
@click.option("--thresholds", "thresholds_path", type=click.Path(exists=True))
def filter_decide(pairs_dir, thresholds_path):
    pair_store = PairStore(pairs_dir)
    thr = (
        FilterThresholds.from_record(json.loads(Path(thresholds_path).read_text()))
        if thresholds_path
        else FilterThresholds()
    )
    outcome = {"accepted": 0, "rejected": 0, "needs_review": 0}
    for pair in pair_store.pairs(status="scored"):
        if pair.scores is None:
            continue
        outcome[decide_pair(pair, thr, pair_store)] += 1
    click.echo(json.dumps(outcome))


@filter_group.group("review")
def review():
    """Manual review queue."""


@review.command("export")
@click.option("--pairs", "pairs_dir", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def review_export(pairs_dir, out):
    count = export_review_queue(PairStore(pairs_dir), out)
    click.echo(json.dumps({"exported": count}))


@review.command("import")
@click.option("--pairs", "pairs_dir", required=True, type=click.Path(exists=True))
@click.option("--verdicts", required=True, type=click.Path(exists=True))
def review_import(pairs_dir, verdicts):
    result = import_review_results(PairStore(pairs_dir), verdicts)
    click.echo(json.dumps(result, indent=2))


@main.group()
def augment():
    """Bilingual instruction augmentation."""


@augment.command("run")
@click.option("--pairs", "pairs_dir", required=True, type=click.Path(exists=True))
@click.option("--styles", default="synonym,interrogative,passive")
@click.option("--zh/--no-zh", default=True)
@click.option("--llm", default="llm")
@click.option("--adapter", "adapters", multiple=True)
@click.option("--bank", "bank_path", type=click.Path())
def augment_run(pairs_dir, styles, zh, llm, adapters, bank_path):
    pair_store = PairStore(pairs_dir)
    client = _client(Path(pairs_dir) / "cache", pair_store, _parse_bindings(adapters))
    style_set = set(filter(None, styles.split(",")))
    augmented = 0
    for pair in pair_store.pairs(status="accepted"):
        augment_instructions(pair.instruction, client, llm, style_set, include_zh=zh)
        pair_store.put_pair(pair)
        augmented += 1
    result = {"augmented": augmented}
    if bank_path:
        result["bank"] = compile_instruction_bank(pair_store, bank_path)
    click.echo(json.dumps(result, indent=2))


# -- bench ------------------------------------------------------------------------


@main.group()
def bench():
    """Benchmark evaluation and reporting."""


@bench.command("run")
@click.option("--bench", "bench_path", required=True, type=click.Path(exists=True))
@click.option("--model", required=True)
@click.option("--judge", required=True)
@click.option("--lang", default="en", type=click.Choice(["en", "zh"]))
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--adapter", "adapters", multiple=True)
def bench_run(bench_path, model, judge, lang, corpus_dir, out_path, adapters):
    items = evalbench.load_bench(bench_path)
    store = CorpusStore(corpus_dir)
    client = _client(Path(corpus_dir) / "cache", store, _parse_bindings(adapters))
    results = evalbench.run_model_on_bench(
        items, client, model, judge, lang=lang, results_path=out_path
    )
    states = {}
    for r in results:
        states[r.state] = states.get(r.state, 0) + 1
    click.echo(json.dumps({"items": len(results), "states": states}))


@bench.command("report")
@click.option("--results", "result_paths", multiple=True, required=True, type=click.Path(exists=True))
@click.option("--summary", "summary_path", type=click.Path())
def bench_report(result_paths, summary_path):
    results = []
    for path in result_paths:
        results.extend(evalbench.ItemResult.from_record(r) for r in read_jsonl(path))
    aggregates = evalbench.aggregate(results)
    click.echo(evalbench.render_table(aggregates), nl=False)
    if summary_path:
        Path(summary_path).write_text(
            json.dumps(evalbench.summary_records(aggregates), indent=2)
        )


# -- pref -------------------------------------------------------------------------


@main.group()
def pref():
    """Pairwise preference study service."""


@pref.command("serve")
@click.option("--port", default=8800, type=int)
@click.option("--host", default="127.0.0.1")
@click.option("--store", "store_dir", required=True, type=click.Path())
@click.option("--blobs", "blobs_dir", type=click.Path())
def pref_serve(port, host, store_dir, blobs_dir):
    import uvicorn

    from .store import BlobStore

    blobs = BlobStore(blobs_dir) if blobs_dir else None
    app = pref_service.create_app(store_dir, blobs)
    uvicorn.run(app, host=host, port=port, log_level="warning")


@pref.command("tally")
@click.option("--store", "store_dir", required=True, type=click.Path(exists=True))
@click.option("--pair", required=True, help="modelA,modelB")
def pref_tally(store_dir, pair):
    model_a, _, model_b = pair.partition(",")
    store = pref_service.PrefStore(store_dir)
    try:
        tally = store.tally(model_a, model_b)
    except pref_service.PrefError:
        click.echo("empty_tally", err=True)
        sys.exit(1)
    click.echo(pref_service.render_tally_row(tally))


# -- lora --------------------------------------------------------------------------


@main.group("lora")
def lora_group():
    """Adapter math verification."""


@lora_group.command("check")
@click.option("--seed", default=0, type=int)
def lora_check(seed):
    results = lora.run_check(seed=seed)
    for key, value in results.items():
        if key == "passed":
            continue
        click.echo(f"{key}: {value}")
    click.echo("PASS" if results["passed"] else "FAIL")
    if not results["passed"]:
        sys.exit(1)


# -- full pipeline -------------------------------------------------------------------


@main.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--dry-run", is_flag=True, default=False)
def run(config_path, dry_run):
    """Execute collection -> construction -> filtering -> post-processing."""
    config = pipeline.load_config(config_path)
    try:
        report = pipeline.run_pipeline(config, dry_run=dry_run)
    except pipeline.PipelineError as exc:
        click.echo(f"pipeline halted at {exc.stage}: {exc.cause}", err=True)
        sys.exit(2)
    click.echo(json.dumps(report, indent=2))


if __name__ == "__main__":
    main()
