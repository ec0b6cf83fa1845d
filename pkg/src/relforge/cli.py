"""``relforge`` command line.

Every command prints one JSON summary line on stdout and writes its
artifacts through temp-file-and-rename.  Exit codes: 0 ok, 2 config error,
3 I/O or data error, 4 upstream LLM client error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import dialog, evaluation, geometry, grounding, ingest, pipeline, records, relations
from .errors import ClientError, ConfigError, RelforgeError, SchemaError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger("relforge")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_CLIENT = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    base_dir: Path = field(default_factory=Path.cwd)
    seed: int = 0
    grid: int = grounding.DEFAULT_GRID
    jobs: int = field(default_factory=lambda: os.cpu_count() or 1)
    offline: bool = False
    sections: dict = field(default_factory=dict)

    def section(self, name: str) -> dict:
        value = self.sections.get(name, {})
        if not isinstance(value, dict):
            raise ConfigError(f"config section [{name}] must be a table")
        return value

    def path(self, value) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def existing(self, value, what: str) -> Path:
        p = self.path(value)
        if not p.exists():
            raise ConfigError(f"{what} not found: {p}")
        return p

    def llm(self) -> dict:
        return self.section("llm")


def load_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        cfg.base_dir = path.resolve().parent
        cfg.sections = doc
        run = doc.get("run", {})
        cfg.seed = int(run.get("seed", cfg.seed))
        cfg.grid = int(run.get("grid", cfg.grid))
        cfg.jobs = int(run.get("jobs", cfg.jobs))
    if args.seed is not None:
        cfg.seed = args.seed
    if args.grid is not None:
        cfg.grid = args.grid
    if args.jobs is not None:
        cfg.jobs = args.jobs
    cfg.offline = bool(args.offline)
    if cfg.grid < 1 or cfg.jobs < 1:
        raise ConfigError("grid and jobs must be positive")
    return cfg


def _pick(flag, section: dict, key: str, default=None):
    if flag is not None:
        return flag
    return section.get(key, default)


def make_client(cfg: RunConfig):
    """A chat client from the environment, or None when running offline."""
    if cfg.offline:
        return None
    from .llm import ChatClient

    llm = cfg.llm()
    audit = llm.get("audit")
    return ChatClient.from_env(
        model=llm.get("model", "gpt-4"), timeout=float(llm.get("timeout", 60)),
        max_retries=int(llm.get("retries", 3)), concurrency=int(llm.get("concurrency", 8)),
        audit_path=cfg.path(audit) if audit else None,
    )


def summary(command: str, **fields) -> None:
    print(json.dumps({"command": command, "status": "ok", **fields}, sort_keys=True))


def _output(args, cfg: RunConfig, section: dict, default_name: str) -> Path:
    if getattr(args, "output", None):
        return Path(args.output)
    if "output" in section:
        return Path(section["output"])
    return Path(default_name)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _ingest_records(kind: str, path: Path, dataset: Optional[str]):
    if kind == "detection":
        return ingest.parse_detection_annotations(path, dataset)
    if kind == "attributes":
        return ingest.parse_attribute_table(path, dataset=dataset)
    if kind == "video":
        return ingest.parse_video_captions(path, dataset)
    raise ConfigError(f"unknown ingest kind {kind!r} (detection, attributes, video)")


def cmd_ingest(args, cfg: RunConfig) -> int:
    sec = cfg.section("ingest")
    kind = _pick(args.kind, sec, "kind")
    src = args.input or sec.get("path")
    if not kind or not src:
        raise ConfigError("ingest needs --kind and --input (or [ingest] kind/path)")
    src = Path(args.input) if args.input else cfg.existing(src, "ingest input")
    result = _ingest_records(kind, src, _pick(args.dataset, sec, "dataset"))
    out = _output(args, cfg, {}, "records.jsonl")
    n = records.write_records(result.records, out)
    summary("ingest", records=n, skipped=len(result.skipped), output=str(out))
    return EXIT_OK


def _load_records_for_build(args, cfg: RunConfig):
    if args.records:
        return records.read_records(args.records)
    sec = cfg.section("ingest")
    if not sec.get("path") or not sec.get("kind"):
        raise ConfigError("build needs --records or an [ingest] section with kind and path")
    result = _ingest_records(sec["kind"], cfg.existing(sec["path"], "ingest input"), sec.get("dataset"))
    return result.records


def _load_ruleset(args, cfg: RunConfig):
    name = args.ruleset or cfg.section("ingest").get("ruleset") or cfg.section("build").get("ruleset")
    if not name:
        raise ConfigError("no ruleset given (--ruleset or [ingest] ruleset)")
    p = cfg.path(name)
    try:
        return ingest.load_ruleset(p if p.suffix == ".json" else name)
    except FileNotFoundError:
        raise ConfigError(f"ruleset not found: {name}") from None


def _load_relation(args, cfg: RunConfig):
    sec = cfg.section("build")
    source = args.relations or sec.get("relations", "default")
    p = cfg.path(source)
    try:
        specs = relations.load_relations(p if p.exists() else source)
    except FileNotFoundError:
        raise ConfigError(f"relation file not found: {source}") from None
    except relations.ParseError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    name = args.relation or sec.get("relation")
    if name is None:
        if len(specs) != 1:
            raise ConfigError(f"several relations defined, pick one with --relation: {sorted(specs)}")
        return next(iter(specs.values()))
    if name not in specs:
        raise ConfigError(f"unknown relation {name!r}; defined: {sorted(specs)}")
    return specs[name]


def cmd_build(args, cfg: RunConfig) -> int:
    sec = cfg.section("build")
    recs = _load_records_for_build(args, cfg)
    rules = _load_ruleset(args, cfg)
    spec = _load_relation(args, cfg)
    budget = _pick(args.budget, sec, "budget")
    ratio = float(_pick(args.pos_ratio, sec, "pos_ratio", 0.5))
    prompt_dir = sec.get("prompt_dir")
    client = make_client(cfg)
    try:
        result = pipeline.build_relation_samples(
            recs, rules, spec, budget=budget, pos_ratio=ratio, seed=cfg.seed, client=client,
            grounding=bool(sec.get("grounding", True)), grid=cfg.grid, jobs=cfg.jobs,
            prompt_dir=cfg.path(prompt_dir) if prompt_dir else None,
            retries=int(cfg.llm().get("retries", 3)),
        )
    finally:
        if client is not None:
            client.close()
    samples = result.samples
    dropped = 0
    fsec = cfg.section("filter")
    if fsec.get("apply", False):
        th = _thresholds(fsec)
        kept = [s for s in samples if dialog.filter_quality(s, th).keep]
        dropped = len(samples) - len(kept)
        samples = kept
    out = _output(args, cfg, sec, "corpus.jsonl")
    n = dialog.write_corpus(samples, out)
    summary("build", relation=spec.relation_id, pairs=len(result.pairs.pairs),
            positives=result.pairs.positives, negatives=result.pairs.negatives,
            shortfall=result.pairs.shortfall, samples=n, dropped=dropped,
            fallback=result.fallback_count, output=str(out), sha256=dialog.corpus_hash(out))
    return EXIT_OK


def cmd_synth_geom(args, cfg: RunConfig) -> int:
    sec = cfg.section("synth")
    manifest = args.manifest or sec.get("manifest")
    if not manifest:
        raise ConfigError("synth-geom needs --manifest (or [synth] manifest)")
    manifest = Path(args.manifest) if args.manifest else cfg.existing(manifest, "synth manifest")
    entries = pipeline.read_geom_manifest(manifest)
    out_dir = Path(args.image_dir or sec.get("image_dir", "synth_images"))
    gcfg = geometry.TransformConfig(max_retries=int(sec.get("max_retries", 8)))
    result, pairs = pipeline.geometric_samples(entries, out_dir, cfg.seed, gcfg, cfg.grid)
    out = _output(args, cfg, sec, "geometric.jsonl")
    n = dialog.write_corpus(result.samples, out)
    pairs_out = out.with_name(out.stem + ".pairs.jsonl")
    records.atomic_write_text(pairs_out, "".join(records.dumps_line(pipeline.synth_pair_to_dict(p)) + "\n"
                                                 for p in pairs))
    summary("synth-geom", samples=n, skipped=len(result.skipped), output=str(out), pairs=str(pairs_out),
            sha256=dialog.corpus_hash(out))
    return EXIT_OK


def cmd_temporal(args, cfg: RunConfig) -> int:
    sec = cfg.section("temporal")
    src = args.input or sec.get("path")
    if not src:
        raise ConfigError("temporal needs --input (or [temporal] path)")
    src = Path(args.input) if args.input else cfg.existing(src, "caption manifest")
    result = ingest.parse_video_captions(src)
    k = int(_pick(args.frames, sec, "frames", 4))
    built = pipeline.temporal_samples(result.records, k, cfg.seed)
    out = _output(args, cfg, sec, "temporal.jsonl")
    n = dialog.write_corpus(built.samples, out)
    summary("temporal", samples=n, videos=len(result.records), skipped=len(built.skipped) + len(result.skipped),
            output=str(out), sha256=dialog.corpus_hash(out))
    return EXIT_OK


def _thresholds(sec: dict, args=None) -> dialog.FilterThresholds:
    d = dialog.FilterThresholds()
    return dialog.FilterThresholds(
        clip_score=float(_pick(getattr(args, "min_clip", None), sec, "clip_score", d.clip_score)),
        bbox_confidence=float(_pick(getattr(args, "min_conf", None), sec, "bbox_confidence", d.bbox_confidence)),
        words=int(_pick(getattr(args, "min_words", None), sec, "words", d.words)),
    )


def cmd_filter(args, cfg: RunConfig) -> int:
    th = _thresholds(cfg.section("filter"), args)
    samples = dialog.read_corpus(args.input)
    kept, drops = [], []
    for s in samples:
        decision = dialog.filter_quality(s, th)
        if decision.keep:
            kept.append(s)
        else:
            drops.append({"id": s.sample_id, "reasons": list(decision.reasons)})
    out = Path(args.output or "filtered.jsonl")
    dialog.write_corpus(kept, out)
    report = Path(args.report) if args.report else out.with_name(out.stem + ".drops.jsonl")
    records.atomic_write_text(report, "".join(records.dumps_line(d) + "\n" for d in drops))
    summary("filter", input=len(samples), kept=len(kept), dropped=len(drops), output=str(out), report=str(report))
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    sec = cfg.section("eval")
    k = _pick(args.k_shot, sec, "k_shot")
    if args.pool:
        return _fewshot(args, cfg, int(k or 2))
    if not args.pred or not args.gold:
        raise ConfigError("eval needs --pred and --gold (or --pool/--queries with --k-shot)")
    ecfg = evaluation.EvalConfig(iou_threshold=float(_pick(args.iou_threshold, sec, "iou_threshold", 0.5)),
                                 grid=cfg.grid, per_image=bool(sec.get("per_image", False)))
    preds = evaluation.read_predictions(args.pred)
    gold = dialog.read_corpus(args.gold)
    judge = make_client(cfg) if args.judge else None
    try:
        report = evaluation.evaluate(preds, gold, ecfg, judge)
    finally:
        if judge is not None:
            judge.close()
    if args.report:
        records.atomic_write_text(args.report, json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    for name, value in report.summary_rows():
        print(f"{name:<10}{value:>10}")
    summary("eval", bbox_acc=report.bbox_acc, accuracy=report.accuracy, precision=report.precision,
            recall=report.recall, f1=report.f1, relation_score=report.relation_score_mean, **{
                "decode_failures": report.counts["decode_failures"],
                "unparseable_answers": report.counts["unparseable_answers"],
                "total": report.counts["total"]})
    return EXIT_OK


def _read_fewshot(path) -> list[evaluation.FewShotItem]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                out.append(evaluation.FewShotItem(str(d["id"]), d["image"], d.get("answer", ""), bool(d["label"])))
            except (json.JSONDecodeError, KeyError, TypeError):
                raise SchemaError(path, "fewshot", f"{path}:{lineno}: expected {{id, image, answer, label}}",
                                  line=lineno) from None
    return out


def _fewshot(args, cfg: RunConfig, k: int) -> int:
    if not args.queries:
        raise ConfigError("few-shot assembly needs --queries")
    pool = _read_fewshot(args.pool)
    queries = _read_fewshot(args.queries)
    question = evaluation.EVAL_QUESTIONS.get(args.task or "anomaly")
    if question is None:
        raise ConfigError(f"unknown task {args.task!r}; known: {sorted(evaluation.EVAL_QUESTIONS)}")
    lines = []
    for i, q in enumerate(queries):
        prompt = evaluation.assemble_fewshot_prompt(pool, k, q, cfg.seed ^ i, question)
        lines.append(records.dumps_line({"id": q.item_id, "images": prompt.images, "prompt": prompt.render(),
                                         "shortfall": prompt.shortfall}))
    out = Path(args.output or "fewshot.jsonl")
    records.atomic_write_text(out, "".join(line + "\n" for line in lines))
    summary("eval", fewshot=len(lines), k_shot=k, output=str(out))
    return EXIT_OK


def _parse_floats(text: str, n: int, what: str):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"{what}: expected {n} comma-separated numbers, got {text!r}") from None
    if len(vals) != n:
        raise ConfigError(f"{what}: expected {n} values, got {len(vals)}")
    return vals


def cmd_codec(args, cfg: RunConfig) -> int:
    grid = cfg.grid
    try:
        if args.action == "encode":
            if not args.box:
                raise ConfigError("codec encode needs --box x1,y1,x2,y2")
            pair = grounding.encode_box(grounding.NormBox(*_parse_floats(args.box, 4, "--box")), grid)
            print(f"{pair.tl_bin} {pair.br_bin}")
        elif args.action == "decode":
            if not args.pair:
                raise ConfigError("codec decode needs --pair tl,br")
            tl, br = (int(v) for v in _parse_floats(args.pair, 2, "--pair"))
            print(" ".join(repr(v) for v in grounding.decode_pair((tl, br), grid).as_tuple()))
        elif args.action == "parse":
            text = args.text if args.text is not None else sys.stdin.read()
            stream, failures = grounding.parse_grounded(text, grid)
            print(json.dumps({
                "boxes": [[i, list(p)] for i, p in stream.located_boxes()],
                "failures": [{"position": f.position, "kind": f.kind.value, "detail": f.detail} for f in failures],
                "canonical": grounding.render_grounded(stream),
            }))
        elif args.action == "lint":
            if not args.corpus:
                raise ConfigError("codec lint needs --corpus")
            samples = dialog.read_corpus(args.corpus)
            bad = {s.sample_id: p for s in samples if (p := dialog.lint_sample(s, grid))}
            for sid, problems in bad.items():
                for p in problems:
                    print(f"{sid}: {p}", file=sys.stderr)
            summary("codec", action="lint", samples=len(samples), failing=len(bad))
            return EXIT_OK if not bad else EXIT_IO
    except (grounding.InvalidBox, grounding.InvalidPair) as exc:
        raise ConfigError(str(exc)) from None
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="global seed (overrides [run] seed)")
    common.add_argument("--jobs", type=int, help="worker threads for per-sample stages")
    common.add_argument("--offline", action="store_true", help="never contact an LLM; use the rule-based generator")
    common.add_argument("--budget", type=int, help="number of pairs to collect")
    common.add_argument("--pos-ratio", type=float, dest="pos_ratio", help="fraction of positive pairs")
    common.add_argument("--grid", type=int, help="patch grid size")
    common.add_argument("--iou-threshold", type=float, dest="iou_threshold")
    common.add_argument("--k-shot", type=int, dest="k_shot", choices=evaluation.FEWSHOT_K)
    common.add_argument("-o", "--output", help="output file")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="relforge", description="Relation-aware visual instruction data tools.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", parents=[common], help="parse a dataset into the record store")
    s.add_argument("--kind", choices=("detection", "attributes", "video"))
    s.add_argument("--input")
    s.add_argument("--dataset")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("build", parents=[common], help="pairs -> descriptions -> dialogues")
    s.add_argument("--records", help="record store (otherwise ingested from [ingest])")
    s.add_argument("--ruleset")
    s.add_argument("--relations", help="relation DSL file or bundled name")
    s.add_argument("--relation", help="relation id to build")
    s.set_defaults(func=cmd_build)

    s = sub.add_parser("synth-geom", parents=[common], help="synthesize geometric-transform pairs")
    s.add_argument("--manifest", help='JSONL of {"image", "mask", "label"}')
    s.add_argument("--image-dir", dest="image_dir", help="where synthesized images go")
    s.set_defaults(func=cmd_synth_geom)

    s = sub.add_parser("temporal", parents=[common], help="temporal describe/reorder samples")
    s.add_argument("--input", help="video caption manifest (JSONL)")
    s.add_argument("--frames", type=int, help="frames per sample (2-8)")
    s.set_defaults(func=cmd_temporal)

    s = sub.add_parser("filter", parents=[common], help="apply the quality filter to a corpus")
    s.add_argument("--input", required=True)
    s.add_argument("--report", help="drop report path")
    s.add_argument("--min-clip", type=float, dest="min_clip")
    s.add_argument("--min-conf", type=float, dest="min_conf")
    s.add_argument("--min-words", type=int, dest="min_words")
    s.set_defaults(func=cmd_filter)

    s = sub.add_parser("eval", parents=[common], help="score predictions or assemble k-shot prompts")
    s.add_argument("--pred")
    s.add_argument("--gold")
    s.add_argument("--report", help="write the full report as JSON")
    s.add_argument("--judge", action="store_true", help="score answers with the LLM judge")
    s.add_argument("--pool", help="few-shot example pool (JSONL)")
    s.add_argument("--queries", help="few-shot queries (JSONL)")
    s.add_argument("--task", help="fixed question key for few-shot prompts")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("codec", parents=[common], help="patch-index token utilities")
    s.add_argument("action", choices=("encode", "decode", "parse", "lint"))
    s.add_argument("--box")
    s.add_argument("--pair")
    s.add_argument("--text")
    s.add_argument("--corpus")
    s.set_defaults(func=cmd_codec)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"relforge {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ClientError as exc:
        print(f"relforge {args.command}: LLM client error: {exc}", file=sys.stderr)
        return EXIT_CLIENT
    except (OSError, RelforgeError) as exc:
        print(f"relforge {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"relforge {args.command}: invalid setting: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
