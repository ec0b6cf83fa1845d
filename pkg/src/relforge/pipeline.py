"""End-to-end stages: relation pairs to dialogue samples, plus temporal and geometric corpora."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

from .dialog import DialogSample, assemble_sample, sample_from_description
from .geometry import EmptyMask, OutOfFrame, TransformConfig, load_mask, load_raster, save_raster, synthesize_pair
from .grounding import DEFAULT_GRID
from .ingest import EncodingRuleset, LinguisticEncoding, encode_linguistic
from .llm import (
    DEFAULT_RETRIES,
    RelationDescription,
    family_question,
    generate_description,
    generate_dialog,
    templated_description,
    tokens_in,
)
from .records import SampleRecord
from .relations import PairCollection, RelationSpec, collect_pairs
from .temporal import ORDER_QUESTION, TooFewFrames, describe_sequence, make_order_task, sample_frames

logger = logging.getLogger(__name__)


@dataclass
class BuildResult:
    samples: list[DialogSample]
    descriptions: list[RelationDescription]
    encodings: list[tuple[LinguisticEncoding, LinguisticEncoding]]
    pairs: Optional[PairCollection] = None
    skipped: list = field(default_factory=list)

    @property
    def fallback_count(self) -> int:
        return sum(1 for s in self.samples if s.generator == "fallback")


def build_relation_samples(records: Sequence[SampleRecord], ruleset: EncodingRuleset, spec: RelationSpec, *,
                           budget: Optional[int] = None, pos_ratio: float = 0.5, seed: int = 0,
                           client=None, grounding: bool = True, grid: int = DEFAULT_GRID, jobs: int = 1,
                           prompt_dir=None, retries: int = DEFAULT_RETRIES) -> BuildResult:
    """Collect pairs for ``spec`` and turn each into a validated two-turn sample."""
    pairs = collect_pairs(records, spec, budget=budget, positive_ratio=pos_ratio, seed=seed)
    by_id = {r.sample_id: r for r in records}
    encodings = {r.sample_id: encode_linguistic(r, ruleset, grid) for r in records}

    def one(item):
        i, pair = item
        a, b = pair.record_ids
        enc_a, enc_b = encodings[a], encodings[b]
        desc = generate_description(enc_a, enc_b, spec, pair.truth, client, grounding=grounding,
                                    retries=retries, prompt_dir=prompt_dir)
        turns = generate_dialog(desc, spec, client, retries=retries, prompt_dir=prompt_dir)
        sample = sample_from_description(f"{spec.relation_id}-{i:05d}", [by_id[a].media.path, by_id[b].media.path],
                                         desc, turns, spec.relation_id, grounding=grounding)
        return sample, desc, (enc_a, enc_b)

    items = list(enumerate(pairs.pairs))
    if jobs > 1 and client is not None:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(it) for it in items]
    return BuildResult([r[0] for r in results], [r[1] for r in results], [r[2] for r in results], pairs)


def temporal_samples(records: Sequence[SampleRecord], k: int, seed: int,
                     ref_pattern: str = "{video}#{index}") -> BuildResult:
    """A describe sample and a reorder sample per video with at least ``k`` frames."""
    samples, descs, skipped = [], [], []
    for idx, rec in enumerate(records):
        try:
            seq = sample_frames(rec, k, [seed, idx], ref_pattern)
        except TooFewFrames as exc:
            logger.info("skipping %s: %s", rec.sample_id, exc)
            skipped.append((rec.sample_id, str(exc)))
            continue
        desc = templated_description(describe_sequence(seq), "temporal", (rec.sample_id,))
        descs.append(desc)
        samples.append(assemble_sample(
            f"temporal-{rec.sample_id}-describe", seq.images, family_question("temporal"), desc.text,
            relation_id="chronological_order", family="temporal", task_type="temporal_describe",
            generator="fallback", grounding=False))
        task = make_order_task(seq, [seed, idx, 1])
        samples.append(assemble_sample(
            f"temporal-{rec.sample_id}-order", [ref for _, ref in task.shuffled_frames], ORDER_QUESTION,
            task.sentence(), relation_id="chronological_order", family="temporal",
            task_type="temporal_order", generator="fallback", grounding=False))
    return BuildResult(samples, descs, [], None, skipped)


@dataclass(frozen=True)
class GeomEntry:
    image: str
    mask: str
    label: str


def read_geom_manifest(path) -> list[GeomEntry]:
    """One ``{"image", "mask", "label"}`` object per line; paths relative to the manifest."""
    path = Path(path)
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(GeomEntry(str(path.parent / d["image"]), str(path.parent / d["mask"]), d["label"]))
    return out


def geometric_samples(entries: Sequence[GeomEntry], out_dir, seed: int,
                      config: TransformConfig = TransformConfig(), grid: int = DEFAULT_GRID):
    """Synthesize one transformed copy per entry; returns (BuildResult, SynthPair list)."""
    out_dir = Path(out_dir)
    samples, descs, synth, skipped = [], [], [], []
    for idx, e in enumerate(entries):
        image, mask = load_raster(e.image), load_mask(e.mask)
        try:
            res = synthesize_pair(image, mask, e.label, seed ^ idx, config, e.image, "", grid)
        except (OutOfFrame, EmptyMask) as exc:
            logger.warning("skipping %s: %s", e.image, exc)
            skipped.append((e.image, str(exc)))
            continue
        out_path = out_dir / f"{Path(e.image).stem}_geo{idx:05d}.png"
        save_raster(res.image, out_path)
        pair = replace(res.pair, synthesized_image=str(out_path))
        synth.append(pair)
        spec = pair.spec
        required = tokens_in(pair.description) - {"<phrase>", "</phrase>"}
        desc = templated_description(pair.description, "geometric", (e.image, str(out_path)), required)
        descs.append(desc)
        samples.append(assemble_sample(
            f"geometric-{idx:05d}", [e.image, str(out_path)], family_question("geometric"), desc.text,
            relation_id=f"geometric_{spec.kind}", family="geometric", task_type="geometric",
            generator="fallback", grounding=True))
    return BuildResult(samples, descs, [], None, skipped), synth


def synth_pair_to_dict(p) -> dict:
    return {
        "base_image": p.base_image,
        "synthesized_image": p.synthesized_image,
        "object_label": p.object_label,
        "kind": p.spec.kind,
        "params": p.spec.params,
        "pre_box": list(p.spec.pre_box.as_tuple()),
        "post_box": list(p.spec.post_box.as_tuple()),
        "description": p.description,
        "attempts": p.attempts,
        "schema": "v1",
    }
