"""Final dialogue samples, the quality filter and the corpus file format."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import RelforgeError, SchemaError
from .grounding import DEFAULT_GRID, GROUNDING, IMAGE_PLACEHOLDER, image_close, image_open, parse_grounded, strip_special_tokens
from .llm import DialogTurns, RelationDescription
from .records import SCHEMA_VERSION, atomic_write_text, dumps_line

ROLES = ("human", "assistant")
TASK_TYPES = ("describe", "dialog", "temporal_describe", "temporal_order", "geometric", "fewshot")

# quality filter thresholds; each applies only when its input is present
MIN_CLIP_SCORE = 0.34
MIN_BBOX_CONFIDENCE = 0.88
MIN_ANSWER_WORDS = 40

CORPUS_FIELDS = ("id", "images", "turns", "family", "task_type", "relation_id", "grounding",
                 "generator", "scores", "schema")
_REQUIRED_FIELDS = set(CORPUS_FIELDS) - {"scores"}


class ImageIndexOutOfRange(RelforgeError):
    pass


@dataclass(frozen=True)
class Turn:
    role: str
    text: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")


@dataclass(frozen=True)
class DialogSample:
    sample_id: str
    images: tuple[str, ...]
    turns: tuple[Turn, ...]
    grounding: bool
    relation_id: str
    family: str
    task_type: str
    generator: str
    scores: Optional[dict] = None

    @property
    def assistant_text(self) -> str:
        return " ".join(t.text for t in self.turns if t.role == "assistant")


def image_declarations(n: int) -> str:
    return ", ".join(f"{image_open(i)} {IMAGE_PLACEHOLDER} {image_close(i)}" for i in range(n))


def human_prompt(n_images: int, question: str, grounding: bool) -> str:
    text = f"{image_declarations(n_images)} {question}".strip()
    return f"{text} {GROUNDING}" if grounding else text


def _max_image_index(text: str, grid: int) -> int:
    stream, _ = parse_grounded(text, grid)
    return max((i for i, _ in stream.located_boxes() if i is not None), default=-1)


def assemble_sample(sample_id: str, images: Sequence[str], question: str, answer: str, *,
                    relation_id: str, family: str, task_type: str, generator: str,
                    grounding: bool = True, scores: Optional[dict] = None,
                    grid: int = DEFAULT_GRID) -> DialogSample:
    """Build one two-turn sample with image declarations and the grounding flag."""
    images = tuple(images)
    if not images:
        raise ValueError("a sample needs at least one image")
    for text in (question, answer):
        top = _max_image_index(text, grid)
        if top >= len(images):
            raise ImageIndexOutOfRange(f"{sample_id}: text references img{top} but only {len(images)} image(s)")
    turns = (Turn("human", human_prompt(len(images), question, grounding)), Turn("assistant", answer))
    return DialogSample(sample_id, images, turns, grounding, relation_id, family, task_type, generator,
                        dict(scores) if scores else None)


def sample_from_description(sample_id: str, images: Sequence[str], desc: RelationDescription,
                            turns: DialogTurns, relation_id: str, task_type: str = "dialog",
                            grounding: Optional[bool] = None, scores: Optional[dict] = None) -> DialogSample:
    if grounding is None:
        grounding = bool(desc.required_tokens)
    generator = "llm" if desc.generator == "llm" and turns.generator == "llm" else "fallback"
    return assemble_sample(sample_id, images, turns.question, turns.answer, relation_id=relation_id,
                           family=desc.family, task_type=task_type, generator=generator,
                           grounding=grounding, scores=scores)


def format_dialog(sample: DialogSample) -> str:
    prefix = {"human": "### Human: ", "assistant": "### Assistant: "}
    return "\n".join(prefix[t.role] + t.text for t in sample.turns)


# ---------------------------------------------------------------------------
# Quality filter
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FilterThresholds:
    clip_score: float = MIN_CLIP_SCORE
    bbox_confidence: float = MIN_BBOX_CONFIDENCE
    words: int = MIN_ANSWER_WORDS


@dataclass(frozen=True)
class FilterDecision:
    keep: bool
    reasons: tuple[str, ...] = ()


def answer_word_count(text: str) -> int:
    return len(strip_special_tokens(text).split())


def filter_quality(sample: DialogSample, thresholds: FilterThresholds = FilterThresholds()) -> FilterDecision:
    """Strict-inequality filter on CLIP score, box confidence and answer length."""
    reasons = []
    scores = sample.scores or {}
    clip = scores.get("clip_score")
    if clip is not None and not clip > thresholds.clip_score:
        reasons.append("clip_score")
    conf = scores.get("bbox_confidence")
    if conf is not None and not conf > thresholds.bbox_confidence:
        reasons.append("bbox_confidence")
    if not answer_word_count(sample.assistant_text) > thresholds.words:
        reasons.append("text_length")
    return FilterDecision(not reasons, tuple(reasons))


# ---------------------------------------------------------------------------
# Lint
# ---------------------------------------------------------------------------


_DECL_RE = re.compile(r"<img(\d+)> " + re.escape(IMAGE_PLACEHOLDER) + r" </img(\d+)>")


def lint_sample(sample: DialogSample, grid: int = DEFAULT_GRID) -> list[str]:
    """Problems that would make a sample unusable; empty when clean."""
    problems = []
    if not sample.turns or sample.turns[0].role != "human":
        return ["first turn is not a human turn"]
    first = sample.turns[0].text
    declared = [int(a) for a, b in _DECL_RE.findall(first) if a == b]
    if declared != list(range(len(sample.images))):
        problems.append(f"image declarations {declared} do not match {len(sample.images)} image(s)")
    if sample.grounding and not first.rstrip().endswith(GROUNDING):
        problems.append("grounding requested but human turn does not end with <grounding>")
    for n, turn in enumerate(sample.turns):
        stream, failures = parse_grounded(turn.text, grid)
        for f in failures:
            problems.append(f"turn {n}: {f.kind.value} at {f.position}")
        for idx, _ in stream.located_boxes():
            if idx is not None and idx >= len(sample.images):
                problems.append(f"turn {n}: img{idx} out of range")
    return problems


# ---------------------------------------------------------------------------
# Corpus I/O
# ---------------------------------------------------------------------------


def sample_to_dict(s: DialogSample) -> dict:
    d = {
        "id": s.sample_id,
        "images": list(s.images),
        "turns": [{"role": t.role, "text": t.text} for t in s.turns],
        "family": s.family,
        "task_type": s.task_type,
        "relation_id": s.relation_id,
        "grounding": s.grounding,
        "generator": s.generator,
    }
    if s.scores:
        d["scores"] = dict(sorted(s.scores.items()))
    d["schema"] = SCHEMA_VERSION
    return d


def sample_from_dict(d, source="<memory>", line=None) -> DialogSample:
    def bad(fld, msg):
        return SchemaError(source, fld, f"{source}:{line}: {msg}", line=line)

    if not isinstance(d, dict):
        raise bad("record", "record is not an object")
    unknown = set(d) - set(CORPUS_FIELDS)
    if unknown:
        raise bad(sorted(unknown)[0], f"unknown field(s) {sorted(unknown)}")
    missing = _REQUIRED_FIELDS - set(d)
    if missing:
        raise bad(sorted(missing)[0], f"missing field(s) {sorted(missing)}")
    if d["schema"] != SCHEMA_VERSION:
        raise bad("schema", f"unsupported schema {d['schema']!r}")
    if not isinstance(d["images"], list) or not all(isinstance(x, str) for x in d["images"]):
        raise bad("images", "images must be a list of strings")
    if not isinstance(d["grounding"], bool):
        raise bad("grounding", "grounding must be a boolean")
    for key in ("id", "family", "task_type", "relation_id", "generator"):
        if not isinstance(d[key], str):
            raise bad(key, f"{key} must be a string")
    turns = []
    for t in d["turns"] if isinstance(d["turns"], list) else [None]:
        if not isinstance(t, dict) or set(t) != {"role", "text"} or t.get("role") not in ROLES \
                or not isinstance(t.get("text"), str):
            raise bad("turns", f"malformed turn {t!r}")
        turns.append(Turn(t["role"], t["text"]))
    scores = d.get("scores")
    if scores is not None and (not isinstance(scores, dict)
                               or not all(isinstance(v, (int, float)) for v in scores.values())):
        raise bad("scores", "scores must map names to numbers")
    return DialogSample(d["id"], tuple(d["images"]), tuple(turns), d["grounding"], d["relation_id"],
                        d["family"], d["task_type"], d["generator"], scores)


def corpus_text(samples: Iterable[DialogSample]) -> str:
    return "".join(dumps_line(sample_to_dict(s)) + "\n" for s in samples)


def write_corpus(samples: Iterable[DialogSample], path) -> int:
    samples = list(samples)
    atomic_write_text(path, corpus_text(samples))
    return len(samples)


def read_corpus(path) -> list[DialogSample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(path, "json", f"{path}:{lineno}: {exc.msg}", line=lineno) from None
            out.append(sample_from_dict(d, source=path, line=lineno))
    return out


def corpus_hash(path) -> str:
    """SHA-256 of a corpus file with line endings normalized to LF."""
    with open(path, "rb") as fh:
        data = fh.read().replace(b"\r\n", b"\n")
    return hashlib.sha256(data).hexdigest()


def split_corpus(samples: Sequence[DialogSample], val_fraction: float, seed: int):
    """Seeded train/validation split; returns (train, val)."""
    if not 0 <= val_fraction <= 1:
        raise ValueError("val_fraction must be in [0, 1]")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_val = int(round(len(samples) * val_fraction))
    val_idx = set(order[:n_val].tolist())
    train = [s for i, s in enumerate(samples) if i not in val_idx]
    val = [s for i, s in enumerate(samples) if i in val_idx]
    return train, val
