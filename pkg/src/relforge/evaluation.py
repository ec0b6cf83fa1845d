"""Scoring model outputs: grounding accuracy, yes/no metrics, judge scores, k-shot prompts."""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dialog import DialogSample
from .errors import RelforgeError, SchemaError
from .grounding import DEFAULT_GRID, IMAGE_PLACEHOLDER, InvalidPair, NormBox, decode_pair, image_close, image_open, parse_grounded
from .llm import _reply_text, judge_template

logger = logging.getLogger(__name__)

# fixed evaluation questions, one per benchmark task
EVAL_QUESTIONS = {
    "similarity": "What are the common elements or objects found in both of these pictures?",
    "contrast": "Is the same person in these two images? And why?",
    "temporal": "What is the video about?",
    "geometric": "How has the object transformed from the first image to the second image?",
    "anomaly": "Does the component appear normal?",
    "lesion": "Is this image benign or malignant? option: [benign / malignant]",
}

JUDGE_MIN, JUDGE_MAX = 0, 5
FEWSHOT_K = (2, 4, 8)

NEGATION = ("not the same", "different", "no")
AFFIRMATION = ("the same person", "same person", "yes")


class EmptyEval(RelforgeError):
    pass


class PoolTooSmall(RelforgeError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    grid: int = DEFAULT_GRID
    questions: dict = field(default_factory=lambda: dict(EVAL_QUESTIONS))
    judge_template_id: str = "judge-judge-v1"
    judge_range: tuple[int, int] = (JUDGE_MIN, JUDGE_MAX)
    per_image: bool = False

    def __post_init__(self):
        if not 0 < self.iou_threshold < 1:
            raise ValueError(f"iou_threshold {self.iou_threshold} must be in (0, 1)")


def iou(a: NormBox, b: NormBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


# ---------------------------------------------------------------------------
# Grounding
# ---------------------------------------------------------------------------


@dataclass
class GroundingScore:
    correct: list[bool]
    matched_iou: list[float]
    predictions: int
    decode_failures: int

    @property
    def slots(self) -> int:
        return self.predictions + self.decode_failures

    @property
    def accuracy(self) -> float:
        return sum(self.correct) / len(self.correct) if self.correct else 0.0


def extract_boxes(text: str, grid: int = DEFAULT_GRID):
    """Decoded (image_index, box) predictions plus the number of decode failures."""
    stream, failures = parse_grounded(text, grid)
    boxes = []
    n_fail = len(failures)
    for idx, pair in stream.located_boxes():
        try:
            boxes.append((idx, decode_pair(pair, grid)))
        except InvalidPair:
            n_fail += 1
    return boxes, n_fail


def greedy_match(pred: Sequence[NormBox], gt: Sequence[NormBox]) -> list[tuple[int, int, float]]:
    """Repeatedly pair the highest-IoU (prediction, gt) couple, each used once."""
    if not pred or not gt:
        return []
    m = np.array([[iou(p, g) for g in gt] for p in pred])
    out = []
    used_p, used_g = set(), set()
    # stable order: IoU descending, then prediction index, then gt index
    order = sorted(((-m[i, j], i, j) for i in range(len(pred)) for j in range(len(gt))))
    for neg, i, j in order:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        out.append((i, j, float(-neg)))
    return out


def score_grounding(prediction_text: str, gt: Sequence, cfg: EvalConfig = EvalConfig()) -> GroundingScore:
    """Per-gt-box correctness; undecodable predictions count as wrong slots.

    ``gt`` holds :class:`NormBox` items, or ``(image_index, NormBox)`` pairs
    when ``cfg.per_image`` restricts matching to the same image.
    """
    if not gt:
        raise ValueError("score_grounding needs at least one ground-truth box")
    preds, n_fail = extract_boxes(prediction_text, cfg.grid)
    gt_items = [g if isinstance(g, tuple) else (None, g) for g in gt]
    correct = [False] * len(gt_items)
    best = [0.0] * len(gt_items)
    if cfg.per_image:
        groups = {}
        for j, (idx, _) in enumerate(gt_items):
            groups.setdefault(idx, []).append(j)
        for idx, gjs in groups.items():
            pis = [i for i, (pidx, _) in enumerate(preds) if pidx == idx]
            for pi, gj, v in greedy_match([preds[i][1] for i in pis], [gt_items[j][1] for j in gjs]):
                best[gjs[gj]] = v
    else:
        for _, gj, v in greedy_match([b for _, b in preds], [b for _, b in gt_items]):
            best[gj] = v
    for j, v in enumerate(best):
        correct[j] = bool(v > cfg.iou_threshold)
    return GroundingScore(correct, best, len(preds), n_fail)


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------


_SENTENCE_RE = re.compile(r"(?<=[.!?])\s+")


def _has_phrase(sentence: str, phrase: str) -> bool:
    return re.search(r"\b" + re.escape(phrase) + r"\b", sentence) is not None


def extract_binary_answer(text: str) -> str:
    """``yes``, ``no`` or ``unparseable`` from the first two sentences; negation wins."""
    sentences = [s for s in _SENTENCE_RE.split(text.strip().lower()) if s][:2]
    for s in sentences:
        if any(_has_phrase(s, p) for p in NEGATION):
            return "no"
        if any(_has_phrase(s, p) for p in AFFIRMATION):
            return "yes"
    return "unparseable"


def classification_metrics(tp: int, fp: int, tn: int, fn: int) -> tuple[float, float, float, float]:
    total = tp + fp + tn + fn
    if total <= 0:
        raise EmptyEval("no items to score")
    acc = (tp + tn) / total
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return acc, prec, rec, f1


def f1_from(prec: float, rec: float) -> float:
    return 2 * prec * rec / (prec + rec) if prec + rec else 0.0


# ---------------------------------------------------------------------------
# Judge
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class JudgeResult:
    score: int
    parsed: bool
    reply: str


def parse_judge_reply(reply: str, lo: int = JUDGE_MIN, hi: int = JUDGE_MAX) -> tuple[int, bool]:
    m = re.search(r"-?\d+", reply or "")
    if m is None:
        return 0, False
    return min(max(int(m.group()), lo), hi), True


def judge_relation_score(question: str, reference: str, answer: str, client, prompt_dir=None,
                         cfg: EvalConfig = EvalConfig()) -> JudgeResult:
    template = judge_template(prompt_dir)
    system, user = template.fill(question=question, reference=reference, answer=answer)
    reply = _reply_text(client.complete(system, user, temperature=0.0, max_tokens=64))
    score, ok = parse_judge_reply(reply, *cfg.judge_range)
    return JudgeResult(score, ok, reply)


# ---------------------------------------------------------------------------
# Few-shot prompts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FewShotItem:
    item_id: str
    image: str
    answer: str
    label: bool


@dataclass(frozen=True)
class FewShotPrompt:
    examples: tuple[FewShotItem, ...]
    query: FewShotItem
    question: str
    shortfall: int = 0

    @property
    def images(self) -> list[str]:
        return [e.image for e in self.examples] + [self.query.image]

    def render(self) -> str:
        lines = []
        for i, ex in enumerate(self.examples):
            decl = f"{image_open(i)} {IMAGE_PLACEHOLDER} {image_close(i)}"
            lines.append(f"### Human: {decl} {self.question}")
            lines.append(f"### Assistant: {ex.answer}")
        k = len(self.examples)
        lines.append(f"### Human: {image_open(k)} {IMAGE_PLACEHOLDER} {image_close(k)} {self.question}")
        return "\n".join(lines)


def assemble_fewshot_prompt(pool: Sequence[FewShotItem], k: int, query: FewShotItem, seed: int,
                            question: str = EVAL_QUESTIONS["anomaly"]) -> FewShotPrompt:
    """Pick ``k`` examples, ceil(k/2) positive and floor(k/2) negative when the pool allows."""
    if k not in FEWSHOT_K:
        raise ValueError(f"k must be one of {FEWSHOT_K}, got {k}")
    if any(p.item_id == query.item_id for p in pool):
        raise ValueError(f"query {query.item_id!r} is part of the example pool")
    if len(pool) < k:
        raise PoolTooSmall(f"pool has {len(pool)} items, need {k}")
    rng = np.random.default_rng(seed)
    pos = [p for p in pool if p.label]
    neg = [p for p in pool if not p.label]
    want_pos, want_neg = math.ceil(k / 2), k // 2
    n_pos, n_neg = min(want_pos, len(pos)), min(want_neg, len(neg))
    shortfall = (want_pos - n_pos) + (want_neg - n_neg)
    # one class ran short: fill the remaining seats from the other
    extra = k - n_pos - n_neg
    add = min(extra, len(pos) - n_pos)
    n_pos += add
    n_neg += min(extra - add, len(neg) - n_neg)
    pick_pos = [pos[i] for i in rng.choice(len(pos), n_pos, replace=False)] if n_pos else []
    pick_neg = [neg[i] for i in rng.choice(len(neg), n_neg, replace=False)] if n_neg else []
    chosen = pick_pos + pick_neg
    order = rng.permutation(len(chosen))
    return FewShotPrompt(tuple(chosen[i] for i in order), query, question, shortfall)


# ---------------------------------------------------------------------------
# Corpus-level evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    bbox_acc: Optional[float]
    accuracy: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    relation_score_mean: Optional[float]
    counts: dict
    diagnostics: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def summary_rows(self) -> list[tuple[str, str]]:
        def pct(v):
            return "n/a" if v is None else f"{100 * v:.1f}%"
        rs = "n/a" if self.relation_score_mean is None else f"{self.relation_score_mean:.2f}"
        return [("BBox Acc", pct(self.bbox_acc)), ("Acc", pct(self.accuracy)), ("Prec", pct(self.precision)),
                ("Rec", pct(self.recall)), ("F1", pct(self.f1)), ("RS", rs)]


def read_predictions(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                out[str(d["id"])] = str(d["answer_text"])
            except (json.JSONDecodeError, KeyError, TypeError):
                raise SchemaError(path, "prediction", f"{path}:{lineno}: expected {{id, answer_text}}",
                                  line=lineno) from None
    return out


def _gold_boxes(sample: DialogSample, grid: int):
    boxes, _ = extract_boxes(sample.assistant_text, grid)
    return boxes


def evaluate(predictions: dict[str, str], gold: Sequence[DialogSample], cfg: EvalConfig = EvalConfig(),
             judge=None, prompt_dir=None) -> EvalReport:
    """Score predictions against a gold corpus; missing predictions score as empty answers."""
    total_gt = correct_gt = 0
    decode_failures = slots = 0
    tp = fp = tn = fn = 0
    unparseable = judge_unparsed = 0
    judge_scores = []
    diags = []
    for s in gold:
        pred = predictions.get(s.sample_id, "")
        diag = {"id": s.sample_id}
        gt = _gold_boxes(s, cfg.grid)
        if gt:
            items = gt if cfg.per_image else [b for _, b in gt]
            g = score_grounding(pred, items, cfg)
            total_gt += len(g.correct)
            correct_gt += sum(g.correct)
            decode_failures += g.decode_failures
            slots += g.slots
            diag.update(boxes_correct=sum(g.correct), boxes_total=len(g.correct),
                        decode_failures=g.decode_failures)
        if s.family == "contrast":
            truth = extract_binary_answer(s.assistant_text)
            guess = extract_binary_answer(pred)
            diag["answer"] = guess
            if guess == "unparseable":
                unparseable += 1
            if truth == "yes":
                if guess == "yes":
                    tp += 1
                else:
                    fn += 1
            elif truth == "no":
                if guess == "no":
                    tn += 1
                else:
                    fp += 1
        if judge is not None:
            question = next((t.text for t in s.turns if t.role == "human"), "")
            r = judge_relation_score(question, s.assistant_text, pred, judge, prompt_dir, cfg)
            judge_scores.append(r.score)
            judge_unparsed += not r.parsed
            diag["relation_score"] = r.score
        diags.append(diag)

    if tp + fp + tn + fn:
        acc, prec, rec, f1 = classification_metrics(tp, fp, tn, fn)
    else:
        acc = prec = rec = f1 = None
    counts = {
        "total": len(gold), "gt_boxes": total_gt, "prediction_slots": slots,
        "decode_failures": decode_failures, "unparseable_answers": unparseable,
        "unparseable_judgements": judge_unparsed, "tp": tp, "fp": fp, "tn": tn, "fn": fn,
    }
    return EvalReport(
        bbox_acc=correct_gt / total_gt if total_gt else None,
        accuracy=acc, precision=prec, recall=rec, f1=f1,
        relation_score_mean=float(np.mean(judge_scores)) if judge_scores else None,
        counts=counts, diagnostics=diags,
    )
