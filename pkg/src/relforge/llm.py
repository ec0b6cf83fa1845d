"""Description and dialogue generation through a chat-completion endpoint.

Every generated text passes :func:`validate_generation` before it becomes a
:class:`RelationDescription`; when the model keeps failing validation the
deterministic rule-based generator takes over.  With no client at all the
whole pipeline is a pure function of its inputs.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import httpx

from .errors import ClientError, ConfigError, RelforgeError
from .grounding import DEFAULT_GRID, ground, image_close, image_open, parse_grounded, patch_token
from .ingest import EncodedAttribute, LinguisticEncoding
from .records import dumps_line
from .relations import RelationSpec

logger = logging.getLogger(__name__)

DEFAULT_RETRIES = 3
DEFAULT_TEMPERATURE = 0.2
DEFAULT_MAX_TOKENS = 512
DEFAULT_CONCURRENCY = 8

ENV_ENDPOINT = "RELFORGE_LLM_ENDPOINT"
ENV_KEY = "RELFORGE_LLM_KEY"

GENERATORS = ("llm", "fallback")

_STAGE_SLOTS = {
    "desc": {"enc_a", "enc_b", "relation_name"},
    "dialog": {"prior_desc", "relation_name"},
    "judge": {"question", "reference", "answer"},
}

_ORDINAL = ("first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth")
_PLURALS = {"person": "people", "man": "men", "woman": "women", "child": "children"}


def plural(noun: str) -> str:
    if noun in _PLURALS:
        return _PLURALS[noun]
    if noun.endswith(("s", "x", "z", "ch", "sh")):
        return noun + "es"
    return noun + "s"


def _join(items: Sequence[str]) -> str:
    items = list(items)
    if len(items) <= 1:
        return "".join(items)
    return ", ".join(items[:-1]) + " and " + items[-1]


# ---------------------------------------------------------------------------
# Templates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    family: str
    stage: str
    system_text: str
    user_text: str
    questions: tuple[str, ...] = ()

    def __post_init__(self):
        slots = set(re.findall(r"{(\w+)}", self.user_text))
        missing = _STAGE_SLOTS.get(self.stage, set()) - slots
        if missing:
            raise ConfigError(f"template {self.template_id}: missing slots {sorted(missing)}")

    def fill(self, **values) -> tuple[str, str]:
        try:
            return self.system_text, self.user_text.format_map(values)
        except KeyError as exc:
            raise ConfigError(f"template {self.template_id}: no value for slot {exc.args[0]!r}") from None


def load_template(family: str, stage: str, prompt_dir=None) -> PromptTemplate:
    """Read the ``stage`` template of ``family`` from ``prompt_dir`` or the bundled set."""
    name = f"{family}.json"
    try:
        if prompt_dir is not None:
            text = (Path(prompt_dir) / name).read_text(encoding="utf-8")
        else:
            text = resources.files("relforge.data.prompts").joinpath(name).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"no prompt template file for family {family!r}") from None
    doc = json.loads(text)
    if stage not in doc:
        raise ConfigError(f"prompt file {name} has no {stage!r} stage")
    body = doc[stage]
    return PromptTemplate(
        template_id=f"{family}-{stage}-{doc.get('version', 'v0')}",
        family=family,
        stage=stage,
        system_text=body["system"],
        user_text=body["user"],
        questions=tuple(doc.get("questions", ())),
    )


# ---------------------------------------------------------------------------
# Transport
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChatExchange:
    model: str
    system: str
    user: str
    temperature: float
    max_tokens: int
    response: str
    latency_ms: float
    attempts: int
    usage: Optional[dict] = None


class ChatClient:
    """Minimal chat-completion client with retries and bounded concurrency.

    ``transport`` is passed through to :class:`httpx.Client`, which lets tests
    plug in an :class:`httpx.MockTransport`.
    """

    def __init__(self, endpoint: str, api_key: Optional[str] = None, model: str = "gpt-4",
                 timeout: float = 60.0, max_retries: int = DEFAULT_RETRIES,
                 concurrency: int = DEFAULT_CONCURRENCY, backoff: float = 0.5,
                 audit_path=None, transport=None):
        if max_retries < 1:
            raise ValueError("max_retries must be >= 1")
        self.endpoint = endpoint
        self.model = model
        self.max_retries = max_retries
        self.backoff = backoff
        self.audit_path = Path(audit_path) if audit_path else None
        self._headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._http = httpx.Client(timeout=timeout, transport=transport)
        self._slots = threading.BoundedSemaphore(concurrency)
        self._audit_lock = threading.Lock()

    @classmethod
    def from_env(cls, **kwargs) -> "ChatClient":
        endpoint = os.environ.get(ENV_ENDPOINT)
        if not endpoint:
            raise ConfigError(f"{ENV_ENDPOINT} is not set (use --offline to run without an LLM)")
        return cls(endpoint, os.environ.get(ENV_KEY), **kwargs)

    def close(self):
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _audit(self, ex: ChatExchange):
        if self.audit_path is None:
            return
        line = dumps_line({
            "time": time.time(), "model": ex.model, "system": ex.system, "user": ex.user,
            "temperature": ex.temperature, "max_tokens": ex.max_tokens, "response": ex.response,
            "latency_ms": round(ex.latency_ms, 3), "attempts": ex.attempts, "usage": ex.usage,
        })
        with self._audit_lock:
            self.audit_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.audit_path, "a", encoding="utf-8", newline="\n") as fh:
                fh.write(line + "\n")

    def complete(self, system: str, user: str, temperature: float = DEFAULT_TEMPERATURE,
                 max_tokens: int = DEFAULT_MAX_TOKENS) -> ChatExchange:
        payload = {
            "model": self.model,
            "messages": [{"role": "system", "content": system}, {"role": "user", "content": user}],
            "temperature": temperature,
            "max_tokens": max_tokens,
        }
        last = None
        for attempt in range(1, self.max_retries + 1):
            if attempt > 1 and self.backoff:
                time.sleep(self.backoff * 2 ** (attempt - 2))
            t0 = time.perf_counter()
            try:
                with self._slots:
                    resp = self._http.post(self.endpoint, json=payload, headers=self._headers)
            except httpx.TransportError as exc:
                last = exc
                logger.warning("request attempt %d failed: %s", attempt, exc)
                continue
            latency = (time.perf_counter() - t0) * 1000
            if resp.status_code in (401, 403):
                raise ClientError(f"endpoint rejected credentials ({resp.status_code})", attempt)
            if resp.status_code == 429 or resp.status_code >= 500:
                last = RelforgeError(f"HTTP {resp.status_code}")
                logger.warning("request attempt %d got HTTP %d", attempt, resp.status_code)
                continue
            if resp.status_code >= 400:
                raise ClientError(f"HTTP {resp.status_code}: {resp.text[:200]}", attempt)
            try:
                body = resp.json()
                text = body["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError):
                raise ClientError("malformed chat-completion response", attempt) from None
            ex = ChatExchange(self.model, system, user, temperature, max_tokens, text or "",
                              latency, attempt, body.get("usage"))
            self._audit(ex)
            return ex
        raise ClientError(f"no response after {self.max_retries} attempts: {last}", self.max_retries, last)


def _reply_text(reply) -> str:
    return reply if isinstance(reply, str) else reply.response


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


class ViolationKind(str, enum.Enum):
    MissingToken = "MissingToken"
    GrammarViolation = "GrammarViolation"
    EmptyOutput = "EmptyOutput"
    MissingText = "MissingText"


@dataclass(frozen=True)
class Violation:
    kind: ViolationKind
    detail: str = ""


_SPECIAL_TOKEN_RE = re.compile(r"</?(?:phrase|img\d+)>|<patch_index_\d+>")


def validate_generation(required_tokens, text: str, grid: int = DEFAULT_GRID) -> list[Violation]:
    """List what is wrong with a generated text; empty means acceptable."""
    if not text or not text.strip():
        return [Violation(ViolationKind.EmptyOutput)]
    out = []
    present = set(_SPECIAL_TOKEN_RE.findall(text))
    for tok in sorted(set(required_tokens) - present):
        out.append(Violation(ViolationKind.MissingToken, tok))
    _, failures = parse_grounded(text, grid)
    for f in failures:
        out.append(Violation(ViolationKind.GrammarViolation, f"{f.kind.value} at {f.position}: {f.detail}"))
    return out


def must_preserve_tokens(encodings: Sequence[LinguisticEncoding], grounding: bool = True) -> frozenset:
    """Patch tokens of every encoded box plus the img tokens of the images holding them."""
    if not grounding:
        return frozenset()
    toks = set()
    for i, enc in enumerate(encodings):
        if enc.boxes:
            toks.update((image_open(i), image_close(i)))
        for b in enc.boxes:
            toks.update((patch_token(b.pair.tl_bin), patch_token(b.pair.br_bin)))
    return frozenset(toks)


class InvalidGeneration(RelforgeError, ValueError):
    pass


@dataclass(frozen=True)
class RelationDescription:
    """A description that passed validation; construction re-checks it."""
    text: str
    pair_ref: tuple[str, ...]
    template_id: str
    generator: str
    family: str
    required_tokens: frozenset = frozenset()
    truth: Optional[bool] = None
    subject: Optional[str] = None
    attempts: int = 0

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}")
        problems = validate_generation(self.required_tokens, self.text)
        if problems:
            raise InvalidGeneration(f"description fails validation: {problems}")


# ---------------------------------------------------------------------------
# Rule-based fallback
# ---------------------------------------------------------------------------


def _attr_map(enc: LinguisticEncoding) -> dict[str, EncodedAttribute]:
    return {a.field: a for a in enc.attributes}


def _boxes_by_label(enc: LinguisticEncoding) -> dict[str, list]:
    out: dict[str, list] = {}
    for b in enc.boxes:
        out.setdefault(b.label, []).append(b)
    return out


def _grounded_noun(noun: str, located: list[tuple[int, object]], grounding: bool) -> str:
    if grounding and located:
        return ground(noun, *located)
    return noun


def _contrast_text(enc_a, enc_b, spec, grounding) -> str:
    subj = enc_a.subject or enc_b.subject or "image"
    subjs = plural(subj)
    skip = spec.fields_for("a") | spec.fields_for("b")
    attrs = [_attr_map(enc_a), _attr_map(enc_b)]
    boxes = [_boxes_by_label(enc_a), _boxes_by_label(enc_b)]
    used: set[tuple[int, str]] = set()

    order = [f for f in attrs[0] if f in attrs[1] and f not in skip]
    diffs = [f for f in order if attrs[0][f].value != attrs[1][f].value]
    sentences = []
    if not diffs:
        sentences.append(f"There are no notable differences between the two {subjs}.")
    else:
        aspects = [attrs[0][f].aspect or f.replace("_", " ") for f in diffs]
        sentences.append(f"The main difference between them is {_join(aspects)}.")
        presence = [f for f in diffs if attrs[0][f].noun and isinstance(attrs[0][f].value, bool)]
        for f in diffs:
            if f in presence:
                continue
            a, b = attrs[0][f], attrs[1][f]
            sentences.append(f"The first {subj} {a.verb} {a.phrase} while the second {subj} {b.verb} {b.phrase}.")
        for n, f in enumerate(presence):
            a = attrs[0][f]
            has, lacks = (1, 0) if attrs[1][f].value else (0, 1)
            located = [(has, b.pair) for b in boxes[has].get(f, [])]
            used.add((has, f))
            lead = "Additionally, the" if (n == 0 and len(sentences) > 1) else "The"
            sentences.append(f"{lead} {_ORDINAL[has]} {subj} {a.verb} "
                             f"{_grounded_noun(a.noun, located, grounding)}, "
                             f"while the {_ORDINAL[lacks]} {subj} is not.")
    if grounding:
        sentences.extend(_remaining_boxes((enc_a, enc_b), boxes, used, subj))
    return " ".join(sentences)


def _remaining_boxes(encs, boxes, used, subj) -> list[str]:
    out = []
    for i, enc in enumerate(encs):
        amap = _attr_map(enc)
        for label, items in boxes[i].items():
            if (i, label) in used:
                continue
            attr = amap.get(label)
            verb = attr.verb if attr is not None else (items[0].verb or "has")
            noun = attr.noun if attr is not None and attr.noun else items[0].noun
            span = ground(noun, *[(i, b.pair) for b in items])
            out.append(f"The {_ORDINAL[i]} {subj} {verb} {span}.")
    return out


def _similarity_text(enc_a, enc_b, spec, grounding) -> str:
    attrs = [_attr_map(enc_a), _attr_map(enc_b)]
    boxes = [_boxes_by_label(enc_a), _boxes_by_label(enc_b)]
    used: set[tuple[int, str]] = set()
    sentences = []

    def item(name, images):
        located = [(i, b.pair) for i in images for b in boxes[i].get(name, [])]
        for i in images:
            if name in boxes[i]:
                used.add((i, name))
        return _grounded_noun(name.replace("_", " "), located, grounding)

    shared_scalar = []
    for f, a in attrs[0].items():
        if f not in attrs[1]:
            continue
        va, vb = a.value, attrs[1][f].value
        if isinstance(va, (set, frozenset)) and isinstance(vb, (set, frozenset)):
            common = sorted(set(va) & set(vb), key=str)
            only_a = sorted(set(va) - set(vb), key=str)
            only_b = sorted(set(vb) - set(va), key=str)
            if common:
                sentences.append(f"Both images contain {_join([item(str(c), (0, 1)) for c in common])}.")
            if only_a:
                sentences.append(f"Only the first image contains {_join([item(str(c), (0,)) for c in only_a])}.")
            if only_b:
                sentences.append(f"Only the second image contains {_join([item(str(c), (1,)) for c in only_b])}.")
        elif va == vb:
            shared_scalar.append(a.phrase)
    if shared_scalar:
        sentences.append(f"Both images share these attributes: {_join(shared_scalar)}.")
    if not sentences or not any(s.startswith(("Both", "Common")) for s in sentences):
        sentences.insert(0, "The two images have nothing in common.")
    if grounding:
        subj = enc_a.subject or enc_b.subject or "image"
        sentences.extend(_remaining_boxes((enc_a, enc_b), boxes, used, subj))
    return " ".join(sentences)


def fallback_generate(enc_a: LinguisticEncoding, enc_b: LinguisticEncoding, spec: RelationSpec,
                      truth: bool, grounding: bool = True) -> str:
    """Deterministic description: equal fields as similarities, differing ones as differences."""
    if spec.family == "similarity":
        return _similarity_text(enc_a, enc_b, spec, grounding)
    return _contrast_text(enc_a, enc_b, spec, grounding)


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


def _verdict(truth) -> str:
    if truth is None:
        return "not applicable"
    return "holds" if truth else "does not hold"


def generate_description(enc_a: LinguisticEncoding, enc_b: LinguisticEncoding, spec: RelationSpec,
                         truth: bool, client=None, *, grounding: bool = True,
                         retries: int = DEFAULT_RETRIES, prompt_dir=None,
                         temperature: float = DEFAULT_TEMPERATURE,
                         max_tokens: int = DEFAULT_MAX_TOKENS) -> RelationDescription:
    """Ask the LLM for a relation description, falling back to rules after ``retries`` bad replies."""
    template = load_template(spec.family, "desc", prompt_dir)
    required = must_preserve_tokens((enc_a, enc_b), grounding)
    subject = enc_a.subject or enc_b.subject
    common = dict(pair_ref=(enc_a.source_id, enc_b.source_id), template_id=template.template_id,
                  family=spec.family, required_tokens=required, truth=truth, subject=subject)
    attempts = 0
    if client is not None:
        system, user = template.fill(enc_a=enc_a.text, enc_b=enc_b.text, relation_name=spec.relation_id,
                                     verdict=_verdict(truth), subject=subject or "object",
                                     subject_plural=plural(subject or "object"))
        for attempts in range(1, retries + 1):
            text = _reply_text(client.complete(system, user, temperature=temperature,
                                               max_tokens=max_tokens)).strip()
            problems = validate_generation(required, text)
            if not problems:
                return RelationDescription(text, generator="llm", attempts=attempts, **common)
            logger.info("description for %s rejected (attempt %d): %s", common["pair_ref"], attempts, problems)
    text = fallback_generate(enc_a, enc_b, spec, truth, grounding)
    return RelationDescription(text, generator="fallback", attempts=attempts, **common)


def templated_description(text: str, family: str, pair_ref, required_tokens=frozenset(),
                          truth=None, template_id: Optional[str] = None) -> RelationDescription:
    """Wrap a template-generated text (geometric, temporal) as a validated description."""
    return RelationDescription(text, tuple(pair_ref), template_id or f"{family}-template-v1", "fallback",
                               family, frozenset(required_tokens), truth)


def tokens_in(text: str) -> frozenset:
    """Every phrase, image and patch-index token occurring in ``text``."""
    return frozenset(_SPECIAL_TOKEN_RE.findall(text))


@dataclass(frozen=True)
class DialogTurns:
    question: str
    answer: str
    generator: str
    attempts: int = 0


def family_question(family: str, subject: Optional[str] = None, prompt_dir=None, index: int = 0) -> str:
    questions = load_template(family, "dialog", prompt_dir).questions
    if not questions:
        raise ConfigError(f"no questions configured for family {family!r}")
    q = questions[index % len(questions)]
    subject = subject or "object"
    return q.format(subject=subject, subject_plural=plural(subject))


def fallback_answer(desc: RelationDescription) -> str:
    if desc.family == "contrast" and desc.truth is not None:
        subj = desc.subject or "object"
        if desc.truth:
            return (f"Yes, they are the same {subj}. {desc.text} Therefore, it can be concluded "
                    f"that these two images show the same {subj}.")
        return (f"No, they are not the same {subj}. {desc.text} Therefore, based on these differences, "
                f"it can be concluded that these two {plural(subj)} are not the same {subj}.")
    return desc.text


def validate_answer(desc: RelationDescription, answer: str) -> list[Violation]:
    problems = validate_generation(desc.required_tokens, answer)
    if desc.text not in answer:
        problems.append(Violation(ViolationKind.MissingText, "answer does not embed the description"))
    return problems


def generate_dialog(desc: RelationDescription, spec: Optional[RelationSpec] = None, client=None, *,
                    question: Optional[str] = None, retries: int = DEFAULT_RETRIES, prompt_dir=None,
                    temperature: float = DEFAULT_TEMPERATURE,
                    max_tokens: int = DEFAULT_MAX_TOKENS) -> DialogTurns:
    """One question and one answer that embeds the description verbatim."""
    family = spec.family if spec is not None else desc.family
    relation_name = spec.relation_id if spec is not None else family
    question = question or family_question(family, desc.subject, prompt_dir)
    attempts = 0
    if client is not None:
        template = load_template(family, "dialog", prompt_dir)
        system, user = template.fill(question=question, prior_desc=desc.text, relation_name=relation_name,
                                     verdict=_verdict(desc.truth))
        for attempts in range(1, retries + 1):
            answer = _reply_text(client.complete(system, user, temperature=temperature,
                                                 max_tokens=max_tokens)).strip()
            problems = validate_answer(desc, answer)
            if not problems:
                return DialogTurns(question, answer, "llm", attempts)
            logger.info("answer for %s rejected (attempt %d): %s", desc.pair_ref, attempts, problems)
    answer = fallback_answer(desc)
    if validate_answer(desc, answer):
        raise InvalidGeneration(f"fallback answer for {desc.pair_ref} failed validation")
    return DialogTurns(question, answer, "fallback", attempts)


def judge_template(prompt_dir=None) -> PromptTemplate:
    return load_template("judge", "judge", prompt_dir)
