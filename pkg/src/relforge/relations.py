"""Relation functions as declarative predicates over sample records.

A relation is written in a tiny expression language, one per line::

    same_id @contrast := eq(a.person_id, b.person_id)
    shares_category := set_intersects(a.categories, b.categories)

Slots ``a``, ``b``, ``c`` ... name the records of a pair or group; the number
of slots used is the relation's arity.
"""

from __future__ import annotations

import itertools
import logging
import math
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Collection, Optional, Sequence, Union

import numpy as np

from .errors import RelforgeError
from .records import SampleRecord

logger = logging.getLogger(__name__)

FAMILIES = ("similarity", "contrast", "temporal", "geometric")
COMPARE_OPS = ("eq", "neq", "set_intersects", "set_disjoint")
LOGIC_OPS = ("and", "or", "not")

# above this many candidate groups collect_pairs samples candidates instead
MAX_ENUMERATE = 1_000_000


class ParseError(RelforgeError):
    def __init__(self, position: int, expected: Collection[str], text: str = ""):
        self.position = position
        self.expected = tuple(sorted(expected))
        found = text[position:position + 10] or "end of input"
        super().__init__(f"at {position}: expected {' or '.join(self.expected)}, found {found!r}")


class MissingField(RelforgeError):
    def __init__(self, record_id, field):
        self.record_id = record_id
        self.field = field
        super().__init__(f"record {record_id!r} has no field {field!r}")


class EmptyStore(RelforgeError):
    pass


@dataclass(frozen=True)
class FieldRef:
    slot: str
    field: str

    def __str__(self):
        return f"{self.slot}.{self.field}"


@dataclass(frozen=True)
class Compare:
    op: str
    args: tuple[FieldRef, ...]

    def __str__(self):
        return f"{self.op}({', '.join(map(str, self.args))})"


@dataclass(frozen=True)
class Logic:
    op: str
    children: tuple["Expr", ...]

    def __str__(self):
        return f"{self.op}({', '.join(map(str, self.children))})"


Expr = Union[Compare, Logic]


def _field_refs(expr: Expr):
    if isinstance(expr, Compare):
        yield from expr.args
    else:
        for c in expr.children:
            yield from _field_refs(c)


@dataclass(frozen=True)
class RelationSpec:
    relation_id: str
    family: str
    arity: int
    predicate: Expr

    @property
    def slots(self) -> tuple[str, ...]:
        return tuple(chr(ord("a") + i) for i in range(self.arity))

    def fields_for(self, slot: str) -> set[str]:
        return {r.field for r in _field_refs(self.predicate) if r.slot == slot}

    def __str__(self):
        return f"{self.relation_id} @{self.family} := {self.predicate}"


_TOKEN = re.compile(r"\s*(?:(?P<name>[A-Za-z_][A-Za-z0-9_]*)|(?P<punct>:=|[(),.@]))")


class _DslParser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def peek(self):
        m = _TOKEN.match(self.text, self.pos)
        if not m:
            return None, self.pos
        return (m.group("name") or m.group("punct")), m.start(m.lastindex)

    def take(self, expected: Collection[str] = (), kind=None):
        m = _TOKEN.match(self.text, self.pos)
        start = len(self.text) - len(self.text[self.pos:].lstrip())
        if not m:
            raise ParseError(start, expected or {kind or "token"}, self.text)
        value = m.group("name") or m.group("punct")
        if kind == "name" and m.group("name") is None:
            raise ParseError(m.start(m.lastindex), {kind}, self.text)
        if expected and value not in expected:
            raise ParseError(m.start(m.lastindex), expected, self.text)
        self.pos = m.end()
        return value

    def spec(self, known_fields) -> RelationSpec:
        name = self.take(kind="name")
        family = None
        tok, _ = self.peek()
        if tok == "@":
            self.take({"@"})
            at = self.peek()[1]
            family = self.take(kind="name")
            if family not in FAMILIES:
                raise ParseError(at, FAMILIES, self.text)
        self.take({":="})
        expr = self.expr()
        rest = self.text[self.pos:]
        if rest.strip():
            raise ParseError(self.pos + len(rest) - len(rest.lstrip()), {"end of input"}, self.text)

        refs = list(_field_refs(expr))
        slots = sorted({r.slot for r in refs})
        arity = len(slots)
        if arity < 2 or slots != [chr(ord("a") + i) for i in range(arity)]:
            raise ParseError(0, {"slots a, b, ... used contiguously (arity >= 2)"}, self.text)
        if known_fields is not None:
            for r in refs:
                if r.field not in known_fields:
                    raise ParseError(self.text.find(str(r)), set(known_fields), self.text)
        if family is None:
            family = _infer_family(expr)
        return RelationSpec(name, family, arity, expr)

    def expr(self) -> Expr:
        at = self.peek()[1]
        op = self.take(COMPARE_OPS + LOGIC_OPS)
        self.take({"("})
        if op in LOGIC_OPS:
            children = [self.expr()]
            while self.peek()[0] == ",":
                self.take({","})
                children.append(self.expr())
            self.take({")", ","})
            if op == "not" and len(children) != 1:
                raise ParseError(at, {"not(expr)"}, self.text)
            if op != "not" and len(children) < 2:
                raise ParseError(self.pos, {","}, self.text)
            return Logic(op, tuple(children))
        args = [self.slotfield()]
        while self.peek()[0] == ",":
            self.take({","})
            args.append(self.slotfield())
        self.take({")", ","})
        if len(args) < 2:
            raise ParseError(at, {f"{op} with at least two arguments"}, self.text)
        return Compare(op, tuple(args))

    def slotfield(self) -> FieldRef:
        at = self.peek()[1]
        slot = self.take(kind="name")
        if len(slot) != 1 or not slot.islower():
            raise ParseError(at, {"slot letter a, b, c, ..."}, self.text)
        self.take({"."})
        field = self.take(kind="name")
        return FieldRef(slot, field)


def _infer_family(expr: Expr) -> str:
    ops = {e.op for e in _walk(expr) if isinstance(e, Compare)}
    return "similarity" if ops & {"set_intersects"} else "contrast"


def _walk(expr):
    yield expr
    if isinstance(expr, Logic):
        for c in expr.children:
            yield from _walk(c)


def parse_relation_dsl(text: str, known_fields: Optional[Collection[str]] = None) -> RelationSpec:
    """Parse one relation line.  Family defaults to ``similarity`` for set
    overlap relations and ``contrast`` otherwise when no ``@family`` is given."""
    return _DslParser(text).spec(known_fields)


def load_relations(path_or_name="default") -> dict[str, RelationSpec]:
    p = Path(path_or_name)
    if p.exists():
        text = p.read_text(encoding="utf-8")
    else:
        text = resources.files("relforge.data.relations").joinpath(f"{path_or_name}.rel").read_text(encoding="utf-8")
    specs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            spec = parse_relation_dsl(line)
        except ParseError as exc:
            raise ParseError(exc.position, exc.expected, line) from exc
        if spec.relation_id in specs:
            raise ValueError(f"{path_or_name}:{lineno}: duplicate relation {spec.relation_id!r}")
        specs[spec.relation_id] = spec
    return specs


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _as_set(value, ref):
    if isinstance(value, (set, frozenset)):
        return value
    raise TypeError(f"{ref} is not a set-valued field")


def _eval(expr: Expr, bound: dict[str, SampleRecord]) -> bool:
    if isinstance(expr, Logic):
        if expr.op == "not":
            return not _eval(expr.children[0], bound)
        results = (_eval(c, bound) for c in expr.children)
        return all(results) if expr.op == "and" else any(results)

    values = []
    for ref in expr.args:
        rec = bound[ref.slot]
        if ref.field not in rec.labels:
            raise MissingField(rec.sample_id, ref.field)
        values.append(rec.labels[ref.field])
    if expr.op == "eq":
        return all(v == values[0] for v in values[1:])
    if expr.op == "neq":
        return all(a != b for a, b in itertools.combinations(values, 2))
    sets = [_as_set(v, r) for v, r in zip(values, expr.args)]
    if expr.op == "set_intersects":
        return bool(frozenset.intersection(*map(frozenset, sets)))
    return all(not (a & b) for a, b in itertools.combinations(sets, 2))


def eval_relation(spec: RelationSpec, records: Sequence[SampleRecord]) -> bool:
    if len(records) != spec.arity:
        raise ValueError(f"{spec.relation_id} takes {spec.arity} records, got {len(records)}")
    return _eval(spec.predicate, dict(zip(spec.slots, records)))


# ---------------------------------------------------------------------------
# Pair collection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RelationPair:
    record_ids: tuple[str, ...]
    relation_id: str
    truth: bool


@dataclass
class PairCollection:
    pairs: list[RelationPair]
    requested_positive: int
    requested_negative: int
    available_positive: int
    available_negative: int
    exhaustive: bool = True

    @property
    def positives(self) -> int:
        return sum(p.truth for p in self.pairs)

    @property
    def negatives(self) -> int:
        return len(self.pairs) - self.positives

    @property
    def shortfall(self) -> dict[str, int]:
        return {
            "positive": max(0, self.requested_positive - self.positives),
            "negative": max(0, self.requested_negative - self.negatives),
        }


def _eligible(spec: RelationSpec, rec: SampleRecord, slot: str) -> bool:
    return spec.fields_for(slot) <= rec.labels.keys()


def _candidates(records, spec, rng):
    n, k = len(records), spec.arity
    total = math.comb(n, k)
    if total <= MAX_ENUMERATE:
        return itertools.combinations(range(n), k), True
    logger.warning("%d candidate groups for %s; sampling %d of them", total, spec.relation_id, MAX_ENUMERATE)
    seen = set()
    attempts = 0
    while len(seen) < MAX_ENUMERATE and attempts < 4 * MAX_ENUMERATE:
        attempts += 1
        seen.add(tuple(sorted(rng.choice(n, size=k, replace=False).tolist())))
    return sorted(seen), False


def collect_pairs(records: Sequence[SampleRecord], spec: RelationSpec, budget: Optional[int] = None,
                  positive_ratio: float = 0.5, seed: int = 0) -> PairCollection:
    """Sample record groups labelled by ``spec``.

    Groups are unordered (record order inside a group follows store order)
    and only groups whose records all carry the referenced fields are
    considered.  ``budget=None`` takes the largest sample that meets
    ``positive_ratio`` exactly given what the store holds.  If one class
    runs short, all of it is emitted and the other class fills the budget.
    """
    if budget is not None and budget < 1:
        raise ValueError("budget must be >= 1")
    if not 0.0 <= positive_ratio <= 1.0:
        raise ValueError("positive_ratio must be in [0, 1]")
    if len(records) < spec.arity:
        raise EmptyStore(f"store holds {len(records)} records; {spec.relation_id} needs {spec.arity}")
    ids = [r.sample_id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("sample ids in the store must be unique")

    rng = np.random.default_rng(seed)
    combos, exhaustive = _candidates(records, spec, rng)
    positives, negatives = [], []
    for combo in combos:
        group = [records[i] for i in combo]
        if not all(_eligible(spec, r, s) for r, s in zip(group, spec.slots)):
            continue
        (positives if eval_relation(spec, group) else negatives).append(combo)

    n_pos_avail, n_neg_avail = len(positives), len(negatives)
    if budget is None:
        limits = []
        if positive_ratio > 0:
            limits.append(n_pos_avail / positive_ratio)
        if positive_ratio < 1:
            limits.append(n_neg_avail / (1 - positive_ratio))
        budget = int(math.floor(min(limits) + 1e-9))
    want_pos = int(round(budget * positive_ratio))
    want_neg = budget - want_pos
    take_pos = min(want_pos, n_pos_avail)
    take_neg = min(want_neg, n_neg_avail)
    # fill from the other class when one runs short
    take_neg = min(n_neg_avail, take_neg + (want_pos - take_pos))
    take_pos = min(n_pos_avail, take_pos + (want_neg - min(want_neg, n_neg_avail)))

    chosen_pos = rng.choice(n_pos_avail, size=take_pos, replace=False) if take_pos else []
    chosen_neg = rng.choice(n_neg_avail, size=take_neg, replace=False) if take_neg else []
    picked = [(positives[i], True) for i in sorted(chosen_pos)] + [(negatives[i], False) for i in sorted(chosen_neg)]
    order = rng.permutation(len(picked)) if picked else []
    pairs = [RelationPair(tuple(ids[i] for i in picked[j][0]), spec.relation_id, picked[j][1]) for j in order]
    result = PairCollection(pairs, want_pos, want_neg, n_pos_avail, n_neg_avail, exhaustive)
    if any(result.shortfall.values()):
        logger.info("%s: shortfall %s (available %d positive, %d negative)",
                    spec.relation_id, result.shortfall, n_pos_avail, n_neg_avail)
    return result
