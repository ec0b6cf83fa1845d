"""Location tokens: box quantization and the grounded-text grammar.

A box is encoded as two patch-index tokens naming the grid cells that hold
its top-left and bottom-right corners.  Grounded text wraps a phrase and
one or more per-image location blocks::

    <phrase> a backpack </phrase><img1><patch_index_256><patch_index_489></img1>

Parsing is total: malformed runs come back as plain text together with a
list of :class:`DecodeFailure` records.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Optional, Union

from .errors import RelforgeError

DEFAULT_GRID = 32

PHRASE_OPEN = "<phrase>"
PHRASE_CLOSE = "</phrase>"
GROUNDING = "<grounding>"
IMAGE_PLACEHOLDER = "<ImageHere>"


class InvalidBox(RelforgeError, ValueError):
    pass


class InvalidPair(RelforgeError, ValueError):
    pass


@dataclass(frozen=True)
class NormBox:
    """Axis-aligned box in normalized image coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidBox(f"non-finite coordinate in {vals}")
        if not (0.0 <= self.x1 < self.x2 <= 1.0 and 0.0 <= self.y1 < self.y2 <= 1.0):
            raise InvalidBox(f"box {vals} violates 0<=x1<x2<=1, 0<=y1<y2<=1")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


class PatchIndexPair(NamedTuple):
    tl_bin: int
    br_bin: int


def _check_grid(grid: int) -> None:
    if int(grid) != grid or grid < 2:
        raise ValueError(f"grid must be an integer >= 2, got {grid!r}")


def _snap(v: float) -> float:
    # absorb float noise so that k/G * G lands exactly on k
    r = round(v)
    return float(r) if abs(v - r) < 1e-9 else v


def encode_box(box: NormBox, grid: int = DEFAULT_GRID) -> PatchIndexPair:
    """Quantize ``box`` to the cells holding its top-left and bottom-right corners.

    The bottom-right corner belongs to the cell it closes, so an edge lying
    exactly on a cell boundary (including 1.0) selects the cell to its
    upper-left.
    """
    _check_grid(grid)
    if not isinstance(box, NormBox):
        box = NormBox(*box)
    g = grid

    def lo(v):
        return min(max(int(math.floor(_snap(min(max(v, 0.0), 1.0) * g))), 0), g - 1)

    def hi(v):
        return min(max(int(math.ceil(_snap(min(max(v, 0.0), 1.0) * g))) - 1, 0), g - 1)

    r1, c1 = lo(box.y1), lo(box.x1)
    # a box thinner than the snap tolerance can round its far edge below its near one
    r2, c2 = max(hi(box.y2), r1), max(hi(box.x2), c1)
    return PatchIndexPair(r1 * g + c1, r2 * g + c2)


def check_pair(pair, grid: int = DEFAULT_GRID) -> PatchIndexPair:
    """Validate a bin pair, raising :class:`InvalidPair` on range or ordering errors."""
    _check_grid(grid)
    tl, br = int(pair[0]), int(pair[1])
    n = grid * grid
    if not (0 <= tl < n and 0 <= br < n):
        raise InvalidPair(f"bins ({tl}, {br}) out of range [0, {n - 1}]")
    if tl // grid > br // grid or tl % grid > br % grid:
        raise InvalidPair(f"bins ({tl}, {br}) are not ordered top-left / bottom-right")
    return PatchIndexPair(tl, br)


def decode_pair(pair, grid: int = DEFAULT_GRID) -> NormBox:
    """Return the box spanned by the outer corners of the two cells."""
    tl, br = check_pair(pair, grid)
    g = grid
    return NormBox((tl % g) / g, (tl // g) / g, (br % g + 1) / g, (br // g + 1) / g)


# ---------------------------------------------------------------------------
# Token stream
# ---------------------------------------------------------------------------


def patch_token(index: int) -> str:
    return f"<patch_index_{index}>"


def image_open(index: int) -> str:
    return f"<img{index}>"


def image_close(index: int) -> str:
    return f"</img{index}>"


@dataclass(frozen=True)
class PlainText:
    text: str


@dataclass(frozen=True)
class ImageBlock:
    """Location boxes attached to one image.

    ``image_index`` is None for loose patch pairs written outside an image
    block, as in linguistic encodings (``bbox on <patch_index_a> <patch_index_b>``).
    """

    image_index: Optional[int]
    boxes: tuple[PatchIndexPair, ...]
    raw: Optional[str] = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class GroundedSpan:
    phrase_text: str
    blocks: tuple[ImageBlock, ...]
    raw: Optional[str] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not self.phrase_text.strip():
            raise ValueError("grounded phrase must be non-empty")
        if not self.blocks:
            raise ValueError("grounded phrase needs at least one image block")
        if any(b.image_index is None for b in self.blocks):
            raise ValueError("blocks attached to a phrase need an image index")

    @property
    def image_index(self) -> int:
        return self.blocks[0].image_index

    @property
    def boxes(self) -> tuple[PatchIndexPair, ...]:
        return tuple(p for b in self.blocks for p in b.boxes)


Segment = Union[PlainText, GroundedSpan, ImageBlock]


@dataclass(frozen=True)
class TokenStream:
    segments: tuple[Segment, ...] = ()

    @property
    def spans(self) -> list[GroundedSpan]:
        return [s for s in self.segments if isinstance(s, GroundedSpan)]

    def located_boxes(self) -> Iterator[tuple[Optional[int], PatchIndexPair]]:
        """Yield ``(image_index, pair)`` for every box in the stream."""
        for seg in self.segments:
            blocks = seg.blocks if isinstance(seg, GroundedSpan) else (
                (seg,) if isinstance(seg, ImageBlock) else ())
            for block in blocks:
                for pair in block.boxes:
                    yield block.image_index, pair

    def source_text(self) -> str:
        """Concatenate the raw source of every segment."""
        out = []
        for seg in self.segments:
            if isinstance(seg, PlainText):
                out.append(seg.text)
            else:
                out.append(seg.raw if seg.raw is not None else render_segment(seg))
        return "".join(out)


class FailureKind(str, enum.Enum):
    TRUNCATED_TAG = "TruncatedTag"
    ORDERING_VIOLATION = "OrderingViolation"
    OUT_OF_RANGE = "OutOfRange"
    DANGLING_PHRASE = "DanglingPhrase"
    EMPTY_PHRASE = "EmptyPhrase"
    UNCLOSED_IMAGE = "UnclosedImage"
    MISMATCHED_IMAGE = "MismatchedImage"
    UNPAIRED_PATCH = "UnpairedPatch"
    UNMATCHED_CLOSE = "UnmatchedClose"


@dataclass(frozen=True)
class DecodeFailure:
    position: int
    kind: FailureKind
    detail: str = ""


_TOKEN_RE = re.compile(r"<(/?)phrase>|<(/?)img(\d+)>|<patch_index_(\d+)>")
_TRUNCATED_RE = re.compile(r"</?(?:phrase|img\d*|patch_index_\d*)(?![\w>])")
_TAIL_RE = re.compile(r"</?([a-z_]*\d*)$")


class _Tok(NamedTuple):
    kind: str
    start: int
    end: int
    value: int = -1


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    for m in _TOKEN_RE.finditer(text):
        if m.group(1) is not None and m.group(0).endswith("phrase>"):
            kind = "phrase_close" if m.group(1) else "phrase_open"
            toks.append(_Tok(kind, m.start(), m.end()))
        elif m.group(3) is not None:
            kind = "img_close" if m.group(2) else "img_open"
            toks.append(_Tok(kind, m.start(), m.end(), int(m.group(3))))
        else:
            toks.append(_Tok("patch", m.start(), m.end(), int(m.group(4))))
    for m in _TRUNCATED_RE.finditer(text):
        toks.append(_Tok("truncated", m.start(), m.end()))
    tail = _TAIL_RE.search(text)
    if tail and not any(t.start == tail.start() for t in toks):
        name = tail.group(1)
        if len(name) >= 2 and any(full.startswith(name) for full in ("phrase", "img", "patch_index_")):
            toks.append(_Tok("truncated", tail.start(), len(text)))
    toks.sort(key=lambda t: t.start)
    return toks


class _Parser:
    def __init__(self, text: str, grid: int):
        self.text = text
        self.grid = grid
        self.toks = _tokenize(text)

    def gap_ok(self, pos: int, k: int) -> bool:
        """True when only whitespace separates ``pos`` from token ``k``."""
        if k >= len(self.toks):
            return False
        between = self.text[pos:self.toks[k].start]
        return between == "" or between.isspace()

    def check_pairs(self, patches: list[_Tok]) -> tuple[list[PatchIndexPair], list[DecodeFailure]]:
        failures = []
        if len(patches) % 2:
            failures.append(DecodeFailure(patches[-1].start, FailureKind.UNPAIRED_PATCH,
                                          f"{len(patches)} patch tokens"))
        pairs = []
        n = self.grid * self.grid
        for a, b in zip(patches[0::2], patches[1::2]):
            if not (a.value < n and b.value < n):
                failures.append(DecodeFailure(a.start, FailureKind.OUT_OF_RANGE,
                                              f"({a.value}, {b.value}) with grid {self.grid}"))
                continue
            try:
                pairs.append(check_pair((a.value, b.value), self.grid))
            except InvalidPair as exc:
                failures.append(DecodeFailure(a.start, FailureKind.ORDERING_VIOLATION, str(exc)))
        return pairs, failures

    def collect_patches(self, k: int, pos: int) -> tuple[list[_Tok], int, int]:
        patches = []
        while k < len(self.toks) and self.toks[k].kind == "patch" and self.gap_ok(pos, k):
            patches.append(self.toks[k])
            pos = self.toks[k].end
            k += 1
        return patches, k, pos

    def block(self, j: int):
        """Parse an image block opening at token ``j``.

        Returns ``(block, next_token, end_pos, failures)``; ``block`` is None
        with no failures when the block holds no patch tokens (an image
        declaration, not a location).
        """
        t = self.toks[j]
        patches, k, pos = self.collect_patches(j + 1, t.end)
        if not patches:
            if self.gap_ok(t.end, k) and self.toks[k].kind == "truncated":
                fail = DecodeFailure(self.toks[k].start, FailureKind.TRUNCATED_TAG)
                return None, k + 1, self.toks[k].end, [fail]
            return None, j + 1, t.end, []
        if self.gap_ok(pos, k) and self.toks[k].kind == "img_close":
            close = self.toks[k]
            if close.value != t.value:
                fail = DecodeFailure(close.start, FailureKind.MISMATCHED_IMAGE,
                                     f"<img{t.value}> closed by </img{close.value}>")
                return None, k + 1, close.end, [fail]
            pairs, failures = self.check_pairs(patches)
            if failures:
                return None, k + 1, close.end, failures
            raw = self.text[t.start:close.end]
            return ImageBlock(t.value, tuple(pairs), raw), k + 1, close.end, []
        if self.gap_ok(pos, k) and self.toks[k].kind == "truncated":
            return None, k + 1, self.toks[k].end, [
                DecodeFailure(self.toks[k].start, FailureKind.TRUNCATED_TAG)]
        return None, k, pos, [DecodeFailure(pos, FailureKind.UNCLOSED_IMAGE,
                                            f"<img{t.value}> never closed")]

    def span(self, i: int):
        t = self.toks[i]
        toks = self.toks
        if i + 1 >= len(toks) or toks[i + 1].kind != "phrase_close":
            if i + 1 < len(toks) and toks[i + 1].kind == "truncated":
                return None, i + 2, [DecodeFailure(toks[i + 1].start, FailureKind.TRUNCATED_TAG)]
            return None, i + 1, [DecodeFailure(t.start, FailureKind.DANGLING_PHRASE, "unclosed <phrase>")]
        close = toks[i + 1]
        phrase = self.text[t.end:close.start].strip()
        if not phrase:
            return None, i + 2, [DecodeFailure(t.start, FailureKind.EMPTY_PHRASE)]
        blocks = []
        j, pos = i + 2, close.end
        while j < len(toks) and toks[j].kind == "img_open" and self.gap_ok(pos, j):
            blk, nj, end, failures = self.block(j)
            if failures:
                return None, nj, failures
            if blk is None:
                break
            blocks.append(blk)
            j, pos = nj, end
        if not blocks:
            return None, i + 2, [DecodeFailure(t.start, FailureKind.DANGLING_PHRASE,
                                               f"phrase {phrase!r} has no location")]
        raw = self.text[t.start:pos]
        return GroundedSpan(phrase, tuple(blocks), raw), j, []

    def run(self) -> tuple[TokenStream, list[DecodeFailure]]:
        segments: list[Segment] = []
        failures: list[DecodeFailure] = []
        plain_start = 0
        toks = self.toks
        i = 0

        def emit(seg, start, end):
            nonlocal plain_start
            if start > plain_start:
                segments.append(PlainText(self.text[plain_start:start]))
            segments.append(seg)
            plain_start = end

        while i < len(toks):
            t = toks[i]
            if t.kind == "phrase_open":
                seg, nxt, fails = self.span(i)
                if seg is not None:
                    emit(seg, t.start, t.start + len(seg.raw))
                failures.extend(fails)
                i = nxt
            elif t.kind == "img_open":
                blk, nxt, end, fails = self.block(i)
                if blk is not None:
                    emit(blk, t.start, end)
                failures.extend(fails)
                i = nxt
            elif t.kind == "patch":
                patches, nxt, end = self.collect_patches(i, t.start)
                pairs, fails = self.check_pairs(patches)
                if fails:
                    failures.extend(fails)
                else:
                    emit(ImageBlock(None, tuple(pairs), self.text[t.start:end]), t.start, end)
                i = nxt
            elif t.kind == "truncated":
                failures.append(DecodeFailure(t.start, FailureKind.TRUNCATED_TAG,
                                              self.text[t.start:t.end]))
                i += 1
            elif t.kind == "phrase_close":
                failures.append(DecodeFailure(t.start, FailureKind.UNMATCHED_CLOSE, "stray </phrase>"))
                i += 1
            else:
                i += 1
        if plain_start < len(self.text):
            segments.append(PlainText(self.text[plain_start:]))
        return TokenStream(tuple(segments)), failures


def parse_grounded(text: str, grid: int = DEFAULT_GRID) -> tuple[TokenStream, list[DecodeFailure]]:
    """Split ``text`` into plain and grounded segments.

    Never raises on malformed input; failed runs stay as plain text and are
    reported in the returned failure list.
    """
    _check_grid(grid)
    return _Parser(text, grid).run()


def render_block(block: ImageBlock) -> str:
    if block.image_index is None:
        return " ".join(f"{patch_token(a)} {patch_token(b)}" for a, b in block.boxes)
    inner = "".join(patch_token(a) + patch_token(b) for a, b in block.boxes)
    return image_open(block.image_index) + inner + image_close(block.image_index)


def render_segment(seg: Segment) -> str:
    if isinstance(seg, PlainText):
        return seg.text
    if isinstance(seg, ImageBlock):
        return render_block(seg)
    return f"{PHRASE_OPEN} {seg.phrase_text} {PHRASE_CLOSE}" + "".join(render_block(b) for b in seg.blocks)


def render_grounded(stream: TokenStream) -> str:
    """Serialize a stream with canonical token spellings."""
    return "".join(render_segment(s) for s in stream.segments)


def ground(phrase: str, *blocks: tuple[int, PatchIndexPair]) -> str:
    """Render ``phrase`` grounded to one box per ``(image_index, pair)``.

    Boxes on the same image are grouped into one block, in first-seen order.
    """
    grouped: dict[int, list[PatchIndexPair]] = {}
    for idx, pair in blocks:
        grouped.setdefault(idx, []).append(PatchIndexPair(*pair))
    span = GroundedSpan(phrase.strip(), tuple(ImageBlock(i, tuple(p)) for i, p in grouped.items()))
    return render_segment(span)


def loose_pair(pair: PatchIndexPair) -> str:
    return render_block(ImageBlock(None, (PatchIndexPair(*pair),)))


_SPECIAL_RE = re.compile(r"</?(?:phrase|img\d+|patch_index_\d+|grounding|ImageHere)>")


def strip_special_tokens(text: str) -> str:
    return _SPECIAL_RE.sub(" ", text)
