"""Dataset parsers and the rule-based linguistic encoder.

Three source layouts are supported:

* detection documents with ``images``/``annotations``/``categories`` arrays
  and pixel ``[x, y, w, h]`` boxes,
* delimiter-separated attribute tables (person re-identification style),
* video caption manifests, one JSON object per line.

Malformed rows are skipped and reported in :class:`IngestResult` rather
than aborting the whole file.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from .errors import RelforgeError, SchemaError
from .grounding import DEFAULT_GRID, InvalidBox, NormBox, PatchIndexPair, encode_box, loose_pair
from .records import LabeledBox, MediaRef, SampleRecord

logger = logging.getLogger(__name__)

# tolerated overshoot past the image border, in pixels
_EDGE_SLACK_PX = 0.5

_RESERVED_COLUMNS = ("image", "width", "height")
_TRUE = {"1", "true", "yes"}
_FALSE = {"0", "false", "no"}


class RowError(RelforgeError):
    def __init__(self, line, message):
        self.line = line
        super().__init__(f"line {line}: {message}")


class BoxError(RelforgeError):
    pass


class OrderError(RelforgeError):
    pass


class EmptyEncoding(RelforgeError):
    pass


@dataclass(frozen=True)
class Skip:
    index: int
    error: Exception


@dataclass
class IngestResult:
    records: list[SampleRecord]
    skipped: list[Skip] = field(default_factory=list)

    @property
    def total(self) -> int:
        return len(self.records) + len(self.skipped)


def pixel_box(x1, y1, x2, y2, width, height) -> NormBox:
    """Normalize a pixel-corner box, clipping sub-pixel overshoot at the border."""
    if width <= 0 or height <= 0:
        raise BoxError(f"invalid image size {width}x{height}")

    def clip(v, hi):
        if -_EDGE_SLACK_PX <= v < 0:
            return 0.0
        if hi < v <= hi + _EDGE_SLACK_PX:
            return float(hi)
        return float(v)

    try:
        return NormBox(clip(x1, width) / width, clip(y1, height) / height,
                       clip(x2, width) / width, clip(y2, height) / height)
    except InvalidBox as exc:
        raise BoxError(str(exc)) from None


def _require(d: dict, key: str, source, what="document"):
    if not isinstance(d, dict) or key not in d:
        raise SchemaError(source, key, f"{source}: {what} missing required key {key!r}")
    return d[key]


def parse_detection_annotations(path, dataset: Optional[str] = None) -> IngestResult:
    """One record per image, boxes normalized and categories resolved to names."""
    path = Path(path)
    dataset = dataset or path.stem
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    images = _require(doc, "images", path)
    annotations = _require(doc, "annotations", path)
    categories = {c["id"]: c["name"] for c in _require(doc, "categories", path)}

    by_image: dict = {}
    for img in images:
        by_image[_require(img, "id", path, "image")] = []
    for ann in annotations:
        image_id = _require(ann, "image_id", path, "annotation")
        if image_id not in by_image:
            raise SchemaError(path, "image_id", f"{path}: annotation references unknown image {image_id!r}")
        cat = _require(ann, "category_id", path, "annotation")
        if cat not in categories:
            raise SchemaError(path, "category_id", f"{path}: unknown category id {cat!r}")
        by_image[image_id].append(ann)

    result = IngestResult([])
    for idx, img in enumerate(images):
        w = _require(img, "width", path, "image")
        h = _require(img, "height", path, "image")
        fname = _require(img, "file_name", path, "image")
        try:
            boxes = []
            for ann in by_image[img["id"]]:
                x, y, bw, bh = ann["bbox"]
                boxes.append(LabeledBox(categories[ann["category_id"]], pixel_box(x, y, x + bw, y + bh, w, h)))
        except BoxError as exc:
            logger.warning("%s: skipping image %s: %s", path, img["id"], exc)
            result.skipped.append(Skip(idx, exc))
            continue
        names = frozenset(b.label for b in boxes)
        result.records.append(SampleRecord(
            sample_id=str(img["id"]), dataset=dataset,
            media=MediaRef(fname, width=w, height=h),
            labels={"categories": names}, boxes=tuple(boxes),
            source=str(path), index=idx,
        ))
    return result


def _attribute_value(raw: str):
    low = raw.strip().lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    return raw.strip()


def parse_attribute_table(path, delimiter: str = ",", dataset: Optional[str] = None) -> IngestResult:
    """Parse a per-person attribute table.

    The header must start with ``sample_id, person_id``.  Optional reserved
    columns are ``image``, ``width`` and ``height``; a column named
    ``<attr>_box`` holds pixel corners ``x1;y1;x2;y2`` for attribute ``attr``.
    Binary columns (0/1) become booleans, anything else a string.
    """
    path = Path(path)
    dataset = dataset or path.stem
    result = IngestResult([])
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter, skipinitialspace=True)
        header = next(reader, None)
        if not header or [h.strip() for h in header[:2]] != ["sample_id", "person_id"]:
            raise SchemaError(path, "header", f"{path}: header must begin with sample_id, person_id")
        header = [h.strip() for h in header]
        row_index = -1
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            row_index += 1
            line = reader.line_num
            try:
                result.records.append(_attribute_row(row, header, path, dataset, row_index, line))
            except (RowError, BoxError) as exc:
                logger.warning("%s: skipping line %d: %s", path, line, exc)
                result.skipped.append(Skip(row_index, exc))
    return result


def _attribute_row(row, header, path, dataset, row_index, line) -> SampleRecord:
    if len(row) != len(header):
        raise RowError(line, f"expected {len(header)} fields, got {len(row)}")
    cells = dict(zip(header, (c.strip() for c in row)))
    try:
        person_id = int(cells["person_id"])
    except ValueError:
        raise RowError(line, f"person_id {cells['person_id']!r} is not an integer") from None
    labels = {"person_id": person_id}
    box_cells = {}
    for name, value in cells.items():
        if name in ("sample_id", "person_id") or name in _RESERVED_COLUMNS or value == "":
            continue
        if name.endswith("_box"):
            box_cells[name[:-4]] = value
        else:
            labels[name] = _attribute_value(value)
    boxes = []
    if box_cells:
        try:
            width, height = int(cells["width"]), int(cells["height"])
        except (KeyError, ValueError):
            raise RowError(line, "box columns need integer width and height columns") from None
        for label, value in box_cells.items():
            try:
                coords = [float(v) for v in value.split(";")]
            except ValueError:
                raise RowError(line, f"bad box {value!r}") from None
            if len(coords) != 4:
                raise RowError(line, f"box {value!r} needs 4 values")
            boxes.append(LabeledBox(label, pixel_box(*coords, width, height)))
    width = int(cells["width"]) if cells.get("width") else None
    height = int(cells["height"]) if cells.get("height") else None
    return SampleRecord(
        sample_id=cells["sample_id"], dataset=dataset,
        media=MediaRef(cells.get("image") or cells["sample_id"], width=width, height=height),
        labels=labels, boxes=tuple(boxes), source=str(path), index=row_index,
    )


def parse_video_captions(path, dataset: Optional[str] = None) -> IngestResult:
    """Parse a manifest of ``{"id"?, "video", "frames", "caption"}`` lines."""
    path = Path(path)
    dataset = dataset or path.stem
    result = IngestResult([])
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip()]
    for idx, line in enumerate(lines):
        try:
            entry = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(path, "json", f"{path}: entry {idx}: {exc.msg}", line=idx + 1) from None
        video = _require(entry, "video", path, "entry")
        frames = _require(entry, "frames", path, "entry")
        caption = _require(entry, "caption", path, "entry")
        if not isinstance(frames, list) or not all(isinstance(f, int) for f in frames) or not frames:
            raise SchemaError(path, "frames", f"{path}: entry {idx}: frames must be a non-empty int list")
        if any(b <= a for a, b in zip(frames, frames[1:])):
            err = OrderError(f"entry {idx}: frame ids not strictly increasing: {frames}")
            logger.warning("%s: skipping %s", path, err)
            result.skipped.append(Skip(idx, err))
            continue
        result.records.append(SampleRecord(
            sample_id=str(entry.get("id", idx)), dataset=dataset,
            media=MediaRef(video, tuple(frames)),
            labels={"caption": str(caption)}, source=str(path), index=idx,
        ))
    return result


# ---------------------------------------------------------------------------
# Linguistic encoding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EncodingRule:
    field: str
    template: str = "{}"
    values: Optional[dict] = None
    join: str = ", "
    noun: Optional[str] = None
    verb: str = "has"
    # how a difference in this field is named, e.g. "the color of their shoes"
    aspect: Optional[str] = None

    def __post_init__(self):
        if self.template.count("{}") != 1:
            raise ValueError(f"rule for {self.field!r}: template must have exactly one '{{}}' slot")

    def render(self, value) -> Optional[str]:
        if isinstance(value, bool):
            key = "true" if value else "false"
            if self.values is None:
                text = self.field.replace("_", " ") if value else None
            else:
                text = self.values.get(key)
        elif isinstance(value, (set, frozenset)):
            if not value:
                return None
            text = self.join.join(sorted(str(v) for v in value))
        else:
            text = str(value)
            if self.values is not None:
                text = self.values.get(text, text)
        if text is None or text == "":
            return None
        return self.template.replace("{}", text)


@dataclass(frozen=True)
class EncodingRuleset:
    name: str
    rules: tuple[EncodingRule, ...]
    subject: Optional[str] = None
    fields: Optional[tuple[str, ...]] = None
    box_template: str = "{label} bbox on {tokens}"
    include_boxes: bool = True

    def __post_init__(self):
        if self.fields is not None:
            unknown = [r.field for r in self.rules if r.field not in self.fields]
            if unknown:
                raise ValueError(f"ruleset {self.name!r}: rules reference undeclared fields {unknown}")

    def rule_for(self, name: str) -> Optional[EncodingRule]:
        for r in self.rules:
            if r.field == name:
                return r
        return None

    @classmethod
    def from_dict(cls, d: dict) -> "EncodingRuleset":
        rules = tuple(EncodingRule(**r) for r in d["rules"])
        fields = tuple(d["fields"]) if "fields" in d else None
        return cls(name=d.get("name", "ruleset"), rules=rules, subject=d.get("subject"),
                   fields=fields, box_template=d.get("box_template", "{label} bbox on {tokens}"),
                   include_boxes=d.get("include_boxes", True))


def load_ruleset(name_or_path) -> EncodingRuleset:
    """Load a ruleset from a JSON file, or a bundled one by name (``reid``, ``coco``)."""
    p = Path(name_or_path)
    if p.suffix == ".json" and p.exists():
        text = p.read_text(encoding="utf-8")
    else:
        text = resources.files("relforge.data.rulesets").joinpath(f"{name_or_path}.json").read_text(encoding="utf-8")
    return EncodingRuleset.from_dict(json.loads(text))


@dataclass(frozen=True)
class EncodedAttribute:
    field: str
    value: object
    phrase: str
    aspect: str = ""
    verb: str = "has"
    noun: Optional[str] = None


@dataclass(frozen=True)
class EncodedBox:
    label: str
    pair: PatchIndexPair
    noun: str
    verb: str


@dataclass(frozen=True)
class LinguisticEncoding:
    text: str
    source_id: str
    subject: Optional[str] = None
    attributes: tuple[EncodedAttribute, ...] = ()
    boxes: tuple[EncodedBox, ...] = ()

    def attribute(self, name: str) -> Optional[EncodedAttribute]:
        for a in self.attributes:
            if a.field == name:
                return a
        return None


def encode_linguistic(record: SampleRecord, rules: EncodingRuleset, grid: int = DEFAULT_GRID) -> LinguisticEncoding:
    """Render a record as a comma-separated attribute sentence with box tokens."""
    attrs = []
    for rule in rules.rules:
        if rule.field not in record.labels:
            continue
        phrase = rule.render(record.labels[rule.field])
        if phrase is not None:
            aspect = rule.aspect or rule.field.replace("_", " ")
            attrs.append(EncodedAttribute(rule.field, record.labels[rule.field], phrase,
                                          aspect, rule.verb, rule.noun))
    if not attrs:
        raise EmptyEncoding(f"no rule in {rules.name!r} matches labels of {record.sample_id!r}")

    boxes = []
    box_phrases = []
    if rules.include_boxes:
        for lb in record.boxes:
            pair = encode_box(lb.box, grid)
            rule = rules.rule_for(lb.label)
            noun = (rule.noun if rule and rule.noun else f"the {lb.label.replace('_', ' ')}")
            verb = rule.verb if rule else "has"
            boxes.append(EncodedBox(lb.label, pair, noun, verb))
            box_phrases.append(rules.box_template.format(label=lb.label, tokens=loose_pair(pair)))

    parts = ([rules.subject] if rules.subject else []) + [a.phrase for a in attrs] + box_phrases
    return LinguisticEncoding(
        text=", ".join(parts) + ".",
        source_id=record.sample_id,
        subject=rules.subject,
        attributes=tuple(attrs),
        boxes=tuple(boxes),
    )
