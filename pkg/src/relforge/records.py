"""Unified sample records and the line-delimited record store."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

from .errors import SchemaError
from .grounding import InvalidBox, NormBox

SCHEMA_VERSION = "v1"

LabelValue = Union[str, int, bool, frozenset]


@dataclass(frozen=True)
class MediaRef:
    path: str
    frames: Optional[tuple[int, ...]] = None
    width: Optional[int] = None
    height: Optional[int] = None

    def __post_init__(self):
        if self.frames is not None:
            if not self.frames:
                raise ValueError("video reference needs at least one frame")
            if any(b <= a for a, b in zip(self.frames, self.frames[1:])):
                raise ValueError(f"frame indices not strictly increasing: {list(self.frames)}")

    @property
    def is_video(self) -> bool:
        return self.frames is not None


@dataclass(frozen=True)
class LabeledBox:
    label: str
    box: NormBox


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    dataset: str
    media: MediaRef
    labels: dict = field(default_factory=dict)
    boxes: tuple[LabeledBox, ...] = ()
    source: str = ""
    index: int = 0

    def __hash__(self):
        return hash((self.dataset, self.sample_id))


def _label_to_json(v):
    if isinstance(v, (set, frozenset)):
        return sorted(v)
    return v


def _label_from_json(v):
    if isinstance(v, list):
        return frozenset(str(x) for x in v)
    return v


def record_to_dict(rec: SampleRecord) -> dict:
    media = {"path": rec.media.path}
    if rec.media.frames is not None:
        media["frames"] = list(rec.media.frames)
    if rec.media.width is not None:
        media["width"] = rec.media.width
        media["height"] = rec.media.height
    return {
        "schema": SCHEMA_VERSION,
        "sample_id": rec.sample_id,
        "dataset": rec.dataset,
        "media": media,
        "labels": {k: _label_to_json(v) for k, v in rec.labels.items()},
        "boxes": [{"label": b.label, "box": list(b.box.as_tuple())} for b in rec.boxes],
        "provenance": {"source": rec.source, "index": rec.index},
    }


def record_from_dict(d: dict, source="<memory>", line=None) -> SampleRecord:
    try:
        if d.get("schema") != SCHEMA_VERSION:
            raise SchemaError(source, "schema", line=line)
        m = d["media"]
        frames = m.get("frames")
        media = MediaRef(m["path"], tuple(frames) if frames is not None else None,
                         m.get("width"), m.get("height"))
        boxes = tuple(LabeledBox(b["label"], NormBox(*b["box"])) for b in d.get("boxes", []))
        prov = d.get("provenance", {})
        return SampleRecord(
            sample_id=str(d["sample_id"]),
            dataset=d["dataset"],
            media=media,
            labels={k: _label_from_json(v) for k, v in d.get("labels", {}).items()},
            boxes=boxes,
            source=prov.get("source", ""),
            index=prov.get("index", 0),
        )
    except KeyError as exc:
        raise SchemaError(source, exc.args[0], line=line) from None
    except (TypeError, ValueError, InvalidBox) as exc:
        if isinstance(exc, SchemaError):
            raise
        raise SchemaError(source, "record", f"{source}:{line}: {exc}", line=line) from None


def atomic_write_text(path, text: str) -> None:
    """Write ``text`` to ``path`` through a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_line(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def write_records(records: Iterable[SampleRecord], path) -> int:
    lines = [dumps_line(record_to_dict(r)) for r in records]
    atomic_write_text(path, "".join(line + "\n" for line in lines))
    return len(lines)


def read_records(path) -> list[SampleRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(path, "json", f"{path}:{lineno}: {exc.msg}", line=lineno) from None
            out.append(record_from_dict(d, source=path, line=lineno))
    return out
