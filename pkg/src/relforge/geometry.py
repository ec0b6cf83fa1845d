"""Synthesized geometric-transform pairs.

An object is cut out with its mask, one transform is applied to it, and it
is pasted back over a background whose hole was filled by replicating the
nearest unmasked pixels.  The box math in :func:`transform_box` is the
ground truth; :func:`apply_transform` renders pixels consistent with it.
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import RelforgeError
from .grounding import DEFAULT_GRID, NormBox, encode_box, ground, render_block, ImageBlock

KINDS = ("hflip", "vflip", "brightness", "rotate", "scale", "translate")

# fraction of the unclipped box area that must survive clamping to the frame
MIN_KEPT_AREA = 0.8


class OutOfFrame(RelforgeError):
    pass


class EmptyMask(RelforgeError):
    pass


@dataclass(frozen=True)
class TransformConfig:
    rotate_range: tuple[float, float] = (10.0, 45.0)
    right_angles: tuple[float, ...] = (90.0, 180.0, 270.0)
    right_angle_prob: float = 0.25
    scale_ranges: tuple[tuple[float, float], ...] = ((0.5, 0.8), (1.25, 2.0))
    translate_range: tuple[float, float] = (0.15, 0.4)
    brightness_ranges: tuple[tuple[float, float], ...] = ((0.4, 0.7), (1.3, 1.8))
    max_retries: int = 8

    def __post_init__(self):
        lo, hi = self.rotate_range
        if not 0 < lo <= hi < 90:
            raise ValueError(f"rotate_range {self.rotate_range} must satisfy 0 < lo <= hi < 90")
        if not 0 <= self.right_angle_prob <= 1:
            raise ValueError("right_angle_prob must be in [0, 1]")
        for name in ("scale_ranges", "brightness_ranges"):
            for a, b in getattr(self, name):
                if not 0 < a <= b:
                    raise ValueError(f"{name}: bad interval ({a}, {b})")
        lo, hi = self.translate_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"translate_range {self.translate_range} invalid")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    params: dict
    pre_box: NormBox
    post_box: NormBox


@dataclass(frozen=True)
class SynthPair:
    base_image: str
    synthesized_image: str
    object_label: str
    spec: TransformSpec
    description: str
    attempts: int = 1


def _exact_trig(angle_deg: float) -> tuple[float, float]:
    q = angle_deg % 360.0
    table = {0.0: (1.0, 0.0), 90.0: (0.0, 1.0), 180.0: (-1.0, 0.0), 270.0: (0.0, -1.0)}
    if q in table:
        return table[q]
    r = math.radians(angle_deg)
    return math.cos(r), math.sin(r)


def _raw_transform(box: NormBox, kind: str, params: dict, aspect: float) -> tuple[float, float, float, float]:
    x1, y1, x2, y2 = box.as_tuple()
    if kind == "hflip":
        return 1.0 - x2, y1, 1.0 - x1, y2
    if kind == "vflip":
        return x1, 1.0 - y2, x2, 1.0 - y1
    if kind == "translate":
        dx, dy = params["dx"], params["dy"]
        return x1 + dx, y1 + dy, x2 + dx, y2 + dy
    cx, cy = box.center
    if kind == "scale":
        f = params["factor"]
        hw, hh = box.width / 2 * f, box.height / 2 * f
        return cx - hw, cy - hh, cx + hw, cy + hh
    if kind == "rotate":
        c, s = _exact_trig(params["angle_deg"])
        xs, ys = [], []
        for x, y in ((x1, y1), (x2, y1), (x1, y2), (x2, y2)):
            # rotate in pixel-proportional units so non-square frames stay rigid
            u, v = (x - cx) * aspect, y - cy
            xs.append(cx + (u * c + v * s) / aspect)
            ys.append(cy + (-u * s + v * c))
        return min(xs), min(ys), max(xs), max(ys)
    raise ValueError(f"unknown transform kind {kind!r}")


def transform_box(box: NormBox, kind: str, params: Optional[dict] = None, aspect: float = 1.0) -> NormBox:
    """Box after applying one named transform.

    ``aspect`` is the image width/height ratio, used only by ``rotate``.
    Raises :class:`OutOfFrame` when clamping to the frame would drop more
    than 20% of the box area.
    """
    params = params or {}
    if kind == "brightness":
        return box
    rx1, ry1, rx2, ry2 = _raw_transform(box, kind, params, aspect)
    raw_area = (rx2 - rx1) * (ry2 - ry1)
    cx1, cy1 = min(max(rx1, 0.0), 1.0), min(max(ry1, 0.0), 1.0)
    cx2, cy2 = min(max(rx2, 0.0), 1.0), min(max(ry2, 0.0), 1.0)
    kept = max(cx2 - cx1, 0.0) * max(cy2 - cy1, 0.0)
    if raw_area <= 0 or kept < MIN_KEPT_AREA * raw_area or cx2 <= cx1 or cy2 <= cy1:
        raise OutOfFrame(f"{kind} {params} moves {box.as_tuple()} out of frame")
    return NormBox(cx1, cy1, cx2, cy2)


def _uniform_union(rng, intervals) -> float:
    lengths = [b - a for a, b in intervals]
    u = rng.uniform(0.0, sum(lengths))
    for (a, b), length in zip(intervals, lengths):
        if u <= length:
            return a + u
        u -= length
    return intervals[-1][1]


def sample_transform(seed, config: TransformConfig = TransformConfig()) -> tuple[str, dict]:
    """Draw one transform kind uniformly, with parameters uniform in the configured ranges."""
    rng = np.random.default_rng(seed)
    kind = KINDS[int(rng.integers(len(KINDS)))]
    if kind == "rotate":
        if config.right_angles and rng.uniform() < config.right_angle_prob:
            angle = float(config.right_angles[int(rng.integers(len(config.right_angles)))])
        else:
            angle = float(rng.uniform(*config.rotate_range)) * (1.0 if rng.uniform() < 0.5 else -1.0)
        return kind, {"angle_deg": angle}
    if kind == "scale":
        return kind, {"factor": float(_uniform_union(rng, config.scale_ranges))}
    if kind == "brightness":
        return kind, {"factor": float(_uniform_union(rng, config.brightness_ranges))}
    if kind == "translate":
        m = float(rng.uniform(*config.translate_range))
        other = float(rng.uniform(-m, m))
        major = m if rng.uniform() < 0.5 else -m
        if rng.uniform() < 0.5:
            return kind, {"dx": major, "dy": other}
        return kind, {"dx": other, "dy": major}
    return kind, {}


def params_in_range(kind: str, params: dict, config: TransformConfig = TransformConfig()) -> bool:
    if kind in ("hflip", "vflip"):
        return True
    if kind == "rotate":
        a = params["angle_deg"]
        lo, hi = config.rotate_range
        return a in config.right_angles or lo <= abs(a) <= hi
    if kind in ("scale", "brightness"):
        ranges = config.scale_ranges if kind == "scale" else config.brightness_ranges
        return any(a <= params["factor"] <= b for a, b in ranges)
    if kind == "translate":
        lo, hi = config.translate_range
        return lo <= max(abs(params["dx"]), abs(params["dy"])) <= hi
    return False


# ---------------------------------------------------------------------------
# Rasters
# ---------------------------------------------------------------------------


def mask_box(mask: np.ndarray) -> NormBox:
    """Tight normalized box around the nonzero pixels of ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMask("mask has no foreground pixels")
    h, w = mask.shape
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return NormBox(float(cols[0] / w), float(rows[0] / h), float((cols[-1] + 1) / w), float((rows[-1] + 1) / h))


def _inverse_map(kind, params, box: NormBox, w: int, h: int, xs: np.ndarray, ys: np.ndarray):
    """Map output pixel-centre coordinates back to source coordinates (pixels)."""
    if kind == "hflip":
        return w - xs, ys
    if kind == "vflip":
        return xs, h - ys
    if kind == "translate":
        return xs - params["dx"] * w, ys - params["dy"] * h
    cx, cy = box.center[0] * w, box.center[1] * h
    if kind == "scale":
        f = params["factor"]
        return cx + (xs - cx) / f, cy + (ys - cy) / f
    if kind == "rotate":
        c, s = _exact_trig(params["angle_deg"])
        u, v = xs - cx, ys - cy
        # transpose of the forward rotation
        return cx + u * c - v * s, cy + u * s + v * c
    raise ValueError(f"unknown transform kind {kind!r}")


def fill_from_border(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Replace masked pixels with the value of the nearest unmasked pixel."""
    if mask.all():
        return np.zeros_like(image)
    _, (ri, ci) = ndimage.distance_transform_edt(mask, return_indices=True)
    return image[ri, ci]


class TransformResult(NamedTuple):
    image: np.ndarray
    box: NormBox
    mask: np.ndarray


def apply_transform(image: np.ndarray, mask: np.ndarray, kind, params: Optional[dict] = None) -> TransformResult:
    """Move the masked object by one transform; returns the new raster, its box and mask.

    ``kind`` may be a transform name (with ``params``) or a :class:`TransformSpec`.
    """
    if isinstance(kind, TransformSpec):
        kind, params = kind.kind, kind.params
    params = params or {}
    image = np.asarray(image)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != image.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {image.shape[:2]}")
    h, w = mask.shape
    src_box = mask_box(mask)

    if kind == "brightness":
        out = image.copy()
        vals = np.rint(image[mask].astype(np.float64) * params["factor"])
        out[mask] = np.clip(vals, 0, 255).astype(image.dtype)
        return TransformResult(out, src_box, mask.copy())

    post = transform_box(src_box, kind, params, aspect=w / h)
    ys, xs = np.mgrid[0:h, 0:w]
    sx, sy = _inverse_map(kind, params, src_box, w, h, xs + 0.5, ys + 0.5)
    sc = np.floor(sx + 1e-9).astype(np.int64)
    sr = np.floor(sy + 1e-9).astype(np.int64)
    inside = (sc >= 0) & (sc < w) & (sr >= 0) & (sr < h)
    new_mask = np.zeros_like(mask)
    new_mask[inside] = mask[sr[inside], sc[inside]]

    out = fill_from_border(image, mask)
    out[new_mask] = image[sr[new_mask], sc[new_mask]]
    return TransformResult(out, post, new_mask)


def box_containment(box: NormBox, mask: np.ndarray) -> float:
    """Fraction of foreground pixels whose centres lie inside ``box``."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return 1.0
    cx = (cols + 0.5) / w
    cy = (rows + 0.5) / h
    eps = 1e-12
    inside = (cx >= box.x1 - eps) & (cx <= box.x2 + eps) & (cy >= box.y1 - eps) & (cy <= box.y2 + eps)
    return float(inside.mean())


def load_raster(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im).copy()


def load_mask(path) -> np.ndarray:
    arr = load_raster(path)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr > 0


def save_raster(array: np.ndarray, path) -> None:
    """Write a PNG through a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.stem}.", suffix=".png")
    os.close(fd)
    try:
        Image.fromarray(np.asarray(array)).save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# Descriptions and pair synthesis
# ---------------------------------------------------------------------------


def _bare_label(label: str) -> str:
    words = label.strip().split()
    if len(words) > 1 and words[0].lower() in ("the", "a", "an"):
        words = words[1:]
    return " ".join(words)


def _direction(dx: float, dy: float) -> str:
    parts = []
    if abs(dx) >= 0.02:
        parts.append("to the right" if dx > 0 else "to the left")
    if abs(dy) >= 0.02:
        parts.append("down" if dy > 0 else "up")
    return " and ".join(parts) or "slightly"


def describe_transform(spec: TransformSpec, object_label: str, grid: int = DEFAULT_GRID) -> str:
    """Templated description grounding the object before (img0) and after (img1)."""
    pre = ground(_bare_label(object_label), (0, encode_box(spec.pre_box, grid)))
    post = render_block(ImageBlock(1, (encode_box(spec.post_box, grid),)))
    p = spec.params
    k = spec.kind
    if k == "hflip":
        change = f"has been horizontally flipped, now at {post}"
    elif k == "vflip":
        change = f"has been vertically flipped, now at {post}"
    elif k == "rotate":
        a = p["angle_deg"]
        if a % 180 == 0:
            change = f"has been rotated by {abs(a):.0f} degrees, now at {post}"
        else:
            way = "counterclockwise" if a > 0 else "clockwise"
            change = f"has been rotated {way} by {abs(a):.0f} degrees, now at {post}"
    elif k == "scale":
        f = p["factor"]
        size = "smaller" if f < 1 else "larger"
        change = f"has been scaled to {f:.2f} times its size and looks {size}, now at {post}"
    elif k == "translate":
        change = f"has been moved {_direction(p['dx'], p['dy'])}, now at {post}"
    elif k == "brightness":
        f = p["factor"]
        tone = "brighter" if f > 1 else ("darker" if f < 1 else "unchanged in brightness")
        change = f"has become {tone} with its brightness scaled by {f:.2f}, staying at {post}"
    else:
        raise ValueError(f"unknown transform kind {k!r}")
    return f"The {pre} {change}."


KIND_KEYWORDS = {
    "hflip": "horizontally flipped",
    "vflip": "vertically flipped",
    "rotate": "rotated",
    "scale": "scaled",
    "translate": "moved",
    "brightness": "brightness",
}


@dataclass
class SynthResult:
    pair: SynthPair
    image: np.ndarray
    mask: np.ndarray


def synthesize_pair(image: np.ndarray, mask: np.ndarray, object_label: str, seed: int,
                    config: TransformConfig = TransformConfig(), base_ref: str = "",
                    out_ref: str = "", grid: int = DEFAULT_GRID) -> SynthResult:
    """Sample a transform (resampling on OutOfFrame) and render one pair."""
    pre = mask_box(mask)
    last = None
    for attempt in range(config.max_retries + 1):
        kind, params = sample_transform([seed, attempt], config)
        try:
            out = apply_transform(image, mask, kind, params)
        except OutOfFrame as exc:
            last = exc
            continue
        spec = TransformSpec(kind, params, pre, out.box)
        pair = SynthPair(base_ref, out_ref, object_label, spec,
                         describe_transform(spec, object_label, grid), attempt + 1)
        return SynthResult(pair, out.image, out.mask)
    raise OutOfFrame(f"no in-frame transform after {config.max_retries + 1} attempts: {last}")
