"""Temporal-association samples built from video records."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import RelforgeError
from .records import SampleRecord

MIN_FRAMES = 2
MAX_FRAMES = 8

_ORDINALS = ("first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth")


class TooFewFrames(RelforgeError):
    pass


class EmptyCaption(RelforgeError):
    pass


@dataclass(frozen=True)
class FrameSequence:
    video: str
    frames: tuple[tuple[int, str], ...]
    caption: str

    def __post_init__(self):
        if not MIN_FRAMES <= len(self.frames) <= MAX_FRAMES:
            raise ValueError(f"sequence length {len(self.frames)} outside [{MIN_FRAMES}, {MAX_FRAMES}]")
        idx = [i for i, _ in self.frames]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"frame indices not strictly increasing: {idx}")

    @property
    def indices(self) -> list[int]:
        return [i for i, _ in self.frames]

    @property
    def images(self) -> list[str]:
        return [ref for _, ref in self.frames]


def frame_ref(video: str, index: int, pattern: str = "{video}#{index}") -> str:
    return pattern.format(video=video, index=index)


def sample_frames(record: SampleRecord, k: int, seed: int, ref_pattern: str = "{video}#{index}") -> FrameSequence:
    """Pick one frame from each of ``k`` equal strata of the record's frame list."""
    if not MIN_FRAMES <= k <= MAX_FRAMES:
        raise ValueError(f"k={k} outside [{MIN_FRAMES}, {MAX_FRAMES}]")
    frames = record.media.frames
    if frames is None:
        raise ValueError(f"record {record.sample_id!r} is not a video")
    n = len(frames)
    if n < k:
        raise TooFewFrames(f"record {record.sample_id!r} has {n} frames, need {k}")
    rng = np.random.default_rng(seed)
    bounds = [i * n // k for i in range(k + 1)]
    picks = [int(rng.integers(bounds[i], bounds[i + 1])) for i in range(k)]
    chosen = tuple((frames[p], frame_ref(record.media.path, frames[p], ref_pattern)) for p in picks)
    return FrameSequence(record.media.path, chosen, str(record.labels.get("caption", "")))


@dataclass(frozen=True)
class OrderTask:
    shuffled_frames: tuple[tuple[int, str], ...]
    # position i holds the chronological rank of shuffled frame i
    ground_truth_permutation: tuple[int, ...]

    def restore(self, shuffled=None) -> list:
        """Put shuffled items back in chronological order using the ground truth."""
        items = self.shuffled_frames if shuffled is None else shuffled
        out = [None] * len(items)
        for pos, rank in enumerate(self.ground_truth_permutation):
            out[rank] = items[pos]
        return out

    def chronological_positions(self) -> list[int]:
        """Shuffled positions listed from earliest to latest frame."""
        return list(np.argsort(self.ground_truth_permutation).tolist())

    def permutation_string(self) -> str:
        return " ".join(str(r) for r in self.ground_truth_permutation)

    def sentence(self) -> str:
        names = [f"the {_ORDINALS[p]} image" for p in self.chronological_positions()]
        listed = ", ".join(names[:-1]) + f" and {names[-1]}"
        return f"In chronological order, the frames are {listed}."


def make_order_task(seq: FrameSequence, seed: int) -> OrderTask:
    """Shuffle the frames with a uniform non-identity permutation."""
    k = len(seq.frames)
    rng = np.random.default_rng(seed)
    while True:
        perm = rng.permutation(k)
        if np.any(perm != np.arange(k)):
            break
    shuffled = tuple(seq.frames[int(p)] for p in perm)
    return OrderTask(shuffled, tuple(int(p) for p in perm))


ORDER_QUESTION = "These frames from one video are shuffled. What is their correct chronological order?"


def describe_sequence(seq: FrameSequence) -> str:
    caption = seq.caption.strip()
    if not caption:
        raise EmptyCaption(f"video {seq.video!r} has no caption")
    refs = [f"<img{i}>" for i in range(len(seq.frames))]
    listed = ", ".join(refs[:-1]) + f" and {refs[-1]}"
    caption = caption[0].lower() + caption[1:]
    if not caption.endswith("."):
        caption += "."
    return f"Frames {listed} are shown in chronological order. The video shows {caption}"
