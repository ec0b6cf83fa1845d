import numpy as np
import pytest

from relforge.grounding import NormBox
from relforge.records import LabeledBox, MediaRef, SampleRecord

ID128_LABELS = {
    "person_id": 128, "male": True, "short_hair": True, "short_sleeve": True, "short_lower": True,
    "lower_type": "pants", "hat": False, "backpack": False, "bag": False, "handbag": False,
    "age": "teenager", "upper_color": "gray", "lower_color": "black",
}
ID334_LABELS = {**ID128_LABELS, "person_id": 334, "backpack": True, "upper_color": "black"}
BACKPACK_BOX = NormBox(0.0, 0.25, 0.3125, 0.5)


def person(sample_id, labels, boxes=()):
    return SampleRecord(sample_id, "reid", MediaRef(f"{sample_id}.png"), dict(labels), tuple(boxes))


@pytest.fixture
def reid_pair():
    a = person("img128", ID128_LABELS)
    b = person("img334", ID334_LABELS, [LabeledBox("backpack", BACKPACK_BOX)])
    return a, b


class StubClient:
    """Chat client double returning canned replies in order (the last one repeats)."""

    def __init__(self, *replies):
        self.replies = list(replies)
        self.calls = []

    def complete(self, system, user, temperature=0.2, max_tokens=512):
        self.calls.append((system, user, temperature, max_tokens))
        i = min(len(self.calls) - 1, len(self.replies) - 1)
        return self.replies[i]


@pytest.fixture
def stub_client():
    return StubClient


def blob_image(h=64, w=64, rect=(20, 30, 16, 24), seed=0):
    """RGB image with a textured rectangular object and its mask; rect = (row, col, height, width)."""
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 60, size=(h, w, 3), dtype=np.uint8)
    mask = np.zeros((h, w), bool)
    r, c, hh, ww = rect
    mask[r:r + hh, c:c + ww] = True
    img[mask] = rng.integers(150, 255, size=(int(mask.sum()), 3), dtype=np.uint8)
    return img, mask


# acceptance criteria report: (label, passed, detail), printed after the run
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: int(r[0].split()[0][2:])):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {label}: {detail}")
