"""Sample ordered frames from the bundled caption manifest and build the
describe and reorder tasks for each clip."""

from relforge import fixture_path
from relforge.ingest import parse_video_captions
from relforge.temporal import TooFewFrames, describe_sequence, make_order_task, sample_frames

videos = parse_video_captions(fixture_path("video/captions.jsonl")).records
for idx, rec in enumerate(videos):
    try:
        seq = sample_frames(rec, 6, [0, idx])
    except TooFewFrames as exc:
        print(f"{rec.sample_id}: skipped ({exc})")
        continue
    task = make_order_task(seq, [0, idx, 1])
    print(f"{rec.sample_id}: {describe_sequence(seq)}")
    print(f"    shuffled {[ref for _, ref in task.shuffled_frames]}")
    print(f"    answer   {task.sentence()}")
