import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from relforge.dialog import (
    FilterThresholds,
    ImageIndexOutOfRange,
    Turn,
    answer_word_count,
    assemble_sample,
    corpus_hash,
    filter_quality,
    format_dialog,
    lint_sample,
    read_corpus,
    sample_from_description,
    sample_to_dict,
    split_corpus,
    write_corpus,
)
from relforge.errors import SchemaError
from relforge.ingest import encode_linguistic, load_ruleset
from relforge.llm import generate_description, generate_dialog
from relforge.relations import load_relations

SAME_ID = load_relations()["same_id"]


def words(n):
    return " ".join(["word"] * n)


def sample(answer="An answer.", scores=None, n_images=2, grounding=True, sid="s1"):
    return assemble_sample(sid, [f"i{k}.png" for k in range(n_images)], "Q?", answer, relation_id="r",
                           family="contrast", task_type="dialog", generator="fallback",
                           grounding=grounding, scores=scores)


class TestAssemble:
    def test_reid_example(self, reid_pair):
        rules = load_ruleset("reid")
        ea, eb = (encode_linguistic(r, rules) for r in reid_pair)
        desc = generate_description(ea, eb, SAME_ID, False)
        turns = generate_dialog(desc, SAME_ID)
        s = sample_from_description("same_id-00000", ["img128.png", "img334.png"], desc, turns, "same_id")
        text = format_dialog(s)
        assert text.splitlines()[0] == ("### Human: <img0> <ImageHere> </img0>, <img1> <ImageHere> </img1> "
                                        "Are the two people in the two images the same person? <grounding>")
        assert text.splitlines()[1].startswith("### Assistant: No, they are not the same person.")
        assert desc.text in s.assistant_text
        assert lint_sample(s) == []
        assert s.generator == "fallback" and s.grounding

    def test_single_image_no_grounding(self):
        s = sample("A caption.", n_images=1, grounding=False)
        assert "<grounding>" not in s.turns[0].text
        assert s.turns[0].text == "<img0> <ImageHere> </img0> Q?"

    def test_index_out_of_range(self):
        with pytest.raises(ImageIndexOutOfRange):
            sample("<phrase> x </phrase><img2><patch_index_0><patch_index_1></img2>")

    def test_needs_images(self):
        with pytest.raises(ValueError):
            assemble_sample("x", [], "q", "a", relation_id="r", family="f", task_type="t", generator="fallback")

    def test_bad_role(self):
        with pytest.raises(ValueError):
            Turn("system", "x")


class TestFilter:
    def test_keep(self):
        d = filter_quality(sample(words(45), {"clip_score": 0.35, "bbox_confidence": 0.90}))
        assert d.keep and d.reasons == ()

    def test_clip_boundary(self):
        d = filter_quality(sample(words(45), {"clip_score": 0.34, "bbox_confidence": 0.90}))
        assert not d.keep and d.reasons == ("clip_score",)

    def test_no_scores(self):
        assert filter_quality(sample(words(41))).keep
        assert filter_quality(sample(words(40))).reasons == ("text_length",)

    def test_special_tokens_not_counted(self):
        text = words(40) + " <phrase> </phrase><img0><patch_index_0><patch_index_1></img0>"
        assert answer_word_count(text) == 40

    def test_conf_boundary(self):
        assert filter_quality(sample(words(50), {"bbox_confidence": 0.88})).reasons == ("bbox_confidence",)

    @given(st.floats(0, 1), st.floats(0, 1), st.integers(0, 80), st.floats(0, 0.2), st.floats(0, 0.2), st.integers(0, 10))
    def test_monotone(self, clip, conf, n, d_clip, d_conf, d_words):
        s = sample(words(n), {"clip_score": clip, "bbox_confidence": conf})
        base = FilterThresholds()
        raised = FilterThresholds(base.clip_score + d_clip, base.bbox_confidence + d_conf, base.words + d_words)
        if not filter_quality(s, base).keep:
            assert not filter_quality(s, raised).keep


class TestCorpusIO:
    def samples(self):
        return [sample(f"Answer {i}.", {"clip_score": 0.5} if i == 1 else None, sid=f"s{i}") for i in range(3)]

    def test_round_trip(self, tmp_path):
        p = tmp_path / "c.jsonl"
        assert write_corpus(self.samples(), p) == 3
        assert read_corpus(p) == self.samples()

    def test_field_order(self, tmp_path):
        p = tmp_path / "c.jsonl"
        write_corpus(self.samples(), p)
        first = json.loads(p.read_text().splitlines()[1])
        assert list(first) == ["id", "images", "turns", "family", "task_type", "relation_id", "grounding",
                               "generator", "scores", "schema"]
        assert first["schema"] == "v1"

    def test_corrupt_line(self, tmp_path):
        p = tmp_path / "c.jsonl"
        write_corpus(self.samples(), p)
        lines = p.read_text().splitlines()
        lines[1] = lines[1][:20]
        p.write_text("\n".join(lines) + "\n")
        with pytest.raises(SchemaError) as info:
            read_corpus(p)
        assert info.value.line == 2

    def test_unknown_field(self, tmp_path):
        d = sample_to_dict(sample())
        d["extra"] = 1
        p = tmp_path / "c.jsonl"
        p.write_text(json.dumps(d) + "\n")
        with pytest.raises(SchemaError):
            read_corpus(p)

    @pytest.mark.parametrize("field, value", [("grounding", "yes"), ("images", "a.png"), ("turns", [{"role": "bot", "text": ""}]),
                                              ("schema", "v2"), ("scores", {"clip_score": "high"})])
    def test_bad_values(self, tmp_path, field, value):
        d = sample_to_dict(sample())
        d[field] = value
        p = tmp_path / "c.jsonl"
        p.write_text(json.dumps(d) + "\n")
        with pytest.raises(SchemaError):
            read_corpus(p)

    def test_hash_ignores_crlf(self, tmp_path):
        p, q = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_corpus(self.samples(), p)
        q.write_bytes(p.read_bytes().replace(b"\n", b"\r\n"))
        assert corpus_hash(p) == corpus_hash(q)

    def test_stable_hash_large(self, tmp_path):
        many = [sample(f"Answer {i}.", sid=f"s{i:05d}") for i in range(10_000)]
        write_corpus(many, tmp_path / "a.jsonl")
        write_corpus(many, tmp_path / "b.jsonl")
        assert corpus_hash(tmp_path / "a.jsonl") == corpus_hash(tmp_path / "b.jsonl")

    def test_split(self):
        many = [sample(sid=f"s{i}") for i in range(20)]
        train, val = split_corpus(many, 0.25, seed=1)
        assert len(val) == 5 and len(train) == 15
        assert split_corpus(many, 0.25, seed=1) == (train, val)


class TestLint:
    def test_missing_grounding_token(self):
        s = sample()
        bad = type(s)(s.sample_id, s.images, (Turn("human", "<img0> <ImageHere> </img0>, <img1> <ImageHere> </img1> Q?"),
                                               s.turns[1]), True, s.relation_id, s.family, s.task_type, s.generator)
        assert any("grounding" in p for p in lint_sample(bad))

    def test_grammar_failure(self):
        s = sample()
        bad = type(s)(s.sample_id, s.images, (s.turns[0], Turn("assistant", "<phrase> dangling")), True,
                      s.relation_id, s.family, s.task_type, s.generator)
        assert lint_sample(bad)
