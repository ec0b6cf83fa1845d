
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from relforge.dialog import assemble_sample
from relforge.evaluation import (
    EVAL_QUESTIONS,
    EmptyEval,
    EvalConfig,
    FewShotItem,
    PoolTooSmall,
    assemble_fewshot_prompt,
    classification_metrics,
    evaluate,
    extract_binary_answer,
    f1_from,
    greedy_match,
    iou,
    judge_relation_score,
    parse_judge_reply,
    score_grounding,
)
from relforge.grounding import NormBox, decode_pair, encode_box, ground

from conftest import StubClient
from oracles import optimal_correct, raster_iou


@st.composite
def boxes(draw):
    x1 = draw(st.floats(0, 0.95))
    y1 = draw(st.floats(0, 0.95))
    return NormBox(x1, y1, draw(st.floats(x1 + 0.01, 1.0)), draw(st.floats(y1 + 0.01, 1.0)))


def random_box(rng, lo=0.05):
    x1, y1 = rng.uniform(0, 1 - lo, 2)
    return NormBox(x1, y1, rng.uniform(x1 + lo, 1), rng.uniform(y1 + lo, 1))


def lattice_box(rng, n=1000):
    """Random box with corners on the 1/n raster lattice."""
    x1, x2 = sorted(rng.choice(n + 1, 2, replace=False))
    y1, y2 = sorted(rng.choice(n + 1, 2, replace=False))
    return NormBox(x1 / n, y1 / n, x2 / n, y2 / n)


class TestIoU:
    def test_identical(self):
        b = NormBox(0.1, 0.2, 0.3, 0.4)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(NormBox(0, 0, 0.2, 0.2), NormBox(0.5, 0.5, 1, 1)) == 0.0

    def test_hand_case(self):
        assert iou(NormBox(0, 0, 0.5, 0.5), NormBox(0.25, 0.25, 0.75, 0.75)) == pytest.approx(1 / 7, abs=1e-9)
        assert raster_iou(NormBox(0, 0, 0.5, 0.5), NormBox(0.25, 0.25, 0.75, 0.75)) == pytest.approx(1 / 7, abs=2e-3)

    @given(boxes(), boxes())
    def test_symmetry_and_range(self, a, b):
        assert iou(a, b) == iou(b, a)
        assert 0.0 <= iou(a, b) <= 1.0

    def test_raster_oracle_lattice(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            a, b = lattice_box(rng), lattice_box(rng)
            assert abs(iou(a, b) - raster_iou(a, b)) <= 2e-3

    def test_raster_oracle_real_valued(self):
        # off-lattice edges are off by at most half a pixel each
        rng = np.random.default_rng(1)
        for _ in range(100):
            a, b = random_box(rng, 0.1), random_box(rng, 0.1)
            v = iou(a, b)
            if v == 0:
                assert raster_iou(a, b) == 0
                continue
            inter = v * (a.area + b.area) / (1 + v)
            w = min(a.x2, b.x2) - max(a.x1, b.x1)
            h = min(a.y2, b.y2) - max(a.y1, b.y1)
            rel = 1e-3 * (1 / w + 1 / h + 2 / min(a.width, a.height, b.width, b.height))
            assert abs(v - raster_iou(a, b)) <= 2 * v * rel + 1e-9, (a, b, inter)


def pred_for(box, idx=0, phrase="obj"):
    return ground(phrase, (idx, encode_box(box)))


class TestScoreGrounding:
    def test_exact(self):
        gt = decode_pair((256, 489))
        s = score_grounding(pred_for(gt, 1), [gt])
        assert s.correct == [True] and s.decode_failures == 0

    def test_unordered_pair(self):
        s = score_grounding("<phrase> x </phrase><img0><patch_index_489><patch_index_256></img0>", [NormBox(0, 0.25, 0.3125, 0.5)])
        assert s.correct == [False] and s.decode_failures == 1
        assert s.slots == 1

    def test_one_of_two(self):
        g1, g2 = NormBox(0, 0, 0.5, 0.5), NormBox(0.5, 0.5, 1, 1)
        p1 = NormBox(0, 0, 0.5, 0.3)        # IoU 0.6 with g1
        p2 = NormBox(0.5, 0.5, 1, 0.7)      # IoU 0.4 with g2
        assert iou(p1, g1) == pytest.approx(0.6) and raster_iou(p1, g1) == pytest.approx(0.6, abs=2e-3)
        assert iou(p2, g2) == pytest.approx(0.4) and raster_iou(p2, g2) == pytest.approx(0.4, abs=2e-3)
        text = "<phrase> a </phrase><img0><patch_index_0><patch_index_303></img0> and " \
               "<phrase> b </phrase><img0><patch_index_528><patch_index_735></img0>"
        assert [decode_pair(p) for p in [(0, 303), (528, 735)]] == [NormBox(0, 0, 0.5, 0.3125), NormBox(0.5, 0.5, 1, 0.71875)]
        s = score_grounding(text, [g1, g2])
        assert s.correct == [True, False]
        assert s.accuracy == 0.5

    def test_threshold_is_strict(self):
        g = NormBox(0, 0, 1, 1)
        p = NormBox(0, 0, 1, 0.5)  # IoU exactly 0.5
        assert score_grounding(pred_for(p), [g]).correct == [False]
        assert score_grounding(pred_for(p), [g], EvalConfig(iou_threshold=0.49)).correct == [True]

    def test_per_image(self):
        b = NormBox(0, 0, 0.5, 0.5)
        assert score_grounding(pred_for(b, 1), [(0, b)], EvalConfig(per_image=True)).correct == [False]
        assert score_grounding(pred_for(b, 0), [(0, b)], EvalConfig(per_image=True)).correct == [True]

    def test_no_prediction(self):
        assert score_grounding("no boxes at all", [NormBox(0, 0, 1, 1)]).correct == [False]

    def test_requires_gt(self):
        with pytest.raises(ValueError):
            score_grounding("x", [])

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            EvalConfig(iou_threshold=1.0)

    def test_greedy_vs_optimal(self):
        rng = np.random.default_rng(7)
        agree = 0
        for _ in range(1000):
            gt = [random_box(rng) for _ in range(rng.integers(1, 5))]
            pred = []
            for g in gt:
                if rng.random() < 0.8:
                    jitter = rng.normal(0, 0.05, 4)
                    x1, y1, x2, y2 = np.clip(np.array(g.as_tuple()) + jitter, 0, 1)
                    if x2 > x1 and y2 > y1:
                        pred.append(NormBox(x1, y1, x2, y2))
            pred += [random_box(rng) for _ in range(rng.integers(0, 2))]
            pred = pred[:4]
            greedy = sum(v > 0.5 for _, _, v in greedy_match(pred, gt))
            m = [[iou(p, g) for g in gt] for p in pred]
            best = optimal_correct(m, 0.5)
            assert greedy <= best
            agree += greedy == best
        print(f"greedy matches optimal assignment on {agree}/1000 instances")
        assert agree >= 950

    def test_greedy_tie_order_stable(self):
        g = [NormBox(0, 0, 0.5, 0.5)]
        p = [NormBox(0, 0, 0.5, 0.5), NormBox(0, 0, 0.5, 0.5)]
        assert greedy_match(p, g) == [(0, 0, 1.0)]


class TestBinaryAnswer:
    @pytest.mark.parametrize("text, expected", [
        ("No, they are not the same person. The first wears gray.", "no"),
        ("Yes, the same person.", "yes"),
        ("The image shows a street.", "unparseable"),
        ("They look alike. But they are different people.", "no"),
        ("Nobody knows. Nothing here.", "unparseable"),
        ("Looking closely. Yes it is. No wait.", "yes"),
        ("", "unparseable"),
    ])
    def test_examples(self, text, expected):
        assert extract_binary_answer(text) == expected


class TestClassification:
    def test_perfect(self):
        assert classification_metrics(5, 0, 5, 0) == (1.0, 1.0, 1.0, 1.0)

    def test_reference_row(self):
        assert f1_from(0.775, 0.936) == pytest.approx(0.848, abs=1e-3)
        # a confusion matrix realising those rates: prec = 775/1000, rec = 775/828
        acc, prec, rec, f1 = classification_metrics(775, 225, 1000, 53)
        assert (round(prec, 3), round(rec, 3)) == (0.775, 0.936)
        assert f1 == pytest.approx(0.848, abs=1e-3)

    def test_zero_denominators(self):
        acc, prec, rec, f1 = classification_metrics(0, 0, 3, 2)
        assert (prec, rec, f1) == (0.0, 0.0, 0.0)

    def test_empty(self):
        with pytest.raises(EmptyEval):
            classification_metrics(0, 0, 0, 0)

    @given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
    def test_identities(self, tp, fp, tn, fn):
        if tp + fp + tn + fn == 0:
            return
        acc, prec, rec, f1 = classification_metrics(tp, fp, tn, fn)
        assert acc == pytest.approx((tp + tn) / (tp + fp + tn + fn))
        if prec + rec:
            assert f1 == pytest.approx(2 * prec * rec / (prec + rec))
        for v in (acc, prec, rec, f1):
            assert 0 <= v <= 1


class TestJudge:
    def test_stub_five(self):
        r = judge_relation_score("Q?", "gold", "gold", StubClient("5"))
        assert (r.score, r.parsed) == (5, True)

    def test_parse_score(self):
        assert parse_judge_reply("Score: 3. The answer is partly right.") == (3, True)

    def test_unparseable(self):
        assert parse_judge_reply("excellent") == (0, False)

    def test_clamped(self):
        assert parse_judge_reply("7/5") == (5, True)
        assert parse_judge_reply("-2") == (0, True)

    def test_prompt_contents(self):
        client = StubClient("4")
        judge_relation_score("Same person?", "No, different.", "Yes.", client)
        _, user, temperature, _ = client.calls[0]
        assert "Same person?" in user and "No, different." in user and "Yes." in user
        assert temperature == 0.0


def items(n_pos, n_neg):
    pos = [FewShotItem(f"p{i}", f"p{i}.png", "Yes, it looks normal.", True) for i in range(n_pos)]
    neg = [FewShotItem(f"n{i}", f"n{i}.png", "No, it has a scratch.", False) for i in range(n_neg)]
    return pos + neg


QUERY = FewShotItem("q", "q.png", "?", True)


class TestFewShot:
    def test_k2_balanced(self):
        p = assemble_fewshot_prompt(items(5, 5), 2, QUERY, seed=0)
        assert sorted(e.label for e in p.examples) == [False, True]
        assert p.shortfall == 0

    def test_k8_shortfall(self):
        p = assemble_fewshot_prompt(items(3, 10), 8, QUERY, seed=0)
        assert sum(e.label for e in p.examples) == 3
        assert sum(not e.label for e in p.examples) == 5
        assert p.shortfall == 1

    def test_deterministic(self):
        pool = items(6, 6)
        assert assemble_fewshot_prompt(pool, 4, QUERY, 3) == assemble_fewshot_prompt(pool, 4, QUERY, 3)

    def test_pool_too_small(self):
        with pytest.raises(PoolTooSmall):
            assemble_fewshot_prompt(items(1, 2), 4, QUERY, 0)

    def test_query_in_pool(self):
        pool = items(3, 3)
        with pytest.raises(ValueError):
            assemble_fewshot_prompt(pool, 2, pool[0], 0)

    def test_bad_k(self):
        with pytest.raises(ValueError):
            assemble_fewshot_prompt(items(3, 3), 3, QUERY, 0)

    def test_render(self):
        p = assemble_fewshot_prompt(items(2, 2), 2, QUERY, 0)
        text = p.render()
        assert text.count("### Human:") == 3 and text.count("### Assistant:") == 2
        assert text.endswith(f"<img2> <ImageHere> </img2> {EVAL_QUESTIONS['anomaly']}")
        assert p.images[-1] == "q.png"


def gold_sample(i, truth, box):
    span = ground("a backpack", (1, encode_box(box)))
    if truth:
        answer = f"Yes, they are the same person. Both carry {span}."
    else:
        answer = f"No, they are not the same person. The second carries {span}."
    return assemble_sample(f"s{i}", ["a.png", "b.png"], "Same person?", answer, relation_id="same_id",
                           family="contrast", task_type="dialog", generator="fallback")


class TestEvaluate:
    def gold(self):
        rng = np.random.default_rng(1)
        return [gold_sample(i, i % 2 == 0, random_box(rng, 0.1)) for i in range(10)]

    def test_perfect(self):
        gold = self.gold()
        report = evaluate({s.sample_id: s.assistant_text for s in gold}, gold, judge=StubClient("5"))
        assert report.bbox_acc == 1.0
        assert (report.accuracy, report.precision, report.recall, report.f1) == (1.0, 1.0, 1.0, 1.0)
        assert report.relation_score_mean == 5.0
        assert report.counts["decode_failures"] == 0

    def test_missing_and_wrong(self):
        gold = self.gold()
        preds = {s.sample_id: s.assistant_text for s in gold[:5]}
        preds["s0"] = "No, they are different."  # truth yes
        report = evaluate(preds, gold)
        assert report.counts["unparseable_answers"] == 5
        assert report.counts["fn"] >= 1
        assert report.bbox_acc == pytest.approx(0.4)

    def test_decode_failure_accounting(self):
        gold = self.gold()
        preds = {s.sample_id: s.assistant_text for s in gold}
        preds["s3"] = preds["s3"].replace("<patch_index_", "<patch_index_9", 1)
        report = evaluate(preds, gold)
        assert report.counts["decode_failures"] + report.counts["prediction_slots"] - report.counts["decode_failures"] \
            == report.counts["prediction_slots"]
        assert report.counts["decode_failures"] == 1
        assert report.bbox_acc == pytest.approx(0.9)

    def test_summary(self):
        gold = self.gold()
        rows = dict(evaluate({}, gold).summary_rows())
        assert rows["BBox Acc"] == "0.0%" and rows["RS"] == "n/a"
