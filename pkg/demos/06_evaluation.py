"""Score grounded predictions against gold boxes, read yes/no answers and
assemble a balanced few-shot prompt."""

from relforge.evaluation import (
    FewShotItem, assemble_fewshot_prompt, classification_metrics, extract_binary_answer, score_grounding,
)
from relforge.grounding import NormBox, encode_box, ground

gold = [NormBox(0.1, 0.1, 0.4, 0.5), NormBox(0.6, 0.2, 0.9, 0.8)]
pred = ("There is " + ground("a bag", (0, encode_box(NormBox(0.11, 0.1, 0.41, 0.5))))
        + " and " + ground("a hat", (0, encode_box(NormBox(0.0, 0.0, 0.1, 0.1)))) + ".")
score = score_grounding(pred, gold)
print("per-box correct:", score.correct, "IoU:", [round(v, 3) for v in score.matched_iou])

answers = ["Yes, they are the same person.", "No, this is not the same person.", "Hard to say."]
print("\nanswers read as:", [extract_binary_answer(a) for a in answers])
acc, prec, rec, f1 = classification_metrics(tp=31, fp=9, tn=50, fn=2)
print(f"acc {acc:.3f} prec {prec:.3f} rec {rec:.3f} f1 {f1:.3f}")

pool = [FewShotItem(f"ex{i}", f"img{i}.jpg", "Yes." if i % 3 else "No.", bool(i % 3)) for i in range(12)]
prompt = assemble_fewshot_prompt(pool, 4, FewShotItem("q", "query.jpg", "", True), seed=1)
print(f"\n4-shot prompt ({sum(e.label for e in prompt.examples)} positive):\n{prompt.render()}")
