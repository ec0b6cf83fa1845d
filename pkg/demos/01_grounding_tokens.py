"""Walk through the patch-index codec: encode a box, decode it back, and parse
grounded text, including a deliberately broken span."""

from relforge.grounding import NormBox, decode_pair, encode_box, ground, parse_grounded, strip_special_tokens

G = 32

box = NormBox(0.0, 0.25, 0.3125, 0.5)
pair = encode_box(box, G)
print(f"box {box.as_tuple()} -> patch pair {tuple(pair)}")
print(f"decoded back to the covering cells: {decode_pair(pair, G).as_tuple()}")

# a small quantization tour: every box lands inside its decoded cell rectangle
for b in (NormBox(0.1, 0.1, 0.2, 0.9), NormBox(0.47, 0.5, 0.53, 0.51)):
    d = decode_pair(encode_box(b, G), G)
    print(f"{b.as_tuple()} -> {d.as_tuple()}  (max error <= 1/{G})")

text = "The man wears " + ground("a red backpack", (0, pair)) + " in the first picture."
print("\ngrounded text:", text)
stream, failures = parse_grounded(text, G)
print("spans:", [s.phrase_text for s in stream.spans], "boxes:", list(stream.located_boxes()), "failures:", failures)
print("plain:", " ".join(strip_special_tokens(text).split()))

broken = "A <phrase>dog</phrase><img0><patch_index_0900><patch_index_0100></img0> runs."
_, failures = parse_grounded(broken, G)
print("\nbroken text reports:", [(f.kind.value, f.position) for f in failures])
