"""Load the bundled person re-identification table, turn each record into a
short grounded description and collect balanced same-identity pairs."""

from relforge import fixture_path
from relforge.ingest import encode_linguistic, load_ruleset, parse_attribute_table
from relforge.relations import collect_pairs, load_relations, parse_relation_dsl

result = parse_attribute_table(fixture_path("reid/attributes.csv"))
print(f"ingested {len(result.records)} records, skipped {len(result.skipped)}")

rules = load_ruleset("reid")
for rec in result.records[:3]:
    print(f"  {rec.sample_id}: {encode_linguistic(rec, rules).text}")

relations = load_relations()
print("\nbundled relations:", {k: v.family for k, v in relations.items()})

pairs = collect_pairs(result.records, relations["same_id"], budget=8, positive_ratio=0.5, seed=3)
print(f"same_id: {pairs.positives} positive / {pairs.negatives} negative, shortfall {pairs.shortfall}")
for p in pairs.pairs[:4]:
    print("  ", p.record_ids, p.truth)

# relations are plain text, so new ones can be written on the fly
custom = parse_relation_dsl(
    "lookalike @similarity := and(eq(a.upper_color, b.upper_color), neq(a.person_id, b.person_id))")
# the fixture has few such people, so the shortfall is reported rather than padded
pairs = collect_pairs(result.records, custom, budget=4, seed=0)
print(f"\n{custom.relation_id} ({custom.family}): {pairs.positives} positive, shortfall {pairs.shortfall}")
