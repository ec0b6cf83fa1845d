"""Run the full pairs -> descriptions -> dialogues stage without any LLM, then
lint, filter and hash the corpus. Running it twice gives the same hash."""

import tempfile
from pathlib import Path

from relforge import fixture_path
from relforge.dialog import corpus_hash, filter_quality, format_dialog, lint_sample, write_corpus
from relforge.ingest import load_ruleset, parse_attribute_table
from relforge.pipeline import build_relation_samples
from relforge.relations import load_relations

records = parse_attribute_table(fixture_path("reid/attributes.csv")).records
res = build_relation_samples(records, load_ruleset("reid"), load_relations()["same_id"], budget=6, seed=7)
print(f"{len(res.samples)} samples, {res.fallback_count} from the rule-based generator\n")
print(format_dialog(res.samples[0]))

bad = [s.sample_id for s in res.samples if lint_sample(s)]
kept = [s for s in res.samples if filter_quality(s).keep]
print(f"\nlint problems: {bad or 'none'}; {len(kept)} of {len(res.samples)} pass the quality filter")

path = Path(tempfile.mkdtemp()) / "corpus.jsonl"
write_corpus(res.samples, path)
print(f"sha256 {corpus_hash(path)}")
