"""Synthesize transformed copies of the bundled object images and check that
the predicted box still covers the moved object."""

import tempfile
from pathlib import Path

from relforge import fixture_path
from relforge.geometry import box_containment, load_mask, load_raster, save_raster, synthesize_pair
from relforge.pipeline import read_geom_manifest

out = Path(tempfile.mkdtemp(prefix="geo_"))
for i, entry in enumerate(read_geom_manifest(fixture_path("geom/manifest.jsonl"))):
    image, mask = load_raster(entry.image), load_mask(entry.mask)
    res = synthesize_pair(image, mask, entry.label, seed=i)
    spec = res.pair.spec
    save_raster(res.image, out / f"{i}.png")
    cover = box_containment(spec.post_box, res.mask)
    print(f"{entry.label:10s} {spec.kind:10s} containment {cover:.3f}")
    print(f"    {res.pair.description}")
print(f"\nimages written to {out}")
