"""
Phantom volumes and annotation lint
===================================

Generate a small synthetic dataset, plant annotation faults and let the
linter find them again.
"""

import tempfile
from pathlib import Path

from ctlab import PhantomSpec, generate_dataset, lint_annotations, read_volume, write_dataset

spec = PhantomSpec(side=48, depth=10, volumes=2, inject_faults=True, seed=4)
cases = generate_dataset(spec)

for case in cases:
    for fault in case.faults:
        print("planted", fault)

# round-trip through the on-disk format before linting, as the CLI would
out = Path(tempfile.mkdtemp())
manifest = write_dataset(cases, out, "demo")
for vidx, entry in enumerate(manifest.entries):
    lung, lesion = read_volume(out / entry.lung), read_volume(out / entry.lesion)
    for f in lint_annotations(lung, lesion, spec.min_lesion_component, "demo", vidx):
        print("found  ", f.to_json())

# a clean dataset lints clean
clean = generate_dataset(PhantomSpec(side=48, depth=10, volumes=2, seed=4))
print("clean findings:", sum(len(lint_annotations(c.lung, c.lesion)) for c in clean))
