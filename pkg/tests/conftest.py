import sys

import numpy as np
import pytest

from ctlab.phantom import PhantomSpec, generate_dataset, write_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_phantom_dir(tmp_path):
    """Two tiny datasets on disk plus their manifest."""
    manifest = None
    for tag, shift in (("A", 0), ("B", 100)):
        spec = PhantomSpec(side=16, depth=6, volumes=2, shift=shift, seed=5, lesion_fraction=0.25)
        manifest = write_dataset(generate_dataset(spec), tmp_path / "phantom", tag, manifest, relative_to=tmp_path)
    manifest.save(tmp_path / "manifest.json")
    return tmp_path



def pytest_terminal_summary(terminalreporter):
    lines = []
    for name, mod in list(sys.modules.items()):
        if name.endswith("test_acceptance"):
            lines = getattr(mod, "CRITERIA", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
