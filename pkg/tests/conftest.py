import numpy as np
import pytest

from ehpe import handsim as hs

# small widths so end-to-end training tests run in seconds
TINY = dict(channels=(4, 8, 8, 16), head_width=4, refine_width=4, hidden=16, heads=8, fem_width=16)


@pytest.fixture(scope="session")
def tiny_dataset():
    return hs.make_dataset(48, seed=3)


@pytest.fixture(scope="session")
def tiny_dataset_file(tmp_path_factory, tiny_dataset):
    path = tmp_path_factory.mktemp("data") / "tiny.bin"
    hs.write_dataset(tiny_dataset, path)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> (passed, detail lines); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, list[str]]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, notes = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {'; '.join(notes)}")
