import numpy as np
import pytest

from scanpipe.cohort import CohortManifest, SequenceRef, StudyRecord
from scanpipe.synth import SyntheticSpec, generate_synthetic
from scanpipe.training import Sample


def make_manifest(labels, modality="mra", views=("sagittal",), shoulders=None):
    """In-memory manifest: one study per label, one sequence per view."""
    studies = []
    for i, y in enumerate(labels):
        sh = shoulders[i] if shoulders is not None else f"P{i:04d}-R"
        seqs = tuple(SequenceRef(v, "T1", False, f"v/{i}_{v}.f32") for v in views)
        studies.append(StudyRecord(f"S{i:04d}", sh.split("-")[0], sh, modality, int(y), seqs))
    return CohortManifest(tuple(studies))


def blob_samples(n, seed, slices=2, pos_every=2, amp=3.0):
    """Noise volumes; positives carry a bright square, so the classes are separable."""
    r = np.random.default_rng(seed)
    out = []
    for i in range(n):
        y = int(i % pos_every == 0)
        x = r.normal(0, 0.3, (slices, 224, 224)).astype(np.float32)
        if y:
            top, left = r.integers(20, 160, 2)
            x[:, top : top + 40, left : left + 40] += amp
        out.append(Sample(f"S{seed}-{i}", x, y))
    return out


@pytest.fixture
def manifest_factory():
    return make_manifest


@pytest.fixture(scope="session")
def small_cohort(tmp_path_factory):
    """40 studies, two views, 6 slices; shared by tests that only read volumes."""
    out = tmp_path_factory.mktemp("small_cohort")
    spec = SyntheticSpec(n_studies=40, positive_fraction=0.25, views=("sagittal", "axial"), n_slices=6, seed=3)
    return generate_synthetic(spec, out)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, str] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    """Store and print one pass/fail line for an acceptance criterion."""
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
