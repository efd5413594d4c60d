import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import blob_samples, make_manifest
from scanpipe.bundle import ModelBundle
from scanpipe.cohort import SplitAssignment, make_folds
from scanpipe.errors import FoldDegeneracyError, KeyMismatchError, SizeError
from scanpipe.models import read_header
from scanpipe.selection import CVResult, SelectionDecision, retrain_final, run_cv, select_architecture, select_top_k
from scanpipe.training import HyperParams, SchedulerSpec, TrainBudget

# AUC on the external screening set, one entry per candidate family
SCREEN = {
    "AlexNet": 0.9242,
    "EfficientNet": 0.6472,
    "DenseNet": 0.4072,
    "ResNet34": 0.5848,
    "ResNet50": 0.7371,
    "3D CNN": 0.7439,
    "ViT": 0.9561,
    "Swin V1": 0.9465,
    "Swin V2": 0.9061,
}

# view-modality -> {architecture: (mean, std)}, and the architecture that was kept
CV_TABLE = {
    ("sagittal", "mri"): ({"AlexNet": (0.618, 0.179), "Swin": (0.704, 0.138), "ViT": (0.690, 0.187)}, "Swin"),
    ("axial", "mri"): ({"AlexNet": (0.668, 0.183), "Swin": (0.671, 0.223), "ViT": (0.688, 0.101)}, "ViT"),
    ("coronal", "mri"): ({"AlexNet": (0.663, 0.162), "Swin": (0.681, 0.078), "ViT": (0.658, 0.155)}, "Swin"),
    ("sagittal", "mra"): ({"AlexNet": (0.720, 0.076), "Swin": (0.755, 0.123), "ViT": (0.725, 0.054)}, "ViT"),
    ("axial", "mra"): ({"AlexNet": (0.706, 0.063), "Swin": (0.705, 0.153), "ViT": (0.671, 0.101)}, "AlexNet"),
    ("coronal", "mra"): ({"AlexNet": (0.636, 0.109), "Swin": (0.632, 0.172), "ViT": (0.725, 0.050)}, "ViT"),
}


def candidates(view, modality):
    rows, _ = CV_TABLE[(view, modality)]
    return [CVResult.from_summary(view, modality, a, m, s) for a, (m, s) in rows.items()]


class TestScreen:
    def test_top3(self):
        assert select_top_k(SCREEN, 3) == ["ViT", "Swin V1", "AlexNet"]

    def test_top1(self):
        assert select_top_k(SCREEN, 1) == ["ViT"]

    def test_too_few(self):
        with pytest.raises(SizeError):
            select_top_k(SCREEN, 10)

    def test_ties_by_identifier(self):
        assert select_top_k({"b": 0.9, "a": 0.9, "c": 0.1}, 2) == ["a", "b"]


class TestSelection:
    @pytest.mark.parametrize("key", list(CV_TABLE))
    def test_reference_table(self, key):
        d = select_architecture(candidates(*key))
        assert d.architecture == CV_TABLE[key][1]
        assert d.chosen.std == min(c.std for c in d.candidates)

    def test_stability_beats_mean(self):
        d = select_architecture(candidates("sagittal", "mra"))
        assert d.architecture == "ViT" and d.criterion == "min_fold_auc_std"
        assert max(c.mean for c in d.candidates) > d.chosen.mean

    def test_singleton(self):
        c = CVResult.from_folds("axial", "mra", "tiny", [0.7, 0.8])
        assert select_architecture([c]).architecture == "tiny"

    def test_mixed_keys(self):
        with pytest.raises(KeyMismatchError):
            select_architecture(candidates("axial", "mra") + candidates("axial", "mri"))

    def test_ties_std_then_mean_then_identifier(self):
        mk = lambda a, m, s: CVResult.from_summary("coronal", "mra", a, m, s)
        assert select_architecture([mk("b", 0.7, 0.05), mk("a", 0.8, 0.05)]).architecture == "a"
        assert select_architecture([mk("b", 0.8, 0.05), mk("a", 0.8, 0.05)]).architecture == "a"
        assert select_architecture([mk("a", 0.7, 0.05), mk("b", 0.9, 0.05)]).architecture == "b"

    @given(
        stds=st.lists(st.sampled_from([0.05, 0.1, 0.1, 0.2]), min_size=1, max_size=6),
        means=st.lists(st.sampled_from([0.6, 0.7, 0.7]), min_size=6, max_size=6),
        seed=st.integers(0, 1000),
    )
    def test_order_independent(self, stds, means, seed):
        cs = [CVResult.from_summary("axial", "mri", f"arch{i}", means[i], s) for i, s in enumerate(stds)]
        perm = np.random.default_rng(seed).permutation(len(cs))
        a = select_architecture(cs)
        b = select_architecture([cs[i] for i in perm])
        assert a == b and a.chosen.std == min(stds)

    def test_decision_round_trip(self):
        d = select_architecture(candidates("coronal", "mri"))
        assert SelectionDecision.from_dict(json.loads(json.dumps(d.to_dict()))) == d


class TestCVResult:
    FOLDS = [0.779, 0.671, 0.785, 0.665, 0.770, 0.680, 0.766, 0.684]

    def test_reference_row_format(self):
        r = CVResult.from_folds("sagittal", "mra", "ViT", self.FOLDS)
        assert len(r.fold_aucs) == 8 and {0.779, 0.671} <= set(r.fold_aucs)
        assert r.summary() == "0.725 ± 0.054"

    def test_sample_std(self):
        r = CVResult.from_folds("sagittal", "mra", "ViT", [0.6, 0.8])
        assert r.std == pytest.approx(np.sqrt(0.02), abs=1e-15)

    def test_constant_folds(self):
        assert CVResult.from_folds("axial", "mri", "x", [0.9] * 8).std == 0.0

    @given(st.lists(st.floats(0, 1), min_size=2, max_size=10))
    def test_recompute(self, aucs):
        r = CVResult.from_folds("axial", "mri", "x", aucs)
        a = np.array(r.fold_aucs)
        assert abs(r.mean - a.mean()) <= 1e-12
        assert abs(r.std - np.sqrt(((a - a.mean()) ** 2).sum() / (len(a) - 1))) <= 1e-12

    @pytest.mark.parametrize("bad", [[], [1.2, 0.5], [-0.1]])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            CVResult.from_folds("axial", "mri", "x", bad)


@pytest.fixture(scope="module")
def separable_cohort():
    labels = [1 if i % 4 == 0 else 0 for i in range(32)]
    manifest = make_manifest(labels)
    # a strong planted signal keeps every fold clear of the early loss plateau
    samples = blob_samples(32, 11, slices=1, pos_every=4, amp=20.0)
    data = {f"S{i:04d}": [s] for i, s in enumerate(samples)}
    return manifest, data


HP = HyperParams(2e-3, 1e-4, 0.0, SchedulerSpec.cosine(10))


class TestRunCV:
    def test_separable_eight_folds(self, separable_cohort):
        manifest, data = separable_cohort
        plan = make_folds(manifest, 8, seed=0)
        res = run_cv(plan, manifest, data, "tiny-test-cnn", HP, TrainBudget.cv(), seed=0, view="sagittal")
        assert len(res.fold_aucs) == 8 and min(res.fold_aucs) >= 0.95
        assert res.plan_digest == plan.digest()

    def test_degenerate_fold_named(self, separable_cohort):
        manifest, data = separable_cohort
        plan = make_folds(manifest, 8, seed=0)
        fold0_pos = [s.study_id for s in manifest if s.label == 1 and plan.fold_of[s.shoulder_id] == 0]
        pruned = {k: v for k, v in data.items() if k not in fold0_pos}
        with pytest.raises(FoldDegeneracyError) as exc:
            run_cv(plan, manifest, pruned, "tiny-test-cnn", HP, TrainBudget(1, 1))
        assert exc.value.fold == 0


class TestRetrain:
    def test_bundle(self, separable_cohort, tmp_path):
        manifest, data = separable_cohort
        parts = {s.shoulder_id: ("val" if i in (0, 1, 2, 3, 4, 5) else "train") for i, s in enumerate(manifest)}
        split = SplitAssignment(parts, modality="mri")
        hp = HyperParams(1.60e-6, 4.47e-4, 0.059, SchedulerSpec.cosine(10))
        cv = CVResult.from_folds("coronal", "mri", "tiny-test-cnn", [0.7, 0.8])
        decision = select_architecture([cv])
        b = retrain_final(decision, split, manifest, data, hp, tmp_path, TrainBudget(3, 2), seed=1,
                          provenance={"config_hash": "h"})
        assert b.train["epochs_run"] <= 3
        assert (b.architecture, b.hp.learning_rate, b.hp.scheduler.kind) == ("tiny-test-cnn", 1.60e-6, "cosine_annealing")
        header = read_header(b.checkpoint)
        assert header["view"] == "coronal" and header["config_hash"] == "h"
        back = ModelBundle.read(b.save(tmp_path / "b.json"))
        assert back.to_dict() == json.loads(json.dumps(b.to_dict()))

    def test_final_budget(self):
        assert TrainBudget.final().max_epochs == 100
