import json

import numpy as np
import pytest
import yaml

from scanpipe.cli import main
from scanpipe.errors import ConfigError, SyntheticSpecError
from scanpipe.pipeline import HOME_ENV, RunConfig, derive_seed
from scanpipe.preprocess import read_volume
from scanpipe.synth import SyntheticSpec, generate_synthetic, lesion_box


class TestSynthetic:
    def test_counts(self, tmp_path):
        m = generate_synthetic(SyntheticSpec(60, 0.3, n_slices=12, height=64, width=64, lesion_radii=(2.5, 4, 4)),
                               tmp_path)
        assert len(m) == 60 and m.positives() == 18
        assert all(set(s.views()) == {"sagittal", "axial", "coronal"} for s in m)
        assert (tmp_path / "manifest.csv").exists()

    @pytest.mark.parametrize("frac", [0.0, 1.0])
    def test_positive_fraction_bounds(self, frac, tmp_path):
        with pytest.raises(SyntheticSpecError):
            generate_synthetic(SyntheticSpec(10, frac), tmp_path)

    def test_lesion_outside_crop(self):
        with pytest.raises(SyntheticSpecError):
            SyntheticSpec(10, 0.5, lesion_center=(2.0, 80.0)).validate()

    def test_byte_identical(self, tmp_path):
        spec = SyntheticSpec(6, 0.5, views=("axial",), n_slices=6, height=48, width=48, lesion_radii=(2.5, 3, 3))
        a = generate_synthetic(spec, tmp_path / "a")
        b = generate_synthetic(spec, tmp_path / "b")
        for sa, sb in zip(a, b):
            pa, pb = a.resolve(sa.sequences[0]), b.resolve(sb.sequences[0])
            assert pa.read_bytes() == pb.read_bytes()

    def test_lesion_in_positives_only(self, tmp_path):
        m = generate_synthetic(SyntheticSpec(8, 0.5, views=("sagittal",), n_slices=6), tmp_path)
        for s in m:
            v = read_volume(m.resolve(s.sequences[0]))
            box = lesion_box(v.meta, v.voxels.shape)
            assert (box is not None) == bool(s.label)
            if box:
                t, l, b, r = box
                assert 0 <= t < b <= 224 and 0 <= l < r <= 224


class TestRunConfig:
    def test_precedence(self, tmp_path):
        (tmp_path / "c.yaml").write_text(yaml.safe_dump({"seed": 3, "cv": {"k": 4}}))
        c = RunConfig.build(tmp_path / "c.yaml", {"seed": 5}, ["cv.k=6"])
        assert c.seed == 5 and c["cv"]["k"] == 6 and c["cv"]["patience"] == 10

    def test_unknown_key(self, tmp_path):
        (tmp_path / "c.yaml").write_text(yaml.safe_dump({"cv": {"folds": 4}}))
        with pytest.raises(ConfigError):
            RunConfig.build(tmp_path / "c.yaml")

    def test_home_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv(HOME_ENV, str(tmp_path))
        assert RunConfig.build().out_dir == tmp_path.resolve() / "scanpipe-run"

    def test_workers_do_not_change_hash(self):
        assert RunConfig.build(overrides={"workers": 4}).hash() == RunConfig.build().hash()
        assert RunConfig.build(overrides={"seed": 1}).hash() != RunConfig.build().hash()

    def test_derived_seeds_stable_and_distinct(self):
        assert derive_seed(0, "cv", "mra") == derive_seed(0, "cv", "mra") != derive_seed(0, "cv", "mri")


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """One-view run on a small generated cohort, driven through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    cfg = {
        "manifest": "synthetic/manifest.csv",
        "out_dir": "run",
        "views": ["sagittal"],
        "augment": {"multiplier": 1},
        "tune": {"R": 2, "eta": 2, "n_trials": 2, "patience": 2, "search": {"learning_rate": [5e-4, 2e-3]}},
        "cv": {"k": 2, "max_epochs": 2, "patience": 2},
        "retrain": {"max_epochs": 2, "patience": 2},
        "evaluate": {"bootstrap_iterations": 50},
        "synth": {"out_dir": "synthetic", "views": ["sagittal"], "n_slices": 6, "lesion_delta": 2.0},
    }
    path = root / "config.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert main(["synth", "--config", str(path), "--n-studies", "40", "--positive-fraction", "0.3"]) == 0
    for stage in ("ingest", "split", "tune"):
        assert main([stage, "--config", str(path)]) == 0
    return root, path


class TestCLI:
    def test_evaluate_before_retrain(self, run, capsys):
        _, cfg = run
        assert main(["evaluate", "--config", str(cfg)]) == 3
        assert "retrain" in capsys.readouterr().err

    def test_cv_before_tune_in_fresh_dir(self, run, tmp_path):
        _, cfg = run
        assert main(["cv", "--config", str(cfg), "--out", str(tmp_path / "elsewhere")]) == 3

    def test_bad_config(self, tmp_path):
        (tmp_path / "c.yaml").write_text("cv: [1, 2")
        assert main(["split", "--config", str(tmp_path / "c.yaml")]) == 2
        assert main(["split", "--config", str(tmp_path / "missing.yaml")]) == 2

    def test_bad_override(self, run):
        assert main(["split", "--config", str(run[1]), "--set", "views=[lateral]"]) == 2

    def test_full_chain_and_rerun(self, run, capsys):
        root, cfg = run
        for stage in ("cv", "select", "retrain", "evaluate"):
            assert main([stage, "--config", str(cfg)]) == 0
        report = root / "run" / "mra" / "evaluate" / "report.json"
        first = report.read_bytes()
        body = json.loads(first)
        assert body["provenance"]["config_hash"] == RunConfig.build(cfg).hash()
        assert set(body["provenance"]["inputs"]) >= {"split", "stats", "bundle_sagittal", "checkpoint_sagittal"}
        assert body["reports"]["test"]["ensemble"]["bootstrap"]["iterations"] == 50

        assert main(["evaluate", "--config", str(cfg), "--workers", "2"]) == 0
        assert report.read_bytes() == first

        # stored thresholds reproduce the stored decisions
        thr = json.loads((report.parent / "thresholds.json").read_text())["threshold"]
        preds = json.loads((report.parent / "predictions.json").read_text())["test"]
        counts = body["reports"]["test"]["ensemble"]["counts"]
        tp = sum(p["ensemble"] > thr and p["label"] == 1 for p in preds)
        assert tp == counts["tp"]

        capsys.readouterr()
        sid = preds[0]["study_id"]
        out = root / "cam.png"
        assert main(["gradcam", "--config", str(cfg), "--study", sid, "--view", "sagittal", "--slice", "2",
                     "--out", str(out)]) == 0
        meta = json.loads(out.with_suffix(".json").read_text())
        assert meta["target_layer"] == "tiny-test-cnn:conv3" and meta["shape"] == [224, 224]
        assert "provenance" in meta

    def test_stage_isolation(self, run):
        root, cfg = run
        split = root / "run" / "mra" / "split.json"
        before = split.read_bytes()
        (root / "run" / "mra" / "select" / "sagittal.json").unlink(missing_ok=True)
        assert main(["select", "--config", str(cfg)]) == 0
        assert split.read_bytes() == before

    def test_tune_resumes(self, run):
        root, cfg = run
        ledger = root / "run" / "mra" / "tune" / "sagittal" / "tiny-test-cnn.ledger.jsonl"
        before = ledger.read_text()
        assert main(["tune", "--config", str(cfg)]) == 0
        assert ledger.read_text() == before


def test_volume_roundtrip_dtype(tmp_path):
    m = generate_synthetic(SyntheticSpec(4, 0.5, views=("coronal",), n_slices=6, height=48, width=48,
                                         lesion_radii=(2.5, 3, 3)), tmp_path)
    v = read_volume(m.resolve(next(iter(m)).sequences[0]))
    assert v.voxels.shape == (6, 48, 48) and np.isfinite(v.voxels).all()
