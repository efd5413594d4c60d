import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scanpipe.errors import CropError, DegenerateStatsError, PartitionLeakError, ShapeError, UnknownSequenceTypeError
from scanpipe.preprocess import (
    AugmentPolicy,
    SequenceVolume,
    apply_standardization,
    augment,
    augment_copy,
    center_crop,
    crop_offsets,
    fit_standardization,
    minmax_rescale,
    preprocess,
    read_volume,
    resize_volume,
    sidecar_path,
    write_volume,
)


def vol(shape, fill=None, seq="T1", fs=False, stage="raw", partition=None, rng=None):
    if fill is not None:
        x = np.full(shape, fill, dtype=np.float32)
    else:
        x = (rng or np.random.default_rng(0)).normal(100, 20, shape).astype(np.float32)
    return SequenceVolume(x, "sagittal", seq, fs, stage, partition)


class TestResizeCrop:
    @pytest.mark.parametrize("shape", [(24, 512, 512), (10, 400, 400), (16, 320, 260)])
    def test_resize_shape(self, shape):
        out = resize_volume(vol((shape[0], 8, 8), 1.0).with_voxels(np.zeros(shape, np.float32), "raw"))
        assert out.shape == (shape[0], 400, 400) and out.stage == "resized"

    def test_resize_identity_size_keeps_values(self, rng):
        v = vol((3, 400, 400), rng=rng)
        np.testing.assert_array_equal(resize_volume(v).voxels, v.voxels)

    def test_resize_idempotent(self, rng):
        once = resize_volume(vol((2, 300, 310), rng=rng))
        np.testing.assert_array_equal(resize_volume(once).voxels, once.voxels)

    def test_resize_rejects_empty(self):
        with pytest.raises(ShapeError):
            resize_volume(vol((0, 10, 10), 1.0))

    def test_crop_offsets_and_content(self, rng):
        v = vol((24, 400, 400), rng=rng).with_voxels(rng.random((24, 400, 400)).astype(np.float32), "resized")
        assert crop_offsets(400, 400) == (88, 88)
        out = center_crop(v)
        assert out.shape == (24, 224, 224)
        np.testing.assert_array_equal(out.voxels, v.voxels[:, 88:312, 88:312])

    def test_crop_odd_offset_rounds_down(self):
        assert crop_offsets(225, 227) == (0, 1)

    def test_crop_identity(self, rng):
        v = vol((5, 224, 224), rng=rng)
        np.testing.assert_array_equal(center_crop(v).voxels, v.voxels)

    def test_crop_too_small(self):
        with pytest.raises(CropError):
            center_crop(vol((5, 200, 200), 1.0))

    def test_shape_chain(self, rng):
        for n in (1, 4, 9):
            assert preprocess(vol((n, 137, 512), rng=rng)).shape == (n, 224, 224)


class TestStandardization:
    def test_pooled_two_constant_volumes(self):
        stats = fit_standardization([vol((2, 3, 3), 2.0), vol((2, 3, 3), 4.0)])
        mean, std = stats.stats[("T1", False)]
        assert mean == pytest.approx(3.0) and std == pytest.approx(1.0)

    def test_single_volume_matches_numpy(self, rng):
        v = vol((3, 16, 16), rng=rng)
        mean, std = fit_standardization([v]).stats[("T1", False)]
        x = v.voxels.astype(np.float64)
        assert mean == pytest.approx(x.mean(), rel=1e-12) and std == pytest.approx(x.std(), rel=1e-9)

    def test_keys_separate_fat_sat(self, rng):
        stats = fit_standardization([vol((2, 4, 4), rng=rng), vol((2, 4, 4), seq="T1", fs=True, rng=rng)])
        assert set(stats.stats) == {("T1", False), ("T1", True)}

    def test_degenerate(self):
        with pytest.raises(DegenerateStatsError):
            fit_standardization([vol((2, 4, 4), 0.0), vol((1, 4, 4), 0.0)])

    def test_rejects_non_train_partition(self, rng):
        with pytest.raises(PartitionLeakError):
            fit_standardization([vol((2, 4, 4), rng=rng, partition="test")])

    def test_bright_voxel_endpoints(self):
        stats = fit_standardization([vol((1, 4, 4), 2.0), vol((1, 4, 4), 4.0)])
        x = np.full((1, 4, 4), 3.0, np.float32)
        x[0, 1, 2] = 9.0
        out = apply_standardization(vol((1, 4, 4), 0).with_voxels(x, "cropped"), stats)
        assert out.voxels.min() == 0.0 and out.voxels.max() == 1.0 and out.stage == "standardized"

    def test_constant_maps_to_zero(self):
        stats = fit_standardization([vol((1, 4, 4), 2.0), vol((1, 4, 4), 4.0)])
        out = apply_standardization(vol((2, 4, 4), 7.0), stats)
        assert not out.voxels.any()

    def test_unknown_key(self, rng):
        stats = fit_standardization([vol((2, 4, 4), rng=rng)])
        with pytest.raises(UnknownSequenceTypeError):
            apply_standardization(vol((2, 4, 4), rng=rng, seq="STIR"), stats)
        out = apply_standardization(vol((2, 4, 4), rng=rng, seq="STIR"), stats, fallback_to_global=True)
        assert 0.0 <= out.voxels.min() and out.voxels.max() <= 1.0

    def test_stats_round_trip(self, rng):
        stats = fit_standardization([vol((2, 4, 4), rng=rng), vol((2, 4, 4), seq="PD", fs=True, rng=rng)])
        again = type(stats).from_dict(json.loads(json.dumps(stats.to_dict())))
        assert dict(again.stats) == dict(stats.stats)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(-1e3, 1e3), st.floats(0.1, 1e3), st.integers(0, 2**16))
    def test_range_property(self, shift, scale, seed):
        r = np.random.default_rng(seed)
        train = vol((2, 6, 6), rng=r)
        stats = fit_standardization([train])
        other = (r.normal(shift, scale, (3, 6, 6))).astype(np.float32)
        out = apply_standardization(train.with_voxels(other, "cropped"), stats)
        assert out.voxels.min() >= 0.0 and out.voxels.max() <= 1.0


class TestAugment:
    def _std(self, rng):
        return SequenceVolume(rng.random((3, 32, 32)).astype(np.float32), "axial", "PD", True, "standardized")

    @pytest.mark.parametrize("policy,count", [(AugmentPolicy.finetune(), 10), (AugmentPolicy.pretrain(), 5)])
    def test_multiplier(self, rng, policy, count):
        out = augment(self._std(rng), policy)
        assert len(out) == count
        assert all(o.shape == (3, 32, 32) and o.stage == "augmented" for o in out)
        assert all(o.voxels.min() >= 0 and o.voxels.max() <= 1 for o in out)

    def test_deterministic(self, rng):
        v = self._std(rng)
        a = augment(v, AugmentPolicy(multiplier=3, seed=7))
        b = augment(v, AugmentPolicy(multiplier=3, seed=7))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.voxels, y.voxels)

    def test_rigid_across_slices(self):
        # identical slices stay identical when noise is off
        base = np.random.default_rng(2).random((1, 24, 24)).astype(np.float32)
        x = np.repeat(base, 4, axis=0)
        y = augment_copy(x, AugmentPolicy(multiplier=1, noise_sigma=0.0, seed=3), 0)
        for s in y[1:]:
            np.testing.assert_array_equal(s, y[0])

    def test_identity_policy(self, rng):
        x = rng.random((2, 16, 16)).astype(np.float32)
        p = AugmentPolicy(1, 0.0, 0.0, (1.0, 1.0), 0.0, 0.0, 0.0)
        np.testing.assert_allclose(augment_copy(x, p, 0), x, atol=1e-6)

    def test_requires_standardized(self, rng):
        with pytest.raises(ValueError):
            augment(vol((2, 8, 8), rng=rng), AugmentPolicy(multiplier=1))

    @pytest.mark.parametrize("kw", [{"multiplier": 0}, {"rotation_deg": -1.0}, {"hflip_p": 1.5}])
    def test_policy_validation(self, kw):
        with pytest.raises(ValueError):
            AugmentPolicy(**kw)


class TestVolumeIO:
    def test_round_trip(self, tmp_path, rng):
        v = SequenceVolume(rng.random((3, 5, 7)).astype(np.float32), "coronal", "STIR", False, "raw", None,
                           {"study_id": "S1"})
        p = write_volume(v, tmp_path / "v.f32")
        side = json.loads(sidecar_path(p).read_text())
        assert side["shape"] == [3, 5, 7] and side["stage"] == "raw" and side["fat_sat"] is False
        assert p.stat().st_size == 3 * 5 * 7 * 4
        back = read_volume(p)
        np.testing.assert_array_equal(back.voxels, v.voxels)
        assert (back.view, back.sequence_type, back.meta["study_id"]) == ("coronal", "STIR", "S1")

    def test_minmax_degenerate(self):
        assert not minmax_rescale(np.full((2, 2), 5.0)).any()
