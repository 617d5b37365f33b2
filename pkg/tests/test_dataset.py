import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from vesselgan.dataset import (
    BudgetPlan,
    DatasetSpec,
    SamplingConfig,
    balanced_counts,
    literature_rows,
    load_dataset,
    load_plan,
    load_stare_images,
    save_plan,
    sample_budget,
    stare_holdout_folds,
)
from vesselgan.exceptions import ConfigurationError, DatasetIntegrityError, SamplerError
from vesselgan.synthetic import synthetic_fundus

STARE_IDS = [f"im{i:04d}" for i in (1, 2, 3, 4, 5, 44, 77, 81, 82, 139, 162, 163, 235, 236, 239, 240, 255, 291, 319, 324)]
SMALL = SamplingConfig(unlabeled_pool=40)


class TestFolds:
    def test_partition(self):
        folds = stare_holdout_folds(STARE_IDS, fold_seed=3)
        assert len(folds) == 20
        assert sorted(f.test_id for f in folds) == sorted(STARE_IDS)
        for f in folds:
            assert len(f.train_ids) == 19 and f.test_id not in f.train_ids

    def test_determinism(self):
        assert stare_holdout_folds(STARE_IDS, 5) == stare_holdout_folds(STARE_IDS, 5)
        assert stare_holdout_folds(STARE_IDS, 5) != stare_holdout_folds(STARE_IDS, 6)

    def test_wrong_count(self):
        with pytest.raises(DatasetIntegrityError):
            stare_holdout_folds(STARE_IDS[:19])


class TestSampler:
    def test_pigeonhole_example(self, small_drive):
        split = sample_budget(small_drive.train, BudgetPlan(500, 15, seed=0), sampling=SMALL)
        ids, counts = np.unique(split.labeled.source_ids.astype(str), return_counts=True)
        assert len(split.labeled) == 500 and len(ids) == 15
        assert sorted(counts.tolist()) == [33] * 10 + [34] * 5
        assert set(ids) == set(split.chosen_ids)

    def test_zero_budget(self, small_drive):
        split = sample_budget(small_drive.train, BudgetPlan(0, 3), sampling=SMALL)
        assert len(split.labeled) == 0 and len(split.unlabeled) == 40

    def test_unlabeled_pool_spans_all_images(self, small_drive):
        split = sample_budget(small_drive.train, BudgetPlan(10, 2), sampling=SamplingConfig(unlabeled_pool=60))
        assert set(split.unlabeled.source_ids) == {img.image_id for img in small_drive.train}
        assert split.unlabeled.labels is None

    def test_disjoint_and_in_fov(self, small_drive):
        split = sample_budget(small_drive.train, BudgetPlan(200, 4, seed=9), sampling=SamplingConfig(unlabeled_pool=400))
        assert not split.labeled.identities() & split.unlabeled.identities()
        fovs = {img.image_id: img.fov_mask for img in small_drive.train}
        for s, (r, c) in zip(split.labeled.source_ids, split.labeled.centers):
            assert fovs[s][r, c]

    def test_values_in_signed_range(self, small_drive):
        split = sample_budget(small_drive.train, BudgetPlan(20, 2), sampling=SMALL)
        assert split.labeled.values.min() >= -1 and split.labeled.values.max() <= 1

    def test_diversity_bound_when_budget_small(self, small_drive):
        split = sample_budget(small_drive.train, BudgetPlan(3, 10), sampling=SMALL)
        assert len(set(split.labeled.source_ids)) == 3

    @pytest.mark.parametrize("plan", [BudgetPlan(10, 0), BudgetPlan(10, 21), BudgetPlan(-1, 2)])
    def test_invalid_plans(self, small_drive, plan):
        with pytest.raises(ConfigurationError):
            sample_budget(small_drive.train, plan, sampling=SMALL)

    def test_budget_beyond_admissible(self):
        imgs = [synthetic_fundus(48, seed=i, image_id=f"i{i}") for i in range(2)]
        with pytest.raises(SamplerError):
            sample_budget(imgs, BudgetPlan(5, 2), sampling=SamplingConfig(unlabeled_pool=0))

    def test_plan_roundtrip(self, small_drive, tmp_path):
        split = sample_budget(small_drive.train, BudgetPlan(12, 3, seed=4), sampling=SMALL, dataset="DRIVE")
        save_plan(tmp_path / "plan.vgps", split)
        back = load_plan(tmp_path / "plan.vgps")
        assert back.plan == split.plan and back.chosen_ids == split.chosen_ids and back.dataset == "DRIVE"
        np.testing.assert_array_equal(back.labeled.values, split.labeled.values)
        np.testing.assert_array_equal(back.labeled.labels, split.labeled.labels)
        np.testing.assert_array_equal(back.unlabeled.values, split.unlabeled.values)
        assert back.labeled.identities() == split.labeled.identities()
        assert back.unlabeled.identities() == split.unlabeled.identities()

    def test_plan_rejects_other_files(self, tmp_path):
        (tmp_path / "x").write_bytes(b"hello\n")
        with pytest.raises(ConfigurationError):
            load_plan(tmp_path / "x")


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10000), st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_balanced_counts(total, parts, seed):
    c = balanced_counts(total, parts, np.random.default_rng(seed))
    assert c.sum() == total and c.max() - c.min() <= 1


class TestLiterature:
    def test_cited_cells(self):
        assert literature_rows("DRIVE")["Proposed (SP)"][1000] == 0.94
        assert literature_rows("stare")["U-Net"][500] == 0.86
        assert literature_rows("DRIVE")["Prior SS-GAN (CP)"][500] == 0.82

    def test_unknown(self):
        with pytest.raises(ConfigurationError):
            literature_rows("HRF")


class TestLoaders:
    def test_drive_tree(self, drive_tree):
        data = load_dataset(DatasetSpec("drive", drive_tree))
        assert len(data.train) == 20 and len(data.test) == 20
        assert data.train[0].image_id == "21_training" and data.test[0].split_tag == "test"
        assert not np.any(data.train[0].vessel_gt & ~data.train[0].fov_mask)

    def test_env_root(self, drive_tree, monkeypatch):
        monkeypatch.setenv("VESSELGAN_DATA_ROOT", str(drive_tree))
        assert len(load_dataset(DatasetSpec("DRIVE")).test) == 20

    def test_missing_root(self, monkeypatch, tmp_path):
        monkeypatch.delenv("VESSELGAN_DATA_ROOT", raising=False)
        with pytest.raises((ConfigurationError, DatasetIntegrityError)):
            load_dataset(DatasetSpec("DRIVE"))
        with pytest.raises(DatasetIntegrityError):
            load_dataset(DatasetSpec("DRIVE", tmp_path))

    def test_unknown_name(self):
        with pytest.raises(ConfigurationError):
            DatasetSpec("HRF", "/tmp")

    def test_stare_tree(self, tmp_path):
        for k, image_id in enumerate(STARE_IDS):
            img = synthetic_fundus(64, seed=k)
            Image.fromarray(img.pixels).save(tmp_path / f"{image_id}.ppm")
            Image.fromarray(img.vessel_gt.astype(np.uint8) * 255).save(tmp_path / f"{image_id}.ah.ppm")
        assert [i.image_id for i in load_stare_images(tmp_path)] == sorted(STARE_IDS)
        spec = DatasetSpec("STARE", tmp_path, fold_seed=1)
        data = load_dataset(spec, fold=4)
        assert len(data.train) == 19 and len(data.test) == 1
        assert data.test[0].image_id == stare_holdout_folds(spec)[4].test_id
