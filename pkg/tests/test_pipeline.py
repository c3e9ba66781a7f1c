import dataclasses
import json

import numpy as np
import pytest

from conftest import tiny_pipeline_config
from latentaug import pipeline as pipeline_mod
from latentaug.checkpoint import read_checkpoint
from latentaug.errors import InsufficientSupport, InvalidConfig
from latentaug.pipeline import (
    PipelineConfig,
    augmentation_classes,
    latent_fill_augment,
    run_gelda,
    sweep,
)
from latentaug.rng import stream
from latentaug.store import LatentDataset, ScenarioSpec


class StubRng:
    """Deterministic pair/lambda source for latent-fill corner cases."""

    def __init__(self, pair, lam):
        self.pair = np.array(pair)
        self.lam = lam

    def choice(self, n, size, replace):
        return self.pair

    def random(self):
        return self.lam

    def standard_normal(self, m):
        return np.zeros(m)


class TestLatentFill:
    def test_convexity_with_zero_noise(self):
        rng = stream(0, "lf")
        latents = rng.standard_normal((6, 5)).astype(np.float32)
        aug = latent_fill_augment(latents, 1, 40, 0.0, stream(1, "lf"))
        lo, hi = latents.min(axis=0), latents.max(axis=0)
        assert np.all(aug.vectors >= lo - 1e-6) and np.all(aug.vectors <= hi + 1e-6)

    def test_counts_and_labels(self):
        latents = np.ones((3, 4), np.float32)
        aug = latent_fill_augment(latents, 2, 5, 0.1, stream(2, "lf"), subdomain_id=1)
        assert len(aug) == 5
        assert set(aug.class_ids.tolist()) == {2}
        assert set(aug.subdomain_ids.tolist()) == {1}

    def test_lambda_endpoints_reproduce_gt(self):
        latents = np.array([[1.0, 2.0], [5.0, -3.0]], np.float32)
        a = latent_fill_augment(latents, 0, 1, 0.0, StubRng([0, 1], 1.0))
        assert np.array_equal(a.vectors[0], latents[0])
        b = latent_fill_augment(latents, 0, 1, 0.0, StubRng([0, 1], 0.0))
        assert np.array_equal(b.vectors[0], latents[1])

    def test_single_latent_insufficient(self):
        with pytest.raises(InsufficientSupport):
            latent_fill_augment(np.ones((1, 4), np.float32), 0, 3, 0.0, stream(3, "lf"))


class TestRunGelda:
    def test_report_structure_and_artifacts(self, tmp_path):
        cfg = tiny_pipeline_config(tmp_path)
        report = run_gelda(cfg)
        out = tmp_path / "run"
        for artifact in (
            "dataset.geld", "adapter_stage1.gelw", "denoiser.gelw",
            "augmented.geld", "adapter_gelda.gelw", "report.json",
            "metrics_baseline.csv", "metrics_gelda.csv",
        ):
            assert (out / artifact).exists(), artifact
        saved = json.loads((out / "report.json").read_text())
        assert saved["metrics"]["baseline"]["ua"] == pytest.approx(report.baseline.ua)
        assert report.aug_classes == [1]

    def test_rerun_identical_except_timings(self, tmp_path):
        cfg_a = tiny_pipeline_config(tmp_path, out_dir=str(tmp_path / "a"))
        cfg_b = tiny_pipeline_config(tmp_path, out_dir=str(tmp_path / "b"))
        rep_a, rep_b = run_gelda(cfg_a), run_gelda(cfg_b)
        da, db = rep_a.comparable_dict(), rep_b.comparable_dict()
        da["config"]["out_dir"] = db["config"]["out_dir"] = ""
        assert da == db

    def test_n_aug_zero_equals_gt_only_finetune(self, tmp_path):
        from latentaug.adapter import build_adapter, finetune_stage3, predict, tap_latent, train_stage1
        from latentaug.metrics import compute_metrics
        from latentaug.pipeline import derive_seed
        from latentaug.store import apply_scenario, make_synthetic

        cfg = tiny_pipeline_config(tmp_path, n_aug=0)
        report = run_gelda(cfg)
        assert "denoiser" not in report.checkpoints

        # replay the same stages by hand with the derived seeds
        ds = apply_scenario(make_synthetic(cfg.synthetic), cfg.scenario)
        model = build_adapter(4, 2, cfg.adapter_hidden, seed=derive_seed(cfg.seed, "adapter_init"))
        s1 = dataclasses.replace(cfg.stage1, seed=derive_seed(cfg.seed, "stage1"))
        model, _ = train_stage1(model, ds, s1)
        target = ds.select(ds.subdomain_ids == cfg.scenario.target_subdomain)
        vec, cls, sub = target.arrays_for_split("train")
        gt = LatentDataset.from_arrays(
            vec, cls, sub, np.zeros(len(cls), np.uint8), c=2, k=2
        )
        s3 = dataclasses.replace(cfg.stage3, seed=derive_seed(cfg.seed, "stage3"))
        tuned, _ = finetune_stage3(model, 0, gt, None, s3)
        tv, ty, tsub = ds.arrays_for_split("test")
        mask = tsub == cfg.scenario.target_subdomain
        rep = compute_metrics(
            predict(tuned, tv[mask]), ty[mask],
            ds.train_class_counts(subdomain=cfg.scenario.target_subdomain),
            excluded_class=cfg.scenario.kept_class,
        )
        assert rep.ua == pytest.approx(report.gelda.ua)

    def test_frozen_prefix_across_pipeline(self, tmp_path):
        cfg = tiny_pipeline_config(tmp_path, tap_layer=1, adapter_hidden=(8,))
        run_gelda(cfg)
        out = tmp_path / "run"
        stage1, _ = read_checkpoint(out / "adapter_stage1.gelw")
        tuned, _ = read_checkpoint(out / "adapter_gelda.gelw")
        for name in ("layer0.w", "layer0.b"):
            assert np.array_equal(
                stage1[name].view(np.uint32), tuned[name].view(np.uint32)
            )
        assert not np.array_equal(stage1["layer1.w"], tuned["layer1.w"])

    def test_test_split_never_read_by_training(self, tmp_path, monkeypatch):
        accesses = []
        original = LatentDataset.arrays_for_split

        def tracking(self, split):
            accesses.append((pipeline_mod._STAGE, split))
            return original(self, split)

        monkeypatch.setattr(LatentDataset, "arrays_for_split", tracking)
        run_gelda(tiny_pipeline_config(tmp_path))
        test_reads = [stage for stage, split in accesses if split == "test"]
        assert test_reads, "evaluation must read the test split"
        assert all(stage.startswith("evaluate") for stage in test_reads)
        train_reads = [stage for stage, split in accesses if split == "train"]
        assert all(not stage.startswith("evaluate") for stage in train_reads)

    def test_stage_error_tagged(self, tmp_path):
        cfg = tiny_pipeline_config(tmp_path, tap_layer=5)  # invalid tap layer
        with pytest.raises(Exception, match="stage"):
            run_gelda(cfg)


class TestAugmentationClasses:
    def test_zero_shot_excludes_kept(self, tmp_path):
        cfg = tiny_pipeline_config(tmp_path)
        from latentaug.store import make_synthetic

        ds = make_synthetic(cfg.synthetic)
        assert augmentation_classes(cfg, ds) == [1]

    def test_k_shot_all_classes(self, tmp_path):
        cfg = tiny_pipeline_config(
            tmp_path, scenario=ScenarioSpec(kind="k_shot", target_subdomain=1, shots=1)
        )
        from latentaug.store import apply_scenario, make_synthetic

        ds = apply_scenario(make_synthetic(cfg.synthetic), cfg.scenario)
        assert augmentation_classes(cfg, ds) == [0, 1]

    def test_none_uses_threshold(self, tmp_path):
        cfg = tiny_pipeline_config(
            tmp_path, scenario=ScenarioSpec(kind="none"), aug_threshold=30
        )
        from latentaug.store import make_synthetic

        ds = make_synthetic(cfg.synthetic)  # 24 train per class < 30
        assert augmentation_classes(cfg, ds) == [0, 1]


class TestSweep:
    def test_n_aug_axis(self, tmp_path):
        cfg = tiny_pipeline_config(tmp_path, out_dir=str(tmp_path / "sweep"))
        results = sweep(cfg, "n_aug", [0, 2])
        assert len(results) == 2
        assert all("report" in r for r in results)
        csv_text = (tmp_path / "sweep" / "sweep.csv").read_text()
        assert csv_text.count("\n") == 3

    def test_failure_recorded_and_continues(self, tmp_path):
        cfg = tiny_pipeline_config(tmp_path, out_dir=str(tmp_path / "sweep"))
        results = sweep(cfg, "tap_layer", [7, 0])
        assert "error" in results[0]
        assert "report" in results[1]

    def test_unknown_axis(self, tmp_path):
        cfg = tiny_pipeline_config(tmp_path)
        with pytest.raises(InvalidConfig):
            sweep(cfg, "bogus", [1])

    def test_empty_values(self, tmp_path):
        cfg = tiny_pipeline_config(tmp_path)
        with pytest.raises(InvalidConfig):
            sweep(cfg, "n_aug", [])


class TestConfigRoundTrip:
    def test_to_from_dict(self, tmp_path):
        cfg = tiny_pipeline_config(tmp_path)
        back = PipelineConfig.from_dict(cfg.to_dict())
        assert back.to_dict() == cfg.to_dict()

    def test_unknown_key_rejected(self, tmp_path):
        cfg = tiny_pipeline_config(tmp_path)
        d = cfg.to_dict()
        d["bogus_key"] = 1
        with pytest.raises(InvalidConfig):
            PipelineConfig.from_dict(d)
