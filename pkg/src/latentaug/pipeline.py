"""End-to-end orchestration: scenario -> stage-1 adapter training ->
stage-2 diffusion in the working latent space -> augmentation -> stage-3
fine-tuning -> evaluation of both models on the untouched target test split.

Everything a run produces lands in its output directory: the scenario'd
dataset, both adapter checkpoints, the denoiser checkpoint, the augmented
set, metric CSVs and a JSON report.  Reports are byte-stable for a fixed
(config, seed) apart from the timings block.
"""

from __future__ import annotations

import dataclasses
import json
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapter import AdapterModel, TrainConfig, build_adapter, finetune_stage3, predict, tap_latent, train_stage1
from .checkpoint import checkpoint_id, write_checkpoint
from .condition import ConditionSource
from .diffusion import DiffTrainConfig, NoiseSchedule, train_diffusion
from .errors import InsufficientSupport, InvalidConfig, LatentAugError
from .metrics import MetricsReport, compute_metrics
from .rng import stream
from .sampler import AugmentationSet, SamplerConfig, generate_set
from .store import (
    LatentDataset,
    ScenarioSpec,
    SyntheticSpec,
    apply_scenario,
    make_synthetic,
    read_dataset,
    write_dataset,
)

SIZE_PRESETS = {
    "tiny": (64, 64),
    "small": (128, 128),
    "base": (256, 256, 256),
}

# Current pipeline stage, readable by test shims that track split access.
_STAGE = "idle"


@contextmanager
def _stage(name: str, timings: dict):
    global _STAGE
    prev, _STAGE = _STAGE, name
    t0 = time.perf_counter()
    try:
        yield
    except LatentAugError as exc:
        raise type(exc)(f"[stage {name}] {exc}") from exc
    finally:
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0
        _STAGE = prev


def derive_seed(seed: int, *tags) -> int:
    return int(stream(seed, *tags).integers(2**63))


@dataclass
class PipelineConfig:
    dataset_path: str | None = None
    synthetic: SyntheticSpec | None = None
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    tap_layer: int = 0
    adapter_hidden: tuple = (512, 256)
    stage1: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=100))
    stage3: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=100))
    diffusion: DiffTrainConfig = field(default_factory=lambda: DiffTrainConfig(iterations=20_000))
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    denoiser_hidden: tuple = (128, 128)
    cond_width: int = 64
    cond_embed_dim: int = 64
    time_dim: int = 64
    condition_mode: str = "class_plus_subdomain_latent"
    semantic_path: str | None = None
    semantic_key: str = "class"
    n_aug: int = 200
    aug_threshold: int = 20
    out_dir: str = "runs/out"
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "dataset_path": self.dataset_path,
            "synthetic": self.synthetic.to_dict() if self.synthetic else None,
            "scenario": self.scenario.to_dict(),
            "tap_layer": self.tap_layer,
            "adapter_hidden": list(self.adapter_hidden),
            "stage1": self.stage1.to_dict(),
            "stage3": self.stage3.to_dict(),
            "diffusion": self.diffusion.to_dict(),
            "sampler": self.sampler.to_dict(),
            "denoiser_hidden": list(self.denoiser_hidden),
            "cond_width": self.cond_width,
            "cond_embed_dim": self.cond_embed_dim,
            "time_dim": self.time_dim,
            "condition_mode": self.condition_mode,
            "semantic_path": self.semantic_path,
            "semantic_key": self.semantic_key,
            "n_aug": self.n_aug,
            "aug_threshold": self.aug_threshold,
            "out_dir": self.out_dir,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        kwargs = dict(d)
        if kwargs.get("synthetic"):
            kwargs["synthetic"] = SyntheticSpec.from_dict(kwargs["synthetic"])
        if "scenario" in kwargs and isinstance(kwargs["scenario"], dict):
            kwargs["scenario"] = ScenarioSpec.from_dict(kwargs["scenario"])
        for key, sub in (("stage1", TrainConfig), ("stage3", TrainConfig),
                         ("diffusion", DiffTrainConfig), ("sampler", SamplerConfig)):
            if key in kwargs and isinstance(kwargs[key], dict):
                kwargs[key] = sub.from_dict(kwargs[key])
        for key in ("adapter_hidden", "denoiser_hidden"):
            if key in kwargs and kwargs[key] is not None:
                kwargs[key] = tuple(kwargs[key])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(kwargs) - known
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        return cls(**kwargs)


@dataclass
class RunReport:
    seed: int
    config: dict
    baseline: MetricsReport
    gelda: MetricsReport
    checkpoints: dict
    aug_classes: list
    timings: dict
    history: dict

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "config": self.config,
            "metrics": {"baseline": self.baseline.to_dict(), "gelda": self.gelda.to_dict()},
            "checkpoints": self.checkpoints,
            "aug_classes": list(self.aug_classes),
            "history": self.history,
            "timings": {k: round(v, 3) for k, v in self.timings.items()},
        }

    def comparable_dict(self) -> dict:
        d = self.to_dict()
        d.pop("timings")
        return d


def load_pipeline_dataset(cfg: PipelineConfig) -> LatentDataset:
    if cfg.dataset_path:
        return read_dataset(cfg.dataset_path)
    if cfg.synthetic:
        return make_synthetic(cfg.synthetic)
    raise InvalidConfig("config needs dataset_path or synthetic")


def augmentation_classes(cfg: PipelineConfig, dataset: LatentDataset) -> list[int]:
    """Which classes to synthesize for the target subdomain: all-but-kept for
    zero-shot, all for k-shot, below-threshold classes otherwise."""
    scenario = cfg.scenario
    c = dataset.manifest.c
    if scenario.kind == "zero_shot":
        return [i for i in range(c) if i != scenario.kept_class]
    if scenario.kind == "k_shot":
        return list(range(c))
    counts = dataset.train_class_counts()
    return [i for i in range(c) if counts[i] < cfg.aug_threshold]


def _adapter_header(model: AdapterModel) -> np.ndarray:
    return np.array([1, len(model.dims), *model.dims, model.frozen_prefix], dtype=np.float32)


def _save_adapter(model: AdapterModel, path) -> str:
    write_checkpoint(path, model.params.state_arrays(), header=_adapter_header(model))
    return checkpoint_id(path)


def _target_test_arrays(dataset: LatentDataset, scenario: ScenarioSpec):
    vectors, classes, subdomains = dataset.arrays_for_split("test")
    if scenario.kind in ("zero_shot", "k_shot"):
        mask = subdomains == scenario.target_subdomain
        return vectors[mask], classes[mask]
    return vectors, classes


def _evaluate(model: AdapterModel, dataset: LatentDataset, cfg: PipelineConfig) -> MetricsReport:
    vectors, labels = _target_test_arrays(dataset, cfg.scenario)
    preds = predict(model, vectors)
    scenario = cfg.scenario
    if scenario.kind in ("zero_shot", "k_shot"):
        train_counts = dataset.train_class_counts(subdomain=scenario.target_subdomain)
        excluded = scenario.kept_class if scenario.kind == "zero_shot" else None
    else:
        train_counts = dataset.train_class_counts()
        excluded = None
    return compute_metrics(preds, labels, train_counts, excluded_class=excluded)


def build_condition_source(cfg: PipelineConfig, dataset: LatentDataset, pools=None) -> ConditionSource:
    semantic = None
    if cfg.condition_mode == "class_plus_semantic_vector":
        if not cfg.semantic_path:
            raise InvalidConfig("condition mode needs semantic_path")
        sem_ds = read_dataset(cfg.semantic_path)
        order = np.argsort(sem_ds.class_ids, kind="stable")
        semantic = sem_ds.vectors[order]
    return ConditionSource(
        mode=cfg.condition_mode,
        n_classes=dataset.manifest.c,
        embed_dim=cfg.cond_embed_dim,
        width=cfg.cond_width,
        subdomain_pool=pools,
        semantic_vectors=semantic,
        semantic_key=cfg.semantic_key,
    )


def run_gelda(cfg: PipelineConfig, dataset: LatentDataset | None = None) -> RunReport:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings: dict = {}
    checkpoints: dict = {}
    history: dict = {}

    with _stage("load", timings):
        if dataset is None:
            dataset = load_pipeline_dataset(cfg)
        scenariod = apply_scenario(dataset, cfg.scenario)
        write_dataset(scenariod, out / "dataset.geld")

    with _stage("stage1", timings):
        s1 = dataclasses.replace(cfg.stage1, seed=derive_seed(cfg.seed, "stage1"))
        model = build_adapter(
            scenariod.manifest.m,
            scenariod.manifest.c,
            hidden=cfg.adapter_hidden,
            seed=derive_seed(cfg.seed, "adapter_init"),
        )
        model, hist1 = train_stage1(model, scenariod, s1)
        history["stage1"] = hist1[-1]["loss"]
        checkpoints["adapter_stage1"] = _save_adapter(model, out / "adapter_stage1.gelw")

    with _stage("evaluate_baseline", timings):
        baseline = _evaluate(model, scenariod, cfg)

    l = cfg.tap_layer
    scenario = cfg.scenario
    target = scenario.target_subdomain if scenario.kind in ("zero_shot", "k_shot") else None
    aug_classes = augmentation_classes(cfg, scenariod)
    aug = None

    if cfg.n_aug > 0 and aug_classes:
        with _stage("stage2", timings):
            train_vec, train_cls, train_sub = scenariod.arrays_for_split("train")
            latents = tap_latent(model, train_vec, l)
            pools = None
            if cfg.condition_mode == "class_plus_subdomain_latent":
                pools = [
                    latents[train_sub == k] for k in range(scenariod.manifest.k)
                ]
            source = build_condition_source(cfg, scenariod, pools)
            dcfg = dataclasses.replace(cfg.diffusion, seed=derive_seed(cfg.seed, "stage2"))
            denoiser, hist2 = train_diffusion(
                latents,
                train_cls,
                train_sub,
                source,
                dcfg,
                hidden=cfg.denoiser_hidden,
                time_dim=cfg.time_dim,
            )
            history["stage2"] = {
                "final_loss": hist2["loss_curve"][-1]["loss"],
                "null_fraction": round(hist2["null_fraction"], 5),
            }
            sched = denoiser.schedule
            header = np.array(
                [1, denoiser.input_width, sched.sigma_min, sched.sigma_max, sched.sigma_data],
                dtype=np.float32,
            )
            write_checkpoint(out / "denoiser.gelw", denoiser.params.state_arrays(), header=header)
            checkpoints["denoiser"] = checkpoint_id(out / "denoiser.gelw")

        with _stage("generate", timings):
            scfg = dataclasses.replace(cfg.sampler, seed=derive_seed(cfg.seed, "generate"))
            aug = generate_set(
                denoiser,
                aug_classes,
                cfg.n_aug,
                target,
                scfg,
                seed=scfg.seed,
                model_id=checkpoints["denoiser"],
            )
            aug_ds = aug.to_dataset(
                scenariod.manifest.c,
                scenariod.manifest.k,
                class_names=scenariod.manifest.class_names,
                subdomain_names=scenariod.manifest.subdomain_names,
            )
            write_dataset(aug_ds, out / "augmented.geld")

    with _stage("stage3", timings):
        if target is not None:
            gt_scope = scenariod.select(scenariod.subdomain_ids == target)
        else:
            gt_scope = scenariod
        gt_vec, gt_cls, gt_sub = gt_scope.arrays_for_split("train")
        gt_latents = LatentDataset.from_arrays(
            tap_latent(model, gt_vec, l) if len(gt_vec) else np.zeros((0, model.dims[l]), np.float32),
            gt_cls,
            gt_sub,
            np.zeros(len(gt_cls), dtype=np.uint8),
            c=scenariod.manifest.c,
            k=scenariod.manifest.k,
            class_names=scenariod.manifest.class_names,
            subdomain_names=scenariod.manifest.subdomain_names,
            source_tag=f"tapped(layer={l})",
        )
        s3 = dataclasses.replace(cfg.stage3, seed=derive_seed(cfg.seed, "stage3"))
        tuned, hist3 = finetune_stage3(model, l, gt_latents, aug, s3)
        history["stage3"] = hist3[-1]["loss"]
        checkpoints["adapter_gelda"] = _save_adapter(tuned, out / "adapter_gelda.gelw")

    with _stage("evaluate_gelda", timings):
        gelda_metrics = _evaluate(tuned, scenariod, cfg)

    report = RunReport(
        seed=cfg.seed,
        config=cfg.to_dict(),
        baseline=baseline,
        gelda=gelda_metrics,
        checkpoints=checkpoints,
        aug_classes=aug_classes,
        timings=timings,
        history=history,
    )
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "metrics_baseline.csv").write_text(baseline.to_csv(scenariod.manifest.class_names))
    (out / "metrics_gelda.csv").write_text(gelda_metrics.to_csv(scenariod.manifest.class_names))
    return report


def latent_fill_augment(
    latents: np.ndarray,
    class_id: int,
    n: int,
    noise_std: float,
    rng,
    subdomain_id: int = 0,
) -> AugmentationSet:
    """Interpolation-plus-noise baseline: convex mixes of same-class latent
    pairs.  Needs at least two ground-truth latents, which is exactly why it
    cannot run in a zero-shot cell."""
    latents = np.atleast_2d(np.asarray(latents, dtype=np.float32))
    if len(latents) < 2:
        raise InsufficientSupport(
            f"latent filling needs >= 2 ground-truth latents, got {len(latents)}"
        )
    m = latents.shape[1]
    outs = np.empty((n, m), dtype=np.float32)
    for i in range(n):
        a, b = rng.choice(len(latents), size=2, replace=False)
        lam = rng.random()
        sample = lam * latents[a] + (1 - lam) * latents[b]
        if noise_std > 0:
            sample = sample + noise_std * rng.standard_normal(m)
        outs[i] = sample
    return AugmentationSet(
        vectors=outs if n else np.zeros((0, m), np.float32),
        class_ids=np.full(n, class_id, dtype=np.int64),
        subdomain_ids=np.full(n, subdomain_id, dtype=np.int64),
        provenance={"method": "latent_filling", "noise_std": noise_std},
    )


SWEEP_AXES = ("denoiser_size", "n_aug", "tap_layer")


def sweep(cfg: PipelineConfig, axis: str, values) -> list[dict]:
    """One full run per value; per-value seeds derive from the base seed.
    Failures are recorded and the sweep continues."""
    if axis not in SWEEP_AXES:
        raise InvalidConfig(f"unknown sweep axis {axis!r}")
    values = list(values)
    if not values:
        raise InvalidConfig("sweep needs at least one value")
    results = []
    base_out = Path(cfg.out_dir)
    rows = ["axis,value,baseline_ua,gelda_ua,gelda_wa,gelda_macro_f1,error"]
    for i, v in enumerate(values):
        sub = dataclasses.replace(cfg)
        if axis == "n_aug":
            sub.n_aug = int(v)
        elif axis == "tap_layer":
            sub.tap_layer = int(v)
        else:
            sub.denoiser_hidden = SIZE_PRESETS[v] if isinstance(v, str) else tuple(v)
        sub.seed = derive_seed(cfg.seed, "sweep", i)
        sub.out_dir = str(base_out / f"{axis}_{v}")
        try:
            report = run_gelda(sub)
            results.append({"value": v, "report": report})
            rows.append(
                f"{axis},{v},{report.baseline.ua:.2f},{report.gelda.ua:.2f},"
                f"{report.gelda.wa:.2f},{report.gelda.macro_f1:.2f},"
            )
        except LatentAugError as exc:
            results.append({"value": v, "error": str(exc)})
            rows.append(f"{axis},{v},,,,,{type(exc).__name__}: {exc}")
    base_out.mkdir(parents=True, exist_ok=True)
    (base_out / "sweep.csv").write_text("\n".join(rows) + "\n")
    return results
