import numpy as np
import pytest

from latentaug.adapter import TrainConfig
from latentaug.diffusion import DiffTrainConfig
from latentaug.pipeline import PipelineConfig
from latentaug.sampler import SamplerConfig
from latentaug.store import ScenarioSpec, SyntheticSpec


def transfer_family_spec(seed: int, m=16, c=4, k=3, n_train=200, n_test=50) -> SyntheticSpec:
    """The synthetic zero-/few-shot transfer family used across experiments.

    Class offsets sit on orthogonal axes with pairwise distance 6.  Subdomain
    offsets (norm 3) form an equilateral triangle inside the plane spanned by
    class-difference directions, so an unseen (class, subdomain) cell aliases
    with other classes' training clusters and classifier transfer partially
    fails, while the additive structure still lets a conditional generator
    compose the missing cells.
    """
    class_offsets = np.zeros((c, m))
    for i in range(c):
        class_offsets[i, i] = 6 / np.sqrt(2)
    u1 = np.zeros(m)
    u1[0], u1[1] = 1 / np.sqrt(2), -1 / np.sqrt(2)
    u2 = np.zeros(m)
    u2[2], u2[3] = 1 / np.sqrt(2), -1 / np.sqrt(2)
    subdomain_offsets = np.zeros((k, m))
    for j in range(k):
        ang = 2 * np.pi * j / 3
        subdomain_offsets[j] = 3 * (np.cos(ang) * u1 + np.sin(ang) * u2)
    return SyntheticSpec(
        m=m, c=c, k=k,
        class_offsets=class_offsets,
        subdomain_offsets=subdomain_offsets,
        per_cell_std=1.0,
        n_train=n_train, n_test=n_test,
        seed=seed,
    )


def tiny_pipeline_config(tmp_path, seed=0, **overrides) -> PipelineConfig:
    """A seconds-scale pipeline config for plumbing tests."""
    spec = SyntheticSpec(
        m=4, c=2, k=2,
        class_offsets=np.array([[3.0, 0, 0, 0], [-3.0, 0, 0, 0]]),
        subdomain_offsets=np.array([[0, 1.0, 0, 0], [0, -1.0, 0, 0]]),
        per_cell_std=1.0,
        n_train=12, n_test=6, seed=seed + 1000,
    )
    base = dict(
        synthetic=spec,
        scenario=ScenarioSpec(kind="zero_shot", target_subdomain=1, kept_class=0),
        stage1=TrainConfig(epochs=3, batch=8),
        stage3=TrainConfig(epochs=3, batch=8),
        diffusion=DiffTrainConfig(iterations=40, batch=8),
        sampler=SamplerConfig(steps=3),
        adapter_hidden=(8,),
        denoiser_hidden=(8,),
        cond_width=6,
        cond_embed_dim=6,
        time_dim=4,
        n_aug=4,
        out_dir=str(tmp_path / "run"),
        seed=seed,
    )
    base.update(overrides)
    return PipelineConfig(**base)
