"""Sampling from a trained denoiser: sigma grids, classifier-free guidance,
stochastic/deterministic integrators, and labeled augmentation sets.

Every sample owns an rng stream derived from (seed, class, index), so a set
is reproducible and unchanged by whatever else is being generated around it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .condition import NULL, condition_batch
from .diffusion import DenoiserModel, NoiseSchedule, denoise_batch
from .errors import DimensionMismatch, InvalidConfig, NumericalError
from .nn import value_of
from .rng import stream
from .store import LatentDataset

INTEGRATORS = ("euler", "euler_ancestral", "dpmpp_sde")


@dataclass
class SamplerConfig:
    steps: int = 20
    cfg_scale: float = 1.2
    integrator: str = "euler_ancestral"
    rho: float = 7.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidConfig("steps must be >= 1")
        if self.cfg_scale < 0:
            raise InvalidConfig("cfg_scale must be >= 0")
        if self.integrator not in INTEGRATORS:
            raise InvalidConfig(f"unknown integrator {self.integrator!r}")

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "cfg_scale": self.cfg_scale,
            "integrator": self.integrator,
            "rho": self.rho,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        return cls(**{k: d[k] for k in cls().to_dict() if k in d})


@dataclass
class AugmentationSet:
    vectors: np.ndarray
    class_ids: np.ndarray
    subdomain_ids: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float32))
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        self.subdomain_ids = np.asarray(self.subdomain_ids, dtype=np.int64)
        if len(self.vectors) != len(self.class_ids) and not (
            self.vectors.size == 0 and len(self.class_ids) == 0
        ):
            raise DimensionMismatch("vectors and labels disagree in length")
        if len(self.vectors) and not np.isfinite(self.vectors).all():
            raise NumericalError("non-finite augmented vector")

    def __len__(self) -> int:
        return len(self.class_ids)

    def to_dataset(self, c: int, k: int, class_names=None, subdomain_names=None) -> LatentDataset:
        return LatentDataset.from_arrays(
            self.vectors,
            self.class_ids,
            self.subdomain_ids,
            np.zeros(len(self), dtype=np.uint8),  # augmented samples are train data
            c=c,
            k=k,
            class_names=class_names,
            subdomain_names=subdomain_names,
            source_tag=json.dumps(self.provenance, sort_keys=True),
        )


def karras_sigmas(n: int, schedule: NoiseSchedule, rho: float = 7.0) -> np.ndarray:
    """Descending rho-warped sigma grid from sigma_max to sigma_min, with a
    terminal 0 appended."""
    if n < 1:
        raise InvalidConfig("need at least one step")
    if n == 1:
        return np.array([schedule.sigma_max, 0.0])
    ramp = np.arange(n) / (n - 1)
    lo = schedule.sigma_min ** (1.0 / rho)
    hi = schedule.sigma_max ** (1.0 / rho)
    sigmas = (hi + ramp * (lo - hi)) ** rho
    return np.append(sigmas, 0.0)


def cfg_combine(d_cond: np.ndarray, d_uncond: np.ndarray, scale: float) -> np.ndarray:
    """d_uncond + scale * (d_cond - d_uncond); scales 0 and 1 are exact."""
    d_cond = np.asarray(d_cond)
    d_uncond = np.asarray(d_uncond)
    if d_cond.shape != d_uncond.shape:
        raise DimensionMismatch(f"cfg_combine: {d_cond.shape} != {d_uncond.shape}")
    if scale == 1.0:
        return d_cond
    if scale == 0.0:
        return d_uncond
    return d_uncond + scale * (d_cond - d_uncond)


def _ancestral_split(sigma_from: float, sigma_to: float) -> tuple[float, float]:
    """(sigma_down, sigma_up) for an ancestral step at eta = 1."""
    if sigma_to <= 0:
        return 0.0, 0.0
    sigma_up = min(
        sigma_to,
        sigma_to * np.sqrt(sigma_from**2 - sigma_to**2) / sigma_from,
    )
    sigma_down = np.sqrt(sigma_to**2 - sigma_up**2)
    return float(sigma_down), float(sigma_up)


class _GuidedDenoiser:
    """Wraps the model's denoiser with per-row conditions and CFG."""

    def __init__(self, model: DenoiserModel, cond_rows: np.ndarray, scale: float):
        self.model = model
        self.p = model.params.state_arrays()
        self.cond_rows = cond_rows
        self.null_rows = np.broadcast_to(
            model.params.value(NULL).astype(np.float32), cond_rows.shape
        )
        self.scale = scale

    def __call__(self, x: np.ndarray, sigma: float) -> np.ndarray:
        sigmas = np.full(len(x), float(sigma))
        d_cond = None
        if self.scale != 0.0:
            d_cond = value_of(denoise_batch(self.model, self.p, x, sigmas, self.cond_rows))
            if self.scale == 1.0:
                return d_cond
        d_uncond = value_of(denoise_batch(self.model, self.p, x, sigmas, self.null_rows))
        if self.scale == 0.0:
            return d_uncond
        return cfg_combine(d_cond, d_uncond, self.scale)


def _step_noise(streams, m: int) -> np.ndarray:
    return np.stack([st.standard_normal(m) for st in streams]).astype(np.float32)


def integrate(denoiser, x0: np.ndarray, sigmas: np.ndarray, integrator: str, streams) -> np.ndarray:
    """Run the chosen integrator from sigma_0 down to 0.  `streams` supplies
    one generator per sample for the stochastic integrators."""
    x = x0.astype(np.float32)
    m = x.shape[1]
    for i in range(len(sigmas) - 1):
        s, s_next = float(sigmas[i]), float(sigmas[i + 1])
        denoised = denoiser(x, s)
        if integrator == "euler":
            x = x + (s_next - s) * (x - denoised) / s
        elif integrator == "euler_ancestral":
            s_down, s_up = _ancestral_split(s, s_next)
            x = x + (s_down - s) * (x - denoised) / s
            if s_up > 0:
                x = x + s_up * _step_noise(streams, m)
        else:  # dpmpp_sde, 2S form with midpoint r = 1/2 and eta = 1
            if s_next == 0:
                x = x + (s_next - s) * (x - denoised) / s
            else:
                t, t_next = -np.log(s), -np.log(s_next)
                h = t_next - t
                s_mid = np.exp(-(t + 0.5 * h))
                sd1, su1 = _ancestral_split(s, s_mid)
                t_mid_down = -np.log(sd1)
                x_2 = (sd1 / s) * x - np.expm1(t - t_mid_down) * denoised
                if su1 > 0:
                    x_2 = x_2 + su1 * _step_noise(streams, m)
                denoised_2 = denoiser(x_2.astype(np.float32), float(s_mid))
                sd2, su2 = _ancestral_split(s, s_next)
                t_next_down = -np.log(sd2)
                x = (sd2 / s) * x - np.expm1(t - t_next_down) * denoised_2
                if su2 > 0:
                    x = x + su2 * _step_noise(streams, m)
        x = np.asarray(x, dtype=np.float32)
        if not np.isfinite(x).all():
            raise NumericalError(f"non-finite sampler state at step {i}")
    return x


def _build_cond_rows(model: DenoiserModel, class_ids, subdomain_id, streams) -> np.ndarray:
    """One condition row per sample, each built from that sample's stream."""
    src = model.source
    p = model.params.state_arrays()
    rows = []
    for cid, st in zip(class_ids, streams):
        row = condition_batch(
            src,
            p,
            np.array([cid]),
            None if subdomain_id is None else np.array([subdomain_id]),
            st,
        )
        rows.append(value_of(row)[0])
    return np.asarray(rows, dtype=np.float32)


def sample_batch(
    model: DenoiserModel,
    class_ids,
    subdomain_id: int | None,
    cfg: SamplerConfig,
    streams,
) -> np.ndarray:
    sigmas = karras_sigmas(cfg.steps, model.schedule, cfg.rho)
    cond_rows = _build_cond_rows(model, class_ids, subdomain_id, streams)
    x0 = _step_noise(streams, model.input_width) * np.float32(sigmas[0])
    denoiser = _GuidedDenoiser(model, cond_rows, cfg.cfg_scale)
    return integrate(denoiser, x0, sigmas, cfg.integrator, streams)


def sample_one(
    model: DenoiserModel,
    class_id: int,
    subdomain_id: int | None,
    cfg: SamplerConfig,
    rng,
) -> np.ndarray:
    """One latent vector; condition built once from `rng`, then held fixed
    along the trajectory."""
    return sample_batch(model, [class_id], subdomain_id, cfg, [rng])[0]


def generate_set(
    model: DenoiserModel,
    classes,
    n_per_class: int,
    subdomain_id: int | None,
    cfg: SamplerConfig,
    seed: int,
    model_id: str = "",
) -> AugmentationSet:
    """Exactly n_per_class samples per requested class, labeled with the
    target subdomain.  Per-sample streams are (seed, class, index)-derived,
    so sets are order-independent and reproducible."""
    vectors, cids = [], []
    for c in classes:
        if n_per_class == 0:
            continue
        streams = [stream(seed, "sample", int(c), j) for j in range(n_per_class)]
        out = sample_batch(model, [int(c)] * n_per_class, subdomain_id, cfg, streams)
        vectors.append(out)
        cids.append(np.full(n_per_class, int(c), dtype=np.int64))
    n_total = sum(len(v) for v in vectors)
    sub = 0 if subdomain_id is None else int(subdomain_id)
    return AugmentationSet(
        vectors=np.concatenate(vectors) if vectors else np.zeros((0, model.input_width), np.float32),
        class_ids=np.concatenate(cids) if cids else np.zeros(0, np.int64),
        subdomain_ids=np.full(n_total, sub, dtype=np.int64),
        provenance={
            "model_id": model_id,
            "sampler": cfg.to_dict(),
            "seed": int(seed),
        },
    )
