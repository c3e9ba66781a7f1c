"""Conditional denoiser in a working latent space.

The network is a stack of residual dense blocks on the raw 1-D latent; the
projected condition vector (class/subdomain + timestep Fourier features) is
added to the hidden state at the entry of every block.  Around the raw
network sits the standard sigma-dependent preconditioner

    D(x; sigma, c) = c_skip * x + c_out * F(c_in * x; t(sigma), c)

with c_skip = sd^2/(s^2+sd^2), c_out = s*sd/sqrt(s^2+sd^2),
c_in = 1/sqrt(s^2+sd^2) and t(sigma) the Fourier embedding of ln(sigma)/4.

Noise levels are drawn by inverse CDF through a tan warp (uniform in
arctan(sigma/sigma_data)), and the loss is a denoised-space MSE weighted by
w(sigma) = 1/(sigma^2 + sigma_data^2).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .condition import (
    NULL,
    ConditionSource,
    ConditionVector,
    condition_batch,
    make_time_frequencies,
    time_embed,
)
from .errors import DimensionMismatch, EmptyDataset, InvalidConfig, NumericalError
from .nn import ParamStore, add, affine, broadcast_rows, concat, glorot_uniform, scale, value_of, weighted_row_mse
from .optim import EmaState, OptimizerState, ema_apply, ema_init, ema_update, optimizer_step
from .rng import stream


@dataclass
class NoiseSchedule:
    sigma_min: float = 0.01
    sigma_max: float = 80.0
    sigma_data: float = 1.0

    def __post_init__(self):
        if not (0 < self.sigma_min <= self.sigma_max):
            raise InvalidConfig("need 0 < sigma_min <= sigma_max")
        if not self.sigma_data > 0:
            raise InvalidConfig("sigma_data must be positive")


@dataclass
class DiffTrainConfig:
    iterations: int = 400_000
    batch: int = 64
    lr: float = 5e-4
    weight_decay: float = 1e-4
    cond_dropout: float = 0.1
    seed: int = 0
    ema_max_decay: float = 0.9999
    beta1: float = 0.9
    beta2: float = 0.999
    log_every: int = 500

    def __post_init__(self):
        if self.iterations < 1 or self.batch < 1 or self.lr <= 0:
            raise InvalidConfig("iterations, batch, lr must be positive")

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "batch": self.batch,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "cond_dropout": self.cond_dropout,
            "seed": self.seed,
            "ema_max_decay": self.ema_max_decay,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiffTrainConfig":
        keep = {k: d[k] for k in cls().to_dict() if k in d}
        return cls(**keep)


class DenoiserModel:
    def __init__(
        self,
        input_width: int,
        source: ConditionSource,
        schedule: NoiseSchedule,
        hidden=(512, 512, 512),
        time_dim: int = 256,
        seed: int = 0,
    ):
        if input_width < 1:
            raise InvalidConfig("input width must be >= 1")
        self.input_width = input_width
        self.hidden = list(hidden)
        self.time_dim = time_dim
        self.schedule = schedule
        self.source = source
        self.seed = seed
        self.freqs = make_time_frequencies(time_dim, seed)
        self.params = ParamStore()
        source.register_params(self.params, seed)
        self._build(seed)

    def _build(self, seed: int) -> None:
        rng = stream(seed, "denoiser_init")
        p = self.params
        width = self.source.width

        def lin(name, din, dout):
            p.add(f"{name}.w", glorot_uniform(rng, din, dout))
            p.add(f"{name}.b", np.zeros(dout))

        lin("net.film", width + self.time_dim, width)
        lin("net.cout", width, self.input_width)
        lin("net.tproj", self.time_dim, width)
        lin("net.in", self.input_width, self.hidden[0])
        cur = self.hidden[0]
        for i, h in enumerate(self.hidden):
            if h != cur:
                lin(f"net.trans{i}", cur, h)
                cur = h
            lin(f"net.tinj{i}", width, h)
            lin(f"net.block{i}.l1", h, h)
            lin(f"net.block{i}.l2", h, h)
        lin("net.out", cur, self.input_width)

    def copy(self) -> "DenoiserModel":
        clone = DenoiserModel.__new__(DenoiserModel)
        clone.input_width = self.input_width
        clone.hidden = list(self.hidden)
        clone.time_dim = self.time_dim
        clone.schedule = self.schedule
        clone.source = self.source
        clone.seed = self.seed
        clone.freqs = self.freqs.copy()
        clone.params = self.params.copy()
        return clone


def raw_network(model: DenoiserModel, p, x_in, temb, cond_rows, gain):
    """The unpreconditioned residual dense network F.

    The residual blocks process the (scaled) noisy input with timestep
    injections at every block entry; the projected condition reaches the
    output through a direct readout scaled per row by
    gain = sigma / sqrt(sigma^2 + sigma_data^2).  Under EDM preconditioning
    that makes the ideal per-cell Gaussian denoiser exactly linear in the
    condition features at every noise level, which is what lets conditioning
    on unseen (class, subdomain-reference) combinations compose additively
    instead of collapsing onto memorized training cells.  (Injecting the
    condition into the blocks instead lets the network memorize the joint
    (class, subdomain) cells and zero-shot transfer degrades.)
    """
    ct = affine(concat([cond_rows, temb]), p["net.film.w"], p["net.film.b"])
    tp = affine(temb, p["net.tproj.w"], p["net.tproj.b"])
    h = affine(x_in, p["net.in.w"], p["net.in.b"])
    cur = model.hidden[0]
    for i, width in enumerate(model.hidden):
        if width != cur:
            h = affine(h, p[f"net.trans{i}.w"], p[f"net.trans{i}.b"])
            cur = width
        inj = affine(tp, p[f"net.tinj{i}.w"], p[f"net.tinj{i}.b"])
        h = add(h, inj)
        t = affine(h, p[f"net.block{i}.l1.w"], p[f"net.block{i}.l1.b"], relu=True)
        t = affine(t, p[f"net.block{i}.l2.w"], p[f"net.block{i}.l2.b"])
        h = add(h, t)
    out = affine(h, p["net.out.w"], p["net.out.b"])
    return add(out, affine(scale(ct, gain), p["net.cout.w"], p["net.cout.b"]))


def precond_coeffs(sigmas, sigma_data: float):
    """(c_skip, c_out, c_in) for an array of sigmas."""
    s = np.asarray(sigmas, dtype=np.float64)
    var = s**2 + sigma_data**2
    return sigma_data**2 / var, s * sigma_data / np.sqrt(var), 1.0 / np.sqrt(var)


def denoise_batch(model: DenoiserModel, p, x_noisy: np.ndarray, sigmas: np.ndarray, cond_rows):
    """Preconditioned denoised estimate for a batch; x_noisy is constant on
    the tape, gradients flow through the network and condition parameters."""
    c_skip, c_out, c_in = precond_coeffs(sigmas, model.schedule.sigma_data)
    x32 = np.asarray(x_noisy, dtype=np.float32)
    temb = time_embed(sigmas, model.freqs)
    gain = (c_out / model.schedule.sigma_data)[:, None].astype(np.float32)
    f = raw_network(model, p, (x32 * c_in[:, None].astype(np.float32)), temb, cond_rows, gain)
    skip = x32 * c_skip[:, None].astype(np.float32)
    return add(scale(f, c_out[:, None].astype(np.float32)), skip)


def precondition_denoise(
    model: DenoiserModel, x_noisy: np.ndarray, sigma: float, cond: ConditionVector
) -> np.ndarray:
    """Inference-path denoiser: one sigma, vector or batch input."""
    x = np.asarray(x_noisy, dtype=np.float32)
    if not np.isfinite(x).all():
        raise NumericalError("non-finite denoiser input")
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    if xb.shape[1] != model.input_width:
        raise DimensionMismatch(f"input width {xb.shape[1]} != {model.input_width}")
    sigmas = np.full(len(xb), float(sigma))
    cond_rows = np.broadcast_to(cond.values.astype(np.float32), (len(xb), len(cond.values)))
    out = value_of(denoise_batch(model, model.params.state_arrays(), xb, sigmas, cond_rows))
    return out[0] if single else out


def sample_sigma(schedule: NoiseSchedule, rng, n: int | None = None):
    """Draw sigma by inverse CDF: uniform in arctan(sigma/sigma_data)."""
    u = rng.random() if n is None else rng.random(n)
    a_min = np.arctan(schedule.sigma_min / schedule.sigma_data)
    a_max = np.arctan(schedule.sigma_max / schedule.sigma_data)
    sig = schedule.sigma_data * np.tan(u * (a_max - a_min) + a_min)
    return np.clip(sig, schedule.sigma_min, schedule.sigma_max)


def loss_weight(sigmas, sigma_data: float):
    return 1.0 / (np.asarray(sigmas, dtype=np.float64) ** 2 + sigma_data**2)


def loss_given(model: DenoiserModel, p, x0: np.ndarray, sigmas: np.ndarray, eps: np.ndarray, cond_rows):
    """Deterministic loss once all randomness (sigmas, eps, condition rows and
    dropout outcome) is frozen — differentiable, so grad_check applies."""
    x0 = np.asarray(x0, dtype=np.float32)
    x_noisy = x0 + (np.asarray(sigmas)[:, None] * eps).astype(np.float32)
    denoised = denoise_batch(model, p, x_noisy, sigmas, cond_rows)
    w = loss_weight(sigmas, model.schedule.sigma_data).astype(np.float32)
    return weighted_row_mse(denoised, x0, w)


def diffusion_loss(
    model: DenoiserModel, x0: np.ndarray, cond: ConditionVector, rng, cond_dropout: float = 0.1
) -> float:
    """One-sample training loss; gradients are accumulated into the model's
    parameter store (condition values are taken as given)."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float32))
    if not np.isfinite(x0).all():
        raise NumericalError("non-finite clean sample")
    sigmas = np.asarray([sample_sigma(model.schedule, rng)])
    eps = rng.standard_normal((1, x0.shape[1]))
    use_null = cond_dropout > 0 and rng.random() < cond_dropout
    leaves = model.params.make_leaves()
    if use_null:
        cond_rows = broadcast_rows(leaves[NULL], 1)
    else:
        cond_rows = np.broadcast_to(cond.values.astype(np.float32), (1, len(cond.values)))
    loss = loss_given(model, leaves, x0, sigmas, eps, cond_rows)
    loss.backward()
    model.params.absorb(leaves)
    return float(value_of(loss))


def estimate_sigma_data(latents: np.ndarray) -> float:
    """Global per-coordinate standard deviation (RMS over coordinates)."""
    arr = np.asarray(latents, dtype=np.float64)
    return float(np.sqrt(arr.var(axis=0).mean()))


def train_diffusion(
    latents: np.ndarray,
    class_ids: np.ndarray,
    subdomain_ids: np.ndarray,
    source: ConditionSource,
    cfg: DiffTrainConfig,
    schedule: NoiseSchedule | None = None,
    hidden=(512, 512, 512),
    time_dim: int = 256,
) -> tuple[DenoiserModel, dict]:
    """Train a denoiser on the given latents; the returned model carries the
    EMA shadow as its published weights."""
    latents = np.asarray(latents, dtype=np.float32)
    if latents.ndim != 2 or len(latents) == 0:
        raise EmptyDataset("no latents to train on")
    class_ids = np.asarray(class_ids, dtype=np.int64)
    subdomain_ids = np.asarray(subdomain_ids, dtype=np.int64)
    if schedule is None:
        est = estimate_sigma_data(latents)
        if est <= 0:
            raise InvalidConfig(
                "latents have zero variance; pass an explicit NoiseSchedule"
            )
        schedule = NoiseSchedule(sigma_data=est)
    model = DenoiserModel(
        latents.shape[1], source, schedule, hidden=hidden, time_dim=time_dim, seed=cfg.seed
    )
    opt = OptimizerState(
        kind="adamw", lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, weight_decay=cfg.weight_decay
    )
    ema = ema_init(model.params, max_decay=cfg.ema_max_decay)
    n = len(latents)
    # Cell-balanced batches: scarce (class, subdomain) cells are the whole
    # point of augmentation, so give every nonempty cell equal draw mass.
    _, cell_idx, cell_counts = np.unique(
        np.stack([class_ids, subdomain_ids]), axis=1, return_inverse=True, return_counts=True
    )
    row_p = 1.0 / (len(cell_counts) * cell_counts[cell_idx])
    row_p = row_p / row_p.sum()
    loss_curve = []
    dropped = 0
    for step in range(cfg.iterations):
        rng = stream(cfg.seed, "step", step)
        idx = rng.choice(n, size=cfg.batch, p=row_p)
        sigmas = sample_sigma(schedule, rng, cfg.batch)
        eps = rng.standard_normal((cfg.batch, latents.shape[1]))
        leaves = model.params.make_leaves()
        cond_rows = condition_batch(source, leaves, class_ids[idx], subdomain_ids[idx], rng)
        drop = rng.random(cfg.batch) < cfg.cond_dropout
        dropped += int(drop.sum())
        if drop.any():
            mask = drop.astype(np.float32)[:, None]
            null_rows = broadcast_rows(leaves[NULL], cfg.batch)
            cond_rows = add(scale(cond_rows, 1.0 - mask), scale(null_rows, mask))
        loss = loss_given(model, leaves, latents[idx], sigmas, eps, cond_rows)
        model.params.zero_grad()
        loss.backward()
        model.params.absorb(leaves)
        optimizer_step(opt, model.params)
        ema_update(ema, model.params)
        if step % cfg.log_every == 0 or step == cfg.iterations - 1:
            loss_curve.append({"step": step, "loss": float(value_of(loss))})
    published = model.copy()
    ema_apply(ema, published.params)
    history = {
        "loss_curve": loss_curve,
        "null_fraction": dropped / (cfg.iterations * cfg.batch),
    }
    return published, history
