"""Randomized gradient checking over the architectures the toolkit trains.

Each case builds a small random adapter or denoiser (random widths, batch,
frozen noise/dropout outcome) and compares analytic gradients against 64-bit
central differences for every parameter, including the condition projection,
the reference encoder and the null vector.
"""

from __future__ import annotations

import numpy as np

from .adapter import build_adapter, forward_logits
from .condition import NULL, ConditionSource, condition_batch
from .diffusion import DenoiserModel, NoiseSchedule, loss_given, sample_sigma
from .nn import broadcast_rows, cross_entropy, grad_check, mse, add, scale
from .rng import stream


def _adapter_case(rng: np.random.Generator) -> float:
    m = int(rng.integers(2, 6))
    c = int(rng.integers(2, 5))
    depth = int(rng.integers(0, 3))
    hidden = tuple(int(rng.integers(2, 7)) for _ in range(depth))
    model = build_adapter(m, c, hidden, seed=int(rng.integers(2**31)))
    batch = int(rng.integers(1, 5))
    x = rng.standard_normal((batch, m)).astype(np.float32)
    labels = rng.integers(0, c, batch)

    def loss_fn(leaves):
        return cross_entropy(forward_logits(model, x.astype(np.float64), leaves), labels)

    return grad_check(loss_fn, model.params)


def _denoiser_case(rng: np.random.Generator) -> float:
    m = int(rng.integers(2, 6))
    n_classes = int(rng.integers(2, 4))
    n_sub = 2
    mode = ["class_only", "class_plus_subdomain_latent"][int(rng.integers(0, 2))]
    pools = [rng.standard_normal((3, m)).astype(np.float32) for _ in range(n_sub)]
    source = ConditionSource(
        mode=mode,
        n_classes=n_classes,
        embed_dim=int(rng.integers(2, 5)),
        width=int(rng.integers(2, 5)),
        subdomain_pool=pools if mode == "class_plus_subdomain_latent" else None,
        ref_enc_hidden=4,
        ref_enc_dim=3,
    )
    schedule = NoiseSchedule(sigma_data=float(rng.uniform(0.5, 2.0)))
    model = DenoiserModel(
        m,
        source,
        schedule,
        hidden=(int(rng.integers(3, 8)),) * int(rng.integers(1, 3)),
        time_dim=2 * int(rng.integers(1, 4)),
        seed=int(rng.integers(2**31)),
    )
    batch = int(rng.integers(1, 4))
    x0 = rng.standard_normal((batch, m)).astype(np.float32)
    sigmas = sample_sigma(schedule, rng, batch)
    eps = rng.standard_normal((batch, m))
    class_ids = rng.integers(0, n_classes, batch)
    sub_ids = rng.integers(0, n_sub, batch)
    pool_rng_state = int(rng.integers(2**31))
    drop = rng.random(batch) < 0.3  # frozen dropout outcome

    def loss_fn(leaves):
        cond = condition_batch(
            source, leaves, class_ids, sub_ids, stream(pool_rng_state, "pool")
        )
        if drop.any():
            mask = drop.astype(np.float64)[:, None]
            cond = add(scale(cond, 1.0 - mask), scale(broadcast_rows(leaves[NULL], batch), mask))
        return loss_given(model, leaves, x0, sigmas, eps, cond)

    return grad_check(loss_fn, model.params)


def _time_feature_case(rng: np.random.Generator) -> float:
    """Squared loss through an embedding + affine stack (covers the losses
    the adapter path does not exercise)."""
    m = int(rng.integers(2, 5))
    model = build_adapter(m, int(rng.integers(2, 4)), (3,), seed=int(rng.integers(2**31)))
    x = rng.standard_normal((2, m)).astype(np.float32)
    target = rng.standard_normal((2, model.n_classes))

    def loss_fn(leaves):
        return mse(forward_logits(model, x.astype(np.float64), leaves), target)

    return grad_check(loss_fn, model.params)


def run_gradient_suite(n_cases: int = 100, seed: int = 0) -> float:
    """Max relative gradient error across randomized cases."""
    worst = 0.0
    for i in range(n_cases):
        rng = stream(seed, "gradsuite", i)
        case = (_adapter_case, _denoiser_case, _time_feature_case)[i % 3]
        worst = max(worst, case(rng))
    return worst
