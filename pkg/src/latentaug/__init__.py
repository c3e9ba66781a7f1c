"""Latent-space generative data augmentation for imbalanced recognition.

The toolkit covers the full loop: adapter training on an imbalanced latent
dataset, conditional diffusion in a chosen adapter feature space, sampling of
labeled augmentation sets with classifier-free guidance, fine-tuning with the
synthesized latents, and evaluation with imbalance-aware metrics.
"""

__version__ = "0.1.0"

from . import (  # noqa: F401
    adapter,
    checkpoint,
    condition,
    diffusion,
    errors,
    metrics,
    nn,
    optim,
    pipeline,
    sampler,
    store,
)
