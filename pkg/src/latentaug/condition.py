"""Conditioning vectors for the latent denoiser.

Three modes:

* ``class_only`` — a learnable class-embedding lookup.
* ``class_plus_subdomain_latent`` — class embedding concatenated with a
  ground-truth latent drawn at random from the requested subdomain's pool
  (the pool lives in the same working space as the denoiser).
* ``class_plus_semantic_vector`` — class embedding concatenated with an
  externally supplied semantic vector (e.g. text-encoder output), keyed by
  class or by subdomain.

The concatenation is projected affinely to a fixed final width.  A learnable
null vector of that width stands in for "no condition" during training
dropout and classifier-free guidance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptySubdomainPool,
    InvalidConfig,
    InvalidSigma,
    MissingCondition,
)
from .nn import ParamStore, affine, concat, embedding, glorot_uniform, value_of
from .rng import stream

MODES = ("class_only", "class_plus_subdomain_latent", "class_plus_semantic_vector")

CLASS_TABLE = "cond.class_table"
PROJ_W = "cond.proj_w"
PROJ_B = "cond.proj_b"
NULL = "cond.null"
REF_L1_W = "cond.refenc.l1.w"
REF_L1_B = "cond.refenc.l1.b"
REF_L2_W = "cond.refenc.l2.w"
REF_L2_B = "cond.refenc.l2.b"


@dataclass
class ConditionVector:
    values: np.ndarray
    is_null: bool = False


@dataclass
class ConditionSource:
    mode: str
    n_classes: int
    embed_dim: int = 256
    width: int = 256
    subdomain_pool: list | None = None  # per-subdomain arrays (n_k, M_l)
    semantic_vectors: np.ndarray | None = None  # (n, S)
    semantic_key: str = "subdomain"  # which id indexes semantic_vectors
    ref_enc_hidden: int = 64
    ref_enc_dim: int = 32
    params: ParamStore | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidConfig(f"unknown condition mode {self.mode!r}")
        if self.mode == "class_plus_semantic_vector" and self.semantic_vectors is None:
            raise MissingCondition("mode needs semantic_vectors")
        if self.semantic_vectors is not None:
            self.semantic_vectors = np.asarray(self.semantic_vectors, dtype=np.float32)

    def ref_width(self) -> int:
        """Width of the raw mode-dependent part before any encoding."""
        if self.mode == "class_plus_subdomain_latent":
            if not self.subdomain_pool or not len(self.subdomain_pool):
                raise EmptySubdomainPool("subdomain pool not attached")
            return int(self.subdomain_pool[0].shape[1])
        if self.mode == "class_plus_semantic_vector":
            return int(self.semantic_vectors.shape[1])
        return 0

    def extra_width(self) -> int:
        """Width of the part that gets concatenated with the class embedding."""
        if self.mode == "class_plus_subdomain_latent":
            self.ref_width()  # validates the pool
            return self.ref_enc_dim
        return self.ref_width()

    def register_params(self, params: ParamStore, seed: int) -> None:
        """Create the learnable pieces inside the denoiser's parameter store."""
        rng = stream(seed, "cond_init")
        params.add(CLASS_TABLE, glorot_uniform(rng, self.n_classes, self.embed_dim))
        if self.mode == "class_plus_subdomain_latent":
            # Reference latents are noisy single draws; a small encoder snaps
            # them to stable codes so the projection sees a clean feature.
            params.add(REF_L1_W, glorot_uniform(rng, self.ref_width(), self.ref_enc_hidden))
            params.add(REF_L1_B, np.zeros(self.ref_enc_hidden))
            params.add(REF_L2_W, glorot_uniform(rng, self.ref_enc_hidden, self.ref_enc_dim))
            params.add(REF_L2_B, np.zeros(self.ref_enc_dim))
        fan_in = self.embed_dim + self.extra_width()
        params.add(PROJ_W, glorot_uniform(rng, fan_in, self.width))
        params.add(PROJ_B, np.zeros(self.width))
        params.add(NULL, np.zeros(self.width))
        self.params = params

    def set_pool(self, pool: list) -> None:
        """Replace the per-subdomain latent pools (must be redone whenever the
        working layer changes, since the pool lives in that layer's space)."""
        self.subdomain_pool = [np.asarray(p, dtype=np.float32) for p in pool]


def make_time_frequencies(dim: int, seed: int) -> np.ndarray:
    """dim/2 Fourier frequencies, drawn once per model."""
    if dim % 2 != 0 or dim < 2:
        raise InvalidConfig(f"time embedding dim must be even and >= 2, got {dim}")
    return stream(seed, "time_freq").standard_normal(dim // 2)


def time_embed(sigma, freqs: np.ndarray) -> np.ndarray:
    """Fourier features of c_noise = ln(sigma)/4: [sin(2 pi f c), cos(2 pi f c)].

    Accepts a scalar sigma (returns (dim,)) or an array (returns (B, dim)).
    """
    sig = np.asarray(sigma, dtype=np.float64)
    if (sig <= 0).any():
        raise InvalidSigma("sigma must be positive")
    c_noise = np.log(sig) / 4.0
    ang = 2.0 * np.pi * np.multiply.outer(c_noise, freqs)
    out = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    return out.astype(np.float32)


def _gather_parts(source: ConditionSource, class_ids, subdomain_ids, rng) -> np.ndarray | None:
    """Mode-dependent constant part of the condition, one row per sample."""
    class_ids = np.asarray(class_ids)
    if source.mode == "class_only":
        return None
    if source.mode == "class_plus_subdomain_latent":
        if source.subdomain_pool is None:
            raise EmptySubdomainPool("subdomain pool not attached")
        rows = []
        for sid in np.asarray(subdomain_ids):
            pool = source.subdomain_pool[int(sid)]
            if len(pool) == 0:
                raise EmptySubdomainPool(f"subdomain {int(sid)} has an empty pool")
            rows.append(pool[rng.integers(len(pool))])
        return np.asarray(rows, dtype=np.float32)
    # class_plus_semantic_vector
    keys = class_ids if source.semantic_key == "class" else np.asarray(subdomain_ids)
    if keys.max(initial=0) >= len(source.semantic_vectors):
        raise MissingCondition(f"no semantic vector for id {int(keys.max())}")
    return source.semantic_vectors[keys]


def condition_batch(source: ConditionSource, p, class_ids, subdomain_ids=None, rng=None):
    """Projected condition rows for a batch; `p` maps parameter names to Vars
    (training) or plain arrays (inference)."""
    emb = embedding(p[CLASS_TABLE], np.asarray(class_ids, dtype=np.int64))
    parts = _gather_parts(source, class_ids, subdomain_ids, rng)
    if parts is not None and source.mode == "class_plus_subdomain_latent":
        enc = affine(parts, p[REF_L1_W], p[REF_L1_B], relu=True)
        parts = affine(enc, p[REF_L2_W], p[REF_L2_B])
    feats = emb if parts is None else concat([emb, parts])
    return affine(feats, p[PROJ_W], p[PROJ_B])


def build_condition(
    source: ConditionSource, class_id: int, subdomain_id: int | None = None, rng=None
) -> ConditionVector:
    """One projected condition vector for (class, subdomain)."""
    if source.params is None:
        raise InvalidConfig("condition parameters not registered")
    if not 0 <= class_id < source.n_classes:
        raise MissingCondition(f"class id {class_id} out of range")
    p = source.params.state_arrays()
    row = condition_batch(
        source,
        p,
        np.array([class_id]),
        None if subdomain_id is None else np.array([subdomain_id]),
        rng,
    )
    return ConditionVector(values=value_of(row)[0], is_null=False)


def null_condition(source: ConditionSource) -> ConditionVector:
    if source.params is None:
        raise InvalidConfig("condition parameters not registered")
    return ConditionVector(values=source.params.value(NULL).copy(), is_null=True)


def drop_condition(cond: ConditionVector, p: float, rng, source: ConditionSource) -> ConditionVector:
    """With probability p, replace the condition by the learned null vector."""
    if not 0.0 <= p <= 1.0:
        raise InvalidConfig(f"dropout probability {p} outside [0, 1]")
    if p > 0.0 and rng.random() < p:
        return null_condition(source)
    return cond
