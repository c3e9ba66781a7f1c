"""Named, splittable random streams.

All randomness in the toolkit flows through `stream(seed, *tags)`.  Each
(seed, tags...) pair maps to an independent generator, so e.g. the noise used
for sample (class=2, index=17) does not depend on how many other samples are
generated, and per-cell subsampling of one dataset cell cannot perturb
another.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(tag).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, *tags) -> np.random.Generator:
    """Derive an independent generator from a base seed and a tag path."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_tag_to_int(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))
