"""Latent datasets: data model, GELD binary format, synthetic generation,
and imbalance-scenario construction.

A dataset is a flat table of embedding vectors, each tagged with a class id,
a subdomain id, and a train/test split.  Vectors are stored columnar as one
(N, M) float32 array; the sidecar manifest carries names and the per-cell
histogram.

GELD wire format (little-endian throughout):

    magic "GELD" | version u32=1 | M u32 | C u32 | K u32 | N u64
    then N records:  class u32 | subdomain u32 | split u8 | M x float32

The fixed record stride makes truncation detectable and the payload
memory-mappable.  The manifest is a separate JSON sidecar (same basename,
".manifest" suffix) so the binary payload stays fixed-stride.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyDataset,
    EmptyInput,
    FormatError,
    IntegrityError,
    InvalidScenario,
)
from .rng import stream

MAGIC = b"GELD"
FORMAT_VERSION = 1
SPLIT_TRAIN = 0
SPLIT_TEST = 1
_HEADER = struct.Struct("<4sIIIIQ")
_REC_FIXED = struct.Struct("<IIB")


@dataclass(frozen=True)
class LatentRecord:
    """One embedding vector with its labels."""

    vector: np.ndarray
    class_id: int
    subdomain_id: int
    split: str  # "train" or "test"


@dataclass
class DatasetManifest:
    m: int
    c: int
    k: int
    class_names: list[str]
    subdomain_names: list[str]
    histogram: np.ndarray  # (C, K, 2) counts, last axis = (train, test)
    source_tag: str = ""

    def validate(self) -> None:
        if len(self.class_names) != self.c or len(self.subdomain_names) != self.k:
            raise IntegrityError("name list lengths do not match C/K")
        hist = np.asarray(self.histogram)
        if hist.shape != (self.c, self.k, 2):
            raise IntegrityError(f"histogram shape {hist.shape} != {(self.c, self.k, 2)}")
        if (hist < 0).any():
            raise IntegrityError("negative histogram entry")

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "c": self.c,
            "k": self.k,
            "class_names": list(self.class_names),
            "subdomain_names": list(self.subdomain_names),
            "histogram": np.asarray(self.histogram).tolist(),
            "source_tag": self.source_tag,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        try:
            return cls(
                m=int(d["m"]),
                c=int(d["c"]),
                k=int(d["k"]),
                class_names=[str(s) for s in d["class_names"]],
                subdomain_names=[str(s) for s in d["subdomain_names"]],
                histogram=np.asarray(d["histogram"], dtype=np.int64),
                source_tag=str(d.get("source_tag", "")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad manifest: {exc}") from exc


class LatentDataset:
    """Immutable columnar dataset of latent vectors.

    All read access used by training/evaluation code goes through
    `arrays_for_split`, which makes split isolation checkable from tests.
    """

    def __init__(
        self,
        vectors: np.ndarray,
        class_ids: np.ndarray,
        subdomain_ids: np.ndarray,
        splits: np.ndarray,
        manifest: DatasetManifest,
    ):
        self.vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        self.class_ids = np.asarray(class_ids, dtype=np.int64)
        self.subdomain_ids = np.asarray(subdomain_ids, dtype=np.int64)
        self.splits = np.asarray(splits, dtype=np.uint8)
        self.manifest = manifest
        self._validate()

    def _validate(self) -> None:
        self.manifest.validate()
        n = len(self.class_ids)
        if self.vectors.shape != (n, self.manifest.m):
            raise DimensionMismatch(
                f"vectors shape {self.vectors.shape} != ({n}, {self.manifest.m})"
            )
        if len(self.subdomain_ids) != n or len(self.splits) != n:
            raise DimensionMismatch("label column lengths disagree")
        if not np.isfinite(self.vectors).all():
            raise IntegrityError("non-finite vector entry")
        if n:
            if self.class_ids.min() < 0 or self.class_ids.max() >= self.manifest.c:
                raise IntegrityError("class id out of range")
            if self.subdomain_ids.min() < 0 or self.subdomain_ids.max() >= self.manifest.k:
                raise IntegrityError("subdomain id out of range")
            if not np.isin(self.splits, [SPLIT_TRAIN, SPLIT_TEST]).all():
                raise IntegrityError("split tag out of range")
        counted = _count_histogram(
            self.class_ids, self.subdomain_ids, self.splits, self.manifest.c, self.manifest.k
        )
        if not np.array_equal(counted, np.asarray(self.manifest.histogram, dtype=np.int64)):
            raise IntegrityError("manifest histogram does not match records")

    # -- construction helpers -------------------------------------------------

    @classmethod
    def from_records(
        cls,
        records: list[LatentRecord],
        c: int,
        k: int,
        class_names: list[str] | None = None,
        subdomain_names: list[str] | None = None,
        source_tag: str = "",
    ) -> "LatentDataset":
        if not records:
            raise EmptyDataset("no records")
        m = len(records[0].vector)
        vectors = np.stack([np.asarray(r.vector, dtype=np.float32) for r in records])
        class_ids = np.array([r.class_id for r in records], dtype=np.int64)
        subdomain_ids = np.array([r.subdomain_id for r in records], dtype=np.int64)
        splits = np.array(
            [SPLIT_TRAIN if r.split == "train" else SPLIT_TEST for r in records], dtype=np.uint8
        )
        manifest = DatasetManifest(
            m=m,
            c=c,
            k=k,
            class_names=class_names or [f"class{i}" for i in range(c)],
            subdomain_names=subdomain_names or [f"subdomain{i}" for i in range(k)],
            histogram=_count_histogram(class_ids, subdomain_ids, splits, c, k),
            source_tag=source_tag,
        )
        return cls(vectors, class_ids, subdomain_ids, splits, manifest)

    @classmethod
    def from_arrays(
        cls,
        vectors,
        class_ids,
        subdomain_ids,
        splits,
        c: int,
        k: int,
        class_names=None,
        subdomain_names=None,
        source_tag: str = "",
    ) -> "LatentDataset":
        vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float32))
        class_ids = np.asarray(class_ids, dtype=np.int64)
        subdomain_ids = np.asarray(subdomain_ids, dtype=np.int64)
        splits = np.asarray(splits, dtype=np.uint8)
        manifest = DatasetManifest(
            m=vectors.shape[1],
            c=c,
            k=k,
            class_names=class_names or [f"class{i}" for i in range(c)],
            subdomain_names=subdomain_names or [f"subdomain{i}" for i in range(k)],
            histogram=_count_histogram(class_ids, subdomain_ids, splits, c, k),
            source_tag=source_tag,
        )
        return cls(vectors, class_ids, subdomain_ids, splits, manifest)

    # -- access ---------------------------------------------------------------

    def __len__(self) -> int:
        return len(self.class_ids)

    def record(self, i: int) -> LatentRecord:
        return LatentRecord(
            vector=self.vectors[i].copy(),
            class_id=int(self.class_ids[i]),
            subdomain_id=int(self.subdomain_ids[i]),
            split="train" if self.splits[i] == SPLIT_TRAIN else "test",
        )

    def records(self) -> list[LatentRecord]:
        return [self.record(i) for i in range(len(self))]

    def arrays_for_split(self, split: str):
        """Return (vectors, class_ids, subdomain_ids) for one split."""
        code = SPLIT_TRAIN if split == "train" else SPLIT_TEST
        mask = self.splits == code
        return self.vectors[mask], self.class_ids[mask], self.subdomain_ids[mask]

    def train_class_counts(self, subdomain: int | None = None) -> np.ndarray:
        """Per-class train-split counts, optionally within one subdomain."""
        hist = np.asarray(self.manifest.histogram)
        if subdomain is None:
            return hist[:, :, SPLIT_TRAIN].sum(axis=1)
        return hist[:, subdomain, SPLIT_TRAIN]

    def select(self, mask: np.ndarray) -> "LatentDataset":
        """New dataset containing the masked records (manifest recomputed)."""
        return LatentDataset.from_arrays(
            self.vectors[mask],
            self.class_ids[mask],
            self.subdomain_ids[mask],
            self.splits[mask],
            c=self.manifest.c,
            k=self.manifest.k,
            class_names=self.manifest.class_names,
            subdomain_names=self.manifest.subdomain_names,
            source_tag=self.manifest.source_tag,
        )


def _count_histogram(class_ids, subdomain_ids, splits, c: int, k: int) -> np.ndarray:
    hist = np.zeros((c, k, 2), dtype=np.int64)
    np.add.at(hist, (class_ids, subdomain_ids, splits.astype(np.int64)), 1)
    return hist


# -- temporal pooling ---------------------------------------------------------


def temporal_pool(frames) -> np.ndarray:
    """Average a sequence of frame vectors into one utterance-level vector."""
    frames = list(frames)
    if not frames:
        raise EmptyInput("temporal_pool needs at least one frame")
    lengths = {len(f) for f in frames}
    if len(lengths) != 1:
        raise DimensionMismatch(f"ragged frame lengths: {sorted(lengths)}")
    stacked = np.asarray(frames, dtype=np.float64)
    return stacked.mean(axis=0)


# -- GELD file I/O ------------------------------------------------------------


def manifest_path(path) -> Path:
    return Path(path).with_suffix(".manifest")


def write_dataset(dataset: LatentDataset, path) -> int:
    """Write a dataset as GELD bytes plus a manifest sidecar; returns the
    byte count of the binary payload."""
    path = Path(path)
    man = dataset.manifest
    n = len(dataset)
    payload = bytearray()
    payload += _HEADER.pack(MAGIC, FORMAT_VERSION, man.m, man.c, man.k, n)
    vec32 = np.ascontiguousarray(dataset.vectors, dtype="<f4")
    for i in range(n):
        payload += _REC_FIXED.pack(
            int(dataset.class_ids[i]), int(dataset.subdomain_ids[i]), int(dataset.splits[i])
        )
        payload += vec32[i].tobytes()
    path.write_bytes(payload)
    manifest_path(path).write_text(json.dumps(man.to_dict(), indent=2) + "\n")
    return len(payload)


def read_dataset(path) -> LatentDataset:
    """Read a GELD file and its manifest sidecar back into a dataset."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError(f"file too short for header ({len(blob)} bytes)")
    magic, version, m, c, k, n = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    stride = _REC_FIXED.size + 4 * m
    expected = _HEADER.size + n * stride
    if len(blob) != expected:
        # Fixed stride: identify the first record the bytes cannot cover.
        bad = (len(blob) - _HEADER.size) // stride if len(blob) > _HEADER.size else 0
        raise FormatError(
            f"expected {expected} bytes, got {len(blob)} (record {bad} incomplete)"
        )
    class_ids = np.empty(n, dtype=np.int64)
    subdomain_ids = np.empty(n, dtype=np.int64)
    splits = np.empty(n, dtype=np.uint8)
    vectors = np.empty((n, m), dtype=np.float32)
    off = _HEADER.size
    for i in range(n):
        cid, sid, sp = _REC_FIXED.unpack_from(blob, off)
        off += _REC_FIXED.size
        class_ids[i] = cid
        subdomain_ids[i] = sid
        splits[i] = sp
        vectors[i] = np.frombuffer(blob, dtype="<f4", count=m, offset=off)
        off += 4 * m

    mpath = manifest_path(path)
    if not mpath.exists():
        raise FormatError(f"missing manifest sidecar {mpath}")
    try:
        man = DatasetManifest.from_dict(json.loads(mpath.read_text()))
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from exc
    if (man.m, man.c, man.k) != (m, c, k):
        raise IntegrityError(
            f"manifest dims {(man.m, man.c, man.k)} disagree with header {(m, c, k)}"
        )
    try:
        return LatentDataset(vectors, class_ids, subdomain_ids, splits, man)
    except DimensionMismatch as exc:
        raise IntegrityError(str(exc)) from exc


# -- synthetic datasets -------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Gaussian mixture over (class, subdomain) cells: cell (c, k) is
    N(class_offsets[c] + subdomain_offsets[k], per_cell_std^2 I)."""

    m: int
    c: int
    k: int
    class_offsets: np.ndarray  # (C, M)
    subdomain_offsets: np.ndarray  # (K, M)
    per_cell_std: float
    n_train: int | np.ndarray  # scalar or (C, K)
    n_test: int | np.ndarray
    seed: int
    class_names: list[str] | None = None
    subdomain_names: list[str] | None = None

    def __post_init__(self):
        self.class_offsets = np.asarray(self.class_offsets, dtype=np.float64)
        self.subdomain_offsets = np.asarray(self.subdomain_offsets, dtype=np.float64)
        if self.class_offsets.shape != (self.c, self.m):
            raise DimensionMismatch("class_offsets must be (C, M)")
        if self.subdomain_offsets.shape != (self.k, self.m):
            raise DimensionMismatch("subdomain_offsets must be (K, M)")
        if not self.per_cell_std > 0:
            raise InvalidScenario("per_cell_std must be positive")

    def counts(self, which: str) -> np.ndarray:
        raw = self.n_train if which == "train" else self.n_test
        return np.broadcast_to(np.asarray(raw, dtype=np.int64), (self.c, self.k)).copy()

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "c": self.c,
            "k": self.k,
            "class_offsets": self.class_offsets.tolist(),
            "subdomain_offsets": self.subdomain_offsets.tolist(),
            "per_cell_std": self.per_cell_std,
            "n_train": np.asarray(self.n_train).tolist(),
            "n_test": np.asarray(self.n_test).tolist(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        return cls(
            m=int(d["m"]),
            c=int(d["c"]),
            k=int(d["k"]),
            class_offsets=np.asarray(d["class_offsets"], dtype=np.float64),
            subdomain_offsets=np.asarray(d["subdomain_offsets"], dtype=np.float64),
            per_cell_std=float(d["per_cell_std"]),
            n_train=np.asarray(d["n_train"]),
            n_test=np.asarray(d["n_test"]),
            seed=int(d["seed"]),
        )


def make_synthetic(spec: SyntheticSpec) -> LatentDataset:
    """Draw a dataset from the spec's Gaussian cells, deterministically.

    Each cell uses its own (seed, c, k) stream, so changing one cell's counts
    never perturbs another cell's draws.
    """
    n_train = spec.counts("train")
    n_test = spec.counts("test")
    if int(n_train.sum()) == 0:
        raise EmptyDataset("every cell has n_train = 0")
    chunks, cids, sids, sps = [], [], [], []
    for c in range(spec.c):
        for k in range(spec.k):
            rng = stream(spec.seed, "synth", c, k)
            mu = spec.class_offsets[c] + spec.subdomain_offsets[k]
            for split_code, count in ((SPLIT_TRAIN, n_train[c, k]), (SPLIT_TEST, n_test[c, k])):
                if count == 0:
                    continue
                draws = mu + spec.per_cell_std * rng.standard_normal((count, spec.m))
                chunks.append(draws.astype(np.float32))
                cids.append(np.full(count, c, dtype=np.int64))
                sids.append(np.full(count, k, dtype=np.int64))
                sps.append(np.full(count, split_code, dtype=np.uint8))
    return LatentDataset.from_arrays(
        np.concatenate(chunks),
        np.concatenate(cids),
        np.concatenate(sids),
        np.concatenate(sps),
        c=spec.c,
        k=spec.k,
        class_names=spec.class_names,
        subdomain_names=spec.subdomain_names,
        source_tag=f"synthetic(seed={spec.seed})",
    )


# -- imbalance scenarios ------------------------------------------------------


@dataclass
class ScenarioSpec:
    """How to repurpose a dataset into a low-resource setup for one target
    subdomain.  `zero_shot` keeps only `kept_class` in the target's train
    split; `k_shot` keeps `shots` train samples per class there."""

    kind: str = "none"  # none | zero_shot | k_shot
    target_subdomain: int = 0
    kept_class: int = 0
    shots: int = 0
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "target_subdomain": self.target_subdomain,
            "kept_class": self.kept_class,
            "shots": self.shots,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        return cls(
            kind=str(d.get("kind", "none")),
            target_subdomain=int(d.get("target_subdomain", 0)),
            kept_class=int(d.get("kept_class", 0)),
            shots=int(d.get("shots", 0)),
            seed=int(d.get("seed", 0)),
        )


def apply_scenario(dataset: LatentDataset, scenario: ScenarioSpec) -> LatentDataset:
    """Filter the train split per the scenario; the test split is never touched."""
    if scenario.kind == "none":
        return dataset
    if scenario.kind not in ("zero_shot", "k_shot"):
        raise InvalidScenario(f"unknown scenario kind {scenario.kind!r}")
    if not 0 <= scenario.target_subdomain < dataset.manifest.k:
        raise InvalidScenario(
            f"target_subdomain {scenario.target_subdomain} out of range [0, {dataset.manifest.k})"
        )
    train = dataset.splits == SPLIT_TRAIN
    in_target = dataset.subdomain_ids == scenario.target_subdomain
    keep = np.ones(len(dataset), dtype=bool)

    if scenario.kind == "zero_shot":
        if not 0 <= scenario.kept_class < dataset.manifest.c:
            raise InvalidScenario(f"kept_class {scenario.kept_class} out of range")
        keep &= ~(train & in_target & (dataset.class_ids != scenario.kept_class))
    else:  # k_shot
        if scenario.shots < 0:
            raise InvalidScenario("shots must be >= 0")
        for c in range(dataset.manifest.c):
            cell = np.flatnonzero(train & in_target & (dataset.class_ids == c))
            if len(cell) <= scenario.shots:
                continue
            rng = stream(scenario.seed, "kshot", c, scenario.target_subdomain)
            chosen = rng.choice(cell, size=scenario.shots, replace=False)
            drop = np.setdiff1d(cell, chosen)
            keep[drop] = False
    return dataset.select(keep)
