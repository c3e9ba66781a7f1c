"""Export jobs: listings of inputs -> one GELD dataset.

A listing row names an input (a file for audio/image, a class label for
text), its class, its subdomain, and its split.  Unreadable inputs are
recorded in a failures sidecar and the job continues; a job with zero
successful records is a hard failure.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoders import EncoderError, make_encoder
from .format import write_geld

MODALITIES = ("audio", "image", "text_semantic")
DEFAULT_PROMPT = "This is a picture of [label]"


@dataclass
class ExportJob:
    modality: str
    model_id: str
    listing: list[dict]  # rows with keys path,class,subdomain,split
    out_path: str
    pooling: str = "mean_over_time"
    prompt: str = DEFAULT_PROMPT
    class_names: list[str] = field(default_factory=list)
    subdomain_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if not self.listing:
            raise ValueError("empty listing")
        if not self.class_names:
            self.class_names = sorted({row["class"] for row in self.listing})
        if not self.subdomain_names:
            self.subdomain_names = sorted({row.get("subdomain", "all") for row in self.listing})


def read_listing(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = [dict(r) for r in csv.DictReader(fh)]
    if not rows:
        raise ValueError(f"listing {path} has no rows")
    return rows


def export(job: ExportJob) -> dict:
    """Run the job; returns a summary with counts and the failures list."""
    encoder = make_encoder(job.modality, job.model_id)
    vectors, class_ids, subdomain_ids, splits = [], [], [], []
    failures = []
    for row in job.listing:
        try:
            if job.modality == "text_semantic":
                text = job.prompt.replace("[label]", row["class"])
                vec = encoder.encode(text)
            else:
                vec = encoder.encode(row["path"])
            if not np.isfinite(vec).all():
                raise EncoderError("non-finite embedding")
            vectors.append(vec)
            class_ids.append(job.class_names.index(row["class"]))
            subdomain_ids.append(job.subdomain_names.index(row.get("subdomain", "all")))
            splits.append(row.get("split", "train"))
        except (OSError, ValueError, KeyError, EncoderError) as exc:
            failures.append({"row": row, "error": f"{type(exc).__name__}: {exc}"})
    if not vectors:
        raise EncoderError(f"no inputs could be embedded ({len(failures)} failures)")

    widths = {len(v) for v in vectors}
    if len(widths) != 1:
        raise EncoderError(f"inconsistent embedding widths {sorted(widths)}")

    source_tag = json.dumps(
        {
            "model": job.model_id,
            "modality": job.modality,
            "pooling": job.pooling,
            **({"prompt": job.prompt} if job.modality == "text_semantic" else {}),
        },
        sort_keys=True,
    )
    nbytes = write_geld(
        job.out_path,
        np.stack(vectors),
        class_ids,
        subdomain_ids,
        splits,
        job.class_names,
        job.subdomain_names,
        source_tag,
    )
    if failures:
        failures_path = Path(job.out_path).with_suffix(".failures.json")
        failures_path.write_text(json.dumps(failures, indent=2) + "\n")
    return {
        "records": len(vectors),
        "failures": len(failures),
        "bytes": nbytes,
        "m": int(len(vectors[0])),
        "out": str(job.out_path),
    }


def text_semantic_job(class_names, model_id, out_path, prompt=DEFAULT_PROMPT) -> ExportJob:
    """Semantic-vector file: K=1, one record per class name."""
    listing = [
        {"path": "", "class": name, "subdomain": "all", "split": "train"}
        for name in class_names
    ]
    return ExportJob(
        modality="text_semantic",
        model_id=model_id,
        listing=listing,
        out_path=out_path,
        pooling="class_token",
        prompt=prompt,
        class_names=list(class_names),
        subdomain_names=["all"],
    )
