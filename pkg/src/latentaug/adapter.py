"""The task adapter: a stack of linear layers over frozen upstream embeddings.

Layer i maps dims[i] -> dims[i+1]; ReLU sits between hidden layers and the
final layer emits logits (softmax only ever happens inside losses and
predictions).  The activation after layer l is the working latent space for
augmentation; layer 0's input space is the raw upstream embedding.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import (
    DimensionMismatch,
    EmptyDataset,
    InvalidConfig,
    InvalidLayer,
    InvalidPrior,
)
from .nn import ParamStore, affine, cross_entropy, glorot_uniform, softmax
from .optim import OptimizerState, optimizer_step
from .rng import stream
from .store import LatentDataset


@dataclass
class TrainConfig:
    epochs: int = 100
    batch: int = 32
    lr: float = 1e-3
    warmup_epochs: int = 10
    seed: int = 0
    loss: str = "cross_entropy"  # cross_entropy | logit_adjusted
    la_tau: float = 1.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1:
            raise InvalidConfig("epochs and batch must be >= 1")
        if self.loss not in ("cross_entropy", "logit_adjusted"):
            raise InvalidConfig(f"unknown loss {self.loss!r}")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch": self.batch,
            "lr": self.lr,
            "warmup_epochs": self.warmup_epochs,
            "seed": self.seed,
            "loss": self.loss,
            "la_tau": self.la_tau,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: d[k] for k in cls().to_dict() if k in d})


class AdapterModel:
    def __init__(self, dims: list[int], params: ParamStore, frozen_prefix: int = 0):
        self.dims = list(dims)
        self.params = params
        self.frozen_prefix = frozen_prefix

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    @property
    def n_classes(self) -> int:
        return self.dims[-1]

    def copy(self) -> "AdapterModel":
        return AdapterModel(list(self.dims), self.params.copy(), self.frozen_prefix)

    def layer_names(self, i: int) -> tuple[str, str]:
        return f"layer{i}.w", f"layer{i}.b"


def build_adapter(m: int, c: int, hidden=(512, 256), seed: int = 0) -> AdapterModel:
    """Adapter with layer widths [m, *hidden, c]; hidden=() gives the single
    linear layer used for classifier-head-only setups."""
    dims = [m, *hidden, c]
    if any(d < 1 for d in dims):
        raise InvalidConfig(f"all layer dims must be >= 1, got {dims}")
    params = ParamStore()
    for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
        rng = stream(seed, "adapter_init", i)
        params.add(f"layer{i}.w", glorot_uniform(rng, din, dout))
        params.add(f"layer{i}.b", np.zeros(dout))
    return AdapterModel(dims, params)


def forward_logits(model: AdapterModel, x, p=None, start_layer: int = 0):
    """Run layers start_layer..L-1.  `p` maps parameter names to Vars for a
    recorded pass; defaults to the model's plain arrays (no tape)."""
    if p is None:
        p = model.params.state_arrays()
    h = x
    last = model.n_layers - 1
    for i in range(start_layer, model.n_layers):
        wname, bname = model.layer_names(i)
        h = affine(h, p[wname], p[bname], relu=(i != last))
    return h


def predict_proba(model: AdapterModel, x: np.ndarray, start_layer: int = 0) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float32))
    if x.shape[1] != model.dims[start_layer]:
        raise DimensionMismatch(f"input width {x.shape[1]} != {model.dims[start_layer]}")
    return softmax(forward_logits(model, x, start_layer=start_layer))


def predict(model: AdapterModel, x: np.ndarray, start_layer: int = 0) -> np.ndarray:
    return predict_proba(model, x, start_layer=start_layer).argmax(axis=1)


def tap_latent(model: AdapterModel, z0: np.ndarray, l: int) -> np.ndarray:
    """Activation after layer l (post-ReLU); l=0 is the untouched input space.
    The logit layer is not a tap target."""
    if not 0 <= l < model.n_layers:
        raise InvalidLayer(f"tap layer {l} out of range [0, {model.n_layers})")
    z0 = np.asarray(z0)
    single = z0.ndim == 1
    batch = np.atleast_2d(z0)
    if batch.shape[1] != model.input_dim:
        raise DimensionMismatch(f"input width {batch.shape[1]} != {model.input_dim}")
    if l == 0:
        return z0
    h = batch.astype(np.float32)
    p = model.params.state_arrays()
    for i in range(l):
        wname, bname = model.layer_names(i)
        h = affine(h, p[wname], p[bname], relu=True)
    return h[0] if single else h


def la_adjust(logits: np.ndarray, class_priors: np.ndarray, tau: float) -> np.ndarray:
    """Shift logits by tau * ln(prior) per class (the logit-adjusted loss)."""
    priors = np.asarray(class_priors, dtype=np.float64)
    if (priors <= 0).any():
        raise InvalidPrior("class priors must be strictly positive")
    if abs(priors.sum() - 1.0) > 1e-6:
        raise InvalidPrior(f"class priors sum to {priors.sum()}, expected 1")
    return np.asarray(logits) + tau * np.log(priors)


def class_priors_from(dataset: LatentDataset) -> np.ndarray:
    counts = dataset.train_class_counts().astype(np.float64)
    if (counts == 0).any():
        raise InvalidPrior("a class has zero train samples; priors undefined")
    return counts / counts.sum()


def _warmed_lr(cfg: TrainConfig, epoch: int) -> float:
    if cfg.warmup_epochs > 0 and epoch < cfg.warmup_epochs:
        return cfg.lr * (epoch + 1) / cfg.warmup_epochs
    return cfg.lr


def _train_epochs(
    model: AdapterModel,
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    start_layer: int,
    logit_shift: np.ndarray | None,
) -> list[dict]:
    n = len(x)
    trainable = [
        name
        for i in range(start_layer, model.n_layers)
        for name in model.layer_names(i)
    ]
    opt_view = _subset_view(model.params, trainable)
    opt = OptimizerState(kind="adam", lr=cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        lr = _warmed_lr(cfg, epoch)
        perm = stream(cfg.seed, "shuffle", epoch).permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch):
            idx = perm[lo : lo + cfg.batch]
            leaves = model.params.make_leaves()
            logits = forward_logits(model, x[idx], leaves, start_layer=start_layer)
            if logit_shift is not None:
                shape = nn.value_of(logits).shape
                logits = nn.add(logits, np.broadcast_to(logit_shift, shape))
            loss = cross_entropy(logits, y[idx])
            opt_view.zero_grad()
            loss.backward()
            opt_view.absorb({k: leaves[k] for k in trainable})
            optimizer_step(opt, opt_view, lr=lr)
            losses.append(float(nn.value_of(loss)))
        history.append({"epoch": epoch, "loss": float(np.mean(losses))})
    return history


def _subset_view(params: ParamStore, names: list[str]) -> ParamStore:
    """A ParamStore over a subset of names sharing the same buffers."""
    view = ParamStore.__new__(ParamStore)
    view.dtype = params.dtype
    view._params = {n: params._params[n] for n in names}
    view._grads = {n: params._grads[n] for n in names}
    return view


def train_stage1(
    model: AdapterModel, dataset: LatentDataset, cfg: TrainConfig
) -> tuple[AdapterModel, list[dict]]:
    """Train the whole adapter on the dataset's (possibly imbalanced) train
    split.  Deterministic for a given (model seed, cfg.seed)."""
    x, y, _ = dataset.arrays_for_split("train")
    if len(x) == 0:
        raise EmptyDataset("train split is empty")
    if x.shape[1] != model.input_dim:
        raise DimensionMismatch(f"dataset M={x.shape[1]} != adapter input {model.input_dim}")
    shift = None
    if cfg.loss == "logit_adjusted":
        shift = (cfg.la_tau * np.log(class_priors_from(dataset))).astype(np.float32)
    history = _train_epochs(model, x, y.astype(np.int64), cfg, 0, shift)
    return model, history


def finetune_stage3(
    model: AdapterModel,
    l: int,
    gt_latents: LatentDataset,
    aug,
    cfg: TrainConfig,
) -> tuple[AdapterModel, list[dict]]:
    """Fine-tune layers beyond l on ground-truth latents plus augmented
    latents, both living in the layer-l activation space.

    Layers <= l stay bit-identical; GT and augmented vectors are mixed into
    shared shuffled batches.  `aug` needs `.vectors` and `.class_ids` (an
    AugmentationSet) or may be None/empty.
    """
    if not 0 <= l < model.n_layers:
        raise InvalidLayer(f"tap layer {l} out of range [0, {model.n_layers})")
    width = model.dims[l]
    gt_x, gt_y, _ = gt_latents.arrays_for_split("train")
    if gt_x.shape[1] != width:
        raise DimensionMismatch(f"GT latents width {gt_x.shape[1]} != layer-{l} width {width}")
    xs, ys = [gt_x], [gt_y]
    if aug is not None and len(aug.vectors):
        if aug.vectors.shape[1] != width:
            raise DimensionMismatch(
                f"augmented width {aug.vectors.shape[1]} != layer-{l} width {width}"
            )
        xs.append(np.asarray(aug.vectors, dtype=np.float32))
        ys.append(np.asarray(aug.class_ids, dtype=np.int64))
    x = np.concatenate(xs)
    y = np.concatenate(ys).astype(np.int64)
    if len(x) == 0:
        raise EmptyDataset("nothing to fine-tune on")
    tuned = model.copy()
    tuned.frozen_prefix = l
    history = _train_epochs(tuned, x, y, cfg, l, None)
    return tuned, history
