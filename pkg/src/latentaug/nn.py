"""Minimal dense numeric engine.

Reverse-mode gradients for exactly the layer vocabulary the adapter and the
denoiser need: affine (+optional ReLU), embedding-table row lookup,
concatenation, elementwise add/scale, row broadcast, mean-squared and
cross-entropy losses.  Everything operates on plain numpy arrays; wrapping an
array in `Var` makes it a differentiable leaf.

Training math runs in float32; `grad_check` re-runs the same closures on a
float64 copy of the parameters so the finite-difference oracle stays tight.
Any non-finite intermediate raises NumericalError immediately instead of
propagating NaNs.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, NumericalError


def _checked(value: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(value).all():
        raise NumericalError(f"non-finite result in {op}")
    return value


class Var:
    """A node in the backward tape: a value plus how to push gradients back."""

    __slots__ = ("value", "grad", "parents", "backward_fn")

    def __init__(self, value, parents=(), backward_fn=None):
        self.value = np.asarray(value)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.value.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse-accumulate d(self)/d(leaf) into every reachable leaf."""
        order: list[Var] = []
        seen: set[int] = set()
        stack: list[tuple[Var, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if isinstance(p, Var) and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x)


def _wrap(value, parents, backward_fn):
    """Record on the tape only if a Var is actually involved."""
    if any(isinstance(p, Var) for p in parents):
        return Var(value, parents=tuple(p for p in parents if isinstance(p, Var)),
                   backward_fn=backward_fn)
    return value


# -- layer vocabulary ----------------------------------------------------------


def affine(x, w, b=None, relu: bool = False):
    """y = act(x @ w + b) for a batch x of shape (B, in)."""
    xv, wv = value_of(x), value_of(w)
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        raise DimensionMismatch(f"affine: x {xv.shape} incompatible with w {wv.shape}")
    with np.errstate(all="ignore"):  # non-finite results raise right below
        y = xv @ wv
        if b is not None:
            bv = value_of(b)
            if bv.shape != (wv.shape[1],):
                raise DimensionMismatch(f"affine: bias {bv.shape} != ({wv.shape[1]},)")
            y = y + bv
    if relu:
        y = np.maximum(y, 0)
    y = _checked(y, "affine")

    def backward_fn(g):
        if relu:
            g = g * (y > 0)  # derivative at the kink is defined as 0
        if isinstance(x, Var):
            x._accumulate(g @ wv.T)
        if isinstance(w, Var):
            w._accumulate(xv.T @ g)
        if b is not None and isinstance(b, Var):
            b._accumulate(g.sum(axis=0))

    return _wrap(y, (x, w, b), backward_fn)


def embedding(table, ids):
    """Row lookup into a (num, dim) table; equivalent to a one-hot affine."""
    tv = value_of(table)
    ids = np.asarray(ids, dtype=np.int64)
    y = _checked(tv[ids], "embedding")

    def backward_fn(g):
        if isinstance(table, Var):
            gt = np.zeros_like(tv)
            np.add.at(gt, ids, g)
            table._accumulate(gt)

    return _wrap(y, (table,), backward_fn)


def concat(parts):
    """Concatenate (B, d_i) blocks along the feature axis."""
    vals = [value_of(p) for p in parts]
    y = _checked(np.concatenate(vals, axis=1), "concat")
    widths = [v.shape[1] for v in vals]

    def backward_fn(g):
        off = 0
        for p, wdt in zip(parts, widths):
            if isinstance(p, Var):
                p._accumulate(g[:, off : off + wdt])
            off += wdt

    return _wrap(y, tuple(parts), backward_fn)


def add(a, b):
    av, bv = value_of(a), value_of(b)
    if av.shape != bv.shape:
        raise DimensionMismatch(f"add: {av.shape} != {bv.shape}")
    y = _checked(av + bv, "add")

    def backward_fn(g):
        if isinstance(a, Var):
            a._accumulate(g)
        if isinstance(b, Var):
            b._accumulate(g)

    return _wrap(y, (a, b), backward_fn)


def scale(x, s):
    """Elementwise multiply by a constant scalar or array (broadcasting)."""
    xv = value_of(x)
    sv = np.asarray(s)
    y = _checked(xv * sv, "scale")

    def backward_fn(g):
        if isinstance(x, Var):
            gx = g * sv
            if gx.shape != xv.shape:  # undo broadcast
                gx = gx.sum(axis=0).reshape(xv.shape)
            x._accumulate(gx)

    return _wrap(y, (x,), backward_fn)


def broadcast_rows(v, n: int):
    """Tile a (d,) vector into (n, d) rows."""
    vv = value_of(v)
    y = _checked(np.broadcast_to(vv, (n, vv.shape[0])).copy(), "broadcast_rows")

    def backward_fn(g):
        if isinstance(v, Var):
            v._accumulate(g.sum(axis=0))

    return _wrap(y, (v,), backward_fn)


# -- losses --------------------------------------------------------------------


def mse(pred, target):
    """Mean squared error over every entry; scalar output."""
    pv, tv = value_of(pred), np.asarray(value_of(target))
    if pv.shape != tv.shape:
        raise DimensionMismatch(f"mse: {pv.shape} != {tv.shape}")
    diff = pv - tv
    with np.errstate(all="ignore"):
        y = _checked(np.asarray((diff * diff).mean(dtype=pv.dtype)), "mse")

    def backward_fn(g):
        if isinstance(pred, Var):
            pred._accumulate(g * 2 * diff / diff.size)

    return _wrap(y, (pred,), backward_fn)


def weighted_row_mse(pred, target, row_weights):
    """mean_i w_i * mean_j (pred_ij - target_ij)^2 — the per-sample-weighted
    denoised-space MSE used by the diffusion loss."""
    pv, tv = value_of(pred), np.asarray(value_of(target))
    w = np.asarray(row_weights).reshape(-1)
    if pv.shape != tv.shape or w.shape[0] != pv.shape[0]:
        raise DimensionMismatch("weighted_row_mse: shape mismatch")
    diff = pv - tv
    per_row = (diff * diff).mean(axis=1)
    y = _checked(np.asarray((w * per_row).mean(dtype=pv.dtype)), "weighted_row_mse")

    def backward_fn(g):
        if isinstance(pred, Var):
            coeff = (g * 2.0 / (pv.shape[0] * pv.shape[1])) * w[:, None]
            pred._accumulate((coeff * diff).astype(pv.dtype))

    return _wrap(y, (pred,), backward_fn)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Forward-only stable softmax over the last axis."""
    lv = value_of(logits)
    shifted = lv - lv.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return _checked(e / e.sum(axis=-1, keepdims=True), "softmax")


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    lv = value_of(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if lv.ndim != 2 or labels.shape != (lv.shape[0],):
        raise DimensionMismatch("cross_entropy: want (B, C) logits and (B,) labels")
    shifted = lv - lv.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1)) + lv.max(axis=1)
    nll = logsumexp - lv[np.arange(len(labels)), labels]
    y = _checked(np.asarray(nll.mean(dtype=lv.dtype)), "cross_entropy")

    def backward_fn(g):
        if isinstance(logits, Var):
            p = softmax(lv)
            p[np.arange(len(labels)), labels] -= 1.0
            logits._accumulate(g * p / len(labels))

    return _wrap(y, (logits,), backward_fn)


# -- parameters ----------------------------------------------------------------


class ParamStore:
    """Named parameter tensors with paired gradient buffers.

    Iteration order is insertion order, which makes checkpoints and optimizer
    trajectories reproducible.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=self.dtype)
        self._params[name] = arr
        self._grads[name] = np.zeros_like(arr)

    def names(self) -> list[str]:
        return list(self._params)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def value(self, name: str) -> np.ndarray:
        return self._params[name]

    def set_value(self, name: str, value: np.ndarray) -> None:
        self._params[name][...] = value

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def zero_grad(self) -> None:
        for g in self._grads.values():
            g[...] = 0

    def make_leaves(self) -> dict[str, Var]:
        return {name: Var(arr) for name, arr in self._params.items()}

    def absorb(self, leaves: dict[str, Var]) -> None:
        """Accumulate leaf gradients into the paired buffers."""
        for name, leaf in leaves.items():
            if leaf.grad is not None:
                self._grads[name] += leaf.grad

    def n_entries(self) -> int:
        return sum(p.size for p in self._params.values())

    def copy(self) -> "ParamStore":
        out = ParamStore(self.dtype)
        for name, arr in self._params.items():
            out.add(name, arr.copy())
        return out

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(dtype)
        for name, arr in self._params.items():
            out.add(name, arr)
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return dict(self._params)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


# -- finite-difference gradient check -------------------------------------------


def grad_check(loss_fn, params: ParamStore, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `loss_fn` maps a dict of leaf Vars to a scalar Var and must be
    deterministic (freeze any randomness before calling).  The check runs on
    a float64 copy of the parameters regardless of the training dtype.
    """
    p64 = params.astype(np.float64)
    if p64.n_entries() == 0:
        return 0.0
    leaves = p64.make_leaves()
    out = loss_fn(leaves)
    loss_val = float(value_of(out))
    if not np.isfinite(loss_val):
        raise NumericalError("loss is non-finite")
    out.backward()
    analytic = {
        name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
        for name, leaf in leaves.items()
    }

    def eval_loss() -> float:
        return float(value_of(loss_fn(p64.make_leaves())))

    worst = 0.0
    for name in p64.names():
        arr = p64.value(name)
        flat = arr.reshape(-1)
        aflat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = eval_loss()
            flat[i] = orig - h
            minus = eval_loss()
            flat[i] = orig
            numeric = (plus - minus) / (2 * h)
            denom = max(abs(aflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(aflat[i] - numeric) / denom)
    return worst
