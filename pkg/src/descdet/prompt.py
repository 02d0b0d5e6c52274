"""Conditional context prompt: box enlargement, meta-net, prompted features and training.

The meta-net maps the feature of an enlarged box to an additive prompt,
``v = r + W2 tanh(W1 r_ctx + b1) + b2``. Only classification consumes ``v``.
The output layer starts at zero, so an untrained prompt leaves ``r`` untouched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from descdet import descriptors as ds
from descdet.errors import DimMismatchError, FormatError, InvalidBoxError
from descdet.scoring import BatchScores, Snapshot, score_batch


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def contains(self, other: "Box") -> bool:
        return self.x1 <= other.x1 and self.y1 <= other.y1 and self.x2 >= other.x2 and self.y2 >= other.y2


@dataclass
class Proposal:
    box: Box
    r: np.ndarray
    r_ctx: np.ndarray
    true_category: str | None = None

    def __post_init__(self):
        if self.r.shape != self.r_ctx.shape:
            raise DimMismatchError("proposal feature and context feature differ in dim")


def enlarge_box(box: Box, m: float, n: float, width: float, height: float) -> Box:
    if not (0 <= box.x1 < box.x2 <= width and 0 <= box.y1 < box.y2 <= height):
        raise InvalidBoxError(f"{box} is not a valid box inside a {width}x{height} image")
    if m < 0 or n < 0:
        raise InvalidBoxError("enlargement margins must be non-negative")
    return Box(
        max(0.0, box.x1 - m),
        max(0.0, box.y1 - n),
        min(float(width), box.x2 + m),
        min(float(height), box.y2 + n),
    )


def default_margins(box: Box, frac: float = 0.5) -> tuple[float, float]:
    return frac * box.width, frac * box.height


@dataclass
class MetaNetParams:
    W1: np.ndarray  # (hidden, dim)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (dim, hidden)
    b2: np.ndarray  # (dim,)

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def dim(self) -> int:
        return self.W1.shape[1]

    def arrays(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]

    def copy(self) -> "MetaNetParams":
        return MetaNetParams(*(a.copy() for a in self.arrays()))

    def check(self) -> None:
        h, d = self.W1.shape
        if self.b1.shape != (h,) or self.W2.shape != (d, h) or self.b2.shape != (d,):
            raise DimMismatchError(
                f"inconsistent meta-net shapes W1{self.W1.shape} b1{self.b1.shape} W2{self.W2.shape} b2{self.b2.shape}"
            )


def default_hidden(dim: int) -> int:
    return max(2, dim // 2)


def init_params(dim: int, hidden: int | None = None, seed=0) -> MetaNetParams:
    """Random first layer, zero output layer."""
    hidden = hidden or default_hidden(dim)
    rng = np.random.default_rng(seed)
    return MetaNetParams(
        W1=rng.normal(0.0, 1.0 / np.sqrt(dim), size=(hidden, dim)),
        b1=np.zeros(hidden),
        W2=np.zeros((dim, hidden)),
        b2=np.zeros(dim),
    )


def meta_forward(theta: MetaNetParams, r_ctx) -> np.ndarray:
    """Prompt for one context feature (dim,) or a batch (B, dim)."""
    x = np.asarray(r_ctx, dtype=np.float64)
    if x.shape[-1] != theta.dim:
        raise DimMismatchError(f"context dim {x.shape[-1]}, meta-net expects {theta.dim}")
    h = np.tanh(x @ theta.W1.T + theta.b1)
    return h @ theta.W2.T + theta.b2


def prompted_feature(r, pi) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    if r.shape != pi.shape:
        raise DimMismatchError(f"feature {r.shape} vs prompt {pi.shape}")
    return r + pi


def _cross_entropy(scores: np.ndarray, targets: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    z = scores / tau
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    losses = -logp[np.arange(len(targets)), targets]
    return losses, np.exp(logp)


def classification_loss(
    d: ds.DescriptorDictionary,
    v,
    true_category: str,
    n_sel: int,
    tau: float = 0.07,
    label_subset: Sequence[str] | None = None,
    phi_mode: str = "cosine",
) -> float:
    d[true_category]
    bs = score_batch(Snapshot(d), np.asarray(v, dtype=np.float64)[None, :], n_sel, label_subset, phi_mode, tau)
    if true_category not in bs.candidates:
        raise ValueError(f"{true_category!r} is not among the candidate categories")
    losses, _ = _cross_entropy(bs.scores, np.array([bs.candidates.index(true_category)]), tau)
    return float(losses[0])


def stack_batch(batch: Sequence[Proposal]) -> tuple[np.ndarray, np.ndarray, list[str]]:
    if not batch:
        raise ValueError("empty batch")
    labels = []
    for p in batch:
        if p.true_category is None:
            raise ValueError("every proposal in a training batch needs a label")
        labels.append(p.true_category)
    return np.stack([p.r for p in batch]), np.stack([p.r_ctx for p in batch]), labels


def loss_and_grad(
    theta: MetaNetParams,
    snap: Snapshot,
    R: np.ndarray,
    Rctx: np.ndarray,
    labels: Sequence[str],
    n_sel: int,
    tau: float = 0.07,
    label_subset: Sequence[str] | None = None,
    phi_mode: str = "cosine",
    selections: dict[str, np.ndarray] | None = None,
) -> tuple[float, MetaNetParams, BatchScores]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the meta-net.

    Top-N selections are constants of the backward pass.
    """
    theta.check()
    pre = Rctx @ theta.W1.T + theta.b1
    h = np.tanh(pre)
    V = R + h @ theta.W2.T + theta.b2
    bs = score_batch(snap, V, n_sel, label_subset, phi_mode, tau, selections)
    try:
        targets = np.array([bs.candidates.index(y) for y in labels])
    except ValueError:
        raise ValueError("a batch label is not among the candidate categories") from None
    B = len(labels)
    losses, probs = _cross_entropy(bs.scores, targets, tau)

    g = probs.copy()
    g[np.arange(B), targets] -= 1.0
    g /= tau * B  # dL/ds

    dphi = np.zeros_like(bs.phi)
    rows = np.arange(B)[:, None]
    for k, c in enumerate(bs.candidates):
        idx = bs.selected[c]
        np.add.at(dphi, (rows, snap.slices[c].start + idx), (g[:, k] / idx.shape[1])[:, None])
    if phi_mode == "softmax":
        inner = (bs.phi * dphi).sum(axis=1, keepdims=True)
        dcos = bs.phi * (dphi - inner) / tau
    else:
        dcos = dphi
    # d cos(t, v) / dv = (t - cos * v_hat) / |v|
    radial = (dcos * bs.cos).sum(axis=1, keepdims=True)
    delta = (dcos @ snap.matrix - radial * bs.unit) / bs.norms[:, None]

    dW2 = delta.T @ h
    db2 = delta.sum(axis=0)
    da = (delta @ theta.W2) * (1.0 - h * h)
    dW1 = da.T @ Rctx
    db1 = da.sum(axis=0)
    return float(losses.mean()), MetaNetParams(dW1, db1, dW2, db2), bs


def grad_theta(
    theta: MetaNetParams,
    d: ds.DescriptorDictionary,
    batch: Sequence[Proposal],
    n_sel: int,
    tau: float = 0.07,
    label_subset: Sequence[str] | None = None,
    phi_mode: str = "cosine",
) -> MetaNetParams:
    R, Rctx, labels = stack_batch(batch)
    _, grads, _ = loss_and_grad(theta, Snapshot(d), R, Rctx, labels, n_sel, tau, label_subset, phi_mode)
    return grads


def sgd_step(theta: MetaNetParams, grads: MetaNetParams, lr: float) -> MetaNetParams:
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    for a, g in zip(theta.arrays(), grads.arrays()):
        if a.shape != g.shape:
            raise DimMismatchError(f"parameter {a.shape} vs gradient {g.shape}")
    return MetaNetParams(*(a - lr * g for a, g in zip(theta.arrays(), grads.arrays())))


CHECKPOINT_VERSION = 1


def save_checkpoint(theta: MetaNetParams, path, step: int = 0, lr: float = 0.0, tau: float = 0.07) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "dim": theta.dim,
        "hidden": theta.hidden,
        "W1": theta.W1.tolist(),
        "b1": theta.b1.tolist(),
        "W2": theta.W2.tolist(),
        "b2": theta.b2.tolist(),
        "step": step,
        "lr": lr,
        "tau": tau,
    }
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[MetaNetParams, dict]:
    """Returns the parameters and the remaining metadata (step, lr, tau)."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", f"line {exc.lineno}") from None
    if not isinstance(doc, dict):
        raise FormatError("checkpoint must be a JSON object", "$")
    missing = [k for k in ("version", "dim", "hidden", "W1", "b1", "W2", "b2", "step", "lr", "tau") if k not in doc]
    if missing:
        raise FormatError(f"missing field {missing[0]!r}", "$")
    if doc["version"] != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported version {doc['version']}", "$.version")
    try:
        theta = MetaNetParams(*(np.asarray(doc[k], dtype=np.float64) for k in ("W1", "b1", "W2", "b2")))
    except (TypeError, ValueError) as exc:
        raise FormatError(f"bad parameter array: {exc}") from None
    theta.check()
    if (theta.dim, theta.hidden) != (doc["dim"], doc["hidden"]):
        raise DimMismatchError("declared dim/hidden disagree with the stored arrays")
    return theta, {"step": doc["step"], "lr": doc["lr"], "tau": doc["tau"]}


def params_allclose(a: MetaNetParams, b: MetaNetParams, atol: float = 1e-9) -> bool:
    return all(x.shape == y.shape and np.allclose(x, y, rtol=0.0, atol=atol) for x, y in zip(a.arrays(), b.arrays()))
