"""Top-N descriptor selection scores, category prediction and statistics hooks.

For a region feature ``v`` the score of category ``c`` is the mean relevance of
the ``n_sel`` most relevant descriptors of ``c``. Relevance (``phi``) is raw
cosine by default; ``phi_mode="softmax"`` normalises cosines over every
descriptor in the dictionary first.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from descdet import descriptors as ds
from descdet.embedding import as_embedding, cosine, l2_normalize, softmax, top_n_indices
from descdet.errors import DimMismatchError, EmptyCategoryError, UnknownCategoryError, ZeroVectorError

PHI_MODES = ("cosine", "softmax")


@dataclass
class ScoreBreakdown:
    per_category_score: dict[str, float]
    per_descriptor_phi: dict[str, list[float]]
    selected_indices: dict[str, list[int]]
    predicted: str


def phi(descriptor_embedding, v) -> float:
    return cosine(descriptor_embedding, l2_normalize(v))


def category_score(entry: ds.CategoryEntry, v, n_sel: int) -> tuple[float, list[int]]:
    if not entry.descriptors:
        raise EmptyCategoryError(f"category {entry.category!r} has no descriptors")
    phis = [phi(d.embedding, v) for d in entry.descriptors]
    idx = top_n_indices(phis, n_sel)
    return float(np.mean([phis[i] for i in idx])), idx


class Snapshot:
    """Read-only flattened view of a dictionary: one (D, dim) matrix plus slices.

    Build one per batch; it goes stale as soon as the dictionary is mutated.
    """

    def __init__(self, d: ds.DescriptorDictionary):
        self.categories = d.categories
        blocks, self.slices = [], {}
        start = 0
        for name in self.categories:
            entry = d.entries[name]
            if not entry.descriptors:
                raise EmptyCategoryError(f"category {name!r} has no descriptors")
            blocks.append(entry.matrix())
            self.slices[name] = slice(start, start + len(entry.descriptors))
            start += len(entry.descriptors)
        self.matrix = np.concatenate(blocks)
        self.dim = d.dim


@dataclass
class BatchScores:
    candidates: list[str]
    scores: np.ndarray  # (B, C) over candidates
    selected: dict[str, np.ndarray]  # category -> (B, n_c) local descriptor indices
    phi: np.ndarray  # (B, D) relevance of every descriptor
    cos: np.ndarray  # (B, D) cosine of every descriptor
    unit: np.ndarray  # (B, dim) normalised features
    norms: np.ndarray  # (B,)
    predicted: list[str]


def _check_candidates(snap: Snapshot, label_subset) -> list[str]:
    if label_subset is None:
        return list(snap.categories)
    labels = list(label_subset)
    for c in labels:
        if c not in snap.slices:
            raise UnknownCategoryError(c, snap.categories)
    if not labels:
        raise ValueError("label_subset must not be empty")
    return labels


def score_batch(
    snap: Snapshot,
    V,
    n_sel: int,
    label_subset: Sequence[str] | None = None,
    phi_mode: str = "cosine",
    tau: float = 0.07,
    selections: dict[str, np.ndarray] | None = None,
) -> BatchScores:
    """Score a (B, dim) batch of features against every candidate category.

    ``selections`` freezes the top-N choice (used by the gradient oracle).
    """
    if phi_mode not in PHI_MODES:
        raise ValueError(f"phi_mode must be one of {PHI_MODES}")
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    if V.shape[1] != snap.dim:
        raise DimMismatchError(f"feature dim {V.shape[1]}, dictionary dim {snap.dim}")
    norms = np.linalg.norm(V, axis=1)
    if np.any(norms <= 1e-12):
        raise ZeroVectorError("zero feature vector")
    candidates = _check_candidates(snap, label_subset)
    unit = V / norms[:, None]
    cos = np.clip(unit @ snap.matrix.T, -1.0, 1.0)
    rel = softmax(cos, tau) if phi_mode == "softmax" else cos

    scores = np.empty((V.shape[0], len(candidates)))
    selected = {}
    for k, c in enumerate(candidates):
        block = rel[:, snap.slices[c]]
        if selections is not None:
            idx = selections[c]
        else:
            n = min(n_sel, block.shape[1])
            idx = np.argsort(-block, axis=1, kind="stable")[:, :n]
        selected[c] = idx
        scores[:, k] = np.take_along_axis(block, idx, axis=1).mean(axis=1)
    best = np.argmax(scores, axis=1)  # first maximum: lowest candidate index wins ties
    predicted = [candidates[i] for i in best]
    return BatchScores(candidates, scores, selected, rel, cos, unit, norms, predicted)


def breakdown_row(snap: Snapshot, bs: BatchScores, row: int = 0) -> ScoreBreakdown:
    return ScoreBreakdown(
        per_category_score={c: float(bs.scores[row, k]) for k, c in enumerate(bs.candidates)},
        per_descriptor_phi={c: [float(x) for x in bs.phi[row, snap.slices[c]]] for c in bs.candidates},
        selected_indices={c: [int(i) for i in bs.selected[c][row]] for c in bs.candidates},
        predicted=bs.predicted[row],
    )


def predict(
    d: ds.DescriptorDictionary,
    v,
    n_sel: int,
    label_subset: Sequence[str] | None = None,
    phi_mode: str = "cosine",
    tau: float = 0.07,
) -> ScoreBreakdown:
    snap = Snapshot(d)
    bs = score_batch(snap, as_embedding(v)[None, :], n_sel, label_subset, phi_mode, tau)
    return breakdown_row(snap, bs)


def record_batch(d: ds.DescriptorDictionary, bs: BatchScores, true_categories: Sequence[str], record_on: str = "true") -> None:
    """Apply usage and confusion updates for a scored batch.

    ``bs`` must have been scored over every category so the usage target
    always has a selection.
    """
    if record_on not in ("true", "predicted"):
        raise ValueError("record_on must be 'true' or 'predicted'")
    for row, true in enumerate(true_categories):
        pred = bs.predicted[row]
        target = true if record_on == "true" else pred
        ds.record_usage(d, target, bs.selected[target][row].tolist())
        ds.record_confusion(d, true, pred)


def score_and_record(
    d: ds.DescriptorDictionary,
    v,
    true_category: str,
    n_sel: int,
    record_on: str = "true",
    phi_mode: str = "cosine",
    tau: float = 0.07,
) -> ScoreBreakdown:
    d[true_category]
    snap = Snapshot(d)
    bs = score_batch(snap, as_embedding(v)[None, :], n_sel, None, phi_mode, tau)
    record_batch(d, bs, [true_category], record_on)
    return breakdown_row(snap, bs)
