"""The per-category descriptor dictionary, its statistics and persistence."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, NamedTuple

import numpy as np

from descdet.embedding import as_embedding, l2_normalize
from descdet.errors import (
    DimMismatchError,
    EmptySeedError,
    FormatError,
    IndexOutOfRangeError,
    UnknownCategoryError,
)

MAX_WORDS = 6
FORMAT_VERSION = 1

TextEncoder = Callable[[str], np.ndarray]


def normalize_phrase(text: str) -> str:
    """Trim, lowercase and collapse inner whitespace."""
    return " ".join(text.strip().lower().split())


def is_valid_phrase(text: str) -> bool:
    return bool(text) and len(text.split()) <= MAX_WORDS


@dataclass
class Descriptor:
    text: str
    embedding: np.ndarray
    usage_count: int = 0
    created_at_cycle: int = 0


@dataclass
class CategoryEntry:
    category: str
    descriptors: list[Descriptor] = field(default_factory=list)
    confusion_counts: dict[str, int] = field(default_factory=dict)
    predictions_total: int = 0
    misclassified_total: int = 0

    @property
    def texts(self) -> list[str]:
        return [d.text for d in self.descriptors]

    def matrix(self) -> np.ndarray:
        """Descriptor embeddings stacked row-wise, shape (K, dim)."""
        return np.stack([d.embedding for d in self.descriptors])

    def index_of(self, text: str) -> int | None:
        for i, d in enumerate(self.descriptors):
            if d.text == text:
                return i
        return None


class MergeOutcome(NamedTuple):
    merged: bool  # False means a new descriptor was inserted
    index: int
    category: str


@dataclass
class DescriptorDictionary:
    entries: dict[str, CategoryEntry]
    dim: int
    gamma: float = 0.85
    alpha: float = 0.5
    cycle: int = 0
    merge_scope: str = "category"

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.merge_scope not in ("category", "global"):
            raise ValueError(f"merge_scope must be 'category' or 'global', got {self.merge_scope!r}")

    @property
    def categories(self) -> list[str]:
        return list(self.entries)

    def __getitem__(self, category: str) -> CategoryEntry:
        try:
            return self.entries[category]
        except KeyError:
            raise UnknownCategoryError(category, self.entries) from None

    def __contains__(self, category: str) -> bool:
        return category in self.entries

    def size(self) -> int:
        return sum(len(e.descriptors) for e in self.entries.values())

    def reset_stats(self) -> None:
        for entry in self.entries.values():
            for d in entry.descriptors:
                d.usage_count = 0
            entry.confusion_counts = {}
            entry.predictions_total = 0
            entry.misclassified_total = 0

    def allclose(self, other: "DescriptorDictionary", atol: float = 1e-9) -> bool:
        """Field-for-field equality with embeddings compared to ``atol``."""
        if (self.dim, self.gamma, self.alpha, self.cycle) != (other.dim, other.gamma, other.alpha, other.cycle):
            return False
        if self.categories != other.categories:
            return False
        for name, a in self.entries.items():
            b = other.entries[name]
            if (a.confusion_counts, a.predictions_total, a.misclassified_total) != (
                b.confusion_counts,
                b.predictions_total,
                b.misclassified_total,
            ):
                return False
            if len(a.descriptors) != len(b.descriptors):
                return False
            for da, db in zip(a.descriptors, b.descriptors):
                if (da.text, da.usage_count, da.created_at_cycle) != (db.text, db.usage_count, db.created_at_cycle):
                    return False
                if not np.allclose(da.embedding, db.embedding, rtol=0.0, atol=atol):
                    return False
        return True


def init_dictionary(
    categories: Iterable[str],
    seed_descriptors: Mapping[str, Iterable[str]],
    text_encoder: TextEncoder,
    gamma: float = 0.85,
    alpha: float = 0.5,
    merge_scope: str = "category",
) -> DescriptorDictionary:
    entries: dict[str, CategoryEntry] = {}
    dim = None
    for category in categories:
        seen: list[str] = []
        for raw in seed_descriptors.get(category, ()):
            text = normalize_phrase(raw)
            if not text:
                continue
            if not is_valid_phrase(text):
                raise ValueError(f"seed phrase {raw!r} for {category!r} exceeds {MAX_WORDS} words")
            if text not in seen:
                seen.append(text)
        if not seen:
            raise EmptySeedError(category)
        descriptors = []
        for text in seen:
            emb = l2_normalize(as_embedding(text_encoder(text)))
            if dim is None:
                dim = emb.size
            elif emb.size != dim:
                raise DimMismatchError(f"encoder returned dim {emb.size} for {text!r}, expected {dim}")
            descriptors.append(Descriptor(text, emb))
        entries[category] = CategoryEntry(category, descriptors)
    if dim is None:
        raise EmptySeedError("<no categories>")
    return DescriptorDictionary(entries, dim, gamma=gamma, alpha=alpha, merge_scope=merge_scope)


def record_usage(d: DescriptorDictionary, category: str, descriptor_indices: Iterable[int]) -> None:
    entry = d[category]
    indices = list(descriptor_indices)
    for i in indices:
        if not 0 <= i < len(entry.descriptors):
            raise IndexOutOfRangeError(f"descriptor index {i} out of range for {category!r} (K={len(entry.descriptors)})")
    for i in indices:
        entry.descriptors[i].usage_count += 1


def record_confusion(d: DescriptorDictionary, true_category: str, predicted_category: str) -> None:
    entry = d[true_category]
    d[predicted_category]  # validates
    entry.predictions_total += 1
    if predicted_category != true_category:
        entry.confusion_counts[predicted_category] = entry.confusion_counts.get(predicted_category, 0) + 1
        entry.misclassified_total += 1


def prune_low_frequency(
    d: DescriptorDictionary,
    category: str,
    rho: float = 0.2,
    floor: int = 3,
    *,
    cycle: int | None = None,
    protect_cycles: int = 1,
) -> list[str]:
    """Drop descriptors used less than ``rho`` times the category maximum.

    The ``floor`` most-used descriptors always survive. When ``cycle`` is given,
    descriptors younger than ``protect_cycles`` update cycles are kept too.
    Returns the removed phrases in their original order.
    """
    if not 0.0 < rho < 1.0:
        raise ValueError("rho must lie in (0, 1)")
    if floor < 1:
        raise ValueError("floor must be positive")
    entry = d[category]
    if not entry.descriptors:
        return []
    counts = [desc.usage_count for desc in entry.descriptors]
    threshold = rho * max(counts)
    keep = set(top_usage_indices(entry, floor))
    if cycle is not None:
        keep.update(i for i, desc in enumerate(entry.descriptors) if cycle - desc.created_at_cycle < protect_cycles)
    removed = [desc.text for i, desc in enumerate(entry.descriptors) if i not in keep and desc.usage_count < threshold]
    entry.descriptors = [
        desc for i, desc in enumerate(entry.descriptors) if i in keep or desc.usage_count >= threshold
    ]
    return removed


def top_usage_indices(entry: CategoryEntry, k: int) -> list[int]:
    """Indices of the ``k`` most-used descriptors, ties by lower index."""
    order = sorted(range(len(entry.descriptors)), key=lambda i: (-entry.descriptors[i].usage_count, i))
    return order[:k]


def merge_descriptor(
    d: DescriptorDictionary,
    category: str,
    phrase: str,
    embedding,
    cycle: int,
) -> MergeOutcome:
    """Fold a new descriptor into the dictionary.

    An exact-text duplicate, or the most cosine-similar existing descriptor when
    that similarity exceeds ``gamma``, absorbs the new embedding via
    ``t_j <- normalize(alpha * t_i + (1 - alpha) * t_j)``. Otherwise the phrase is
    appended with zero usage.
    """
    entry = d[category]
    text = normalize_phrase(phrase)
    t_i = l2_normalize(as_embedding(embedding))
    if t_i.size != d.dim:
        raise DimMismatchError(f"embedding dim {t_i.size}, dictionary dim {d.dim}")

    target = None
    dup = entry.index_of(text)
    if dup is not None:
        target = (category, dup)
    else:
        scope = d.entries.values() if d.merge_scope == "global" else [entry]
        best = -np.inf
        for e in scope:
            if not e.descriptors:
                continue
            sims = e.matrix() @ t_i
            j = int(np.argmax(sims))  # first maximum on ties
            if sims[j] > best:
                best, best_at = float(sims[j]), (e.category, j)
        if best > d.gamma:
            target = best_at

    if target is not None:
        cat, j = target
        incumbent = d.entries[cat].descriptors[j]
        incumbent.embedding = l2_normalize(d.alpha * t_i + (1.0 - d.alpha) * incumbent.embedding)
        return MergeOutcome(True, j, cat)

    entry.descriptors.append(Descriptor(text, t_i, 0, cycle))
    return MergeOutcome(False, len(entry.descriptors) - 1, category)


def confusing_categories(d: DescriptorDictionary, category: str, k: int = 3, min_count: int = 2) -> list[str]:
    entry = d[category]
    ranked = sorted(
        ((label, n) for label, n in entry.confusion_counts.items() if n >= min_count and n > 0),
        key=lambda item: (-item[1], item[0]),
    )
    return [label for label, _ in ranked[:k]]


def to_json_dict(d: DescriptorDictionary) -> dict:
    return {
        "version": FORMAT_VERSION,
        "dim": d.dim,
        "gamma": d.gamma,
        "alpha": d.alpha,
        "cycle": d.cycle,
        "categories": [
            {
                "name": e.category,
                "predictions_total": e.predictions_total,
                "misclassified_total": e.misclassified_total,
                "confusion": dict(sorted(e.confusion_counts.items())),
                "descriptors": [
                    {
                        "text": desc.text,
                        "usage": desc.usage_count,
                        "cycle": desc.created_at_cycle,
                        # json writes floats with repr, which round-trips exactly
                        "embedding": [float(x) for x in desc.embedding],
                    }
                    for desc in e.descriptors
                ],
            }
            for e in d.entries.values()
        ],
    }


def save(d: DescriptorDictionary, path) -> None:
    Path(path).write_text(json.dumps(to_json_dict(d), indent=1) + "\n", encoding="utf-8")


def _field(obj, key, kind, where):
    if not isinstance(obj, dict) or key not in obj:
        raise FormatError(f"missing field {key!r}", where)
    value = obj[key]
    if kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise FormatError(f"field {key!r} has wrong type {type(value).__name__}", f"{where}.{key}")
    return value


def from_json_dict(doc, expected_dim: int | None = None) -> DescriptorDictionary:
    if _field(doc, "version", int, "$") != FORMAT_VERSION:
        raise FormatError(f"unsupported version {doc['version']}", "$.version")
    dim = _field(doc, "dim", int, "$")
    if expected_dim is not None and dim != expected_dim:
        raise DimMismatchError(f"file has dim {dim}, expected {expected_dim}")
    entries: dict[str, CategoryEntry] = {}
    for ci, cat in enumerate(_field(doc, "categories", list, "$")):
        where = f"$.categories[{ci}]"
        name = _field(cat, "name", str, where)
        confusion = _field(cat, "confusion", dict, where)
        for label, n in confusion.items():
            if not isinstance(n, int) or n < 0:
                raise FormatError("confusion count must be a non-negative integer", f"{where}.confusion.{label}")
        descriptors = []
        for di, raw in enumerate(_field(cat, "descriptors", list, where)):
            dwhere = f"{where}.descriptors[{di}]"
            emb = _field(raw, "embedding", list, dwhere)
            if len(emb) != dim:
                raise DimMismatchError(f"{dwhere}: embedding has {len(emb)} entries, file dim is {dim}")
            try:
                vec = as_embedding(emb)
            except (TypeError, ValueError) as exc:
                raise FormatError(f"bad embedding: {exc}", f"{dwhere}.embedding") from None
            descriptors.append(
                Descriptor(
                    _field(raw, "text", str, dwhere),
                    vec,
                    _field(raw, "usage", int, dwhere),
                    _field(raw, "cycle", int, dwhere),
                )
            )
        entries[name] = CategoryEntry(
            name,
            descriptors,
            dict(confusion),
            _field(cat, "predictions_total", int, where),
            _field(cat, "misclassified_total", int, where),
        )
    return DescriptorDictionary(
        entries,
        dim,
        gamma=float(_field(doc, "gamma", float, "$")),
        alpha=float(_field(doc, "alpha", float, "$")),
        cycle=_field(doc, "cycle", int, "$"),
    )


def load(path, expected_dim: int | None = None) -> DescriptorDictionary:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", f"line {exc.lineno}") from None
    return from_json_dict(doc, expected_dim)

