"""Synthetic world standing in for the image encoder, text encoder, dataset and LLM.

Each category owns a few hidden descriptor phrases with unit signature vectors.
A region feature is the normalised sum of the signatures of the descriptors
visible in that region (each visible with ``presence_prob``) plus noise; the
context feature adds a pull toward the category prototype. The world's text
encoder returns a phrase's signature, and its LLM answers the two query
templates from the hidden phrase lists.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from descdet import descriptors as ds
from descdet import prompt
from descdet.config import ExperimentConfig, WorldSpec
from descdet.embedding import l2_normalize
from descdet.errors import (
    InvalidCategoryError,
    InvalidQueryError,
    InvalidSpecError,
    LlmUnavailable,
    UnknownCategoryError,
)
from descdet.llm import LLMClient, LLMQuery, UpdatePolicy, UpdateReport, hierarchical_update
from descdet.scoring import Snapshot, record_batch, score_batch

MIN_BOX = 4.0


@dataclass
class World:
    spec: WorldSpec
    categories: list[str]
    phrases: dict[str, list[str]]  # category -> hidden descriptor phrases
    signatures: np.ndarray  # (M, K*, dim), unit rows
    prototypes: np.ndarray  # (M, dim)
    label_embeddings: np.ndarray  # (M, dim)
    distractors: list[str]
    distractor_signatures: np.ndarray  # (pool, dim)
    lookup: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    @property
    def base(self) -> list[str]:
        return self.categories[: self.spec.n_base]

    @property
    def novel(self) -> list[str]:
        return self.categories[self.spec.n_base :]

    def index(self, category: str) -> int:
        try:
            return self.categories.index(category)
        except ValueError:
            raise UnknownCategoryError(category, self.categories) from None


def _unit_rows(rng: np.random.Generator, *shape: int) -> np.ndarray:
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def validate_spec(spec: WorldSpec) -> None:
    problems = []
    if spec.dim < 4:
        problems.append("dim must be >= 4")
    if not 0 < spec.n_base < spec.n_categories:
        problems.append("need 0 < n_base < n_categories")
    if spec.descriptors_per_category < 1:
        problems.append("descriptors_per_category must be positive")
    if not 0 < spec.presence_prob <= 1:
        problems.append("presence_prob must lie in (0, 1]")
    if spec.noise_sigma < 0:
        problems.append("noise_sigma must be non-negative")
    if not 0 <= spec.context_gain <= 1:
        problems.append("context_gain must lie in [0, 1]")
    if spec.n_distractors_per_reply < 0 or spec.n_distractors_per_reply > spec.n_distractor_pool:
        problems.append("n_distractors_per_reply must lie in [0, n_distractor_pool]")
    if spec.reply_size < 1:
        problems.append("reply_size must be positive")
    if spec.image_width < MIN_BOX or spec.image_height < MIN_BOX:
        problems.append(f"image must be at least {MIN_BOX}x{MIN_BOX}")
    if not 0 <= spec.label_alignment <= 1:
        problems.append("label_alignment must lie in [0, 1]")
    if problems:
        raise InvalidSpecError("; ".join(problems))


def generate_world(spec: WorldSpec) -> World:
    validate_spec(spec)
    rng = np.random.default_rng([spec.seed, 7001])
    M, K, dim = spec.n_categories, spec.descriptors_per_category, spec.dim
    categories = [f"cat{i}" for i in range(M)]
    signatures = _unit_rows(rng, M, K, dim)
    prototypes = signatures.mean(axis=1)
    prototypes /= np.linalg.norm(prototypes, axis=1, keepdims=True)
    a = spec.label_alignment
    label_embeddings = a * prototypes + (1.0 - a) * _unit_rows(rng, M, dim)
    label_embeddings /= np.linalg.norm(label_embeddings, axis=1, keepdims=True)
    distractor_signatures = _unit_rows(rng, spec.n_distractor_pool, dim)

    phrases = {c: [f"{c}-part{j}" for j in range(K)] for c in categories}
    distractors = [f"noise-{k}" for k in range(spec.n_distractor_pool)]
    lookup = {}
    for i, c in enumerate(categories):
        lookup[c] = label_embeddings[i]
        for j, p in enumerate(phrases[c]):
            lookup[p] = signatures[i, j]
    for k, p in enumerate(distractors):
        lookup[p] = distractor_signatures[k]
    return World(spec, categories, phrases, signatures, prototypes, label_embeddings, distractors, distractor_signatures, lookup)


def _hash_seed(*parts: str) -> int:
    digest = hashlib.sha256("\x1f".join(parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def world_text_encoder(world: World, phrase: str) -> np.ndarray:
    """Known phrases map to their signature; anything else to a stable pseudo-random unit vector."""
    key = ds.normalize_phrase(phrase)
    if key in world.lookup:
        return world.lookup[key].copy()
    rng = np.random.default_rng(_hash_seed("text", key, str(world.spec.dim)))
    return l2_normalize(rng.standard_normal(world.spec.dim))


def text_encoder_for(world: World) -> Callable[[str], np.ndarray]:
    return lambda phrase: world_text_encoder(world, phrase)


def sample_batch(world: World, categories: Sequence[str], batch_size: int, seed) -> list[prompt.Proposal]:
    for c in categories:
        if c not in world.phrases:
            raise InvalidCategoryError(f"{c!r} is not a world category")
    if not categories:
        raise InvalidCategoryError("no categories to sample from")
    spec = world.spec
    rng = np.random.default_rng(seed)
    K, dim, W, H = spec.descriptors_per_category, spec.dim, spec.image_width, spec.image_height
    which = rng.integers(len(categories), size=batch_size)
    present = rng.random((batch_size, K)) < spec.presence_prob
    empty = ~present.any(axis=1)
    while empty.any():
        present[empty] = rng.random((int(empty.sum()), K)) < spec.presence_prob
        empty = ~present.any(axis=1)
    noise_r = rng.standard_normal((batch_size, dim))
    noise_ctx = rng.standard_normal((batch_size, dim))
    corners = rng.random((batch_size, 4))

    out = []
    for b in range(batch_size):
        cat = categories[which[b]]
        ci = world.index(cat)
        r = l2_normalize(world.signatures[ci][present[b]].sum(axis=0) + spec.noise_sigma * noise_r[b])
        r_ctx = l2_normalize(r + spec.context_gain * world.prototypes[ci] + spec.noise_sigma * noise_ctx[b])
        x1 = corners[b, 0] * (W - MIN_BOX)
        y1 = corners[b, 1] * (H - MIN_BOX)
        x2 = x1 + MIN_BOX + corners[b, 2] * (W - MIN_BOX - x1)
        y2 = y1 + MIN_BOX + corners[b, 3] * (H - MIN_BOX - y1)
        out.append(prompt.Proposal(prompt.Box(x1, y1, x2, y2), r, r_ctx, cat))
    return out


def margins(world: World, category: str, confusers: Sequence[str]) -> np.ndarray:
    """Per true phrase: cosine to own prototype minus the best cosine to any confuser prototype."""
    ci = world.index(category)
    sig = world.signatures[ci]
    own = sig @ world.prototypes[ci]
    rival = np.max(np.stack([sig @ world.prototypes[world.index(c)] for c in confusers]), axis=0)
    return own - rival


def world_llm(world: World, query: LLMQuery) -> str:
    spec = world.spec
    if query.category not in world.phrases:
        raise UnknownCategoryError(query.category, world.categories)
    true = world.phrases[query.category]
    if query.kind == "H":
        listed = set(query.payload)
        picks = [p for p in true if p not in listed][: spec.reply_size]
        rng = np.random.default_rng(_hash_seed("llm", query.rendered))
        chosen = rng.choice(len(world.distractors), size=spec.n_distractors_per_reply, replace=False)
        picks += [world.distractors[k] for k in sorted(chosen)]
        return ", ".join(picks)
    if query.kind == "C":
        if query.category in query.payload:
            raise InvalidQueryError(f"{query.category!r} cannot be its own confusing category")
        for c in query.payload:
            world.index(c)
        m = margins(world, query.category, query.payload)
        order = sorted(range(len(true)), key=lambda j: (-m[j], j))
        return ", ".join(true[j] for j in order[: spec.reply_size])
    raise InvalidQueryError(f"unknown query kind {query.kind!r}")


class WorldLLM(LLMClient):
    def __init__(self, world: World):
        self.world = world

    def send(self, query: LLMQuery) -> str:
        try:
            return world_llm(self.world, query)
        except (UnknownCategoryError, InvalidQueryError) as exc:
            raise LlmUnavailable(str(exc)) from None


@dataclass
class EvalReport:
    mode: str
    seed: int
    base_top1: float
    novel_top1: float
    overall_top1: float
    label_baseline_novel_top1: float
    per_category: dict[str, dict]  # category -> {split, n, correct, accuracy, n_descriptors}
    dict_size: dict[str, float]
    loss_curve: list[float]


@dataclass
class ExperimentResult:
    report: EvalReport
    dictionary: ds.DescriptorDictionary
    theta: prompt.MetaNetParams
    updates: list[UpdateReport]
    world: World


def seed_dictionary(world: World, cfg: ExperimentConfig, rng: np.random.Generator) -> ds.DescriptorDictionary:
    t = cfg.train
    K = world.spec.descriptors_per_category
    n_true = seed_fraction_count(t.seed_fraction, K)
    seeds = {}
    for c in world.categories:
        true = [world.phrases[c][j] for j in sorted(rng.choice(K, size=n_true, replace=False))]
        junk = [world.distractors[k] for k in sorted(rng.choice(len(world.distractors), size=t.init_distractors, replace=False))]
        seeds[c] = true + junk
    return ds.init_dictionary(
        world.categories, seeds, text_encoder_for(world), gamma=t.gamma, alpha=t.alpha, merge_scope=t.merge_scope
    )


def make_client(cfg: ExperimentConfig, world: World) -> LLMClient:
    from descdet.llm import HttpChat, ReplayFile

    l = cfg.llm
    if l.backend == "mock":
        return WorldLLM(world)
    if l.backend == "replay":
        return ReplayFile(l.transcript_path, mode="replay")
    client = HttpChat(l.url, l.model, l.api_key_env, l.timeout_s)
    if l.transcript_path:
        client = ReplayFile(l.transcript_path, mode="record", inner=client)
    return client


def policy_for(cfg: ExperimentConfig) -> UpdatePolicy:
    t, l = cfg.train, cfg.llm
    return UpdatePolicy(
        n_upd=t.n_upd,
        rho=t.rho,
        floor=t.floor,
        k_confusing=t.k_confusing,
        min_confusion=t.min_confusion,
        max_new_per_query=l.max_new_per_query,
        template_h_top=l.template_h_top,
        use_h=t.mode != "noH",
        use_c=t.mode != "noC",
        protect_cycles=t.protect_cycles,
        reset_stats_each_cycle=t.reset_stats_each_cycle,
    )


def _margins_for(box: prompt.Box, cfg: ExperimentConfig) -> tuple[float, float]:
    m, n = prompt.default_margins(box)
    return (cfg.train.m if cfg.train.m is not None else m, cfg.train.n if cfg.train.n is not None else n)


def prompted_batch(theta, batch: Sequence[prompt.Proposal], cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[str]]:
    """Run proposals through enlargement and the meta-net; returns (R, Rctx, V, labels)."""
    W, H = cfg.world.image_width, cfg.world.image_height
    for p in batch:
        # the world's context feature already encodes the enlarged region; this
        # keeps the box contract exercised on every proposal
        prompt.enlarge_box(p.box, *_margins_for(p.box, cfg), W, H)
    R, Rctx, labels = prompt.stack_batch(batch)
    V = prompt.prompted_feature(R, prompt.meta_forward(theta, Rctx))
    return R, Rctx, V, labels


def evaluate(world, d, theta, cfg, seed) -> tuple[dict, np.ndarray]:
    """Accuracy per category over fresh samples; also the label-embedding-only baseline."""
    t = cfg.train
    snap = Snapshot(d)
    per = {}
    baseline_hits = {}
    for ci, c in enumerate(world.categories):
        batch = sample_batch(world, [c], t.eval_per_category, [seed, 9_000_001, ci])
        R, _, V, _ = prompted_batch(theta, batch, cfg)
        bs = score_batch(snap, V, t.n_sel, None, t.phi, t.tau)
        correct = sum(p == c for p in bs.predicted)
        label_pred = np.argmax(R @ world.label_embeddings.T, axis=1)
        baseline_hits[c] = int(np.sum(label_pred == ci))
        per[c] = {
            "split": "base" if c in world.base else "novel",
            "n": len(batch),
            "correct": int(correct),
            "accuracy": correct / len(batch),
            "n_descriptors": len(d.entries[c].descriptors),
        }
    return per, baseline_hits


def _split_acc(per, cats) -> float:
    n = sum(per[c]["n"] for c in cats)
    return sum(per[c]["correct"] for c in cats) / n


def run_experiment(
    cfg: ExperimentConfig,
    client: LLMClient | None = None,
    on_update: Callable[[int, ds.DescriptorDictionary, UpdateReport | None], None] | None = None,
) -> ExperimentResult:
    """Train on base categories, periodically refresh the dictionary, evaluate on all.

    ``on_update`` is called with cycle 0 after initialisation and after each
    dictionary update.
    """
    cfg.validate()
    t = cfg.train
    world = generate_world(cfg.world)
    rng = np.random.default_rng([t.seed, 1])
    d = seed_dictionary(world, cfg, rng)
    theta = prompt.init_params(world.spec.dim, t.hidden or None, seed=[t.seed, 2])
    if t.mode == "noprompt":
        theta.W2[:] = 0.0
        theta.b2[:] = 0.0
    policy = policy_for(cfg)
    encoder = text_encoder_for(world)
    if t.mode != "static" and client is None:
        client = make_client(cfg, world)
    if on_update:
        on_update(0, d, None)

    base = world.base
    snap = Snapshot(d)
    losses: list[float] = []
    updates: list[UpdateReport] = []
    for step in range(t.n_iters):
        batch = sample_batch(world, base, t.batch, [t.seed, 3, step])
        R, Rctx, _, labels = prompted_batch(theta, batch, cfg)
        loss, grads, _ = prompt.loss_and_grad(theta, snap, R, Rctx, labels, t.n_sel, t.tau, base, t.phi)
        losses.append(loss)

        V = R if t.stats_from == "raw" else prompt.prompted_feature(R, prompt.meta_forward(theta, Rctx))
        record_batch(d, score_batch(snap, V, t.n_sel, None, t.phi, t.tau), labels, t.record_on)

        if t.mode != "noprompt":
            theta = prompt.sgd_step(theta, grads, t.lr)

        done = step + 1
        if t.mode != "static" and done % t.n_upd == 0 and done < t.n_iters:
            report = hierarchical_update(d, policy, client, encoder, done // t.n_upd)
            updates.append(report)
            if report.calls_attempted and report.calls_failed == report.calls_attempted:
                raise LlmUnavailable(f"every LLM call failed in cycle {report.cycle}")
            snap = Snapshot(d)
            if on_update:
                on_update(report.cycle, d, report)

    per, baseline_hits = evaluate(world, d, theta, cfg, t.seed)
    novel_n = sum(per[c]["n"] for c in world.novel)
    ks = {c: len(d.entries[c].descriptors) for c in world.categories}
    report = EvalReport(
        mode=t.mode,
        seed=t.seed,
        base_top1=_split_acc(per, world.base),
        novel_top1=_split_acc(per, world.novel),
        overall_top1=_split_acc(per, world.categories),
        label_baseline_novel_top1=sum(baseline_hits[c] for c in world.novel) / novel_n,
        per_category=per,
        dict_size={
            "total": float(sum(ks.values())),
            "base_mean": float(np.mean([ks[c] for c in world.base])),
            "novel_mean": float(np.mean([ks[c] for c in world.novel])),
        },
        loss_curve=losses,
    )
    return ExperimentResult(report, d, theta, updates, world)


def seed_fraction_count(fraction: float, k: int) -> int:
    return max(1, min(k, math.floor(fraction * k + 0.5)))


@dataclass
class DistractorTrace:
    """Lifecycle of distractor instances in base categories over one run.

    An instance is a (category, phrase, created_at_cycle) triple: a phrase that
    is pruned and later re-suggested counts as a new instance.
    """

    seed: int
    injected: list[tuple[str, str, int]]
    survivors: list[tuple[str, str, int]]  # injected early and still present at the check cycle
    true_pruned_high: list[tuple[str, str, int, int]]  # (category, phrase, usage, category max)
    per_cycle: list[dict]  # cycle -> distractor and true-phrase counts over base categories

    @property
    def purge_rate(self) -> float:
        return 1.0 - len(self.survivors) / len(self.injected) if self.injected else 1.0


def trace_distractors(
    cfg: ExperimentConfig, inject_until: int = 2, check_cycle: int = 3, high_usage_frac: float = 0.5
) -> DistractorTrace:
    """Run ``cfg`` and follow distractor instances created by cycle ``inject_until``.

    A true phrase counts as high-usage when its usage at pruning time is at
    least ``high_usage_frac`` of its category's maximum.
    """
    world = generate_world(cfg.world)
    distractors = set(world.distractors)
    injected: set[tuple[str, str, int]] = set()
    survivors: list[tuple[str, str, int]] = []
    high: list[tuple[str, str, int, int]] = []
    per_cycle: list[dict] = []

    def hook(cycle, d, report):
        present = {
            (c, desc.text, desc.created_at_cycle)
            for c in world.base
            for desc in d.entries[c].descriptors
            if desc.text in distractors
        }
        if cycle <= inject_until:
            injected.update(present)
        if report is not None:
            for cu in report.categories:
                if cu.category not in world.base:
                    continue
                true = set(world.phrases[cu.category])
                for t, u in zip(cu.pruned, cu.pruned_usage):
                    if t in true and cu.max_usage > 0 and u >= high_usage_frac * cu.max_usage:
                        high.append((cu.category, t, u, cu.max_usage))
        if cycle == check_cycle:
            survivors.extend(sorted(injected & present))
        n_true = sum(len(set(d.entries[c].texts) & set(world.phrases[c])) for c in world.base)
        per_cycle.append({"cycle": cycle, "distractors": len(present), "true": n_true})

    run_experiment(cfg, on_update=hook)
    if all(row["cycle"] != check_cycle for row in per_cycle):
        raise ValueError(f"run ended before update cycle {check_cycle}")
    return DistractorTrace(cfg.train.seed, sorted(injected), survivors, high, per_cycle)
