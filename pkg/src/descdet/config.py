"""Experiment configuration: four flat sections loaded from one JSON document."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from descdet.errors import ConfigError

MODES = ("full", "static", "noprompt", "noH", "noC")


@dataclass
class WorldSpec:
    seed: int = 0
    dim: int = 16
    n_categories: int = 12
    n_base: int = 8
    descriptors_per_category: int = 6
    presence_prob: float = 0.7
    noise_sigma: float = 0.15
    context_gain: float = 0.8
    n_distractors_per_reply: int = 1
    image_width: float = 640.0
    image_height: float = 480.0
    # true phrases the world LLM reveals per reply
    reply_size: int = 2
    n_distractor_pool: int = 64
    # how much of a category's prototype its label embedding carries
    label_alignment: float = 0.35


@dataclass
class TrainConfig:
    mode: str = "full"
    n_iters: int = 2000
    batch: int = 32
    lr: float = 0.001
    tau: float = 0.07
    n_sel: int = 3
    n_upd: int = 250
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    # None means half the box width / height
    m: float | None = None
    n: float | None = None
    hidden: int = 0  # 0 means max(2, dim // 2)
    gamma: float = 0.85
    alpha: float = 0.5
    rho: float = 0.2
    floor: int = 3
    k_confusing: int = 3
    min_confusion: int = 2
    protect_cycles: int = 1
    reset_stats_each_cycle: bool = True
    seed_fraction: float = 0.34
    init_distractors: int = 1
    eval_per_category: int = 200
    phi: str = "cosine"
    record_on: str = "true"
    stats_from: str = "prompted"
    merge_scope: str = "category"


@dataclass
class LLMConfig:
    backend: str = "mock"
    url: str = ""
    model: str = ""
    api_key_env: str = ""
    timeout_s: float = 30.0
    template_h_top: int = 5
    max_new_per_query: int = 10
    # replay: transcript to read; http: transcript to record into (optional)
    transcript_path: str = ""


@dataclass
class IOConfig:
    out_dir: str = "runs/default"
    dict_path: str = ""
    checkpoint_path: str = ""


@dataclass
class ExperimentConfig:
    world: WorldSpec = field(default_factory=WorldSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    llm: LLMConfig = field(default_factory=LLMConfig)
    io: IOConfig = field(default_factory=IOConfig)

    def validate(self) -> "ExperimentConfig":
        w, t, l = self.world, self.train, self.llm
        checks = [
            (t.mode in MODES, f"train.mode must be one of {MODES}"),
            (t.phi in ("cosine", "softmax"), "train.phi must be 'cosine' or 'softmax'"),
            (t.record_on in ("true", "predicted"), "train.record_on must be 'true' or 'predicted'"),
            (t.stats_from in ("prompted", "raw"), "train.stats_from must be 'prompted' or 'raw'"),
            (t.merge_scope in ("category", "global"), "train.merge_scope must be 'category' or 'global'"),
            (l.backend in ("mock", "replay", "http"), "llm.backend must be mock, replay or http"),
            (t.n_iters >= 1 and t.batch >= 1 and t.n_sel >= 1 and t.n_upd >= 1, "train counts must be positive"),
            (t.lr >= 0 and t.tau > 0, "train.lr must be >= 0 and train.tau > 0"),
            (0 < t.seed_fraction <= 1, "train.seed_fraction must lie in (0, 1]"),
            (0 < t.gamma < 1 and 0 <= t.alpha <= 1 and 0 < t.rho < 1, "gamma, alpha or rho out of range"),
            (t.eval_per_category >= 1, "train.eval_per_category must be positive"),
            (bool(t.seeds) and all(isinstance(s, int) for s in t.seeds), "train.seeds must be a non-empty int list"),
            (w.dim >= 4 and 0 < w.n_base < w.n_categories, "world needs dim >= 4 and 0 < n_base < n_categories"),
            (0 < w.presence_prob <= 1 and w.noise_sigma >= 0, "world.presence_prob or noise_sigma out of range"),
            (l.backend != "http" or bool(l.url), "llm.url is required for the http backend"),
            (l.backend != "replay" or bool(l.transcript_path), "llm.transcript_path is required for replay"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, doc: Any) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        sections = {f.name: f.default_factory for f in dataclasses.fields(cls)}
        for key in doc:
            if key not in sections:
                raise ConfigError(f"unknown config key {key!r}")
        built = {name: _section(name, factory(), doc.get(name, {})) for name, factory in sections.items()}
        return cls(**built).validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc.msg} (line {exc.lineno})") from None
        return cls.from_dict(doc)


def _section(name: str, default, values: Any):
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in dataclasses.fields(default)}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key '{name}.{key}'")
        setattr(default, key, _coerce(f"{name}.{key}", getattr(default, key), value, key))
    return default


_NULLABLE = {"m", "n"}


def _coerce(where: str, current: Any, value: Any, key: str) -> Any:
    numeric = isinstance(value, (int, float)) and not isinstance(value, bool)
    if key in _NULLABLE:
        if value is None or numeric:
            return None if value is None else float(value)
    elif isinstance(current, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(current, int):
        if numeric and isinstance(value, int):
            return value
    elif isinstance(current, float):
        if numeric:
            return float(value)
    elif isinstance(current, type(value)):
        return value
    raise ConfigError(f"config key {where} has invalid value {value!r}")
