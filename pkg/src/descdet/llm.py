"""Query templates, LLM backends, reply parsing and the periodic dictionary update."""

from __future__ import annotations

import json
import logging
import os
import re
import time
from collections import defaultdict, deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import httpx

from descdet import descriptors as ds
from descdet.errors import EmptyPayloadError, LlmUnavailable, MissingScript

log = logging.getLogger(__name__)

TEMPLATE_H = "Q: There are several useful visual features to tell there is a {category} in a photo, including {items}."
TEMPLATE_C = (
    "Q: Which visual features could be used to distinguish {category} from some confusing categories "
    "including {items} in a photo?"
)


@dataclass(frozen=True)
class LLMQuery:
    kind: str  # "H" (high-frequency descriptors) or "C" (confusing categories)
    category: str
    payload: tuple[str, ...]
    rendered: str
    cycle: int = 0


def build_template_h(category: str, high_freq: Sequence[str], cycle: int = 0) -> LLMQuery:
    if not high_freq:
        raise EmptyPayloadError(f"template H for {category!r} needs at least one descriptor")
    payload = tuple(high_freq)
    return LLMQuery("H", category, payload, TEMPLATE_H.format(category=category, items=", ".join(payload)), cycle)


def build_template_c(category: str, confusers: Sequence[str], cycle: int = 0) -> LLMQuery:
    if not confusers:
        raise EmptyPayloadError(f"template C for {category!r} needs at least one confusing category")
    payload = tuple(confusers)
    return LLMQuery("C", category, payload, TEMPLATE_C.format(category=category, items=", ".join(payload)), cycle)


_SPLIT = re.compile(r"[\n\r,;]")
_BULLET = re.compile(r"^(?:[-*•]+|\d+[.)](?=\s|$)|[a-z]\)(?=\s|$))\s*")
_TRAILING = ".!?:"
_QUOTES = "\"'`"


def _clean(piece: str) -> str:
    text = " ".join(piece.lower().split())
    while True:
        before = text
        text = _BULLET.sub("", text).strip()
        text = text.rstrip(_TRAILING).strip()
        text = text.strip(_QUOTES).strip()
        if text == before:
            return text


def parse_reply(raw: str) -> list[str]:
    """Split a free-text reply into normalised descriptor phrases, order preserved."""
    out: list[str] = []
    for piece in _SPLIT.split(raw or ""):
        text = _clean(piece)
        if text and ds.is_valid_phrase(text) and text not in out:
            out.append(text)
    return out


class LLMClient:
    """Anything with ``send(query) -> str``; raise LlmUnavailable on failure."""

    def send(self, query: LLMQuery) -> str:
        raise NotImplementedError


class ScriptedMock(LLMClient):
    """Canned replies keyed by ``(kind, category)``.

    A value may be a string (returned every time) or a list consumed in order.
    """

    def __init__(self, script: Mapping[tuple[str, str], str | Sequence[str]] | None = None):
        self.script = dict(script or {})
        self._cursor: dict[tuple[str, str], int] = defaultdict(int)
        self.calls: list[LLMQuery] = []

    def send(self, query: LLMQuery) -> str:
        self.calls.append(query)
        key = (query.kind, query.category)
        if key not in self.script:
            raise MissingScript(f"no scripted reply for {key}")
        value = self.script[key]
        if isinstance(value, str):
            return value
        i = self._cursor[key]
        if i >= len(value):
            raise MissingScript(f"scripted replies for {key} exhausted")
        self._cursor[key] += 1
        return value[i]


class FunctionClient(LLMClient):
    def __init__(self, fn: Callable[[LLMQuery], str]):
        self.fn = fn

    def send(self, query: LLMQuery) -> str:
        return self.fn(query)


class ReplayFile(LLMClient):
    """Record a session to a JSONL transcript, or replay one byte-for-byte.

    In ``record`` mode every call goes to ``inner`` and the exchange is appended
    to the transcript. In ``replay`` mode replies come from the transcript,
    matched on (cycle, category, kind, rendered) in recorded order.
    """

    def __init__(self, path, mode: str = "replay", inner: LLMClient | None = None):
        self.path = Path(path)
        self.mode = mode
        self.inner = inner
        if mode == "record":
            if inner is None:
                raise ValueError("record mode needs an inner client")
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")
        elif mode == "replay":
            if not self.path.is_file():
                raise LlmUnavailable(f"replay transcript {self.path} does not exist")
            self._replies: dict[tuple, deque] = defaultdict(deque)
            for lineno, line in enumerate(self.path.read_text(encoding="utf-8").splitlines(), 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    key = (rec["cycle"], rec["category"], rec["kind"], rec["rendered"])
                    reply = rec["reply"]
                except (json.JSONDecodeError, KeyError, TypeError):
                    raise LlmUnavailable(f"{self.path}:{lineno}: malformed transcript record") from None
                self._replies[key].append(reply)
        else:
            raise ValueError(f"unknown mode {mode!r}")

    def send(self, query: LLMQuery) -> str:
        if self.mode == "replay":
            queue = self._replies.get((query.cycle, query.category, query.kind, query.rendered))
            if not queue:
                raise MissingScript(f"transcript has no reply for {query.kind}/{query.category} at cycle {query.cycle}")
            return queue.popleft()
        reply = self.inner.send(query)
        rec = {"cycle": query.cycle, "category": query.category, "kind": query.kind, "rendered": query.rendered, "reply": reply}
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
        return reply


class HttpChat(LLMClient):
    """Chat-completion client: POST {model, messages} and read choices[0].message.content."""

    def __init__(
        self,
        url: str,
        model: str,
        api_key_env: str = "",
        timeout_s: float = 30.0,
        retries: int = 1,
        backoff_s: float = 1.0,
        transport: httpx.BaseTransport | None = None,
    ):
        self.url = url
        self.model = model
        self.timeout_s = timeout_s
        self.retries = retries
        self.backoff_s = backoff_s
        self.headers = {"Content-Type": "application/json"}
        if api_key_env:
            key = os.environ.get(api_key_env)
            if not key:
                raise LlmUnavailable(f"environment variable {api_key_env} is not set")
            self.headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(timeout=timeout_s, transport=transport)

    def _once(self, query: LLMQuery) -> str:
        body = {"model": self.model, "messages": [{"role": "user", "content": query.rendered}], "temperature": 0}
        resp = self._client.post(self.url, json=body, headers=self.headers)
        if not 200 <= resp.status_code < 300:
            raise LlmUnavailable(f"HTTP {resp.status_code} from {self.url}")
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError):
            raise LlmUnavailable("malformed chat-completion response") from None
        if not isinstance(content, str):
            raise LlmUnavailable("chat-completion content is not text")
        return content

    def send(self, query: LLMQuery) -> str:
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff_s * 2 ** (attempt - 1))
            try:
                return self._once(query)
            except LlmUnavailable as exc:
                last = exc
            except httpx.HTTPError as exc:
                last = LlmUnavailable(f"{type(exc).__name__}: {exc}")
            log.warning("LLM call failed (attempt %d): %s", attempt + 1, last)
        raise last

    def close(self) -> None:
        self._client.close()


@dataclass
class UpdatePolicy:
    n_upd: int = 250
    rho: float = 0.2
    floor: int = 3
    k_confusing: int = 3
    min_confusion: int = 2
    max_new_per_query: int = 10
    template_h_top: int = 5
    use_h: bool = True
    use_c: bool = True
    protect_cycles: int = 1
    reset_stats_each_cycle: bool = True

    def __post_init__(self):
        for name in ("n_upd", "floor", "k_confusing", "max_new_per_query", "template_h_top"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.min_confusion < 0 or self.protect_cycles < 0:
            raise ValueError("min_confusion and protect_cycles must be non-negative")
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")


@dataclass
class CategoryUpdate:
    category: str
    pruned: list[str] = field(default_factory=list)
    pruned_usage: list[int] = field(default_factory=list)
    max_usage: int = 0  # highest usage in the category before pruning
    queries: list[str] = field(default_factory=list)
    replies: list[str] = field(default_factory=list)
    parsed: list[str] = field(default_factory=list)
    merged: int = 0
    inserted: int = 0
    errors: list[str] = field(default_factory=list)


@dataclass
class UpdateReport:
    cycle: int
    categories: list[CategoryUpdate] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False, sort_keys=True)

    @property
    def calls_attempted(self) -> int:
        return sum(len(c.queries) for c in self.categories)

    @property
    def calls_failed(self) -> int:
        return sum(1 for c in self.categories for e in c.errors if e.startswith("llm:"))


def _ask(d, query, llm, text_encoder, policy, cycle, out: CategoryUpdate) -> None:
    out.queries.append(query.rendered)
    try:
        raw = llm.send(query)
    except LlmUnavailable as exc:
        out.errors.append(f"llm:{query.kind}: {exc}")
        return
    out.replies.append(raw)
    for phrase in parse_reply(raw)[: policy.max_new_per_query]:
        try:
            outcome = ds.merge_descriptor(d, query.category, phrase, text_encoder(phrase), cycle)
        except Exception as exc:  # one bad phrase must not sink the cycle
            out.errors.append(f"encode:{phrase}: {exc}")
            continue
        out.parsed.append(phrase)
        if outcome.merged:
            out.merged += 1
        else:
            out.inserted += 1


def hierarchical_update(
    d: ds.DescriptorDictionary,
    policy: UpdatePolicy,
    llm: LLMClient,
    text_encoder: ds.TextEncoder,
    cycle: int,
) -> UpdateReport:
    """Prune, then grow via template H, then via template C, category by category."""
    report = UpdateReport(cycle)
    for category in d.categories:
        entry = d.entries[category]
        out = CategoryUpdate(category)
        report.categories.append(out)

        usage = {desc.text: desc.usage_count for desc in entry.descriptors}
        out.pruned = ds.prune_low_frequency(
            d, category, policy.rho, policy.floor, cycle=cycle, protect_cycles=policy.protect_cycles
        )
        out.pruned_usage = [usage[t] for t in out.pruned]
        out.max_usage = max(usage.values(), default=0)

        if policy.use_h:
            top = [entry.descriptors[i].text for i in ds.top_usage_indices(entry, policy.template_h_top)]
            _ask(d, build_template_h(category, top, cycle), llm, text_encoder, policy, cycle, out)

        if policy.use_c:
            confusers = ds.confusing_categories(d, category, policy.k_confusing, policy.min_confusion)
            if confusers:
                _ask(d, build_template_c(category, confusers, cycle), llm, text_encoder, policy, cycle, out)

    d.cycle = cycle
    if policy.reset_stats_each_cycle:
        d.reset_stats()
    return report
