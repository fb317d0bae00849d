"""Yes/no answerers queried by the traversal engine.

Every backend exposes ``ask(question) -> Answer`` and ``descriptor()``.
Backends never invent an answer: anything that is not a clean yes/no is
raised as an :class:`OracleError`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import sys
import threading
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from typing import Any, Protocol, TextIO

import httpx

log = logging.getLogger(__name__)

PROMPT_VERSION = "yesno-prompt/1"
API_KEY_ENV = "GUIDANCE_API_KEY"

SYSTEM_PROMPT = (
    "You are reading a clinical note. Answer the question strictly with yes or no, "
    "using only information stated in the note. If the note does not mention the "
    "finding, or explicitly denies it, answer no."
)
STRICT_SYSTEM_PROMPT = "Reply with exactly one word: yes or no."


class OracleError(Exception):
    """The oracle could not produce a yes/no answer."""


class AbsentFeature(OracleError):
    pass


class UnparseableReply(OracleError):
    pass


class OracleTimeout(OracleError):
    pass


class TransportError(OracleError):
    pass


@dataclass(frozen=True)
class Question:
    feature_id: str
    text: str
    node_id: str
    criterion_index: int | None = None

    def to_json(self) -> dict[str, Any]:
        return {
            "feature_id": self.feature_id,
            "text": self.text,
            "node_id": self.node_id,
            "criterion_index": self.criterion_index,
        }

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> Question:
        return cls(d["feature_id"], d["text"], d["node_id"], d.get("criterion_index"))


@dataclass(frozen=True)
class Answer:
    value: bool
    raw: str | None = None
    latency: float | None = None
    retries: int = 0

    def to_json(self) -> dict[str, Any]:
        return {
            "value": "yes" if self.value else "no",
            "raw": self.raw,
            "latency": self.latency,
            "retries": self.retries,
        }

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> Answer:
        if d["value"] not in ("yes", "no"):
            raise ValueError(f"answer value must be yes/no, got {d['value']!r}")
        return cls(d["value"] == "yes", d.get("raw"), d.get("latency"), d.get("retries", 0))


YES = Answer(True)
NO = Answer(False)


class Oracle(Protocol):
    def ask(self, q: Question) -> Answer: ...

    def descriptor(self) -> dict[str, Any]: ...


def config_hash(config: Mapping[str, Any]) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _descriptor(backend: str, config: Mapping[str, Any], prompt_version: str | None = None) -> dict[str, Any]:
    return {
        "backend": backend,
        "config_hash": config_hash(config),
        "prompt_version": prompt_version,
    }


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class NoiseConfig:
    p_no_to_yes: float = 0.0
    p_yes_to_no: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("p_no_to_yes", "p_yes_to_no"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if not -(2**63) <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")


@dataclass
class RemoteConfig:
    endpoint: str = "http://localhost:8000/v1/chat/completions"
    model: str = "gpt-4o"
    temperature: float = 0.2
    timeout: float = 30.0
    max_retries: int = 2
    requests_per_second: float | None = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


@dataclass
class OracleConfig:
    backend: str = "scripted"
    absent_feature_policy: str = "no"
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    remote: RemoteConfig = field(default_factory=RemoteConfig)

    BACKENDS = ("scripted", "noisy", "interactive", "remote", "always-yes", "always-no")

    def __post_init__(self):
        if self.backend not in self.BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.absent_feature_policy not in ("no", "error"):
            raise ValueError("absent_feature_policy must be 'no' or 'error'")

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> OracleConfig:
        return cls(
            backend=d.get("backend", "scripted"),
            absent_feature_policy=d.get("absent_feature_policy", "no"),
            noise=NoiseConfig(**d.get("noise", {})),
            remote=RemoteConfig(**d.get("remote", {})),
        )

    def to_json(self) -> dict[str, Any]:
        return asdict(self)


def derive_seed(base: int, key: str) -> int:
    """Stable 64-bit seed for one traversal, independent of processing order."""
    digest = hashlib.sha256(f"{base}:{key}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


# ---------------------------------------------------------------------------
# scripted / noisy / constant
# ---------------------------------------------------------------------------


def scripted_answer(features: Mapping[str, bool], q: Question, policy: str = "no") -> Answer:
    if q.feature_id in features:
        return YES if features[q.feature_id] else NO
    if policy == "error":
        raise AbsentFeature(f"feature {q.feature_id!r} not in vignette")
    return NO


def noisy_answer(inner: Answer, noise: NoiseConfig, rng: random.Random) -> Answer:
    """Flip ``inner`` per the asymmetric noise model, consuming exactly one draw."""
    u = rng.random()
    p = noise.p_yes_to_no if inner.value else noise.p_no_to_yes
    if u < p:
        return Answer(not inner.value, inner.raw, inner.latency, inner.retries)
    return inner


class ScriptedOracle:
    def __init__(self, features: Mapping[str, bool], policy: str = "no", backend: str = "scripted"):
        self.features = dict(features)
        self.policy = policy
        self.backend = backend

    def ask(self, q: Question) -> Answer:
        return scripted_answer(self.features, q, self.policy)

    def descriptor(self) -> dict[str, Any]:
        return _descriptor(self.backend, {"policy": self.policy})


class NoisyOracle:
    def __init__(self, inner: Oracle, noise: NoiseConfig):
        self.inner = inner
        self.noise = noise
        self.rng = random.Random(noise.seed)

    def ask(self, q: Question) -> Answer:
        return noisy_answer(self.inner.ask(q), self.noise, self.rng)

    def descriptor(self) -> dict[str, Any]:
        inner = self.inner.descriptor()
        cfg = {
            "inner": inner["config_hash"],
            "p_no_to_yes": self.noise.p_no_to_yes,
            "p_yes_to_no": self.noise.p_yes_to_no,
            "seed": self.noise.seed,
        }
        return _descriptor("noisy", cfg, inner.get("prompt_version"))


class ConstantOracle:
    """Answers the same value to every question (always-yes / always-no baselines)."""

    def __init__(self, value: bool):
        self.value = value

    def ask(self, q: Question) -> Answer:
        return YES if self.value else NO

    def descriptor(self) -> dict[str, Any]:
        return _descriptor("always-yes" if self.value else "always-no", {"value": self.value})


class ReplayMismatch(OracleError):
    pass


class ReplayOracle:
    """Feeds back recorded (question, answer) pairs, checking the questions match."""

    def __init__(self, pairs: Sequence[tuple[Question, Answer]]):
        self.pairs = list(pairs)
        self.pos = 0

    def ask(self, q: Question) -> Answer:
        if self.pos >= len(self.pairs):
            raise ReplayMismatch(f"no recorded answer for {q.node_id}/{q.feature_id}")
        rq, ra = self.pairs[self.pos]
        if (rq.node_id, rq.feature_id, rq.criterion_index) != (q.node_id, q.feature_id, q.criterion_index):
            raise ReplayMismatch(f"expected question {rq.node_id}/{rq.feature_id}, got {q.node_id}/{q.feature_id}")
        self.pos += 1
        return ra

    def descriptor(self) -> dict[str, Any]:
        return _descriptor("replay", {"answers": len(self.pairs)})


# ---------------------------------------------------------------------------
# interactive
# ---------------------------------------------------------------------------


class InteractiveOracle:
    def __init__(self, read: Callable[[str], str] = input, out: TextIO | None = None):
        self.read = read
        self.out = out or sys.stdout

    def ask(self, q: Question) -> Answer:
        print(f"[{q.node_id}] {q.text}", file=self.out)
        while True:
            try:
                reply = self.read("answer (y/n): ").strip().lower()
            except EOFError as exc:
                raise OracleError("input closed before an answer was given") from exc
            if reply in ("y", "n"):
                return Answer(reply == "y", raw=reply)
            print("please type y or n", file=self.out)

    def descriptor(self) -> dict[str, Any]:
        return _descriptor("interactive", {})


# ---------------------------------------------------------------------------
# remote chat-completions backend
# ---------------------------------------------------------------------------

_TOKEN = re.compile(r"[a-z]+")


def parse_reply(raw: str) -> bool:
    """First standalone "yes" or "no" word decides; raises UnparseableReply otherwise."""
    for tok in _TOKEN.findall(raw.lower()):
        if tok == "yes":
            return True
        if tok == "no":
            return False
    raise UnparseableReply(f"no yes/no token in reply {raw[:80]!r}")


class TokenBucket:
    """Thread-safe token bucket; ``acquire`` blocks until a token is available."""

    def __init__(self, rate: float, capacity: float | None = None, clock=time.monotonic, sleep=time.sleep):
        if rate <= 0:
            raise ValueError("rate must be > 0")
        self.rate = rate
        self.capacity = capacity if capacity is not None else max(1.0, rate)
        self.tokens = self.capacity
        self.clock = clock
        self.sleep = sleep
        self.last = clock()
        self.lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self.lock:
                now = self.clock()
                self.tokens = min(self.capacity, self.tokens + (now - self.last) * self.rate)
                self.last = now
                if self.tokens >= 1:
                    self.tokens -= 1
                    return
                wait = (1 - self.tokens) / self.rate
            self.sleep(wait)


_rate_limiter: TokenBucket | None = None
_rate_lock = threading.Lock()


def set_rate_limit(requests_per_second: float | None) -> None:
    """Install (or clear) the process-wide limiter shared by all remote oracles."""
    global _rate_limiter
    with _rate_lock:
        _rate_limiter = TokenBucket(requests_per_second) if requests_per_second else None


def build_messages(vignette_text: str, question: str, strict: bool = False) -> list[dict[str, str]]:
    system = STRICT_SYSTEM_PROMPT if strict else SYSTEM_PROMPT
    user = f"Clinical note:\n{vignette_text}\n\nQuestion: {question}"
    return [{"role": "system", "content": system}, {"role": "user", "content": user}]


class ChatClient:
    """Minimal chat-completions client: one POST per call, bounded retries on transport faults."""

    def __init__(self, cfg: RemoteConfig, api_key: str | None = None, http: httpx.Client | None = None):
        self.cfg = cfg
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.http = http or httpx.Client(timeout=cfg.timeout)

    def complete(self, messages: list[dict[str, str]]) -> tuple[str, float]:
        payload = {"model": self.cfg.model, "temperature": self.cfg.temperature, "messages": messages}
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        last: Exception | None = None
        for attempt in range(self.cfg.max_retries + 1):
            if _rate_limiter is not None:
                _rate_limiter.acquire()
            start = time.monotonic()
            try:
                resp = self.http.post(self.cfg.endpoint, json=payload, headers=headers, timeout=self.cfg.timeout)
            except httpx.TimeoutException as exc:
                raise OracleTimeout(f"no reply from {self.cfg.endpoint} within {self.cfg.timeout}s") from exc
            except httpx.HTTPError as exc:
                last = exc
                log.info("transport error (attempt %d): %s", attempt + 1, exc)
            else:
                latency = time.monotonic() - start
                if resp.status_code == 429 or resp.status_code >= 500:
                    last = TransportError(f"HTTP {resp.status_code}")
                    log.info("server error (attempt %d): HTTP %d", attempt + 1, resp.status_code)
                elif resp.status_code >= 400:
                    raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                else:
                    try:
                        content = resp.json()["choices"][0]["message"]["content"]
                    except (ValueError, KeyError, IndexError, TypeError) as exc:
                        raise TransportError(f"malformed completion payload: {resp.text[:200]}") from exc
                    if not isinstance(content, str):
                        raise TransportError("completion content is not text")
                    return content, latency
            if attempt < self.cfg.max_retries:
                time.sleep(min(2.0, 0.1 * 2**attempt))
        raise TransportError(f"request failed after {self.cfg.max_retries + 1} attempt(s): {last}")

    def close(self) -> None:
        self.http.close()


class RemoteOracle:
    def __init__(self, cfg: RemoteConfig, vignette_text: str, client: ChatClient | None = None):
        self.cfg = cfg
        self.vignette_text = vignette_text
        self.client = client or ChatClient(cfg)

    def ask(self, q: Question) -> Answer:
        raw, latency = self.client.complete(build_messages(self.vignette_text, q.text))
        try:
            return Answer(parse_reply(raw), raw=raw, latency=latency)
        except UnparseableReply:
            log.info("unparseable reply %r; retrying with strict instruction", raw[:80])
        raw2, latency2 = self.client.complete(build_messages(self.vignette_text, q.text, strict=True))
        try:
            value = parse_reply(raw2)
        except UnparseableReply as exc:
            raise UnparseableReply(f"unparseable after retry: {raw!r} then {raw2!r}") from exc
        return Answer(value, raw=raw2, latency=latency + latency2, retries=1)

    def descriptor(self) -> dict[str, Any]:
        cfg = {"endpoint": self.cfg.endpoint, "model": self.cfg.model, "temperature": self.cfg.temperature}
        return _descriptor("remote", cfg, PROMPT_VERSION)


def build_oracle(
    cfg: OracleConfig,
    *,
    features: Mapping[str, bool] | None = None,
    text: str = "",
    seed: int = 0,
    client: ChatClient | None = None,
) -> Oracle:
    """One oracle instance for one traversal."""
    b = cfg.backend
    if b == "scripted":
        return ScriptedOracle(features or {}, cfg.absent_feature_policy)
    if b == "noisy":
        noise = NoiseConfig(cfg.noise.p_no_to_yes, cfg.noise.p_yes_to_no, seed)
        return NoisyOracle(ScriptedOracle(features or {}, cfg.absent_feature_policy), noise)
    if b == "always-yes":
        return ConstantOracle(True)
    if b == "always-no":
        return ConstantOracle(False)
    if b == "interactive":
        return InteractiveOracle()
    return RemoteOracle(cfg.remote, text, client)
