"""Uniform access to a chat-completion LLM plus a deterministic scripted backend.

Two backends are provided: an HTTP client speaking the common
chat-completions wire format, and a scripted backend that replays
pre-committed responses keyed by a routing tag embedded in the system
message. All probability-weighted scoring lives here as well.
"""

from __future__ import annotations

import os
import re
import threading
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction

import yaml

from .errors import DegenerateScale, GatewayError, NoParsableScore, ScriptExhausted

ROUTE_PATTERN = re.compile(r"\[route:([A-Za-z0-9_.\-]+)\]")

VALID_ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in VALID_ROLES:
            raise ValueError(f"unknown role {self.role!r}")


@dataclass(frozen=True)
class ChatRequest:
    """One chat-completion call: ordered messages plus sampling settings."""

    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    max_output_tokens: int = 1024
    want_logprobs: bool = False

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("messages must be nonempty")
        if self.messages[0].role == "assistant":
            raise ValueError("first message must be system or user")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")

    @property
    def routing_key(self) -> str:
        """Routing tag `[route:...]` from the system message, or 'default'."""
        for msg in self.messages:
            m = ROUTE_PATTERN.search(msg.content)
            if m:
                return m.group(1)
        return "default"


def request(route: str, *parts: str, system: str = "", temperature: float = 0.0) -> ChatRequest:
    """Build a routed ChatRequest with one system and one user message."""
    sys_text = f"[route:{route}] {system}".strip()
    user_text = "\n\n".join(p for p in parts if p)
    msgs = [ChatMessage("system", sys_text)]
    msgs.append(ChatMessage("user", user_text or "."))
    return ChatRequest(messages=tuple(msgs), temperature=temperature)


@dataclass(frozen=True)
class ChatResponse:
    text: str
    backend_id: str
    token_probs: tuple[tuple[str, float], ...] | None = None

    def __post_init__(self) -> None:
        if self.token_probs is not None:
            for tok, p in self.token_probs:
                if not (0 < p <= 1):
                    raise ValueError(f"token probability out of (0,1]: {tok}={p}")


@dataclass(frozen=True)
class ScoreDistribution:
    """Discrete scores with probabilities, renormalized to sum to one."""

    scale: tuple[int, ...]
    probs: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.scale) != len(self.probs):
            raise ValueError("scale and probs must have equal length")
        if not self.scale:
            raise ValueError("scale must be nonempty")
        if any(b <= a for a, b in zip(self.scale, self.scale[1:])):
            raise ValueError("scale must be strictly increasing")
        if any(p < 0 for p in self.probs):
            raise ValueError("probabilities must be nonnegative")
        total = sum(self.probs)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"probabilities must sum to 1, got {total}")

    @classmethod
    def from_weights(cls, scale: tuple[int, ...], weights: dict[int, float]) -> "ScoreDistribution":
        total = sum(weights.get(s, 0.0) for s in scale)
        if total <= 0:
            raise NoParsableScore("no probability mass on the score scale")
        return cls(scale=tuple(scale), probs=tuple(weights.get(s, 0.0) / total for s in scale))


def expected_score(dist: ScoreDistribution) -> float:
    """Probability-weighted mean score, normalized onto [0, 1].

    Computed in rational arithmetic (probabilities snapped to the nearest
    rational with a bounded denominator) so decimal probability masses
    score exactly, e.g. {2: 0.1, 3: 0.2, 4: 0.4, 5: 0.3} on 1..5 -> 0.725.
    """
    lo, hi = dist.scale[0], dist.scale[-1]
    if hi == lo:
        raise DegenerateScale("scale has a single point; cannot normalize")
    raw = sum(Fraction(p).limit_denominator(10**9) * s for s, p in zip(dist.scale, dist.probs))
    return float((raw - lo) / (hi - lo))


class Backend:
    """Chat-completion backend interface. Implementations are thread-safe."""

    backend_id = "abstract"

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._calls = 0

    @property
    def call_count(self) -> int:
        return self._calls

    def complete(self, req: ChatRequest) -> ChatResponse:
        with self._lock:
            self._calls += 1
        return self._complete(req)

    def _complete(self, req: ChatRequest) -> ChatResponse:
        raise NotImplementedError

    def scripted_distribution(self, req: ChatRequest) -> ScoreDistribution | None:
        """Pre-committed score distribution for this request, if any."""
        return None


@dataclass
class _ScriptRoute:
    replies: list[dict]
    repeat: bool = False
    cursor: int = 0

    def next_entry(self, key: str) -> dict:
        if self.cursor >= len(self.replies):
            if self.repeat and self.replies:
                return self.replies[-1]
            raise ScriptExhausted(f"script exhausted for routing key {key!r}")
        entry = self.replies[self.cursor]
        self.cursor += 1
        return entry


class ScriptedBackend(Backend):
    """Deterministic replay backend.

    A script maps routing keys to ordered replies. Each reply carries a
    text body and optionally an explicit score distribution
    (`score_probs`). Routes with `repeat: true` keep serving their last
    entry forever.
    """

    backend_id = "scripted"

    def __init__(self, script: dict) -> None:
        super().__init__()
        routes = script.get("routes", script)
        self._routes: dict[str, _ScriptRoute] = {}
        for key, spec in routes.items():
            if isinstance(spec, list):
                spec = {"replies": spec}
            replies = [r if isinstance(r, dict) else {"text": str(r)} for r in spec.get("replies", [])]
            self._routes[key] = _ScriptRoute(replies=replies, repeat=bool(spec.get("repeat", False)))

    @classmethod
    def from_file(cls, path: str) -> "ScriptedBackend":
        with open(path, "r", encoding="utf-8") as fh:
            return cls(yaml.safe_load(fh))

    def _route(self, req: ChatRequest) -> _ScriptRoute:
        key = req.routing_key
        route = self._routes.get(key)
        if route is None:
            raise ScriptExhausted(f"no script entry matches routing key {key!r}")
        return route

    def _complete(self, req: ChatRequest) -> ChatResponse:
        with self._lock:
            entry = self._route(req).next_entry(req.routing_key)
        return ChatResponse(text=str(entry.get("text", "")), backend_id=self.backend_id)

    def peek_entry(self, req: ChatRequest) -> dict:
        """Current entry for the request's route without consuming it."""
        route = self._route(req)
        idx = min(route.cursor, len(route.replies) - 1)
        return route.replies[idx]

    def scripted_distribution(self, req: ChatRequest) -> ScoreDistribution | None:
        with self._lock:
            route = self._route(req)
            before = route.cursor
            entry = route.next_entry(req.routing_key)
            probs = entry.get("score_probs")
            if probs is None:
                # Push back: distribution lookup fell through to sampling.
                route.cursor = before
                return None
            self._calls += 1
        weights = {int(k): float(v) for k, v in probs.items()}
        scale = tuple(sorted(weights))
        return ScoreDistribution.from_weights(scale, weights)


class HttpBackend(Backend):
    """Client for a chat-completions HTTP endpoint.

    The API key is read from the environment; the variable name is part of
    the configuration so deployments can point at different providers.
    """

    backend_id = "http"

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key_env: str = "IDM_API_KEY",
        timeout: float = 60.0,
    ) -> None:
        super().__init__()
        self._endpoint = endpoint.rstrip("/")
        self._model = model
        self._timeout = timeout
        self._api_key = os.environ.get(api_key_env)
        if not self._api_key:
            raise GatewayError(f"API key environment variable {api_key_env!r} is not set")

    def _complete(self, req: ChatRequest) -> ChatResponse:
        import httpx

        payload = {
            "model": self._model,
            "messages": [{"role": m.role, "content": m.content} for m in req.messages],
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        }
        if req.want_logprobs:
            payload["logprobs"] = True
            payload["top_logprobs"] = 20
        try:
            resp = httpx.post(
                f"{self._endpoint}/chat/completions",
                json=payload,
                headers={"Authorization": f"Bearer {self._api_key}"},
                timeout=self._timeout,
            )
            resp.raise_for_status()
        except httpx.HTTPError as exc:
            raise GatewayError(f"backend unavailable: {exc}") from exc
        body = resp.json()
        choice = body["choices"][0]
        token_probs = None
        logprobs = (choice.get("logprobs") or {}).get("content")
        if logprobs:
            import math

            token_probs = tuple(
                (t["token"], min(1.0, math.exp(t["logprob"]))) for t in logprobs if t.get("logprob") is not None
            )
        return ChatResponse(text=choice["message"]["content"], backend_id=self.backend_id, token_probs=token_probs)


_SCORE_TOKEN = re.compile(r"-?\d+")


def _parse_score(text: str, scale: tuple[int, ...]) -> int | None:
    for tok in _SCORE_TOKEN.findall(text):
        val = int(tok)
        if val in scale:
            return val
    return None


def score_distribution(
    backend: Backend,
    prompt: ChatRequest,
    scale: tuple[int, ...],
    n_samples: int = 8,
) -> ScoreDistribution:
    """Distribution of scores over `scale` for the given prompt.

    Prefers a token-probability readout (or a scripted distribution);
    otherwise draws `n_samples` completions and uses empirical
    frequencies.
    """
    if not scale:
        raise ValueError("scale must be nonempty")
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    scale = tuple(sorted(scale))

    scripted = backend.scripted_distribution(prompt)
    if scripted is not None:
        return ScoreDistribution.from_weights(scale, dict(zip(scripted.scale, scripted.probs)))

    first = backend.complete(prompt)
    if first.token_probs:
        weights: dict[int, float] = {}
        for tok, p in first.token_probs:
            tok = tok.strip()
            if tok.lstrip("-").isdigit() and int(tok) in scale:
                weights[int(tok)] = weights.get(int(tok), 0.0) + p
        if weights:
            return ScoreDistribution.from_weights(scale, weights)

    counts: Counter[int] = Counter()
    parsed = _parse_score(first.text, scale)
    if parsed is not None:
        counts[parsed] += 1
    for _ in range(n_samples - 1):
        resp = backend.complete(prompt)
        val = _parse_score(resp.text, scale)
        if val is not None:
            counts[val] += 1
    if not counts:
        raise NoParsableScore("no completion contained a scale value")
    return ScoreDistribution.from_weights(scale, {k: float(v) for k, v in counts.items()})
