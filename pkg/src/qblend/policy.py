"""Base-policy backends: candidate sampling and text scoring.

Two implementations share one interface. ``MockPolicy`` is a table-driven
sampler used by tests and toy runs: fully deterministic under a seed, with an
optional error-rate knob that promotes a scripted wrong action to the top of
the candidate list (the controlled flaw the rescoring agent must recover
from). ``RemotePolicy`` talks JSON-over-HTTP to a real language-model
service.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import httpx

from .errors import TransportError
from .experience import EnvState, Task, render_context
from .seeding import generator

SCORE_FLOOR = -20.0

ORIGIN_SAMPLED = "sampled_valid"
ORIGIN_MAPPED = "mapped"


@dataclass(frozen=True)
class PolicyContext:
    task: Task
    history: tuple[tuple[EnvState, str], ...]
    current_state: EnvState

    def to_text(self) -> str:
        return render_context(self.task, list(self.history), self.current_state)


@dataclass(frozen=True)
class Candidate:
    text: str
    log_likelihood: float
    origin: str = ORIGIN_SAMPLED


def build_context(task: Task, history, current_state: EnvState, window: int) -> PolicyContext:
    """Keep only the most recent ``window`` (state, action) pairs, oldest first."""
    if window < 0:
        raise ValueError("window must be >= 0")
    pairs = tuple(history[len(history) - window:]) if window else ()
    return PolicyContext(task, pairs, current_state)


@dataclass(frozen=True)
class MockEntry:
    """Scripted candidates for one state, plus the designated wrong action."""

    candidates: tuple[tuple[str, float], ...]
    wrong: str | None = None


class MockPolicy:
    """Deterministic table lookup keyed by the current state's rendered text.

    With ``error_rate`` > 0, each call flips a seeded coin; on a hit the
    entry's wrong action is promoted above the best candidate. Sampling
    parameters (temperature, top_p) are accepted for interface parity but do
    not alter the scripted table.
    """

    def __init__(self, table: dict[tuple[str, str, str], MockEntry], error_rate: float = 0.0):
        if not 0.0 <= error_rate <= 1.0:
            raise ValueError("error_rate must be in [0, 1]")
        self.table = table
        self.error_rate = error_rate

    def sample_candidates(self, ctx: PolicyContext, k: int, temperature: float = 1.0,
                          top_p: float = 0.95, seed: int = 0) -> list[Candidate]:
        if k < 1:
            raise ValueError("k must be >= 1")
        entry = self.table.get(ctx.current_state.text_key())
        if entry is None:
            return []
        pool: dict[str, float] = {}
        for text, ll in entry.candidates:
            pool[text] = max(ll, pool.get(text, -math.inf))
        if entry.wrong is not None and self.error_rate > 0.0:
            rng = generator(seed, "flaw")
            if rng.random() < self.error_rate:
                top = max(pool.values())
                pool[entry.wrong] = min(top / 2.0, -0.01)
        ranked = sorted(pool.items(), key=lambda item: (-item[1], item[0]))
        return [Candidate(text, ll) for text, ll in ranked[:k]]

    def score_text(self, ctx: PolicyContext, text: str) -> float:
        if not text.strip():
            raise ValueError("cannot score empty action text")
        entry = self.table.get(ctx.current_state.text_key())
        if entry is not None:
            wanted = _norm(text)
            matches = [ll for cand, ll in entry.candidates if _norm(cand) == wanted]
            if matches:
                return max(matches)
        return SCORE_FLOOR


def _norm(text: str) -> str:
    return " ".join(text.lower().split())


class RemotePolicy:
    """HTTP adapter: POST /candidates and POST /score with JSON payloads.

    Transient failures are retried; the final failure raises TransportError
    carrying the url and attempt count.
    """

    def __init__(self, url: str, timeout: float = 10.0, retries: int = 2,
                 client: httpx.Client | None = None):
        self.url = url.rstrip("/")
        self.retries = retries
        self._client = client or httpx.Client(timeout=timeout)

    def _post(self, endpoint: str, payload: dict) -> dict:
        attempts = 0
        last_error = None
        for _ in range(self.retries + 1):
            attempts += 1
            try:
                response = self._client.post(self.url + endpoint, json=payload)
                response.raise_for_status()
                return response.json()
            except (httpx.HTTPError, ValueError) as exc:
                last_error = exc
        raise TransportError(
            f"policy backend failed after {attempts} attempts: {last_error}",
            url=self.url + endpoint,
            attempts=attempts,
        )

    def sample_candidates(self, ctx: PolicyContext, k: int, temperature: float = 1.0,
                          top_p: float = 0.95, seed: int = 0) -> list[Candidate]:
        if k < 1:
            raise ValueError("k must be >= 1")
        doc = self._post("/candidates", {
            "context": ctx.to_text(),
            "k": k,
            "temperature": temperature,
            "top_p": top_p,
        })
        pool: dict[str, float] = {}
        try:
            for item in doc["candidates"]:
                text = str(item["text"])
                ll = float(item["logprob"])
                if not math.isfinite(ll) or ll > 0.0:
                    raise TransportError(
                        f"backend returned invalid logprob {ll} for {text!r}",
                        url=self.url + "/candidates", attempts=1)
                pool[text] = max(ll, pool.get(text, -math.inf))
        except (KeyError, TypeError) as exc:
            raise TransportError(f"malformed /candidates response: {exc}",
                                 url=self.url + "/candidates", attempts=1) from exc
        ranked = sorted(pool.items(), key=lambda item: (-item[1], item[0]))
        return [Candidate(text, ll) for text, ll in ranked[:k]]

    def score_text(self, ctx: PolicyContext, text: str) -> float:
        if not text.strip():
            raise ValueError("cannot score empty action text")
        doc = self._post("/score", {"context": ctx.to_text(), "text": text})
        try:
            return float(doc["logprob"])
        except (KeyError, TypeError, ValueError) as exc:
            raise TransportError(f"malformed /score response: {exc}",
                                 url=self.url + "/score", attempts=1) from exc
