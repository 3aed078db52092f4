"""Grounding freely generated action text onto the valid action set.

Candidates that already match a valid action (after trimming and case
folding) pass through directly. The remaining invalid candidates are
embedded, every unmatched valid action is scored by the sum of its cosine
similarities to those invalid embeddings, and the highest-sum actions fill
the candidate list back up to K. Ties break lexicographically so the whole
procedure is deterministic and order-independent.

The built-in embedder hashes character trigrams into a fixed-width count
vector (L2-normalized) - no model downloads, pure function of the text. A
remote adapter is provided for runs that want a real sentence encoder.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass

import httpx
import numpy as np

from .errors import TransportError
from .policy import ORIGIN_MAPPED, ORIGIN_SAMPLED, Candidate

log = logging.getLogger(__name__)

EMBED_DIM = 256


@dataclass(frozen=True, eq=False)
class Embedding:
    vector: np.ndarray
    source_text: str

    @property
    def is_zero(self) -> bool:
        return not np.any(self.vector)


def _normalize_text(text: str) -> str:
    return " ".join(text.lower().split())


def embed_text(text: str, dim: int = EMBED_DIM) -> Embedding:
    """Hashed character-trigram counts, L2-normalized.

    Empty text maps to the (flagged) zero vector. Texts shorter than three
    characters contribute themselves as a single gram.
    """
    norm = _normalize_text(text)
    vec = np.zeros(dim)
    if norm:
        grams = [norm[i:i + 3] for i in range(len(norm) - 2)] if len(norm) >= 3 else [norm]
        for gram in grams:
            vec[zlib.crc32(gram.encode("utf-8")) % dim] += 1.0
        vec /= np.linalg.norm(vec)
    return Embedding(vec, text)


def cosine_similarity(a, b) -> float:
    """a.b / (|a||b|); zero vectors map to 0 by convention."""
    va = a.vector if isinstance(a, Embedding) else np.asarray(a, dtype=float)
    vb = b.vector if isinstance(b, Embedding) else np.asarray(b, dtype=float)
    if va.shape != vb.shape:
        raise ValueError(f"dimension mismatch: {va.shape} vs {vb.shape}")
    na = np.linalg.norm(va)
    nb = np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(va, vb) / (na * nb))


@dataclass(frozen=True)
class GroundedAction:
    text: str
    origin: str
    similarity_sum: float | None = None


def map_to_valid(candidates: list[Candidate], valid_actions: list[str],
                 k: int) -> list[GroundedAction]:
    """Project sampled candidates onto the valid action set.

    Exact matches (m of them) are retained as-is; if any invalid candidates
    remain, the k - m unmatched valid actions with the largest summed cosine
    similarity to the invalid candidates' embeddings are added. Output size
    is min(k, len(valid_actions)) whenever k candidates were sampled.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not valid_actions:
        raise ValueError("valid_actions must be non-empty")
    if not candidates:
        log.warning("map_to_valid called with no candidates; returning empty set")
        return []

    canonical = {}
    for action in valid_actions:
        canonical.setdefault(_normalize_text(action), action)

    picked: dict[str, GroundedAction] = {}
    invalid: list[Candidate] = []
    for cand in candidates:
        match = canonical.get(_normalize_text(cand.text))
        if match is not None:
            if len(picked) < k or match in picked:
                picked.setdefault(match, GroundedAction(match, ORIGIN_SAMPLED))
        else:
            invalid.append(cand)

    result = list(picked.values())
    missing = k - len(picked)
    if invalid and missing > 0:
        invalid_embeddings = [embed_text(c.text) for c in invalid]
        scored = []
        for action in valid_actions:
            if action in picked:
                continue
            emb = embed_text(action)
            total = sum(cosine_similarity(emb, e) for e in invalid_embeddings)
            scored.append((action, total))
        scored.sort(key=lambda item: (-item[1], item[0]))
        for action, total in scored[:missing]:
            result.append(GroundedAction(action, ORIGIN_MAPPED, total))
    return result


class RemoteEmbedder:
    """Adapter for an external embedding service (GET /info, POST /embed)."""

    def __init__(self, url: str, timeout: float = 10.0, retries: int = 2,
                 client: httpx.Client | None = None):
        self.url = url.rstrip("/")
        self.retries = retries
        self._client = client or httpx.Client(timeout=timeout)
        self._dim: int | None = None

    def _request(self, method: str, endpoint: str, payload: dict | None = None) -> dict:
        attempts = 0
        last_error = None
        for _ in range(self.retries + 1):
            attempts += 1
            try:
                if method == "GET":
                    response = self._client.get(self.url + endpoint)
                else:
                    response = self._client.post(self.url + endpoint, json=payload)
                response.raise_for_status()
                return response.json()
            except (httpx.HTTPError, ValueError) as exc:
                last_error = exc
        raise TransportError(
            f"embedding backend failed after {attempts} attempts: {last_error}",
            url=self.url + endpoint, attempts=attempts)

    @property
    def dim(self) -> int:
        if self._dim is None:
            doc = self._request("GET", "/info")
            try:
                self._dim = int(doc["dim"])
            except (KeyError, TypeError, ValueError) as exc:
                raise TransportError(f"malformed /info response: {exc}",
                                     url=self.url + "/info", attempts=1) from exc
        return self._dim

    def embed(self, texts: list[str]) -> list[Embedding]:
        doc = self._request("POST", "/embed", {"texts": list(texts)})
        try:
            vectors = [np.asarray(v, dtype=float) for v in doc["vectors"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise TransportError(f"malformed /embed response: {exc}",
                                 url=self.url + "/embed", attempts=1) from exc
        if len(vectors) != len(texts):
            raise TransportError("embedding count does not match request",
                                 url=self.url + "/embed", attempts=1)
        for vec in vectors:
            if vec.ndim != 1 or vec.shape[0] != self.dim:
                raise TransportError(f"embedding dimension {vec.shape} != announced {self.dim}",
                                     url=self.url + "/embed", attempts=1)
        return [Embedding(vec, text) for vec, text in zip(vectors, texts)]
