"""Dynamic action rescoring and the inference-time episode loop.

Each decision blends two normalized scores: the policy's likelihood p and the
critic's action value q, combined as

    S(a) = alpha(t) * p + (1 - alpha(t)) * q,   alpha(t) = max(b, d^t)

so the first decision (t = 0) trusts the policy completely and the critic's
influence grows with the step count, floored at b. Min-max normalization maps
each list onto [0, 1]; when all raw values are equal every action scores 0.5.
A static-alpha override reproduces fixed-weight blending exactly (including
at t = 0), which the dynamic formula cannot express.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, replace

import numpy as np

from .errors import NumericError
from .experience import Task
from .grounding import map_to_valid
from .policy import ORIGIN_SAMPLED, build_context
from .seeding import child_seed


@dataclass(frozen=True)
class RescoreConfig:
    b: float = 0.6
    d: float = 0.97
    k: int = 5
    static_alpha: float | None = None
    window: int = 10
    temperature: float = 1.0
    top_p: float = 0.95
    step_origin: str = "zero_based"

    def validate(self) -> None:
        if not 0.0 <= self.b <= 1.0 or not 0.0 <= self.d <= 1.0:
            raise ValueError("b and d must lie in [0, 1]")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.static_alpha is not None and not 0.0 <= self.static_alpha <= 1.0:
            raise ValueError("static_alpha must lie in [0, 1]")
        if self.window < 0:
            raise ValueError("window must be >= 0")
        if self.step_origin != "zero_based":
            raise ValueError("step counting is zero-based")


# (d, b) pairs mirroring the per-environment settings: dense long-horizon,
# medium, and short-horizon tasks.
ENV_PRESETS = {
    "dense": (0.97, 0.6),
    "medium": (0.95, 0.6),
    "short": (0.9, 0.5),
}


@dataclass(frozen=True)
class ScoredAction:
    action: str
    origin: str
    p_raw: float
    p_norm: float
    q_raw: float | None
    q_norm: float | None
    combined: float


@dataclass(frozen=True)
class StepAudit:
    t: int
    alpha: float
    scored: tuple[ScoredAction, ...]
    chosen: str
    reward: float


@dataclass(frozen=True)
class EpisodeRecord:
    task: Task
    seed: int
    steps: tuple[StepAudit, ...]
    final_score: float
    success: bool
    step_count: int
    wall_ms: float

    def actions(self) -> list[str]:
        return [s.chosen for s in self.steps]


def normalize_scores(values) -> list[float]:
    """Min-max rescale onto [0, 1]; all-equal inputs map to 0.5 each."""
    arr = np.asarray(list(values), dtype=float)
    if arr.size == 0:
        raise ValueError("cannot normalize an empty list")
    if not np.all(np.isfinite(arr)):
        raise NumericError("normalize_scores requires finite inputs")
    lo = float(arr.min())
    hi = float(arr.max())
    if hi == lo:
        return [0.5] * arr.size
    return [float(x) for x in (arr - lo) / (hi - lo)]


def alpha_schedule(t: int, b: float, d: float) -> float:
    """Dynamic combination weight max(b, d^t); equals 1 at t = 0."""
    if t < 0:
        raise ValueError("t must be >= 0")
    if not 0.0 <= b <= 1.0 or not 0.0 <= d <= 1.0:
        raise ValueError("b and d must lie in [0, 1]")
    return max(b, d**t)


def effective_alpha(t: int, cfg: RescoreConfig) -> float:
    if cfg.static_alpha is not None:
        return cfg.static_alpha
    return alpha_schedule(t, cfg.b, cfg.d)


def select_action(p_raw, q_raw, t: int, cfg: RescoreConfig,
                  actions: list[str] | None = None,
                  origins: list[str] | None = None) -> tuple[int, list[ScoredAction]]:
    """Normalize both score lists, combine with alpha(t), and take the argmax.

    Ties break toward the higher policy score, then the lower index.
    """
    p_raw = list(p_raw)
    q_raw = list(q_raw)
    if len(p_raw) != len(q_raw):
        raise ValueError(f"score lists differ in length: {len(p_raw)} vs {len(q_raw)}")
    if not p_raw:
        raise ValueError("nothing to select from")
    cfg.validate()
    alpha = effective_alpha(t, cfg)
    p_norm = normalize_scores(p_raw)
    q_norm = normalize_scores(q_raw)
    combined = [alpha * p + (1.0 - alpha) * q for p, q in zip(p_norm, q_norm)]
    best = max(range(len(combined)), key=lambda i: (combined[i], p_norm[i], -i))
    if actions is None:
        actions = [f"action {i}" for i in range(len(combined))]
    if origins is None:
        origins = [ORIGIN_SAMPLED] * len(combined)
    scored = [
        ScoredAction(actions[i], origins[i], p_raw[i], p_norm[i], q_raw[i], q_norm[i], combined[i])
        for i in range(len(combined))
    ]
    return best, scored


def run_episode(env, policy, critic, cfg: RescoreConfig, seed: int,
                max_steps: int = 100) -> EpisodeRecord:
    """Play one episode: sample candidates, ground them, score, act.

    With ``critic=None`` the agent runs policy-only, which is decision-for-
    decision identical to forcing alpha to 1 (the critic term is multiplied
    by zero either way). The step counter handed to the alpha schedule counts
    previously executed actions, so the first decision uses t = 0.
    """
    cfg.validate()
    started = time.perf_counter()
    state = env.reset()
    history: list = []
    audits: list[StepAudit] = []
    decide_cfg = cfg if critic is not None else replace(cfg, static_alpha=1.0)

    for t in range(max_steps):
        ctx = build_context(env.task, history, state, cfg.window)
        step_seed = child_seed(seed, "step", t)
        candidates = policy.sample_candidates(ctx, cfg.k, cfg.temperature, cfg.top_p, step_seed)
        grounded = map_to_valid(candidates, env.valid_actions(), cfg.k) if candidates else []

        if not grounded:
            # nothing usable came back; fall back to the first valid action
            chosen = env.valid_actions()[0]
            alpha = effective_alpha(t, decide_cfg)
            scored: tuple[ScoredAction, ...] = ()
        else:
            ll_by_text = {}
            for cand in candidates:
                key = " ".join(cand.text.lower().split())
                ll_by_text[key] = max(cand.log_likelihood, ll_by_text.get(key, -math.inf))
            p_raw = []
            for action in grounded:
                if action.origin == ORIGIN_SAMPLED:
                    ll = ll_by_text[" ".join(action.text.lower().split())]
                else:
                    ll = policy.score_text(ctx, action.text)
                p_raw.append(math.exp(ll))
            if critic is None:
                q_raw = [0.0] * len(grounded)
            else:
                q_raw = critic.action_values(env.task, state, [a.text for a in grounded])
            idx, scored_list = select_action(
                p_raw, q_raw, t, decide_cfg,
                actions=[a.text for a in grounded],
                origins=[a.origin for a in grounded],
            )
            if critic is None:
                scored_list = [replace(s, q_raw=None, q_norm=None) for s in scored_list]
            chosen = grounded[idx].text
            alpha = effective_alpha(t, decide_cfg)
            scored = tuple(scored_list)

        next_state, reward, done = env.step(chosen)
        audits.append(StepAudit(t, alpha, scored, chosen, reward))
        history.append((state, chosen))
        state = next_state
        if done:
            break

    return EpisodeRecord(
        task=env.task,
        seed=seed,
        steps=tuple(audits),
        final_score=env.score,
        success=env.success,
        step_count=len(audits),
        wall_ms=(time.perf_counter() - started) * 1000.0,
    )


def compute_metrics(records: list[EpisodeRecord]) -> dict[str, float]:
    """Average Score and Success Rate over an episode set, both on 0..100."""
    if not records:
        raise ValueError("no episodes to aggregate")
    scores = [r.final_score for r in records]
    successes = [r.success for r in records]
    return {
        "AS": float(np.mean(scores)),
        "SR": 100.0 * sum(successes) / len(successes),
    }


def audit_lines(record: EpisodeRecord) -> list[str]:
    """Canonical JSON audit, one line per step (no timing fields)."""
    lines = []
    for step in record.steps:
        doc = {
            "t": step.t,
            "alpha": step.alpha,
            "candidates": [
                {
                    "text": s.action,
                    "origin": s.origin,
                    "p_raw": s.p_raw,
                    "p_norm": s.p_norm,
                    "q_raw": s.q_raw,
                    "q_norm": s.q_norm,
                    "combined": s.combined,
                }
                for s in step.scored
            ],
            "chosen": step.chosen,
            "reward": step.reward,
        }
        lines.append(json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False))
    return lines
