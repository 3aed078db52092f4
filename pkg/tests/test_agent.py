import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from qblend.agent import (
    EpisodeRecord,
    RescoreConfig,
    ScoredAction,
    alpha_schedule,
    audit_lines,
    compute_metrics,
    normalize_scores,
    select_action,
)
from qblend.errors import NumericError
from qblend.experience import Task


class TestNormalizeScores:
    def test_direct_formula(self):
        assert normalize_scores([0.2, 0.5, 0.3]) == pytest.approx([0.0, 1.0, 1.0 / 3.0], abs=1e-12)

    def test_equal_values_give_half(self):
        assert normalize_scores([0.4, 0.4]) == [0.5, 0.5]

    def test_single_element(self):
        assert normalize_scores([7.0]) == [0.5]

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            normalize_scores([1.0, float("nan")])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            normalize_scores([])

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=8),
           st.floats(0.1, 10), st.floats(-5, 5))
    @settings(max_examples=200, deadline=None)
    def test_positive_affine_invariance(self, xs, a, c):
        # keep the spread above float-cancellation scale so a*x+c is faithful
        assume(max(xs) - min(xs) > 1e-6 * (1.0 + abs(c) + max(abs(x) for x in xs)))
        base = normalize_scores(xs)
        scaled = normalize_scores([a * x + c for x in xs])
        assert scaled == pytest.approx(base, abs=1e-6)


class TestAlphaSchedule:
    def test_t0_is_one(self):
        assert alpha_schedule(0, b=0.6, d=0.97) == 1.0
        assert alpha_schedule(0, b=0.0, d=0.0) == 1.0

    def test_t1_is_d(self):
        assert alpha_schedule(1, b=0.6, d=0.97) == 0.97

    def test_floor_reached_at_t30(self):
        assert alpha_schedule(30, b=0.6, d=0.97) == 0.6
        assert 0.97**30 < 0.6

    def test_monotone_and_floored(self):
        values = [alpha_schedule(t, 0.35, 0.9) for t in range(60)]
        assert all(a >= b for a, b in zip(values, values[1:]))
        assert all(v >= 0.35 for v in values)

    def test_domain_validation(self):
        with pytest.raises(ValueError):
            alpha_schedule(-1, 0.5, 0.9)
        with pytest.raises(ValueError):
            alpha_schedule(1, 1.5, 0.9)


class TestSelectAction:
    def test_blend_arithmetic(self):
        # p [1,0] and q [0,1] are already normalized; with alpha 0.6 the
        # combined scores are [0.6, 0.4] and index 0 wins
        cfg = RescoreConfig(static_alpha=0.6)
        idx, scored = select_action([1.0, 0.0], [0.0, 1.0], t=5, cfg=cfg)
        assert idx == 0
        assert [s.combined for s in scored] == pytest.approx([0.6, 0.4], abs=1e-12)

    def test_critic_only_ablation(self):
        cfg = RescoreConfig(b=0.0, d=0.0)
        idx, scored = select_action([9.0, 1.0, 5.0], [0.1, 0.9, 0.5], t=3, cfg=cfg)
        assert idx == 1  # pure critic argmax once t >= 1
        assert scored[1].combined == 1.0

    def test_static_alpha_overrides_t0(self):
        cfg = RescoreConfig(static_alpha=0.6)
        idx, _ = select_action([0.0, 1.0], [1.0, 0.0], t=0, cfg=cfg)
        assert idx == 1
        # dynamic alpha at t=0 would also pick index 1 (alpha=1), but the
        # static value must be used in the combination itself
        _, scored = select_action([0.0, 1.0], [1.0, 0.0], t=0, cfg=cfg)
        assert scored[0].combined == pytest.approx(0.4, abs=1e-12)

    def test_tie_breaks_higher_p_then_lower_index(self):
        cfg = RescoreConfig(static_alpha=0.5)
        idx, _ = select_action([0.0, 1.0], [1.0, 0.0], t=2, cfg=cfg)
        assert idx == 1  # combined ties at 0.5; p_norm favors index 1
        idx, _ = select_action([0.5, 0.5], [0.5, 0.5], t=2, cfg=cfg)
        assert idx == 0  # full tie resolves to the lower index

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length"):
            select_action([1.0], [1.0, 2.0], 0, RescoreConfig())

    def test_argmax_dominance_10k(self, rng):
        for _ in range(10_000):
            n = int(rng.integers(2, 7))
            p = rng.normal(size=n)
            q = rng.normal(size=n)
            dom = int(rng.integers(0, n))
            p[dom] = p.max() + 1.0
            q[dom] = q.max() + 1.0
            alpha = float(rng.uniform(0, 1))
            idx, _ = select_action(list(p), list(q), t=1, cfg=RescoreConfig(static_alpha=alpha))
            assert idx == dom

    def test_boundary_decision_equivalence_10k(self, rng):
        for _ in range(10_000):
            n = int(rng.integers(2, 7))
            p = list(rng.normal(size=n))
            q = list(rng.normal(size=n))
            t = int(rng.integers(1, 40))
            # alpha == 1 reproduces the policy argmax decision
            idx_pol, _ = select_action(p, q, t, RescoreConfig(static_alpha=1.0))
            assert idx_pol == int(np.argmax(p))
            # alpha == 0 (b=d=0, t>=1) reproduces the critic argmax decision
            idx_cri, _ = select_action(p, q, t, RescoreConfig(b=0.0, d=0.0))
            assert idx_cri == int(np.argmax(q))


def test_env_presets_cover_horizon_classes():
    from qblend.agent import ENV_PRESETS
    assert ENV_PRESETS["dense"] == (0.97, 0.6)
    assert ENV_PRESETS["medium"] == (0.95, 0.6)
    assert ENV_PRESETS["short"] == (0.9, 0.5)


class TestComputeMetrics:
    def rec(self, score, success):
        return EpisodeRecord(Task("t", "x"), 0, (), score, success, 3, 1.0)

    def test_mixed(self):
        metrics = compute_metrics([self.rec(100, True), self.rec(50, False), self.rec(0, False)])
        assert metrics["AS"] == pytest.approx(50.0)
        assert metrics["SR"] == pytest.approx(100.0 / 3.0)

    def test_all_success(self):
        metrics = compute_metrics([self.rec(100, True)] * 4)
        assert metrics == {"AS": 100.0, "SR": 100.0}

    def test_single_failure(self):
        metrics = compute_metrics([self.rec(20, False)])
        assert metrics == {"AS": 20.0, "SR": 0.0}

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            compute_metrics([])


def test_audit_line_schema():
    scored = (ScoredAction("go", "sampled_valid", 0.8, 1.0, 0.3, 0.0, 0.6),)
    from qblend.agent import StepAudit
    record = EpisodeRecord(Task("t", "d"), 7, (StepAudit(0, 1.0, scored, "go", 0.25),),
                           100.0, True, 1, 2.0)
    [line] = audit_lines(record)
    import json
    doc = json.loads(line)
    assert set(doc) == {"t", "alpha", "candidates", "chosen", "reward"}
    assert set(doc["candidates"][0]) == {"text", "origin", "p_raw", "p_norm",
                                         "q_raw", "q_norm", "combined"}
    assert "wall" not in line
