"""Tests for the scenario confidence-bound calculus."""

import math
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenplan.risk import (
    RiskArgumentError,
    RiskProfile,
    SampleSizeCapacityError,
    confidence_of,
    eps_allocation,
    solve_sample_size,
)


def exact_confidence(S: int, P: int, eps_fn) -> Fraction:
    """Exact rational evaluation of the discarding bound.

    Independent oracle: big-integer binomials and Fraction powers, no
    floating-point accumulation.  eps values are converted to exact
    binary rationals so the only difference from the implementation is
    the arithmetic.
    """
    total = Fraction(0)
    for s in range(P):
        eps = Fraction(eps_fn(s))
        if eps >= 1:
            continue
        total += math.comb(P, s) * (1 - eps) ** (P - s)
    return math.comb(S, P) * total


class TestEpsAllocation:
    def test_boundary_eps_at_P_is_one(self):
        assert eps_allocation(1, 1, 1, 1e-6) == 1.0

    def test_single_term_hand_value(self):
        # one term, all coefficients 1: eps = 1 - beta
        assert eps_allocation(1, 1, 0, 0.01) == pytest.approx(0.99, abs=1e-15)

    def test_paper_scale_value_near_three_sigma_risk(self):
        # At the published operating point the uniform split lands within
        # one percent of the 3-sigma risk level.
        eps = eps_allocation(53050, 53000, 20, 1e-6)
        assert 0.0 < eps <= 0.0112
        assert eps == pytest.approx(1.0 - 0.9889, rel=0.01)

    def test_invalid_ranges_raise(self):
        with pytest.raises(RiskArgumentError):
            eps_allocation(10, 11, 0, 0.5)
        with pytest.raises(RiskArgumentError):
            eps_allocation(10, 5, 6, 0.5)
        with pytest.raises(RiskArgumentError):
            eps_allocation(10, 5, -1, 0.5)
        with pytest.raises(RiskArgumentError):
            eps_allocation(10, 5, 2, 0.0)
        with pytest.raises(RiskArgumentError):
            eps_allocation(10, 5, 2, 1.0)

    @given(
        S=st.integers(1, 200),
        drop=st.integers(0, 20),
        beta=st.floats(1e-9, 0.999),
    )
    @settings(max_examples=200, deadline=None)
    def test_nondecreasing_in_s_and_in_range(self, S, drop, beta):
        P = max(1, S - drop)
        values = [eps_allocation(S, P, s, beta) for s in range(P + 1)]
        assert values[-1] == 1.0
        assert all(0.0 < v <= 1.0 for v in values)
        assert all(a <= b + 1e-15 for a, b in zip(values, values[1:]))


class TestConfidenceOf:
    def test_all_terms_vanish(self):
        assert confidence_of(1, 1, lambda s: 1.0) == 0.0

    def test_uniform_allocation_recovers_beta_small(self):
        beta = 0.1
        val = confidence_of(2, 2, lambda s: eps_allocation(2, 2, s, beta))
        assert val == pytest.approx(beta, rel=1e-12)

    @given(
        S=st.integers(1, 60),
        drop=st.integers(0, 10),
        beta=st.sampled_from([0.5, 0.1, 1e-3, 1e-6]),
    )
    @settings(max_examples=150, deadline=None)
    def test_uniform_allocation_stays_within_budget(self, S, drop, beta):
        # The allocation rounds conservatively, so the realized confidence
        # never exceeds beta and sits close below it.  Closeness from below
        # is limited by the float representation of eps(s) near 1 (worst
        # for tiny beta); the oracle test pins the arithmetic to 10 digits.
        P = max(1, S - drop)
        val = confidence_of(S, P, lambda s: eps_allocation(S, P, s, beta))
        assert val <= beta + 1e-12
        assert val >= 0.9 * beta

    def test_matches_exact_rational_oracle_desk_scale(self):
        # 10 significant digits against exact big-integer arithmetic.
        for beta in (0.5, 0.1, 1e-3):
            for S in range(1, 31):
                for P in range(1, S + 1):
                    fn = lambda s, S=S, P=P, beta=beta: eps_allocation(S, P, s, beta)
                    got = confidence_of(S, P, fn)
                    want = float(exact_confidence(S, P, fn))
                    assert got == pytest.approx(want, rel=1e-10), (S, P, beta)

    def test_decreases_with_sample_size_for_capped_support(self):
        # Fixed risk level, support capped at 5: the bound must decay as
        # the sample count grows (strictly, until it underflows to zero).
        def eps_fn(s):
            return 0.2 if s <= 5 else 1.0

        sweep = [100, 200, 500, 1000, 2000, 5000, 10000]
        vals = [confidence_of(S, S, eps_fn) for S in sweep]
        assert all(a >= b for a, b in zip(vals, vals[1:]))
        assert all(a > b for a, b in zip(vals, vals[1:]) if a > 0.0)
        assert vals[0] > 0.0


class TestSolveSampleSize:
    def test_paper_scale_reproduction(self):
        S = solve_sample_size(1.0 - 0.9889, 1e-6, 20, 50)
        assert abs(S - 53050) / 53050 <= 0.25
        # re-substitution at the minimum
        assert eps_allocation(S, S - 50, 20, 1e-6) <= 1.0 - 0.9889
        assert eps_allocation(S - 1, S - 1 - 50, 20, 1e-6) > 1.0 - 0.9889

    def test_trivial_target_small_sample(self):
        S = solve_sample_size(0.5, 0.5, 0, 0)
        assert S <= 10
        assert eps_allocation(S, S, 0, 0.5) <= 0.5

    def test_shrinking_target_grows_sample(self):
        sizes = [solve_sample_size(eps, 1e-3, 5, 0) for eps in (0.2, 0.1, 0.05, 0.02)]
        assert all(a < b for a, b in zip(sizes, sizes[1:]))

    @given(
        eps=st.floats(0.01, 0.5),
        beta=st.sampled_from([0.1, 1e-3, 1e-6]),
        s_bar=st.integers(1, 10),
        R=st.integers(0, 20),
    )
    @settings(max_examples=60, deadline=None)
    def test_resubstitution_property(self, eps, beta, s_bar, R):
        S = solve_sample_size(eps, beta, s_bar, R)
        assert eps_allocation(S, S - R, s_bar, beta) <= eps
        P_prev = S - 1 - R
        if P_prev > s_bar:
            assert eps_allocation(S - 1, P_prev, s_bar, beta) > eps

    def test_capacity_error(self):
        with pytest.raises(SampleSizeCapacityError):
            solve_sample_size(1e-6, 1e-6, 20, 0, ceiling=10_000)


class TestRiskProfile:
    def test_defaults_compute_sample_size(self):
        prof = RiskProfile()
        assert prof.samples > prof.discard
        assert prof.samples - prof.discard >= prof.s_bar
        assert abs(prof.samples - 53050) / 53050 <= 0.25
        assert prof.selection_size == 200

    def test_allocation_table_spans_support_bound(self):
        prof = RiskProfile(eps=0.2, beta=1e-3, s_bar=4, discard=2, keep=10)
        table = prof.allocation_table()
        assert len(table) == 5
        assert all(0 < v <= 1 for _, v in table)

    def test_invariants_enforced(self):
        with pytest.raises(RiskArgumentError):
            RiskProfile(eps=0.0)
        with pytest.raises(RiskArgumentError):
            RiskProfile(s_bar=0)
        with pytest.raises(RiskArgumentError):
            RiskProfile(samples=60, discard=50, s_bar=20)
