"""Tests for the inequality lab: tail bound, Monte Carlo ESS, lemma grids,
and the brute-force selection checks."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from remixlora import theory
from remixlora.numerics import RngStream, softmax
from remixlora.routing import ess, enumerate_subsets, from_probs, unordered_subset_prob

# high-precision reference values computed with mpmath at 40 digits
GP_INTEGRAL = {3: 0.098156755345107232901, 8: 0.02498604994327785355, 64: 0.00058128310145819443036}
BOUND_AT = {0.1581: 7.6842886018373355453, 0.05: 30.617285482246771175, 0.5: 1.1899202393779963906}
DENOM_8 = 3.6827117536822344649
MIXED_8_2 = 0.86276091521030750758


class TestBoundInputs:
    def test_rejects_bad_delta(self):
        with pytest.raises(ValueError):
            theory.BoundInputs(sigma=1.0, n=8, x_norm=32.0, delta=0.0)
        with pytest.raises(ValueError):
            theory.BoundInputs(sigma=1.0, n=8, x_norm=32.0, delta=1.0)

    def test_rejects_bad_sigma_and_n(self):
        with pytest.raises(ValueError):
            theory.BoundInputs(sigma=0.0, n=8, x_norm=32.0, delta=0.1)
        with pytest.raises(ValueError):
            theory.BoundInputs(sigma=1.0, n=1, x_norm=32.0, delta=0.1)


class TestEssUpperBound:
    def test_denominator_reference_value(self):
        assert theory.bound_denominator(8) == pytest.approx(DENOM_8, rel=1e-12)

    @pytest.mark.parametrize("delta", sorted(BOUND_AT))
    def test_reference_values(self, delta):
        b = theory.BoundInputs(sigma=1.0, n=8, x_norm=32.0, delta=delta)
        assert theory.ess_upper_bound(b) == pytest.approx(BOUND_AT[delta], rel=1e-12)

    def test_monotone_decreasing_in_delta_and_norm(self):
        deltas = np.linspace(0.01, 0.99, 20)
        norms = np.linspace(1.0, 64.0, 20)
        for x_norm in norms:
            values = [
                theory.ess_upper_bound(theory.BoundInputs(1.0, 8, float(x_norm), float(d)))
                for d in deltas
            ]
            assert all(a >= b for a, b in zip(values, values[1:]))
        for d in deltas:
            values = [
                theory.ess_upper_bound(theory.BoundInputs(1.0, 8, float(x_norm), float(d)))
                for x_norm in norms
            ]
            assert all(a >= b for a, b in zip(values, values[1:]))

    def test_tends_to_one_for_strong_signal(self):
        b = theory.BoundInputs(sigma=1.0, n=8, x_norm=1e4, delta=0.5)
        assert 1.0 <= theory.ess_upper_bound(b) < 1.0 + 1e-6

    def test_n_two_edge(self):
        b = theory.BoundInputs(sigma=1.0, n=2, x_norm=4.0, delta=0.25)
        value = theory.ess_upper_bound(b)
        assert math.isfinite(value) and value > 1.0

    def test_can_exceed_adapter_count_for_small_delta(self):
        b = theory.BoundInputs(sigma=1.0, n=8, x_norm=32.0, delta=0.05)
        assert theory.ess_upper_bound(b) > 8


class TestMonteCarloEss:
    def test_rejects_small_trial_count(self):
        with pytest.raises(ValueError):
            theory.monte_carlo_ess(1.0, 8, 16, 9_999, RngStream(1, "mc"))

    def test_vanishing_sigma_gives_uniform_routing(self):
        s = theory.monte_carlo_ess(1e-6, 4, 16, 10_000, RngStream(2, "mc"))
        assert np.all(np.abs(s - 4.0) < 1e-6)

    def test_two_adapters_stay_in_range(self):
        s = theory.monte_carlo_ess(1.0, 2, 16, 10_000, RngStream(3, "mc"))
        assert np.all(s >= 1.0) and np.all(s <= 2.0)

    def test_samples_respect_ess_range(self):
        s = theory.monte_carlo_ess(1.0, 8, 64, 10_000, RngStream(4, "mc"))
        assert np.all(s >= 1.0) and np.all(s <= 8.0 + 1e-9)

    def test_collapse_at_desk_scale_signal(self):
        # sigma * ||x|| = 32 matches the headline configuration
        s = theory.monte_carlo_ess(4.0, 8, 64, 10_000, RngStream(5, "mc"))
        assert np.median(s) < 1.1
        assert np.quantile(s, 0.99) < 8.0

    def test_replay_is_identical(self):
        a = theory.monte_carlo_ess(1.0, 8, 32, 10_000, RngStream(6, "mc"))
        b = theory.monte_carlo_ess(1.0, 8, 32, 10_000, RngStream(6, "mc"))
        assert np.array_equal(a, b)

    def test_seeds_differ(self):
        a = theory.monte_carlo_ess(1.0, 8, 32, 10_000, RngStream(6, "mc"))
        b = theory.monte_carlo_ess(1.0, 8, 32, 10_000, RngStream(7, "mc"))
        assert not np.array_equal(a, b)

    def test_matches_scalar_recomputation(self):
        # rebuild a prefix of the vectorized pipeline through the scalar
        # softmax and ESS routines
        rng = RngStream(8, "mc")
        s = theory.monte_carlo_ess(1.5, 3, 8, 10_000, rng, chunk_size=1024)
        x = rng.derive("rademacher").choice_signs((8,))
        z = rng.derive("chunk", 0).standard_normal((1024 * 3, 8))
        logits = (1.5 * (z @ x)).reshape(1024, 3)
        for t in range(64):
            assert s[t] == pytest.approx(ess(softmax(logits[t])), abs=1e-12)

    def test_exceedance_fraction(self):
        samples = np.array([1.0, 2.0, 3.0, 4.0])
        assert theory.exceedance_fraction(samples, 2.5) == 0.5
        assert theory.exceedance_fraction(samples, 0.5) == 1.0


class TestLemmaChecks:
    @pytest.mark.parametrize("lemma_id", theory.LEMMA_IDS)
    def test_all_pass(self, lemma_id):
        report = theory.verify_lemma(lemma_id)
        assert report.lemma_id == lemma_id
        assert report.passed
        assert report.margin >= theory.MARGIN_FLOOR

    def test_unknown_id_rejected(self):
        with pytest.raises(ValueError, match="unknown lemma id"):
            theory.verify_lemma("L9")

    def test_chained_gap_bound_is_tight_at_zero(self):
        # the pdf-weighted chain touches equality at z = 0
        assert abs(theory.verify_lemma("L1").margin) < 1e-12

    def test_integer_bound_is_tight_at_three(self):
        assert abs(theory.verify_lemma("L5").margin) < 1e-12

    def test_gamma_integral_special_case(self):
        from remixlora.numerics import quadrature

        value = quadrature(lambda t: t * math.sqrt(math.log(1.0 / t)), 0.0, 1.0, 1e-10)
        assert value == pytest.approx(theory.T_SQRT_LOG_INTEGRAL, abs=1e-8)

    def test_gamma_integral_identity_cell(self):
        # alpha = beta = 1/2: Gamma(1/2) / (1/2)^(1/2) = sqrt(2 pi)
        assert theory.gamma_integral(0.5, 0.5, 1e-9) == pytest.approx(theory.SQRT_2PI, abs=1e-8)

    @pytest.mark.parametrize("n", GP_INTEGRAL)
    def test_gaussian_power_integral_reference(self, n):
        assert theory.gaussian_power_integral(n) == pytest.approx(GP_INTEGRAL[n], abs=1e-9)

    def test_mixed_integral_reference(self):
        from remixlora.numerics import quadrature

        value = quadrature(lambda t: t * math.exp(-t) * math.sqrt(math.log(8.0 / t)), 0.0, 2.0, 1e-10)
        assert value == pytest.approx(MIXED_8_2, abs=1e-9)

    @pytest.mark.parametrize("n", [4, 5, 6, 8, 10, 16])
    def test_integer_bound_matches_mixed_cap(self, n):
        # the integer-n expression is the mixed-integral cap specialized to
        # alpha = n - 2 and beta = n/2 - 1, scaled by sqrt(2)/(n-2)^2
        expected = math.sqrt(2.0) / (n - 2.0) ** 2 * theory.mixed_integral_bound_rhs(
            n - 2.0, n / 2.0 - 1.0
        )
        assert theory.integer_bound_lhs(n) == pytest.approx(expected, rel=1e-14)

    def test_bound_chain_orders_three_ways(self):
        # integral <= closed-form cap <= target rate, pointwise in n
        for n in range(3, 65):
            integral = theory.gaussian_power_integral(n)
            cap = theory.integer_bound_lhs(n)
            rate = theory.gaussian_power_bound_rhs(n)
            assert integral <= cap + 1e-9
            assert cap <= rate + 1e-9


class TestUnorderedProbFastPath:
    def test_agrees_with_public_routine(self):
        rng = RngStream(11, "agree")
        for trial in range(50):
            n = int(rng.derive("n", trial).uniform(()) * 4) + 3
            k = min(int(rng.derive("k", trial).uniform(()) * 3) + 1, n - 1)
            probs = softmax(rng.derive("logits", trial).standard_normal((n,)))
            dist = from_probs(probs)
            for subset in enumerate_subsets(n, k):
                fast = theory._unordered_prob(probs.tolist(), subset)
                assert fast == pytest.approx(unordered_subset_prob(dist, subset), abs=1e-12)

    def test_hand_values(self):
        q = [0.5, 0.3, 0.2]
        assert theory._unordered_prob(q, (0, 1)) == pytest.approx(0.3 + 0.15 / 0.7, abs=1e-12)
        assert theory._unordered_prob(q, (0, 2)) == pytest.approx(0.325, abs=1e-12)
        total = sum(theory._unordered_prob(q, s) for s in enumerate_subsets(3, 2))
        assert total == pytest.approx(1.0, abs=1e-12)


class TestTopkOptimality:
    def test_no_violations_and_positive_gap(self):
        result = theory.check_topk_optimality(5, 2, 5_000, RngStream(21, "topk"))
        assert result.violations == 0
        assert result.triggered > 0
        assert result.margin > 0.0

    def test_top_one_case(self):
        result = theory.check_topk_optimality(3, 1, 5_000, RngStream(22, "topk"))
        assert result.violations == 0
        assert result.triggered > 0

    def test_enumeration_guard(self):
        with pytest.raises(ValueError):
            theory.check_topk_optimality(9, 2, 100, RngStream(23, "topk"))


class TestSwapLemma:
    def test_no_violations(self):
        result = theory.check_swap_lemma(5, 2, 5_000, RngStream(31, "swap"))
        assert result.violations == 0
        assert result.triggered > 0
        assert result.margin >= -1e-12

    def test_equal_probability_swap_is_neutral(self):
        q = [0.25, 0.25, 0.25, 0.25]
        before = theory._unordered_prob(q, (0, 1))
        after = theory._unordered_prob(q, (0, 3))
        assert abs(after - before) < 1e-12

    def test_strict_inequality_for_strict_dominance(self):
        q = [0.5, 0.3, 0.2]
        assert theory._unordered_prob(q, (0, 1)) > theory._unordered_prob(q, (0, 2))

    def test_requires_outside_index(self):
        with pytest.raises(ValueError):
            theory.check_swap_lemma(4, 4, 100, RngStream(32, "swap"))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_random_swaps_never_decrease(self, seed):
        rng = RngStream(seed, "swap-prop")
        probs = softmax(rng.standard_normal((5,)))
        q = probs.tolist()
        order = sorted(range(5), key=lambda i: q[i])
        # swap the smallest subset member for the largest outside index
        subset = tuple(sorted(order[:2]))
        i = min(subset, key=lambda idx: q[idx])
        j = max((idx for idx in range(5) if idx not in subset), key=lambda idx: q[idx])
        before = theory._unordered_prob(q, subset)
        after = theory._unordered_prob(q, tuple(sorted(set(subset) - {i} | {j})))
        assert after >= before - 1e-12


class TestVerificationReport:
    def test_report_shape_and_pass(self):
        report = theory.build_verification_report(RngStream(41, "verify"), trials=500)
        assert [c["id"] for c in report["checks"]] == list(theory.CHECK_IDS)
        assert report["all_pass"] is True
        for record in report["checks"]:
            assert set(record) == {"id", "grid", "margin", "pass"}
            assert math.isfinite(record["margin"])
            assert record["pass"] is True

    def test_report_is_deterministic(self):
        a = theory.build_verification_report(RngStream(42, "verify"), trials=300)
        b = theory.build_verification_report(RngStream(42, "verify"), trials=300)
        assert a == b

    def test_force_fail_hook(self):
        report = theory.build_verification_report(
            RngStream(43, "verify"), trials=300, force_fail_id="L3"
        )
        assert report["all_pass"] is False
        failed = [c for c in report["checks"] if not c["pass"]]
        assert [c["id"] for c in failed] == ["L3"]
        assert failed[0]["margin"] < 0

    def test_force_fail_unknown_id(self):
        with pytest.raises(ValueError, match="unknown check id"):
            theory.build_verification_report(RngStream(44, "verify"), trials=300, force_fail_id="L9")
