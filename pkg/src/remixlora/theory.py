"""Numerical verification lab for the routing-collapse bound, top-k
selection optimality, subset-swap monotonicity, and the supporting analytic
inequalities (checked as finite grids, not symbolic proofs).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import (
    RngStream,
    quadrature,
    std_normal_cdf,
    std_normal_inv_cdf,
    std_normal_pdf,
)
from .routing import enumerate_subsets

SQRT_2PI = math.sqrt(2.0 * math.pi)
# closed form of the integral of t*sqrt(ln(1/t)) over [0, 1]
T_SQRT_LOG_INTEGRAL = math.sqrt(math.pi) / (4.0 * math.sqrt(2.0))

LEMMA_IDS = ("L0", "L1", "L2", "L3", "L4", "L5", "L6")
CHECK_IDS = LEMMA_IDS + ("top-k", "swap")
MARGIN_FLOOR = -1e-9


@dataclass(frozen=True)
class BoundInputs:
    """Parameters of the closed-form tail bound on the effective support
    size of softmax routing weights under Gaussian router initialization."""

    sigma: float
    n: int
    x_norm: float
    delta: float

    def __post_init__(self):
        if self.sigma <= 0 or self.x_norm <= 0:
            raise ValueError("sigma and x_norm must be positive")
        if self.n < 2:
            raise ValueError("need at least two adapters")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")


def bound_denominator(n: int) -> float:
    """(3/2) sqrt(pi/ln3 * ln n) + 1/(sqrt(2 pi) 2^(n - log2 n - 1))."""
    first = 1.5 * math.sqrt(math.pi / math.log(3.0) * math.log(n))
    second = 1.0 / (SQRT_2PI * 2.0 ** (n - math.log2(n) - 1.0))
    return first + second


def ess_upper_bound(b: BoundInputs) -> float:
    """With probability at least 1 - delta, the routing-weight ESS at
    Gaussian initialization stays below this value."""
    exponent = b.delta * b.sigma * b.x_norm / bound_denominator(b.n) - math.log(b.n - 1)
    return (1.0 + math.exp(-exponent)) ** 2


def monte_carlo_ess(
    sigma: float, n: int, dim: int, trials: int, rng: RngStream, chunk_size: int = 1024
) -> np.ndarray:
    """ESS of softmax(P x) over fresh N(0, sigma^2) routers P, with x one
    fixed Rademacher vector (only its norm enters the bound).

    Trials are generated in fixed-size chunks with per-chunk streams, so the
    result is independent of how chunks are scheduled.
    """
    if trials < 10_000:
        raise ValueError("need at least 10000 trials for a stable tail estimate")
    x = rng.derive("rademacher").choice_signs((dim,))
    out = np.empty(trials)
    done = 0
    chunk_idx = 0
    while done < trials:
        t = min(chunk_size, trials - done)
        z = rng.derive("chunk", chunk_idx).standard_normal((t * n, dim))
        logits = (sigma * (z @ x)).reshape(t, n)
        shifted = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(shifted)
        l1 = p.sum(axis=1)
        out[done : done + t] = l1 * l1 / np.einsum("ij,ij->i", p, p)
        done += t
        chunk_idx += 1
    return out


def exceedance_fraction(samples: np.ndarray, threshold: float) -> float:
    return float((samples > threshold).mean())


@dataclass(frozen=True)
class LemmaReport:
    lemma_id: str
    grid: str
    margin: float
    passed: bool


def _report(lemma_id: str, grid: str, margin: float) -> LemmaReport:
    margin = float(margin)
    return LemmaReport(lemma_id=lemma_id, grid=grid, margin=margin, passed=bool(margin >= MARGIN_FLOOR))


_GAP_ALPHAS = (0.01, 0.1, 1.0, 5.0)


def _check_gap_bound() -> LemmaReport:
    """Phi(z + a) - Phi(z) <= a / sqrt(2 pi) for all z, a > 0."""
    z = np.linspace(-6.0, 6.0, 241)
    margin = math.inf
    for a in _GAP_ALPHAS:
        gap = std_normal_cdf(z + a) - std_normal_cdf(z)
        margin = min(margin, float((a / SQRT_2PI - gap).min()))
    return _report("L0", "z in [-6, 6] (241 pts) x alpha in {0.01, 0.1, 1, 5}", margin)


def _check_upper_tail_gap_bound() -> LemmaReport:
    """For z >= 0: Phi(z+a) - Phi(z) <= sqrt(2 pi) (Phi(a) - 1/2) pdf(z)
    <= a pdf(z); both links of the chain are checked."""
    z = np.linspace(0.0, 6.0, 241)
    margin = math.inf
    for a in _GAP_ALPHAS:
        gap = std_normal_cdf(z + a) - std_normal_cdf(z)
        mid = SQRT_2PI * (std_normal_cdf(a) - 0.5) * std_normal_pdf(z)
        margin = min(margin, float((mid - gap).min()), float((a * std_normal_pdf(z) - mid).min()))
    return _report("L1", "z in [0, 6] (241 pts) x alpha in {0.01, 0.1, 1, 5}, both links", margin)


def gamma_integral(alpha: float, beta: float, tol: float = 1e-10) -> float:
    """Integral over (0, 1) of t^(alpha-1) (ln 1/t)^(beta-1), split at 1/2
    because either endpoint can be singular."""
    f = lambda t: t ** (alpha - 1.0) * math.log(1.0 / t) ** (beta - 1.0)
    return quadrature(f, 0.0, 0.5, tol / 2.0) + quadrature(f, 0.5, 1.0, tol / 2.0)


def _check_gamma_integral_identity() -> LemmaReport:
    """The log-power integral equals Gamma(beta) / alpha^beta; the headline
    special case is the t sqrt(ln 1/t) integral with value sqrt(pi)/(4 sqrt 2)."""
    from scipy.special import gamma as gamma_fn

    worst = 0.0
    for alpha in (0.5, 1.0, 2.0):
        for beta in (0.5, 1.0, 2.0):
            dev = abs(gamma_integral(alpha, beta, 1e-9) - gamma_fn(beta) / alpha**beta)
            worst = max(worst, dev)
    special = quadrature(lambda t: t * math.sqrt(math.log(1.0 / t)), 0.0, 1.0, 1e-10)
    worst = max(worst, abs(special - T_SQRT_LOG_INTEGRAL))
    return _report("L2", "identity on alpha, beta in {0.5, 1, 2}^2 plus the half-power case", -worst)


def mixed_integral_bound_rhs(alpha: float, beta: float) -> float:
    """sqrt(ln alpha) (1 - e^(-beta + ln(beta+1))) + sqrt(pi)/(4 sqrt 2)."""
    return math.sqrt(math.log(alpha)) * (1.0 - math.exp(-beta + math.log(beta + 1.0))) + T_SQRT_LOG_INTEGRAL


def _check_mixed_integral_bound() -> LemmaReport:
    """Integral over (0, beta) of t e^(-t) sqrt(ln(alpha/t)) stays below the
    closed-form cap, for 0 < beta <= alpha."""
    margin = math.inf
    fractions = (0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 1.0)
    for alpha in (1.0, 2.0, 8.0, 32.0):
        for frac in fractions:
            beta = alpha * frac
            lhs = quadrature(
                lambda t: t * math.exp(-t) * math.sqrt(math.log(alpha / t)), 0.0, beta, 1e-10
            )
            margin = min(margin, mixed_integral_bound_rhs(alpha, beta) - lhs)
    return _report("L3", "alpha in {1, 2, 8, 32} x beta/alpha in 7-point grid", margin)


def _check_inverse_density_bound() -> LemmaReport:
    """pdf(inverse_cdf(1 - v)) <= v sqrt(2 ln 1/v) for 0 < v <= 1/2."""
    v = np.logspace(math.log10(0.001), math.log10(0.5), 60)
    lhs = std_normal_pdf(std_normal_inv_cdf(1.0 - v))
    rhs = v * np.sqrt(2.0 * np.log(1.0 / v))
    return _report("L4", "v in [0.001, 0.5] (60-pt log grid)", float((rhs - lhs).min()))


def integer_bound_lhs(n: int) -> float:
    """sqrt(2)/(n-2)^2 (sqrt(ln(n-2)) (1 - e^(-(n/2-1) + ln(n/2))) + sqrt(pi)/(4 sqrt 2)).

    The exponential factor is e^(-beta + ln(beta+1)) at beta = n/2 - 1, i.e.
    the mixed-integral cap specialized to alpha = n - 2.
    """
    exponent = -(n / 2.0 - 1.0) + math.log(n / 2.0)
    inner = math.sqrt(math.log(n - 2.0)) * (1.0 - math.exp(exponent)) + T_SQRT_LOG_INTEGRAL
    return math.sqrt(2.0) / (n - 2.0) ** 2 * inner


def gaussian_power_bound_rhs(n: int) -> float:
    """(3/2) sqrt(pi/ln 3) sqrt(ln n) / (n (n-1))."""
    return 1.5 * math.sqrt(math.pi / math.log(3.0)) * math.sqrt(math.log(n)) / (n * (n - 1.0))


def _check_integer_function_bound() -> LemmaReport:
    """The closed-form cap chain stays below the target rate for every
    integer n in [3, 64]; equality holds at n = 3."""
    margin = min(gaussian_power_bound_rhs(n) - integer_bound_lhs(n) for n in range(3, 65))
    return _report("L5", "integer n in [3, 64]", margin)


def gaussian_power_integral(n: int, tol: float = 1e-10) -> float:
    """Integral over (0, inf) of cdf(z)^(n-2) pdf(z)^2."""
    f = lambda z: std_normal_cdf(z) ** (n - 2) * std_normal_pdf(z) ** 2
    return quadrature(f, 0.0, math.inf, tol)


def _check_gaussian_power_integral_bound() -> LemmaReport:
    """The order-statistic integral stays below the same target rate for
    every integer n in [3, 64]."""
    margin = min(gaussian_power_bound_rhs(n) - gaussian_power_integral(n) for n in range(3, 65))
    return _report("L6", "integer n in [3, 64], quadrature at tol 1e-10", margin)


_LEMMA_CHECKS = {
    "L0": _check_gap_bound,
    "L1": _check_upper_tail_gap_bound,
    "L2": _check_gamma_integral_identity,
    "L3": _check_mixed_integral_bound,
    "L4": _check_inverse_density_bound,
    "L5": _check_integer_function_bound,
    "L6": _check_gaussian_power_integral_bound,
}


def verify_lemma(lemma_id: str) -> LemmaReport:
    """Evaluate both sides of one analytic inequality over its grid."""
    if lemma_id not in _LEMMA_CHECKS:
        raise ValueError(f"unknown lemma id {lemma_id!r}; expected one of {LEMMA_IDS}")
    return _LEMMA_CHECKS[lemma_id]()


def _unordered_prob(q: list[float], subset: tuple[int, ...]) -> float:
    """Probability of drawing the subset in any order, plain-float fast path."""
    import itertools

    total = 0.0
    for perm in itertools.permutations(subset):
        prob = 1.0
        drawn = 0.0
        for i in perm:
            prob *= q[i] / (1.0 - drawn)
            drawn += q[i]
        total += prob
    return total


def _random_simplex_rows(n: int, trials: int, rng: RngStream) -> np.ndarray:
    z = rng.standard_normal((trials, n))
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class BruteForceResult:
    trials: int
    triggered: int
    violations: int
    margin: float


def check_topk_optimality(n: int, k: int, trials: int, rng: RngStream) -> BruteForceResult:
    """Whenever some size-k subset has unordered sampling probability above
    1/2, it must be exactly the k most probable indices.

    The margin records the smallest gap between the least in-subset and the
    largest out-of-subset probability over triggering trials (negative would
    mean a violation).
    """
    if n > 8 or k > 4:
        raise ValueError("brute-force enumeration limited to n <= 8, k <= 4")
    subsets = enumerate_subsets(n, k)
    probs_rows = _random_simplex_rows(n, trials, rng)
    triggered = 0
    violations = 0
    margin = math.inf
    for row in probs_rows:
        q = row.tolist()
        winner = None
        for subset in subsets:
            if _unordered_prob(q, subset) > 0.5:
                winner = subset
                break
        if winner is None:
            continue
        triggered += 1
        inside = min(q[i] for i in winner)
        outside = max((q[j] for j in range(n) if j not in winner), default=-math.inf)
        gap = inside - outside
        margin = min(margin, gap)
        top = sorted(range(n), key=lambda i: (-q[i], i))[:k]
        if set(top) != set(winner):
            violations += 1
    if not math.isfinite(margin):
        margin = 0.0
    return BruteForceResult(trials=trials, triggered=triggered, violations=violations, margin=margin)


def check_swap_lemma(n: int, k: int, trials: int, rng: RngStream) -> BruteForceResult:
    """Replacing a subset member by an outside index of no smaller probability
    must not decrease the subset's unordered sampling probability
    (tolerance 1e-12)."""
    if n > 8 or k > 4:
        raise ValueError("brute-force enumeration limited to n <= 8, k <= 4")
    if k >= n:
        raise ValueError("swap needs at least one outside index")
    probs_rows = _random_simplex_rows(n, trials, rng)
    u = rng.derive("subset").uniform((trials, n))
    pick = rng.derive("members").uniform((trials, 2))
    triggered = 0
    violations = 0
    margin = math.inf
    for t in range(trials):
        q = probs_rows[t].tolist()
        order = np.argsort(u[t], kind="stable")
        subset = tuple(sorted(int(i) for i in order[:k]))
        i = subset[int(pick[t, 0] * k)]
        candidates = [j for j in range(n) if j not in subset and q[j] >= q[i]]
        if not candidates:
            continue
        triggered += 1
        j = candidates[int(pick[t, 1] * len(candidates))]
        before = _unordered_prob(q, subset)
        swapped = tuple(sorted(set(subset) - {i} | {j}))
        after = _unordered_prob(q, swapped)
        margin = min(margin, after - before)
        if after < before - 1e-12:
            violations += 1
    if not math.isfinite(margin):
        margin = 0.0
    return BruteForceResult(trials=trials, triggered=triggered, violations=violations, margin=margin)


def build_verification_report(
    rng: RngStream,
    trials: int = 10_000,
    n_values: tuple[int, ...] = (3, 4, 5, 6),
    k_values: tuple[int, ...] = (1, 2, 3),
    force_fail_id: str | None = None,
) -> dict:
    """One record per check: the seven analytic inequalities plus the two
    brute-force selection checks. force_fail_id is a test hook that flips
    the named record into a failure to exercise the error path.
    """
    checks = []
    for lemma_id in LEMMA_IDS:
        report = verify_lemma(lemma_id)
        checks.append(
            {"id": report.lemma_id, "grid": report.grid, "margin": report.margin, "pass": report.passed}
        )

    cell_index = 0
    topk_margin = math.inf
    topk_violations = 0
    topk_triggered = 0
    swap_margin = math.inf
    swap_violations = 0
    swap_triggered = 0
    for n in n_values:
        for k in k_values:
            if k > n:
                continue
            topk = check_topk_optimality(n, k, trials, rng.derive("topk", cell_index))
            if topk.triggered:
                topk_margin = min(topk_margin, topk.margin)
            topk_violations += topk.violations
            topk_triggered += topk.triggered
            if k < n:
                swap = check_swap_lemma(n, k, trials, rng.derive("swap", cell_index))
                if swap.triggered:
                    swap_margin = min(swap_margin, swap.margin)
                swap_violations += swap.violations
                swap_triggered += swap.triggered
            cell_index += 1
    grid_desc = (
        f"n in {list(n_values)} x k in {list(k_values)}, {trials} trials per cell"
    )
    checks.append(
        {
            "id": "top-k",
            "grid": f"{grid_desc}, {topk_triggered} triggering trials",
            "margin": topk_margin if math.isfinite(topk_margin) else 0.0,
            "pass": topk_violations == 0,
        }
    )
    checks.append(
        {
            "id": "swap",
            "grid": f"{grid_desc}, {swap_triggered} triggering trials",
            "margin": swap_margin if math.isfinite(swap_margin) else 0.0,
            "pass": swap_violations == 0,
        }
    )

    if force_fail_id is not None:
        for record in checks:
            if record["id"] == force_fail_id:
                record["margin"] = -abs(record["margin"]) - 1.0
                record["pass"] = False
                break
        else:
            raise ValueError(f"unknown check id {force_fail_id!r}")

    return {"checks": checks, "all_pass": all(c["pass"] for c in checks)}
