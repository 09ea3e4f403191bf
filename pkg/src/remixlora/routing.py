"""Routing distributions over adapters: effective support size, sampling
without replacement, exact selection probabilities, their score gradients,
and deterministic top-k selection.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .numerics import RngStream, as_matrix, as_vector, matvec, softmax

RESIDUAL_FLOOR = 1e-12
UNORDERED_ENUM_LIMIT = 12


@dataclass(frozen=True)
class RoutingDistribution:
    """An n-way categorical over adapters: logits and their softmax."""

    logits: np.ndarray
    probs: np.ndarray

    @property
    def n(self) -> int:
        return self.probs.shape[0]


def route(p: np.ndarray, x: np.ndarray) -> RoutingDistribution:
    """Routing distribution softmax(P x) for router matrix P and input x."""
    logits = matvec(p, x)
    return RoutingDistribution(logits=logits, probs=softmax(logits))


def from_probs(probs) -> RoutingDistribution:
    """Wrap an explicit probability vector (logits taken as log-probs)."""
    probs = as_vector(probs)
    if probs.min() <= 0.0 or abs(probs.sum() - 1.0) > 1e-9:
        raise ValueError("probs must be strictly positive and sum to 1")
    return RoutingDistribution(logits=np.log(probs), probs=probs)


def ess(weights) -> float:
    """Effective support size (l1 norm / l2 norm)^2 of a weight vector.

    1 for a one-hot vector, n for a uniform one; scale invariant.
    """
    w = np.abs(as_vector(weights))
    total = w.sum()
    if total == 0.0:
        raise ValueError("ESS undefined for the all-zero vector")
    return float(total * total / (w @ w))


def _validate_k(n: int, k: int) -> None:
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")


def sample_without_replacement_batch(
    probs: np.ndarray, k: int, count: int, rng: RngStream
) -> np.ndarray:
    """count independent ordered k-draws without replacement, as (count, k) ints.

    Each position is a categorical draw over the not-yet-drawn indices with
    the remaining mass renormalized, realized by inverse-transform sampling
    on the masked cumulative sums.
    """
    probs = as_vector(probs)
    n = probs.shape[0]
    _validate_k(n, k)
    remaining = np.tile(probs, (count, 1))
    out = np.empty((count, k), dtype=np.int64)
    rows = np.arange(count)
    for j in range(k):
        cum = np.cumsum(remaining, axis=1)
        r = rng.uniform((count,)) * cum[:, -1]
        idx = (cum <= r[:, None]).sum(axis=1)
        out[:, j] = idx
        remaining[rows, idx] = 0.0
    return out


def sample_without_replacement(dist: RoutingDistribution, k: int, rng: RngStream) -> tuple[int, ...]:
    """One ordered draw of k distinct indices from the routing distribution."""
    return tuple(int(i) for i in sample_without_replacement_batch(dist.probs, k, 1, rng)[0])


def ordered_selection_logprob(dist: RoutingDistribution, ordered) -> float:
    """log of prod_j q_{i_j} / (1 - sum_{j'<j} q_{i_j'}) for one layer's draw."""
    q = dist.probs
    n = q.shape[0]
    seen: set[int] = set()
    log_q = 0.0
    drawn_mass = 0.0
    for i in ordered:
        i = int(i)
        if not 0 <= i < n:
            raise ValueError(f"index {i} out of range [0, {n})")
        if i in seen:
            raise ValueError(f"duplicate index {i} in ordered selection")
        residual = 1.0 - drawn_mass
        if residual < RESIDUAL_FLOOR:
            raise ValueError("degenerate residual: drawn probabilities exhaust the mass")
        log_q += math.log(q[i]) - math.log(residual)
        seen.add(i)
        drawn_mass += q[i]
    return log_q


def unordered_subset_prob(dist: RoutingDistribution, subset) -> float:
    """Probability of drawing the given index set, summed over all orderings."""
    subset = tuple(subset)
    if len(subset) > UNORDERED_ENUM_LIMIT:
        raise ValueError(f"subset of size {len(subset)} exceeds the enumeration guard")
    q = dist.probs
    total = 0.0
    for perm in itertools.permutations(subset):
        prob = 1.0
        drawn = 0.0
        for i in perm:
            prob *= q[i] / (1.0 - drawn)
            drawn += q[i]
        total += prob
    return total


def top_k(dist: RoutingDistribution, k: int) -> tuple[int, ...]:
    """Indices of the k largest probabilities, ties broken toward lower index.

    Returned sorted ascending as the canonical set representation.
    """
    _validate_k(dist.n, k)
    order = np.argsort(-dist.probs, kind="stable")
    return tuple(sorted(int(i) for i in order[:k]))


def selection_logit_grad(dist: RoutingDistribution, ordered) -> np.ndarray:
    """Gradient of ordered_selection_logprob with respect to the logits.

    Per draw j the numerator contributes e_{i_j} - q; each later residual
    1 - sum_{j'<j} q_{i_j'} contributes its own softmax chain term.
    """
    q = dist.probs
    n = q.shape[0]
    grad = np.zeros(n)
    seen: set[int] = set()
    drawn_mass = 0.0
    drawn_vec = np.zeros(n)
    for j, i in enumerate(ordered):
        i = int(i)
        if not 0 <= i < n:
            raise ValueError(f"index {i} out of range [0, {n})")
        if i in seen:
            raise ValueError(f"duplicate index {i} in ordered selection")
        seen.add(i)
        residual = 1.0 - drawn_mass
        if residual < RESIDUAL_FLOOR:
            raise ValueError("degenerate residual: drawn probabilities exhaust the mass")
        grad[i] += 1.0
        grad -= q
        if j >= 1:
            grad += (drawn_vec - drawn_mass * q) / residual
        drawn_vec[i] = q[i]
        drawn_mass += q[i]
    return grad


def selection_score_grad(dist: RoutingDistribution, x: np.ndarray, ordered) -> np.ndarray:
    """Gradient of ordered_selection_logprob with respect to the router matrix."""
    return np.outer(selection_logit_grad(dist, ordered), as_vector(x))


def enumerate_ordered(n: int, k: int) -> list[tuple[int, ...]]:
    """All ordered k-tuples of distinct indices in [0, n)."""
    _validate_k(n, k)
    return list(itertools.permutations(range(n), k))


def enumerate_subsets(n: int, k: int) -> list[tuple[int, ...]]:
    """All size-k index sets in [0, n), each sorted ascending."""
    _validate_k(n, k)
    return list(itertools.combinations(range(n), k))
