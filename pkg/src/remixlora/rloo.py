"""Score-function router gradients with a leave-one-out baseline, plus the
exact enumeration oracles used to certify them.

The surrogate objective is the expected loss over selections drawn without
replacement from the per-layer routing distributions. The estimator averages
centered losses against per-rollout score gradients; the oracles enumerate
the full selection space (and all ordered sample tuples) instead of sampling.
"""

from __future__ import annotations

import itertools
from collections.abc import Callable, Mapping
from dataclasses import dataclass

import numpy as np

from .numerics import RngStream, as_vector
from .routing import (
    RoutingDistribution,
    enumerate_ordered,
    ordered_selection_logprob,
    sample_without_replacement_batch,
    selection_logit_grad,
)

SELECTION_ENUM_LIMIT = 100_000
TUPLE_ENUM_LIMIT = 1_000_000

Selection = tuple[tuple[int, ...], ...]


@dataclass(frozen=True)
class Rollout:
    """One sampled selection with its loss and per-layer score gradients."""

    selection: Selection
    loss: float
    score_grads: list[np.ndarray]


@dataclass(frozen=True)
class RolloutSet:
    rollouts: list[Rollout]

    @property
    def m(self) -> int:
        return len(self.rollouts)

    @property
    def mean_loss(self) -> float:
        return float(np.mean([r.loss for r in self.rollouts]))


def make_rollout(
    dists: list[RoutingDistribution], xs: list[np.ndarray], selection: Selection, loss: float
) -> Rollout:
    grads = [
        np.outer(selection_logit_grad(dist, layer_sel), as_vector(x))
        for dist, x, layer_sel in zip(dists, xs, selection)
    ]
    return Rollout(selection=selection, loss=float(loss), score_grads=grads)


def sample_selection(dists: list[RoutingDistribution], k: int, rng: RngStream) -> Selection:
    """One selection: an independent ordered k-draw per layer."""
    return tuple(
        tuple(int(i) for i in sample_without_replacement_batch(dist.probs, k, 1, rng)[0])
        for dist in dists
    )


def rloo_router_grad(rollout_set: RolloutSet) -> list[np.ndarray]:
    """Per-layer router gradient estimate: mean-centered losses against score
    gradients, scaled by 1/(M-1).

    Centering is computed from pairwise loss differences so that identical
    losses yield an exactly zero estimate whatever their common value.
    """
    m = rollout_set.m
    if m < 2:
        raise ValueError("leave-one-out baseline undefined for fewer than 2 rollouts")
    losses = [r.loss for r in rollout_set.rollouts]
    advantages = [sum(li - lj for lj in losses) / m for li in losses]
    layers = len(rollout_set.rollouts[0].score_grads)
    grads = [np.zeros_like(rollout_set.rollouts[0].score_grads[l]) for l in range(layers)]
    for advantage, rollout in zip(advantages, rollout_set.rollouts):
        for l in range(layers):
            grads[l] += advantage * rollout.score_grads[l]
    return [g / (m - 1) for g in grads]


def _as_loss_fn(loss_table) -> Callable[[Selection], float]:
    if isinstance(loss_table, Mapping):
        return lambda sel: float(loss_table[sel])
    if callable(loss_table):
        return lambda sel: float(loss_table(sel))
    raise TypeError("loss table must be a mapping or a callable over selections")


@dataclass
class SelectionSpace:
    """Exhaustive view of all selections for small instances."""

    selections: list[Selection]
    probs: np.ndarray
    losses: np.ndarray
    logit_grads: list[np.ndarray]  # one (s, n) array per layer

    @property
    def size(self) -> int:
        return len(self.selections)


def enumerate_selection_space(loss_table, dists: list[RoutingDistribution], k: int) -> SelectionSpace:
    loss_fn = _as_loss_fn(loss_table)
    per_layer = [enumerate_ordered(dist.n, k) for dist in dists]
    total = 1
    for tuples in per_layer:
        total *= len(tuples)
    if total > SELECTION_ENUM_LIMIT:
        raise ValueError(f"selection space of size {total} exceeds the enumeration budget")
    layer_logprobs = [
        {t: ordered_selection_logprob(dist, t) for t in tuples}
        for dist, tuples in zip(dists, per_layer)
    ]
    layer_grads = [
        {t: selection_logit_grad(dist, t) for t in tuples}
        for dist, tuples in zip(dists, per_layer)
    ]
    selections = list(itertools.product(*per_layer))
    probs = np.array(
        [np.exp(sum(layer_logprobs[l][sel[l]] for l in range(len(dists)))) for sel in selections]
    )
    losses = np.array([loss_fn(sel) for sel in selections])
    logit_grads = [
        np.stack([layer_grads[l][sel[l]] for sel in selections]) for l in range(len(dists))
    ]
    return SelectionSpace(selections=selections, probs=probs, losses=losses, logit_grads=logit_grads)


def exact_surrogate_grad(
    loss_table, dists: list[RoutingDistribution], xs: list[np.ndarray], k: int
) -> list[np.ndarray]:
    """Ground-truth gradient of the expected loss: full enumeration of
    sum over selections of Q * loss * (gradient of log Q)."""
    space = enumerate_selection_space(loss_table, dists, k)
    weights = space.probs * space.losses
    return [
        np.outer(space.logit_grads[l].T @ weights, as_vector(x)) for l, x in enumerate(xs)
    ]


def unbiasedness_check(
    loss_table, dists: list[RoutingDistribution], xs: list[np.ndarray], k: int, m: int
) -> float:
    """Max-entry |E[estimate] - exact gradient|, with the expectation taken by
    enumerating every ordered m-tuple of selections weighted by its product
    probability."""
    if m < 2:
        raise ValueError("leave-one-out baseline undefined for fewer than 2 rollouts")
    space = enumerate_selection_space(loss_table, dists, k)
    s = space.size
    if s**m > TUPLE_ENUM_LIMIT:
        raise ValueError(f"tuple space {s}^{m} exceeds the enumeration budget")
    idx = np.indices((s,) * m).reshape(m, -1)
    tuple_weights = np.prod(space.probs[idx], axis=0)
    losses = space.losses[idx]
    advantages = losses - losses.mean(axis=0)
    exact = exact_surrogate_grad(loss_table, dists, xs, k)
    worst = 0.0
    for l, x in enumerate(xs):
        expected_logit = np.zeros(dists[l].n)
        for mm in range(m):
            expected_logit += space.logit_grads[l][idx[mm]].T @ (tuple_weights * advantages[mm])
        expected = np.outer(expected_logit / (m - 1), as_vector(x))
        worst = max(worst, float(np.abs(expected - exact[l]).max()))
    return worst


@dataclass
class VarianceSummary:
    """Empirical per-entry variance of the router gradient estimate."""

    per_layer: list[np.ndarray]
    mean_per_layer: list[np.ndarray]
    trials: int

    @property
    def total(self) -> float:
        """Sum of per-entry variances across all layers (trace of the
        estimator covariance)."""
        return float(sum(v.sum() for v in self.per_layer))


def estimator_variance(
    loss_table,
    dists: list[RoutingDistribution],
    xs: list[np.ndarray],
    k: int,
    m: int,
    trials: int,
    rng: RngStream,
) -> VarianceSummary:
    """Monte Carlo variance of the estimator over independent rollout sets.

    Since each layer's gradient is (logit gradient) outer (fixed input), the
    variance factorizes as var(logit entry) * input^2; draws are batched
    across all trials at once.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    loss_fn = _as_loss_fn(loss_table)
    layers = len(dists)
    count = trials * m

    draw_codes = []
    grad_tables = []
    for l, dist in enumerate(dists):
        n = dist.n
        draws = sample_without_replacement_batch(dist.probs, k, count, rng.derive("var-draws", l))
        powers = n ** np.arange(k)
        codes = draws @ powers
        table = {}
        grad_rows = np.zeros((n**k, n))
        for t in enumerate_ordered(n, k):
            code = int(sum(t[j] * powers[j] for j in range(k)))
            table[code] = t
            grad_rows[code] = selection_logit_grad(dist, t)
        draw_codes.append((codes, table, grad_rows, powers))
        grad_tables.append(grad_rows)

    # combined code across layers identifies the full selection for the loss
    combined = np.zeros(count, dtype=np.int64)
    scale = 1
    for l, dist in enumerate(dists):
        combined += draw_codes[l][0] * scale
        scale *= dist.n ** k
    unique_codes, inverse = np.unique(combined, return_inverse=True)
    unique_losses = np.empty(unique_codes.shape[0])
    for u, code in enumerate(unique_codes):
        sel = []
        rest = int(code)
        for l, dist in enumerate(dists):
            base = dist.n ** k
            sel.append(draw_codes[l][1][rest % base])
            rest //= base
        unique_losses[u] = loss_fn(tuple(sel))
    losses = unique_losses[inverse].reshape(trials, m)
    advantages = losses - losses.mean(axis=1, keepdims=True)

    per_layer = []
    mean_per_layer = []
    for l, x in enumerate(xs):
        codes = draw_codes[l][0].reshape(trials, m)
        grads = grad_tables[l][codes]  # (trials, m, n)
        estimates = np.einsum("tm,tmn->tn", advantages, grads) / (m - 1)
        x2 = as_vector(x) ** 2
        per_layer.append(np.outer(estimates.var(axis=0), x2))
        mean_per_layer.append(np.outer(estimates.mean(axis=0), as_vector(x)))
    return VarianceSummary(per_layer=per_layer, mean_per_layer=mean_per_layer, trials=trials)
