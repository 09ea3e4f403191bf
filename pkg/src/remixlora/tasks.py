"""Synthetic clustered-regression tasks and the router-only bandit fixture.

Inputs come from separated Gaussian blobs; targets come from a frozen teacher
whose shared linear part the trained model inherits, so adaptation has to
learn the per-cluster low-rank corrections.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .layers import (
    MODE_REMIX,
    LoRAPair,
    MixtureLayer,
    omega,
)
from .numerics import RngStream
from .routing import enumerate_subsets


@dataclass(frozen=True)
class TaskSpec:
    dim: int = 32
    clusters: int = 4
    separation: float = 3.0
    correction_rank: int = 4
    noise_std: float = 0.01
    train_size: int = 4096
    eval_size: int = 512
    layers: int = 2

    def __post_init__(self):
        if self.clusters < 2:
            raise ValueError("need at least two clusters")
        if not 0 <= self.correction_rank <= self.dim:
            raise ValueError("correction rank must lie in [0, dim]")
        if self.train_size < 1 or self.eval_size < 1:
            raise ValueError("dataset sizes must be at least 1")
        if self.dim < 1 or self.layers < 1:
            raise ValueError("dim and layers must be at least 1")
        if self.separation < 0 or self.noise_std < 0:
            raise ValueError("separation and noise_std must be nonnegative")


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    labels: np.ndarray

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class TaskTruth:
    """Frozen teacher: shared per-layer maps, per-cluster low-rank
    corrections, cluster centers, and the output head."""

    shared: tuple[np.ndarray, ...]
    corrections: tuple[tuple[np.ndarray, ...], ...]
    centers: np.ndarray
    head: np.ndarray

    @property
    def layers(self) -> int:
        return len(self.shared)

    @property
    def clusters(self) -> int:
        return self.centers.shape[0]


# keeps the correction term comparable to but not above the shared map
CORRECTION_GAIN = 1.0


def _teacher_forward(truth: TaskTruth, x: np.ndarray, label: int) -> np.ndarray:
    h = x
    last = truth.layers - 1
    for l in range(truth.layers):
        z = (truth.shared[l] + truth.corrections[l][label]) @ h
        h = np.tanh(z) if l < last else z
    return truth.head @ h


def _make_truth(spec: TaskSpec, rng: RngStream) -> TaskTruth:
    d = spec.dim
    centers = spec.separation * rng.derive("centers").standard_normal((spec.clusters, d)) / math.sqrt(d)
    shared = []
    corrections = []
    for l in range(spec.layers):
        shared.append(rng.derive("shared", l).standard_normal((d, d)) / math.sqrt(d))
        per_cluster = []
        for c in range(spec.clusters):
            if spec.correction_rank == 0:
                per_cluster.append(np.zeros((d, d)))
                continue
            sub = rng.derive(f"correction-{l}", c)
            u = sub.derive("u").standard_normal((d, spec.correction_rank)) / math.sqrt(d)
            v = sub.derive("v").standard_normal((spec.correction_rank, d)) / math.sqrt(spec.correction_rank)
            per_cluster.append(CORRECTION_GAIN * (u @ v))
        corrections.append(tuple(per_cluster))
    head = rng.derive("head").standard_normal((d, d)) / math.sqrt(d)
    return TaskTruth(
        shared=tuple(shared), corrections=tuple(corrections), centers=centers, head=head
    )


def _sample_split(spec: TaskSpec, truth: TaskTruth, size: int, rng: RngStream) -> Dataset:
    d = spec.dim
    labels = (rng.derive("labels").uniform((size,)) * spec.clusters).astype(np.int64)
    noise_in = rng.derive("inputs").standard_normal((size, d)) / math.sqrt(d)
    inputs = truth.centers[labels] + noise_in
    targets = np.empty((size, d))
    for e in range(size):
        targets[e] = _teacher_forward(truth, inputs[e], int(labels[e]))
    if spec.noise_std > 0:
        targets += spec.noise_std * rng.derive("noise").standard_normal((size, d))
    return Dataset(inputs=inputs, targets=targets, labels=labels)


def gen_cluster_task(spec: TaskSpec, rng: RngStream) -> tuple[Dataset, Dataset, TaskTruth]:
    """Build train and eval splits plus the ground-truth descriptor."""
    truth = _make_truth(spec, rng.derive("truth"))
    train = _sample_split(spec, truth, spec.train_size, rng.derive("train"))
    eval_set = _sample_split(spec, truth, spec.eval_size, rng.derive("eval"))
    return train, eval_set, truth


@dataclass(frozen=True)
class BanditFixture:
    """Single-layer setup with frozen adapters whose combined output depends
    only on which subset is active, giving every subset a planted loss."""

    layer: MixtureLayer
    x0: np.ndarray
    target: np.ndarray
    adapter_outputs: np.ndarray
    subset_losses: dict[tuple[int, ...], float]
    best_subset: tuple[int, ...]

    @property
    def n(self) -> int:
        return self.layer.n

    @property
    def k(self) -> int:
        return self.layer.k

    def loss_table(self) -> dict[tuple[tuple[int, ...], ...], float]:
        """Planted losses keyed by ordered single-layer selections, as the
        estimator utilities expect."""
        import itertools

        table = {}
        for subset, value in self.subset_losses.items():
            for perm in itertools.permutations(subset):
                table[(perm,)] = value
        return table


def make_bandit(
    n: int,
    k: int,
    rng: RngStream,
    dim: int = 16,
    rank: int = 2,
    omega_scheme: str = "rslora",
    lora_alpha: float = 2.0,
    router_sigma: float | None = None,
) -> BanditFixture:
    """Plant a best subset: adapter i contributes a fixed vector c_i at the
    fixed input, and the target equals the best subset's combined output."""
    if not 1 <= k <= n:
        raise ValueError("need 1 <= k <= n")
    x0 = rng.derive("input").choice_signs((dim,)) / math.sqrt(dim)
    outputs = rng.derive("outputs").standard_normal((n, dim)) / math.sqrt(dim)
    loras = []
    for i in range(n):
        a = rng.derive("adapter-a", i).standard_normal((rank, dim)) / math.sqrt(dim)
        u = a @ x0
        b = np.outer(outputs[i], u) / float(u @ u)
        loras.append(LoRAPair(a=a, b=b))
    sigma = router_sigma if router_sigma is not None else math.sqrt(2.0 / dim)
    router_p = sigma * rng.derive("router").standard_normal((n, dim))
    layer = MixtureLayer(
        w=np.zeros((dim, dim)),
        loras=tuple(loras),
        router_p=router_p,
        mode=MODE_REMIX,
        omega_scheme=omega_scheme,
        k=k,
        lora_alpha=lora_alpha,
    )
    scale = omega(omega_scheme, k, rank, lora_alpha)
    best = tuple(sorted(int(i) for i in rng.derive("best").uniform((n,)).argsort()[:k]))
    target = scale * outputs[list(best)].sum(axis=0)
    subset_losses = {}
    for subset in enumerate_subsets(n, k):
        y = scale * outputs[list(subset)].sum(axis=0)
        diff = y - target
        subset_losses[subset] = float(0.5 * np.mean(diff * diff))
    return BanditFixture(
        layer=layer,
        x0=x0,
        target=target,
        adapter_outputs=outputs,
        subset_losses=subset_losses,
        best_subset=best,
    )
