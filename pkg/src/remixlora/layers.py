"""The mixture-of-adapters layer: a frozen dense weight plus n low-rank
adapter pairs and a router, with analytic forward/backward passes.

Two modes share one parameter set. In remix mode a sparse selection of k
adapters is activated with one constant weight omega each; in dense-baseline
mode all n adapters contribute with learned softmax weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import RngStream, gaussian_matrix, matvec
from .routing import RoutingDistribution, route

MODE_REMIX = "remix"
MODE_DENSE = "dense-baseline"
OMEGA_SCHEMES = ("lora", "rslora")

# Counter of low-rank products executed by forward_remix, for asserting that
# sparse forward cost scales with k rather than n.
_LOWRANK_PRODUCTS = 0


def lowrank_product_count() -> int:
    return _LOWRANK_PRODUCTS


def reset_lowrank_product_count() -> None:
    global _LOWRANK_PRODUCTS
    _LOWRANK_PRODUCTS = 0


def omega(scheme: str, k: int, r: int, alpha: float = 2.0) -> float:
    """Constant routing weight: alpha/(k r) or alpha/sqrt(k r)."""
    if k < 1 or r < 1:
        raise ValueError("k and r must be at least 1")
    if scheme == "lora":
        return alpha / (k * r)
    if scheme == "rslora":
        return alpha / math.sqrt(k * r)
    raise ValueError(f"unknown omega scheme {scheme!r}")


@dataclass
class LoRAPair:
    """Low-rank factors: a maps inputs down to rank r, b maps back up."""

    a: np.ndarray
    b: np.ndarray

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    def __post_init__(self):
        if self.a.ndim != 2 or self.b.ndim != 2:
            raise ValueError("adapter factors must be matrices")
        if self.b.shape[1] != self.a.shape[0]:
            raise ValueError(f"rank mismatch: b is {self.b.shape}, a is {self.a.shape}")


@dataclass
class MixtureLayer:
    w: np.ndarray
    loras: list[LoRAPair]
    router_p: np.ndarray
    mode: str
    omega_scheme: str = "rslora"
    k: int = 1
    lora_alpha: float = 2.0

    @property
    def n(self) -> int:
        return len(self.loras)

    @property
    def rank(self) -> int:
        return self.loras[0].rank

    @property
    def dim_in(self) -> int:
        return self.w.shape[1]

    @property
    def dim_out(self) -> int:
        return self.w.shape[0]

    def __post_init__(self):
        if self.mode not in (MODE_REMIX, MODE_DENSE):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.omega_scheme not in OMEGA_SCHEMES:
            raise ValueError(f"unknown omega scheme {self.omega_scheme!r}")
        if not 1 <= self.k <= self.n:
            raise ValueError(f"k={self.k} outside [1, {self.n}]")
        ranks = {lora.rank for lora in self.loras}
        if len(ranks) != 1:
            raise ValueError(f"adapter ranks must all match, got {sorted(ranks)}")

    @property
    def omega(self) -> float:
        return omega(self.omega_scheme, self.k, self.rank, self.lora_alpha)

    def routing(self, x: np.ndarray) -> RoutingDistribution:
        return route(self.router_p, x)

    def routing_weights(self, active) -> np.ndarray:
        """The sparse weight vector: omega on active indices, zero elsewhere."""
        pi = np.zeros(self.n)
        pi[list(active)] = self.omega
        return pi


@dataclass
class LayerCache:
    """Intermediates retained by a forward pass for the matching backward."""

    mode: str
    x: np.ndarray
    active: tuple[int, ...]
    ax: dict[int, np.ndarray]
    pi: np.ndarray | None = None
    bax: dict[int, np.ndarray] = field(default_factory=dict)


def init_mixture_layer(
    rng: RngStream,
    dim: int,
    n: int,
    k: int,
    rank: int,
    mode: str,
    omega_scheme: str = "rslora",
    router_sigma: float | None = None,
    lora_alpha: float = 2.0,
    w: np.ndarray | None = None,
) -> MixtureLayer:
    """Fresh layer: frozen w (given or N(0, 1/dim)), down-projections
    N(0, 1/dim), up-projections zero so the layer starts as exactly w,
    router N(0, router_sigma^2) with a Kaiming-style default."""
    if router_sigma is None:
        router_sigma = math.sqrt(2.0 / dim)
    if w is None:
        w = gaussian_matrix(rng.derive("layer-w"), dim, dim, 1.0 / math.sqrt(dim))
    loras = [
        LoRAPair(
            a=gaussian_matrix(rng.derive("lora-a", i), rank, dim, 1.0 / math.sqrt(dim)),
            b=np.zeros((dim, rank)),
        )
        for i in range(n)
    ]
    router_p = gaussian_matrix(rng.derive("router-p"), n, dim, router_sigma)
    return MixtureLayer(
        w=w.copy(),
        loras=loras,
        router_p=router_p,
        mode=mode,
        omega_scheme=omega_scheme,
        k=k,
        lora_alpha=lora_alpha,
    )


def forward_remix(layer: MixtureLayer, x: np.ndarray, active) -> tuple[np.ndarray, LayerCache]:
    """y = Wx + omega * sum over active adapters of B_i A_i x."""
    global _LOWRANK_PRODUCTS
    active = tuple(int(i) for i in active)
    if len(set(active)) != len(active):
        raise ValueError(f"duplicate active index in {active}")
    y = matvec(layer.w, x)
    ax = {}
    om = layer.omega
    for i in active:
        lora = layer.loras[i]
        ax_i = lora.a @ x
        y = y + om * (lora.b @ ax_i)
        ax[i] = ax_i
        _LOWRANK_PRODUCTS += 1
    return y, LayerCache(mode=MODE_REMIX, x=x, active=active, ax=ax)


def forward_dense(layer: MixtureLayer, x: np.ndarray) -> tuple[np.ndarray, LayerCache]:
    """y = Wx + sum_i pi_i B_i A_i x with pi = softmax(router_p x)."""
    pi = layer.routing(x).probs
    y = matvec(layer.w, x)
    ax = {}
    bax = {}
    for i, lora in enumerate(layer.loras):
        ax_i = lora.a @ x
        bax_i = lora.b @ ax_i
        y = y + pi[i] * bax_i
        ax[i] = ax_i
        bax[i] = bax_i
    return y, LayerCache(mode=MODE_DENSE, x=x, active=tuple(range(layer.n)), ax=ax, pi=pi, bax=bax)


@dataclass
class LayerGrads:
    grad_a: dict[int, np.ndarray]
    grad_b: dict[int, np.ndarray]
    grad_x: np.ndarray
    grad_router_p: np.ndarray | None = None


def backward_lora(layer: MixtureLayer, cache: LayerCache, g: np.ndarray) -> LayerGrads:
    """Adapter and input gradients for a sparse forward; inactive adapters
    receive exactly zero (no entries in the gradient maps)."""
    if cache.mode != MODE_REMIX:
        raise ValueError(f"cache mode {cache.mode!r} does not match remix backward")
    om = layer.omega
    grad_a = {}
    grad_b = {}
    grad_x = layer.w.T @ g
    for i in cache.active:
        lora = layer.loras[i]
        btg = lora.b.T @ g
        grad_b[i] = om * np.outer(g, cache.ax[i])
        grad_a[i] = om * np.outer(btg, cache.x)
        grad_x = grad_x + om * (lora.a.T @ btg)
    return LayerGrads(grad_a=grad_a, grad_b=grad_b, grad_x=grad_x)


def backward_dense(layer: MixtureLayer, cache: LayerCache, g: np.ndarray) -> LayerGrads:
    """Full chain rule for the dense forward, including the softmax path
    into the router matrix."""
    if cache.mode != MODE_DENSE:
        raise ValueError(f"cache mode {cache.mode!r} does not match dense backward")
    pi = cache.pi
    grad_a = {}
    grad_b = {}
    grad_x = layer.w.T @ g
    u = np.empty(layer.n)
    for i, lora in enumerate(layer.loras):
        btg = lora.b.T @ g
        grad_b[i] = pi[i] * np.outer(g, cache.ax[i])
        grad_a[i] = pi[i] * np.outer(btg, cache.x)
        grad_x = grad_x + pi[i] * (lora.a.T @ btg)
        u[i] = g @ cache.bax[i]
    # softmax backward: d logits = pi * (u - <u, pi>)
    dlogits = pi * (u - float(u @ pi))
    grad_router_p = np.outer(dlogits, cache.x)
    grad_x = grad_x + layer.router_p.T @ dlogits
    return LayerGrads(grad_a=grad_a, grad_b=grad_b, grad_x=grad_x, grad_router_p=grad_router_p)


def layer_to_dict(layer: MixtureLayer) -> dict:
    """JSON-serializable snapshot of all layer parameters."""
    return {
        "w": layer.w.tolist(),
        "lora_a": [lora.a.tolist() for lora in layer.loras],
        "lora_b": [lora.b.tolist() for lora in layer.loras],
        "router_p": layer.router_p.tolist(),
        "mode": layer.mode,
        "omega_scheme": layer.omega_scheme,
        "k": layer.k,
        "rank": layer.rank,
        "lora_alpha": layer.lora_alpha,
    }


def layer_from_dict(data: dict) -> MixtureLayer:
    loras = [
        LoRAPair(a=np.asarray(a, dtype=np.float64), b=np.asarray(b, dtype=np.float64))
        for a, b in zip(data["lora_a"], data["lora_b"])
    ]
    layer = MixtureLayer(
        w=np.asarray(data["w"], dtype=np.float64),
        loras=loras,
        router_p=np.asarray(data["router_p"], dtype=np.float64),
        mode=data["mode"],
        omega_scheme=data["omega_scheme"],
        k=int(data["k"]),
        lora_alpha=float(data.get("lora_alpha", 2.0)),
    )
    if layer.rank != int(data["rank"]):
        raise ValueError("rank field does not match adapter shapes")
    return layer
