"""Desk-scale supervised finetuning on the synthetic tasks.

Three modes share one loop: sampled constant-weight routing trained with
leave-one-out REINFORCE on the router, the dense learnable-softmax baseline
trained end to end, and a plain single-adapter run (a one-member dense
mixture, so its adapter weight is identically 1).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from .layers import (
    MODE_DENSE,
    MODE_REMIX,
    MixtureLayer,
    backward_dense,
    backward_lora,
    forward_dense,
    forward_remix,
    init_mixture_layer,
    layer_from_dict,
    layer_to_dict,
)
from .numerics import RngStream
from .rloo import Rollout, RolloutSet, rloo_router_grad
from .routing import (
    ess,
    sample_without_replacement,
    selection_logit_grad,
    top_k,
    unordered_subset_prob,
)
from .tasks import BanditFixture, Dataset, TaskSpec, TaskTruth, gen_cluster_task

MODE_SINGLE = "single-lora"
TRAIN_MODES = (MODE_REMIX, MODE_DENSE, MODE_SINGLE)

CHECKPOINT_FORMAT = "remixlora-checkpoint-v1"


class DivergenceError(RuntimeError):
    """Raised when a training loss stops being finite."""

    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    mode: str = MODE_REMIX
    m_rollouts: int = 4
    k: int = 2
    n: int = 8
    rank: int = 4
    omega_scheme: str = "rslora"
    learning_rate: float = 0.2
    steps: int = 2000
    batch_size: int = 32
    seed: int = 1
    bit_exact: bool = False
    router_init_sigma: float | None = None
    router_lr_scale: float = 1.0
    lora_alpha: float = 2.0
    freeze_router: bool = False
    freeze_loras: bool = False

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")
        if self.mode == MODE_REMIX and self.m_rollouts < 2:
            raise ValueError("remix mode needs at least 2 rollouts")
        if not 1 <= self.k <= self.n:
            raise ValueError("need 1 <= k <= n")
        if self.rank < 1 or self.steps < 1 or self.batch_size < 1:
            raise ValueError("rank, steps and batch_size must be at least 1")
        if not (math.isfinite(self.learning_rate) and self.learning_rate >= 0):
            raise ValueError("learning rate must be finite and nonnegative")
        if not (math.isfinite(self.router_lr_scale) and self.router_lr_scale >= 0):
            raise ValueError("router_lr_scale must be finite and nonnegative")


@dataclass
class MetricsRow:
    step: int
    split: str
    loss: float
    ess_min: float
    ess_mean: float
    router_grad_norm: float
    lora_grad_norm: float
    wallclock_ms: float
    ess_layers: tuple[float, ...]


def metrics_header(num_layers: int) -> list[str]:
    base = [
        "step",
        "split",
        "loss",
        "ess_min",
        "ess_mean",
        "router_grad_norm",
        "lora_grad_norm",
        "wallclock_ms",
    ]
    return base + [f"ess_layer_{l}" for l in range(num_layers)]


def metrics_row_values(row: MetricsRow) -> list:
    return [
        row.step,
        row.split,
        row.loss,
        row.ess_min,
        row.ess_mean,
        row.router_grad_norm,
        row.lora_grad_norm,
        row.wallclock_ms,
        *row.ess_layers,
    ]


@dataclass
class Model:
    layers: list[MixtureLayer]
    head: np.ndarray

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def dim(self) -> int:
        return self.layers[0].dim_in

    def __post_init__(self):
        if not self.layers:
            raise ValueError("model needs at least one layer")
        if self.head.ndim != 2 or self.head.shape[1] != self.layers[-1].dim_out:
            raise ValueError("head shape does not chain onto the last layer")


@dataclass
class ForwardTrace:
    """Layer inputs, post-activation states and caches kept for backward."""

    hiddens: list[np.ndarray]
    caches: list
    output: np.ndarray


def _forward_through(model: Model, x: np.ndarray, layer_fn) -> ForwardTrace:
    h = x
    hiddens = [h]
    caches = []
    last = model.depth - 1
    for l, layer in enumerate(model.layers):
        z, cache = layer_fn(l, layer, h)
        caches.append(cache)
        h = np.tanh(z) if l < last else z
        hiddens.append(h)
    return ForwardTrace(hiddens=hiddens, caches=caches, output=model.head @ h)


def model_forward_remix(model: Model, x: np.ndarray, selection) -> ForwardTrace:
    return _forward_through(model, x, lambda l, layer, h: forward_remix(layer, h, selection[l]))


def model_forward_dense(model: Model, x: np.ndarray) -> ForwardTrace:
    return _forward_through(model, x, lambda l, layer, h: forward_dense(layer, h))


def sft_loss_value(output: np.ndarray, target: np.ndarray) -> float:
    diff = output - target
    return float(0.5 * np.mean(diff * diff))


def sft_loss(model: Model, x: np.ndarray, target: np.ndarray, selection) -> float:
    """Half mean squared error of the sparsely routed forward."""
    if len(selection) != model.depth:
        raise ValueError("selection must supply one subset per layer")
    return sft_loss_value(model_forward_remix(model, x, selection).output, target)


def _model_backward(model: Model, trace: ForwardTrace, target: np.ndarray, backward_fn):
    """Returns (per-layer LayerGrads, head gradient, loss)."""
    out_dim = trace.output.shape[0]
    grad_y = (trace.output - target) / out_dim
    loss = sft_loss_value(trace.output, target)
    head_grad = np.outer(grad_y, trace.hiddens[-1])
    g = model.head.T @ grad_y
    last = model.depth - 1
    layer_grads = [None] * model.depth
    for l in range(last, -1, -1):
        if l < last:
            g = g * (1.0 - trace.hiddens[l + 1] ** 2)
        grads = backward_fn(l, model.layers[l], trace.caches[l], g)
        layer_grads[l] = grads
        g = grads.grad_x
    return layer_grads, head_grad, loss


class _GradAccumulator:
    """Running sums of parameter gradients across examples and rollouts."""

    def __init__(self, model: Model):
        self.router = [np.zeros_like(layer.router_p) for layer in model.layers]
        self.lora_a = [
            np.zeros((layer.n, layer.rank, layer.dim_in)) for layer in model.layers
        ]
        self.lora_b = [
            np.zeros((layer.n, layer.dim_out, layer.rank)) for layer in model.layers
        ]
        self.head = np.zeros_like(model.head)

    def add_layer_grads(self, layer_grads, weight: float):
        for l, grads in enumerate(layer_grads):
            for i, ga in grads.grad_a.items():
                self.lora_a[l][i] += weight * ga
            for i, gb in grads.grad_b.items():
                self.lora_b[l][i] += weight * gb
            if grads.grad_router_p is not None:
                self.router[l] += weight * grads.grad_router_p

    def add_router_grads(self, router_grads, weight: float):
        for l, grad in enumerate(router_grads):
            self.router[l] += weight * grad

    def router_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(g * g)) for g in self.router))

    def lora_norm(self) -> float:
        total = sum(float(np.sum(g * g)) for g in self.lora_a)
        total += sum(float(np.sum(g * g)) for g in self.lora_b)
        return math.sqrt(total)


def _apply_update(model: Model, acc: _GradAccumulator, cfg: TrainConfig):
    lr = cfg.learning_rate
    if lr == 0.0:
        return
    if not cfg.freeze_router:
        router_lr = lr * cfg.router_lr_scale
        for layer, grad in zip(model.layers, acc.router):
            layer.router_p = layer.router_p - router_lr * grad
    if not cfg.freeze_loras:
        for l, layer in enumerate(model.layers):
            for i, lora in enumerate(layer.loras):
                lora.a = lora.a - lr * acc.lora_a[l][i]
                lora.b = lora.b - lr * acc.lora_b[l][i]
        model.head = model.head - lr * acc.head


def _finish_row(
    step: int,
    loss: float,
    ess_values: np.ndarray,
    acc: _GradAccumulator,
    bit_exact: bool,
    started: float,
) -> MetricsRow:
    if not math.isfinite(loss):
        raise DivergenceError(step)
    elapsed = 0.0 if bit_exact else (time.perf_counter() - started) * 1000.0
    return MetricsRow(
        step=step,
        split="train",
        loss=loss,
        ess_min=float(ess_values.min()),
        ess_mean=float(ess_values.mean()),
        router_grad_norm=acc.router_norm(),
        lora_grad_norm=acc.lora_norm(),
        wallclock_ms=elapsed,
        ess_layers=tuple(float(v) for v in ess_values.mean(axis=0)),
    )


def train_step_remix(
    model: Model,
    batch_x: np.ndarray,
    batch_t: np.ndarray,
    cfg: TrainConfig,
    rng: RngStream,
    step: int = 0,
) -> MetricsRow:
    """One SGD step: per example, M sampled selections give M losses; the
    router follows the leave-one-out REINFORCE estimate, adapters and head
    follow the plain pathwise gradient averaged over rollouts."""
    started = time.perf_counter()
    if cfg.m_rollouts < 2:
        raise ValueError("remix mode needs at least 2 rollouts")
    batch = batch_x.shape[0]
    k = model.layers[0].k
    acc = _GradAccumulator(model)
    pathwise_weight = 1.0 / (batch * cfg.m_rollouts)
    loss_sum = 0.0
    for e in range(batch):
        x = batch_x[e]
        target = batch_t[e]
        rollouts = []
        for _ in range(cfg.m_rollouts):
            dists = []
            selection = []

            def routed(l, layer, h):
                dist = layer.routing(h)
                subset = sample_without_replacement(dist, layer.k, rng)
                dists.append(dist)
                selection.append(subset)
                return forward_remix(layer, h, subset)

            trace = _forward_through(model, x, routed)
            layer_grads, head_grad, loss = _model_backward(
                model, trace, target, lambda l, layer, cache, g: backward_lora(layer, cache, g)
            )
            acc.add_layer_grads(layer_grads, pathwise_weight)
            acc.head += pathwise_weight * head_grad
            score_grads = [
                np.outer(selection_logit_grad(dists[l], selection[l]), trace.hiddens[l])
                for l in range(model.depth)
            ]
            rollouts.append(
                Rollout(selection=tuple(selection), loss=loss, score_grads=score_grads)
            )
            loss_sum += loss
        acc.add_router_grads(rloo_router_grad(RolloutSet(rollouts)), 1.0 / batch)
    loss = loss_sum / (batch * cfg.m_rollouts)
    row_pending = _finish_row(
        step,
        loss,
        np.full((batch, model.depth), float(k)),
        acc,
        cfg.bit_exact,
        started,
    )
    _apply_update(model, acc, cfg)
    return row_pending


def train_step_dense(
    model: Model,
    batch_x: np.ndarray,
    batch_t: np.ndarray,
    cfg: TrainConfig,
    step: int = 0,
) -> MetricsRow:
    """Fully differentiable step through the softmax-weighted forward; logs
    the ESS of the learned weights seen by this (pre-update) batch."""
    started = time.perf_counter()
    batch = batch_x.shape[0]
    acc = _GradAccumulator(model)
    ess_values = np.empty((batch, model.depth))
    loss_sum = 0.0
    for e in range(batch):
        trace = model_forward_dense(model, batch_x[e])
        for l in range(model.depth):
            ess_values[e, l] = ess(trace.caches[l].pi)
        layer_grads, head_grad, loss = _model_backward(
            model, trace, batch_t[e], lambda l, layer, cache, g: backward_dense(layer, cache, g)
        )
        acc.add_layer_grads(layer_grads, 1.0 / batch)
        acc.head += head_grad / batch
        loss_sum += loss
    loss = loss_sum / batch
    row = _finish_row(step, loss, ess_values, acc, cfg.bit_exact, started)
    _apply_update(model, acc, cfg)
    return row


def build_model(truth: TaskTruth, cfg: TrainConfig, rng: RngStream) -> Model:
    """Student mirroring the teacher: frozen shared maps, teacher head as the
    trainable head's starting point, zero-output adapters."""
    if cfg.mode == MODE_SINGLE:
        n, k, layer_mode = 1, 1, MODE_DENSE
    elif cfg.mode == MODE_DENSE:
        n, k, layer_mode = cfg.n, cfg.k, MODE_DENSE
    else:
        n, k, layer_mode = cfg.n, cfg.k, MODE_REMIX
    layers = [
        init_mixture_layer(
            rng.derive("layer", l),
            dim=truth.shared[l].shape[1],
            n=n,
            k=k,
            rank=cfg.rank,
            mode=layer_mode,
            omega_scheme=cfg.omega_scheme,
            router_sigma=cfg.router_init_sigma,
            lora_alpha=cfg.lora_alpha,
            w=truth.shared[l],
        )
        for l in range(truth.layers)
    ]
    return Model(layers=layers, head=truth.head.copy())


@dataclass
class EvalResult:
    loss: float
    histograms: list[dict[str, float]] | None


def evaluate(model: Model, eval_set: Dataset, mode: str, k_override: int | None = None) -> EvalResult:
    """Deterministic evaluation: sparse modes activate the top-k adapters by
    routing probability per layer; dense modes use the full weighted sum."""
    if mode == MODE_REMIX:
        counts = [dict() for _ in range(model.depth)]
        loss_sum = 0.0
        for e in range(eval_set.size):
            x = eval_set.inputs[e]

            def routed(l, layer, h):
                k = k_override if k_override is not None else layer.k
                subset = top_k(layer.routing(h), k)
                key = ",".join(str(i) for i in subset)
                counts[l][key] = counts[l].get(key, 0) + 1
                return forward_remix(layer, h, subset)

            trace = _forward_through(model, x, routed)
            loss_sum += sft_loss_value(trace.output, eval_set.targets[e])
        histograms = [
            {key: count / eval_set.size for key, count in sorted(layer_counts.items())}
            for layer_counts in counts
        ]
        return EvalResult(loss=loss_sum / eval_set.size, histograms=histograms)
    loss_sum = 0.0
    for e in range(eval_set.size):
        trace = model_forward_dense(model, eval_set.inputs[e])
        loss_sum += sft_loss_value(trace.output, eval_set.targets[e])
    return EvalResult(loss=loss_sum / eval_set.size, histograms=None)


@dataclass
class TrainResult:
    rows: list[MetricsRow]
    model: Model
    eval_result: EvalResult
    truth: TaskTruth
    train_set: Dataset
    eval_set: Dataset


def run_training(
    cfg: TrainConfig,
    spec: TaskSpec,
    row_callback=None,
) -> TrainResult:
    """Full run: generate the task, build the student, step `cfg.steps`
    times, then evaluate. Rows describe the pre-update model state; the
    callback sees each row as soon as it exists."""
    rng = RngStream(cfg.seed, "train")
    train_set, eval_set, truth = gen_cluster_task(spec, rng.derive("task"))
    model = build_model(truth, cfg, rng.derive("model"))
    rows = _run_loop(model, train_set, cfg, rng, row_callback)
    eval_result = evaluate(model, eval_set, cfg.mode)
    return TrainResult(
        rows=rows,
        model=model,
        eval_result=eval_result,
        truth=truth,
        train_set=train_set,
        eval_set=eval_set,
    )


def _run_loop(model, train_set, cfg, rng, row_callback) -> list[MetricsRow]:
    rows = []
    for step in range(cfg.steps):
        idx = (rng.derive("batch", step).uniform((cfg.batch_size,)) * train_set.size).astype(
            np.int64
        )
        batch_x = train_set.inputs[idx]
        batch_t = train_set.targets[idx]
        if cfg.mode == MODE_REMIX:
            row = train_step_remix(
                model, batch_x, batch_t, cfg, rng.derive("rollout", step), step
            )
        else:
            row = train_step_dense(model, batch_x, batch_t, cfg, step)
        rows.append(row)
        if row_callback is not None:
            row_callback(row)
    return rows


def bandit_model(fixture: BanditFixture) -> Model:
    """Fresh trainable copy of the fixture's layer with an identity head."""
    layer = layer_from_dict(layer_to_dict(fixture.layer))
    return Model(layers=[layer], head=np.eye(fixture.layer.dim_out))


def bandit_expected_loss(model: Model, fixture: BanditFixture) -> float:
    """Exact expected planted loss under the current routing distribution."""
    dist = model.layers[0].routing(fixture.x0)
    return sum(
        unordered_subset_prob(dist, subset) * value
        for subset, value in fixture.subset_losses.items()
    )


def run_bandit_training(
    cfg: TrainConfig, fixture: BanditFixture, row_callback=None
) -> tuple[list[MetricsRow], Model]:
    """Router-only training against the planted losses: every batch example
    is the same fixed input, adapters and head stay frozen."""
    if cfg.mode != MODE_REMIX:
        raise ValueError("the bandit fixture trains the remix router only")
    if not cfg.freeze_loras:
        raise ValueError("bandit training requires freeze_loras")
    model = bandit_model(fixture)
    rng = RngStream(cfg.seed, "bandit")
    batch_x = np.tile(fixture.x0, (cfg.batch_size, 1))
    batch_t = np.tile(fixture.target, (cfg.batch_size, 1))
    rows = []
    for step in range(cfg.steps):
        row = train_step_remix(model, batch_x, batch_t, cfg, rng.derive("rollout", step), step)
        rows.append(row)
        if row_callback is not None:
            row_callback(row)
    return rows, model


def model_to_dict(model: Model, cfg: TrainConfig, spec: TaskSpec) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "layers": [layer_to_dict(layer) for layer in model.layers],
        "head": model.head.tolist(),
        "train": asdict(cfg),
        "task": asdict(spec),
    }


def model_from_dict(data: dict) -> tuple[Model, TrainConfig, TaskSpec]:
    if data.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognized checkpoint format {data.get('format')!r}")
    layers = [layer_from_dict(entry) for entry in data["layers"]]
    model = Model(layers=layers, head=np.asarray(data["head"], dtype=float))
    cfg = TrainConfig(**data["train"])
    spec = TaskSpec(**data["task"])
    return model, cfg, spec


def save_checkpoint(path, model: Model, cfg: TrainConfig, spec: TaskSpec) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(model_to_dict(model, cfg, spec), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> tuple[Model, TrainConfig, TaskSpec]:
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
