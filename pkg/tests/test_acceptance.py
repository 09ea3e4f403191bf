"""Acceptance gate: eleven criteria covering estimator exactness, the
initialization-collapse bound, the analytic inequality suite, brute-force
selection properties, gradient correctness, the qualitative training
findings, and artifact determinism.

Each criterion prints (and logs for the terminal summary) a single
pass/fail line with the measured quantity behind the verdict.
"""

import itertools
import json
import math

import numpy as np
import pytest

from remixlora import cli, theory
from remixlora.layers import (
    backward_dense,
    backward_lora,
    forward_dense,
    forward_remix,
    init_mixture_layer,
)
from remixlora.numerics import RngStream, finite_diff_grad, softmax
from remixlora.rloo import estimator_variance, unbiasedness_check
from remixlora.routing import (
    enumerate_ordered,
    from_probs,
    ordered_selection_logprob,
    route,
    sample_without_replacement,
    selection_score_grad,
    top_k,
)
from remixlora.tasks import TaskSpec, make_bandit
from remixlora.training import (
    TrainConfig,
    bandit_expected_loss,
    bandit_model,
    run_bandit_training,
    run_training,
)

SEEDS = (1, 2, 3, 4, 5)


def verdict(log, number: int, ok: bool, text: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'} - {text}"
    print(line, flush=True)
    log(line)
    assert ok, line


@pytest.fixture(scope="module")
def cluster_runs():
    """Five seeds of the clustered-task comparison: dense baseline (collapse
    watch), sampled routing, and a width-matched single adapter."""
    spec = TaskSpec()
    runs = {}
    for seed in SEEDS:
        dense = run_training(
            TrainConfig(
                mode="dense-baseline",
                steps=2000,
                seed=seed,
                learning_rate=0.2,
                router_init_sigma=1.0,
                router_lr_scale=50.0,
            ),
            spec,
        )
        remix = run_training(
            TrainConfig(mode="remix", steps=2000, seed=seed, learning_rate=0.2, router_lr_scale=50.0),
            spec,
        )
        single = run_training(
            TrainConfig(mode="single-lora", steps=2000, seed=seed, learning_rate=0.2, rank=8),
            spec,
        )
        runs[seed] = {
            "dense_first_min": min(dense.rows[0].ess_layers),
            "dense_final_min": min(dense.rows[-1].ess_layers),
            "remix_ess_exact": all(
                row.ess_min == 2.0 and row.ess_mean == 2.0 and set(row.ess_layers) == {2.0}
                for row in remix.rows
            ),
            "remix_eval": remix.eval_result.loss,
            "remix_histograms": remix.eval_result.histograms,
            "single_eval": single.eval_result.loss,
        }
    return runs


@pytest.fixture(scope="module")
def bandit_runs():
    """Router-only training on the planted-loss fixture, five seeds."""
    results = []
    for seed in SEEDS:
        fixture = make_bandit(6, 2, RngStream(seed, "bandit-fixture"))
        start = bandit_expected_loss(bandit_model(fixture), fixture)
        cfg = TrainConfig(
            mode="remix",
            n=6,
            k=2,
            steps=500,
            batch_size=8,
            seed=seed,
            learning_rate=1.0,
            m_rollouts=4,
            freeze_loras=True,
        )
        _, model = run_bandit_training(cfg, fixture)
        final = bandit_expected_loss(model, fixture)
        hit = set(top_k(model.layers[0].routing(fixture.x0), 2)) == set(fixture.best_subset)
        results.append({"hit": hit, "start": start, "final": final})
    return results


def test_criterion_1_estimator_unbiased_on_enumeration_grid(verdict_log):
    worst = 0.0
    cells = 0
    for index, (n, k, layers, m) in enumerate(
        itertools.product((2, 3), (1, 2), (1, 2), (2, 3))
    ):
        rng = RngStream(2024, "acceptance-unbiased", index)
        dists = [
            from_probs(softmax(rng.derive("logits", l).standard_normal((n,))))
            for l in range(layers)
        ]
        xs = [rng.derive("x", l).standard_normal((5,)) for l in range(layers)]
        per_layer = [enumerate_ordered(n, k) for _ in range(layers)]
        tuple_space = (len(per_layer[0]) ** layers) ** m
        assert tuple_space <= 10**6
        values = rng.derive("losses").uniform((len(per_layer[0]) ** layers,))
        table = {
            combo: float(values[j])
            for j, combo in enumerate(itertools.product(*per_layer))
        }
        worst = max(worst, unbiasedness_check(table, dists, xs, k, m))
        cells += 1
    verdict(
        verdict_log,
        1,
        worst <= 1e-10,
        f"leave-one-out estimator exactly unbiased on {cells} enumeration cells "
        f"(max |E[estimate] - gradient| = {worst:.3e}, tol 1e-10)",
    )


def test_criterion_2_score_gradient_matches_finite_differences(verdict_log):
    worst = 0.0
    for trial in range(100):
        rng = RngStream(2024, "acceptance-score", trial)
        n = 2 + int(rng.derive("n").uniform(()) * 4.0)
        k = 1 + int(rng.derive("k").uniform(()) * min(3, n))
        dim = 4
        p = 0.8 * rng.derive("p").standard_normal((n, dim))
        x = rng.derive("x").standard_normal((dim,))
        dist = route(p, x)
        selection = sample_without_replacement(dist, k, rng.derive("sel"))
        analytic = selection_score_grad(dist, x, selection)
        numeric = finite_diff_grad(
            lambda flat: ordered_selection_logprob(route(flat.reshape(n, dim), x), selection),
            p.ravel(),
            1e-5,
        ).reshape(n, dim)
        scale = max(1.0, float(np.abs(numeric).max()))
        worst = max(worst, float(np.abs(analytic - numeric).max()) / scale)
    verdict(
        verdict_log,
        2,
        worst <= 1e-6,
        f"selection score gradient vs central differences on 100 instances "
        f"(worst relative error {worst:.3e}, tol 1e-6)",
    )


def test_criterion_3_initialization_collapse_bound_holds(verdict_log):
    trials = 100_000
    samples = theory.monte_carlo_ess(1.0, 8, 1024, trials, RngStream(2024, "acceptance-collapse"))
    pieces = []
    ok = True
    for delta in (0.05, 0.1581, 0.5):
        bound = theory.ess_upper_bound(
            theory.BoundInputs(sigma=1.0, n=8, x_norm=32.0, delta=delta)
        )
        exceed = theory.exceedance_fraction(samples, bound)
        slack = delta + 3.0 * math.sqrt(delta * (1.0 - delta) / trials)
        ok = ok and exceed <= slack
        pieces.append(f"delta={delta}: {exceed:.4f}<={slack:.4f}")
    median = float(np.median(samples))
    ok = ok and median < 4.0
    verdict(
        verdict_log,
        3,
        ok,
        f"ESS exceedance within tolerance at sigma=1, n=8, D=1024, 1e5 trials "
        f"({'; '.join(pieces)}; median {median:.3f} < 4)",
    )


def test_criterion_4_inequality_suite_margins(verdict_log):
    margins = {lemma_id: theory.verify_lemma(lemma_id).margin for lemma_id in theory.LEMMA_IDS}
    worst_id = min(margins, key=margins.get)
    quad = theory.gamma_integral(2.0, 1.5, 1e-10)
    reference = math.sqrt(math.pi) / (4.0 * math.sqrt(2.0))
    identity_dev = abs(quad - reference)
    ok = all(m >= -1e-9 for m in margins.values()) and identity_dev <= 1e-8
    verdict(
        verdict_log,
        4,
        ok,
        f"all seven inequality checks pass (worst margin {margins[worst_id]:.3e} at "
        f"{worst_id}, floor -1e-9); log-power quadrature matches sqrt(pi)/(4 sqrt 2) "
        f"to {identity_dev:.3e} (tol 1e-8)",
    )


def test_criterion_5_brute_force_selection_properties(verdict_log):
    trials = 10_000
    violations = 0
    triggered = 0
    cells = 0
    for n in (3, 4, 5, 6):
        for k in (1, 2, 3):
            top = theory.check_topk_optimality(
                n, k, trials, RngStream(2024, "acceptance-topk", 10 * n + k)
            )
            violations += top.violations
            triggered += top.triggered
            cells += 1
            if k < n:
                swap = theory.check_swap_lemma(
                    n, k, trials, RngStream(2024, "acceptance-swap", 10 * n + k)
                )
                violations += swap.violations
                cells += 1
    verdict(
        verdict_log,
        5,
        violations == 0,
        f"zero violations of top-k optimality and swap monotonicity over {cells} "
        f"cells x {trials} trials ({triggered} majority-subset events observed)",
    )


def _layer_fd_worst(mode: str, base_seed: int) -> float:
    worst = 0.0
    for trial in range(50):
        rng = RngStream(base_seed, "acceptance-layer", trial)
        layer = init_mixture_layer(
            rng.derive("init"), dim=5, n=4, k=2, rank=2, mode=mode, router_sigma=0.9
        )
        for i, lora in enumerate(layer.loras):
            lora.b = 0.5 * rng.derive("b", i).standard_normal(lora.b.shape)
        x = rng.derive("x").standard_normal((5,))
        t = rng.derive("t").standard_normal((5,))
        if mode == "remix":
            active = (0, 2)
            y, cache = forward_remix(layer, x, active)
            grads = backward_lora(layer, cache, y - t)
            forward = lambda: forward_remix(layer, x, active)[0]
            arrays = []
            for i in active:
                arrays.append((layer.loras[i].a, grads.grad_a[i]))
                arrays.append((layer.loras[i].b, grads.grad_b[i]))
        else:
            y, cache = forward_dense(layer, x)
            grads = backward_dense(layer, cache, y - t)
            forward = lambda: forward_dense(layer, x)[0]
            arrays = [(layer.router_p, grads.grad_router_p)]
            for i, lora in enumerate(layer.loras):
                arrays.append((lora.a, grads.grad_a[i]))
                arrays.append((lora.b, grads.grad_b[i]))
        for arr, analytic in arrays:
            orig = arr.copy()

            def loss_of(flat, arr=arr, orig=orig):
                arr[:] = flat.reshape(orig.shape)
                value = 0.5 * float(np.sum((forward() - t) ** 2))
                arr[:] = orig
                return value

            numeric = finite_diff_grad(loss_of, orig.ravel(), 1e-5).reshape(orig.shape)
            scale = max(1.0, float(np.abs(numeric).max()))
            worst = max(worst, float(np.abs(analytic - numeric).max()) / scale)
        numeric_x = finite_diff_grad(
            lambda v: 0.5
            * float(
                np.sum(
                    (
                        (forward_remix(layer, v, (0, 2))[0] if mode == "remix" else forward_dense(layer, v)[0])
                        - t
                    )
                    ** 2
                )
            ),
            x,
            1e-5,
        )
        scale = max(1.0, float(np.abs(numeric_x).max()))
        worst = max(worst, float(np.abs(grads.grad_x - numeric_x).max()) / scale)
    return worst


def test_criterion_6_layer_backward_matches_finite_differences(verdict_log):
    worst_sparse = _layer_fd_worst("remix", 71)
    worst_dense = _layer_fd_worst("dense-baseline", 72)
    worst = max(worst_sparse, worst_dense)
    verdict(
        verdict_log,
        6,
        worst <= 1e-6,
        f"layer backward passes vs central differences, 50 instances per mode "
        f"(worst relative error sparse {worst_sparse:.3e}, dense {worst_dense:.3e}, tol 1e-6)",
    )


def test_criterion_7_dense_collapses_sampled_does_not(verdict_log, cluster_runs):
    below_start = sum(
        run["dense_final_min"] < run["dense_first_min"] for run in cluster_runs.values()
    )
    below_threshold = sum(run["dense_final_min"] < 1.5 for run in cluster_runs.values())
    remix_exact = all(run["remix_ess_exact"] for run in cluster_runs.values())
    finals = ", ".join(f"{run['dense_final_min']:.2f}" for run in cluster_runs.values())
    ok = below_start >= 4 and below_threshold >= 3 and remix_exact
    verdict(
        verdict_log,
        7,
        ok,
        f"dense worst-layer ESS fell below its start in {below_start}/5 seeds and "
        f"below 1.5 in {below_threshold}/5 (finals: {finals}); sampled-routing ESS "
        f"identically k in all runs: {remix_exact}",
    )


def test_criterion_8_router_finds_planted_best_subset(verdict_log, bandit_runs):
    hits = sum(run["hit"] for run in bandit_runs)
    drops = sum(run["final"] < run["start"] for run in bandit_runs)
    losses = ", ".join(f"{run['start']:.3f}->{run['final']:.4f}" for run in bandit_runs)
    ok = hits >= 4 and drops == 5
    verdict(
        verdict_log,
        8,
        ok,
        f"top-k matched the planted argmin subset in {hits}/5 seeds within 500 steps; "
        f"expected loss dropped in {drops}/5 ({losses})",
    )


def test_criterion_9_gradient_variance_shrinks_with_rollouts(verdict_log):
    trials = 10_000
    all_ordered = True
    summary = []
    for seed in SEEDS:
        fixture = make_bandit(6, 2, RngStream(seed, "bandit-fixture"))
        dist = fixture.layer.routing(fixture.x0)
        table = fixture.loss_table()
        totals = [
            estimator_variance(
                table, [dist], [fixture.x0], 2, m, trials, RngStream(seed, "acceptance-var", m)
            ).total
            for m in (2, 4, 16)
        ]
        ordered = totals[0] > totals[1] > totals[2]
        all_ordered = all_ordered and ordered
        summary.append(f"seed {seed}: " + ">".join(f"{v:.2e}" for v in totals))
    verdict(
        verdict_log,
        9,
        all_ordered,
        f"router-gradient variance strictly decreases over M in (2, 4, 16) at 1e4 "
        f"trials in 5/5 seeds ({'; '.join(summary)})",
    )


def test_criterion_10_sampled_mixture_beats_single_adapter(verdict_log, cluster_runs):
    wins = sum(run["remix_eval"] < run["single_eval"] for run in cluster_runs.values())
    diverse = all(
        sum(freq >= 0.10 for freq in hist.values()) >= 2
        for run in cluster_runs.values()
        for hist in run["remix_histograms"]
    )
    pairs = ", ".join(
        f"{run['remix_eval']:.4f} vs {run['single_eval']:.4f}" for run in cluster_runs.values()
    )
    ok = wins >= 4 and diverse
    verdict(
        verdict_log,
        10,
        ok,
        f"sampled mixture beat the width-matched single adapter in {wins}/5 seeds "
        f"({pairs}); every layer kept >= 2 subsets at >= 10% frequency: {diverse}",
    )


def test_criterion_11_reruns_are_byte_identical(verdict_log, tmp_path):
    def run_twice(name, argv_of, extra=()):
        dirs = []
        for tag in ("a", "b"):
            out = tmp_path / f"{name}-{tag}"
            assert cli.main(argv_of(out) + list(extra)) == 0
            dirs.append(out)
        a, b = dirs
        names = sorted(p.name for p in a.iterdir())
        assert names == sorted(p.name for p in b.iterdir())
        for file_name in names:
            if (a / file_name).read_bytes() != (b / file_name).read_bytes():
                return name, file_name
        return None

    def config(name, payload):
        path = tmp_path / f"{name}.json"
        path.write_text(json.dumps(payload), encoding="utf-8")
        return str(path)

    collapse_cfg = config(
        "collapse", {"sigma": 1.0, "n": 8, "D": 64, "trials": 10_000, "deltas": [0.1581], "seed": 3}
    )
    verify_cfg = config("verify", {"trials": 500, "n_values": [3, 4], "k_values": [1, 2], "seed": 0})
    rloo_cfg = config(
        "rloo", {"seed": 0, "m_values": [2, 4], "variance_trials": 1000, "bandit_n": 5, "bandit_k": 2}
    )
    train_cfg = config(
        "train",
        {
            "task": {"dim": 8, "clusters": 3, "train_size": 64, "eval_size": 32, "layers": 2},
            "train": {"mode": "remix", "n": 4, "k": 2, "rank": 2, "steps": 5, "batch_size": 4, "m_rollouts": 2, "seed": 5},
        },
    )
    mismatch = None
    for name, argv_of in (
        ("collapse", lambda out: ["collapse", "--config", collapse_cfg, "--out", str(out)]),
        ("verify", lambda out: ["verify", "--config", verify_cfg, "--out", str(out)]),
        ("rloo-check", lambda out: ["rloo-check", "--config", rloo_cfg, "--out", str(out)]),
        ("train", lambda out: ["train", "--config", train_cfg, "--out", str(out)]),
    ):
        mismatch = mismatch or run_twice(name, argv_of, extra=["--bit-exact"])
    eval_cfg = config(
        "eval", {"checkpoint": str(tmp_path / "train-a" / "checkpoint.json"), "k_values": [1, 2]}
    )
    mismatch = mismatch or run_twice(
        "eval", lambda out: ["eval", "--config", eval_cfg, "--out", str(out)], extra=["--bit-exact"]
    )
    verdict(
        verdict_log,
        11,
        mismatch is None,
        "all five commands rerun byte-identically under --bit-exact"
        if mismatch is None
        else f"artifact differs between reruns: {mismatch[0]}/{mismatch[1]}",
    )
