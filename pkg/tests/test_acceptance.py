"""Acceptance criteria, one test each.

Every test prints a single ``PASS``/``FAIL`` line with the measured numbers,
whatever pytest's capture setting.  Run alone with::

    pytest tests/test_acceptance.py -v
"""
import math
import time

import numpy as np
import pytest

from moe2dense import calibration, conversion, distill, pipeline, scoring, synthgen, theory
from moe2dense.model import dense_forward, expert_forward

from test_distill import _numeric_grad, _problem


@pytest.fixture
def verdict(capsys):
    def emit(number: int, title: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number:2d} {title}: {detail}")
        assert ok, detail
    return emit


def test_01_concatenation_equivalence(verdict):
    start = time.perf_counter()
    worst = 0.0
    rng = np.random.default_rng(2024)
    for seed in range(50):
        d = int(rng.integers(4, 65))
        E = int(rng.integers(2, 33))
        k = int(rng.integers(1, min(E, 8) + 1))
        layer = synthgen.gen_random_moe(seed, d=d, d_expert=int(rng.integers(2, 17)), E=E, k=k,
                                        renormalize=bool(seed % 2), n_shared=int(seed % 3 == 0))
        stats = calibration.collect(layer, synthgen.gaussian_tokens(seed, 256, d))
        cfg = conversion.ConversionConfig(K=int(rng.integers(k, E + 1)), grouping_strategy="rr",
                                          scaling_mode="proportional", seed=seed, n_probes=64)
        dense, rep = conversion.convert_layer(layer, stats, cfg)
        # independent recomputation of sum_g alpha_g f_g (+ shared experts)
        merged = [conversion.merge_group([layer.experts[e] for e in g], [rep.scores[e] for e in g])
                  for g in rep.partition.groups]
        probes = np.random.default_rng([seed, 1]).standard_normal((64, d))
        want = sum(a * expert_forward(m, probes) for a, m in zip(rep.alpha, merged))
        want = want + sum(expert_forward(s, probes) for s in layer.shared_experts)
        got = dense_forward(dense, probes)
        err = float(np.max(np.linalg.norm(got - want, axis=1) / np.maximum(np.linalg.norm(want, axis=1), 1e-300)))
        worst = max(worst, err, rep.equivalence_error)
    elapsed = time.perf_counter() - start
    verdict(1, "concatenation equivalence", worst <= 1e-10 and elapsed < 10,
            f"max relative error {worst:.2e} (<= 1e-10) over 50 layers x 64 probes in {elapsed:.2f}s (< 10s)")


def test_02_redundancy_counterexample(verdict):
    start = time.perf_counter()
    reports = [theory.verify_redundancy(K) for K in range(2, 9)]
    elapsed = time.perf_counter() - start
    failed = [f"K={K}: {[c.name for c in r.failures()]}" for K, r in zip(range(2, 9), reports) if not r.passed]
    gaps = [abs(r.measured["L_topk"] - (K - 1) / (2 * K - 1)) for K, r in zip(range(2, 9), reports)]
    verdict(2, "redundancy counterexample", not failed and elapsed < 5,
            f"K=2..8, max |L_topk - (K-1)/(2K-1)| = {max(gaps):.1e}, "
            f"maximizers per K {[r.measured['n_maximizers'] for r in reports]}, {elapsed:.2f}s (< 5s)"
            + (f"; failures {failed}" if failed else ""))


def test_03_submodularity(verdict):
    r = theory.verify_submodularity(trials=10_000, tol=1e-9)
    verdict(3, "submodularity", r.passed and r.measured["violations"] == 0,
            f"10000 triples, {r.measured['violations']} violations, min gain {r.measured['min_gain']:.3e}, "
            f"min gain(S)-gain(T) {r.measured['min_gain_gap']:.3e}")


def test_04_greedy_bound(verdict):
    r = theory.verify_greedy_bound(n_instances=200)
    worst = r.measured["worst_ratio"]
    verdict(4, "greedy bound", r.passed and worst >= 1 - 1 / math.e,
            f"worst ratio {worst:.4f} (bound {1 - 1 / math.e:.4f}, expected >= 0.95), "
            f"greedy optimal on {r.measured['optimal_fraction']:.0%} of 200 instances")


def test_05_incoherence_bound(verdict):
    r = theory.verify_incoherence(n_instances=200)
    verdict(5, "incoherence bound", r.passed and r.measured["min_slack"] >= -1e-9,
            f"200 random instances (+ edge cases), min slack {r.measured['min_slack']:.3e}, "
            f"max (K-1)mu {r.measured['max_mu_times_K_minus_1']:.3f}")


def test_06_grouping_recovery(verdict):
    r = theory.verify_recovery(n_population=100, n_grid=(64, 256, 1024), n_seeds=20)
    med = r.measured["median_rate"]
    verdict(6, "grouping recovery", r.passed and r.measured["population_recovered"] == 100,
            f"population {r.measured['population_recovered']}/100, median finite-sample rate "
            f"n=64/256/1024: {med}")


def test_07_merge_oracle(verdict):
    r = theory.verify_merge_oracle(n_instances=100)
    verdict(7, "merge oracle and scaling", r.passed,
            f"100 instances, worst identity error {r.measured['worst_identity_error']:.1e}, "
            f"proportional/uniform scaling exact in rationals"
            + (f"; failures {[c.name for c in r.failures()]}" if not r.passed else ""))


def test_08_gradient_correctness(verdict):
    worst = {}
    for loss in distill.LossType:
        worst[loss.value] = 0.0
        for seed in range(20):
            student, head, h, targets = _problem(seed)
            _, grads = distill.loss_and_grad(student, head, h, targets, loss)
            for name in ("w_gate", "w_up", "w_down"):
                num = _numeric_grad(student, head, h, targets, loss, name)
                rel = np.linalg.norm(getattr(grads, name) - num) / max(np.linalg.norm(num), 1e-12)
                worst[loss.value] = max(worst[loss.value], float(rel))
    verdict(8, "gradient correctness", max(worst.values()) <= 1e-4,
            "worst relative error per loss " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


def test_09_scoring_identities(verdict):
    worst, n_inst = 0.0, 0
    for seed in range(40):
        layer = synthgen.gen_random_moe(seed, d=8, d_expert=4, E=4 + seed % 9, k=1 + seed % 3,
                                        renormalize=bool(seed % 2))
        stats = calibration.collect(layer, synthgen.gaussian_tokens(seed, 64 + 37 * seed, 8))
        sf, ps, cp = (scoring.score(stats, m).values for m in ("sf", "ps", "cp"))
        used = stats.sel_count > 0
        worst = max(worst, float(np.max(np.abs(ps[used] - sf[used] * cp[used]))))
        n_inst += 1
    cp_dev = 0.0
    for K in range(2, 9):
        stats = calibration.collect_table(synthgen.gen_redundancy_counterexample(K))
        cp = scoring.score(stats, "cp").values
        cp_dev = max(cp_dev, float(np.max(np.abs(cp[stats.sel_count > 0] - 1.0))))
    verdict(9, "scoring identities", worst <= 1e-12 and cp_dev <= 1e-12,
            f"max |PS - SF*CP| {worst:.1e} over {n_inst} layers; max |CP - 1| deterministic routing {cp_dev:.1e}")


def test_10_diversity_direction(verdict):
    rank_wins, cover_ok = 0, 0
    for seed in range(100):
        layer, labels = synthgen.gen_redundant_pool(16, 4, 0.01, seed)
        stats = calibration.collect(layer, synthgen.gaussian_tokens(seed, 2048, layer.d))
        acp = scoring.score(stats, "acp")
        kernel = scoring.build_kernel(acp, scoring.mean_gram(stats), 8)
        do = scoring.greedy_do_select(kernel, 8)
        top = scoring.topk_select(acp, 8)
        rank_wins += scoring.effective_rank(kernel, do.indices) >= scoring.effective_rank(kernel, top.indices)
        cover_ok += len(set(labels[list(do.indices)])) >= len(set(labels[list(top.indices)]))
    verdict(10, "diversity direction", rank_wins >= 95 and cover_ok == 100,
            f"effective rank DO-ACP >= ACP top-K on {rank_wins}/100 seeds (>= 95), "
            f"group coverage >= on {cover_ok}/100 (= 100)")


def test_11_initialization_benefit(verdict):
    start = time.perf_counter()
    wins, detail = 0, []
    for seed in range(10):
        layer = synthgen.gen_random_moe(seed, d=16, d_expert=8, E=8, k=2)
        head = distill.gen_logit_head(seed + 1000, 32, 16)
        stats = calibration.collect(layer, synthgen.gaussian_tokens(seed + 2000, 2048, 16))
        dense, _ = conversion.convert_layer(layer, stats, conversion.method_config("do_acp", K=2))
        cfg = distill.DistillConfig(steps=200, seed=seed)
        moe_init = distill.train(dense, layer, head, cfg)
        rand_init = distill.train(distill.random_dense(seed + 3000, 16, dense.d_dense), layer, head, cfg)
        target = rand_init.losses[-1]
        a, b = distill.steps_to_reach(moe_init.losses, target), distill.steps_to_reach(rand_init.losses, target)
        wins += a is not None and a < b
        detail.append(f"{a}/{b}")
    elapsed = time.perf_counter() - start
    verdict(11, "initialization benefit", wins >= 8 and elapsed < 120,
            f"MoE init strictly faster on {wins}/10 seeds (>= 8); steps moe/random {' '.join(detail)}; "
            f"{elapsed:.1f}s (< 120s)")


def test_12_concentration(verdict):
    r = theory.verify_concentration(n_grid=(256, 1024, 4096), n_seeds=20)
    verdict(12, "kernel concentration", r.passed,
            f"median error {[f'{x:.3f}' for x in r.measured['median_error']]}, "
            f"median ratio {[f'{x:.3f}' for x in r.measured['median_ratio']]} (<= 0.75)")


DETERMINISM_CONFIGS = [
    {},
    {"conversion.scoring_method": "cp", "conversion.selection_algo": "brute_do", "conversion.K": 3,
     "conversion.grouping_strategy": "ab", "conversion.scaling_mode": "uniform"},
    {"conversion.scoring_method": "sf", "conversion.selection_algo": "topk", "conversion.K": 6,
     "conversion.grouping_strategy": "wc", "distill.loss": "reverse_kl", "distill.k_prime": 4},
    {"conversion.scoring_method": "pp", "conversion.selection_algo": "topk", "conversion.grouping_strategy": "rc",
     "distill.loss": "fkl_plus_hidden_mse", "calibration.chunk_size": 37},
    {"model.generate": {"kind": "redundant_pool", "E": 8, "n_duplicate_groups": 2, "noise": 0.01, "seed": 9,
                        "d": 8, "d_expert": 4, "k": 2}, "distill.loss": "layer_mse"},
]


def test_13_determinism(verdict, tmp_path):
    from test_pipeline import base_config
    mismatched, n_files = [], 0
    for i, over in enumerate(DETERMINISM_CONFIGS):
        cfg = pipeline.PipelineConfig.from_dict(base_config(**over))
        a = pipeline.run_pipeline(cfg, tmp_path / f"{i}a")
        b = pipeline.run_pipeline(cfg, tmp_path / f"{i}b")
        pipeline.report(a.output_dir)
        pipeline.report(b.output_dir)
        files_a = sorted(p.relative_to(a.output_dir) for p in a.output_dir.rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(b.output_dir) for p in b.output_dir.rglob("*") if p.is_file())
        if files_a != files_b:
            mismatched.append(f"config {i}: file lists differ")
            continue
        n_files += len(files_a)
        mismatched += [f"config {i}: {f}" for f in files_a
                       if (a.output_dir / f).read_bytes() != (b.output_dir / f).read_bytes()]
    verdict(13, "determinism", not mismatched,
            f"{len(DETERMINISM_CONFIGS)} configs run twice, {n_files} artifacts compared byte for byte, "
            f"{len(mismatched)} mismatches" + (f": {mismatched[:3]}" if mismatched else ""))
