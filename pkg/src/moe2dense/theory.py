"""Executable checks of the selection, grouping and merging guarantees.

Every verifier returns a :class:`TheoremReport` made of individual
:class:`Check` records (measured value, relation, bound, tolerance).  The pass
flag and slack are always derived from the checks, so a report loaded from
JSON can be re-validated.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from . import calibration, grouping, scoring, synthgen
from .conversion import ScalingMode, compute_alpha
from .errors import TheoremCheckError, ValidationError
from .model import all_expert_outputs
from .scoring import Kernel, ScoreMethod


@dataclass(frozen=True)
class Check:
    name: str
    value: float
    relation: str  # "<=", ">=" or "=="
    bound: float
    tol: float = 0.0

    def margin(self) -> float:
        if self.relation == "<=":
            m = self.bound + self.tol - self.value
        elif self.relation == ">=":
            m = self.value - self.bound + self.tol
        elif self.relation == "==":
            m = self.tol - abs(self.value - self.bound)
        else:
            raise ValidationError(f"unknown relation {self.relation!r}")
        return -math.inf if math.isnan(m) else m

    @property
    def passed(self) -> bool:
        return self.margin() >= 0


@dataclass
class TheoremReport:
    theorem_id: str
    instance: str
    checks: list[Check] = field(default_factory=list)
    measured: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def slack(self) -> float:
        return min((c.margin() for c in self.checks), default=math.inf)

    def add(self, name, value, relation, bound, tol=0.0) -> Check:
        c = Check(name, float(value), relation, float(bound), float(tol))
        self.checks.append(c)
        return c

    def failures(self) -> list[Check]:
        return [c for c in self.checks if not c.passed]

    def to_dict(self) -> dict:
        return {
            "theorem_id": self.theorem_id,
            "instance": self.instance,
            "passed": self.passed,
            "slack": _json_float(self.slack),
            "checks": [{**asdict(c), "value": _json_float(c.value), "bound": _json_float(c.bound),
                        "passed": c.passed} for c in self.checks],
            "measured": self.measured,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TheoremReport":
        """Rebuild a report, re-deriving pass flags; raise on any mismatch."""
        checks = [Check(c["name"], _from_json_float(c["value"]), c["relation"], _from_json_float(c["bound"]),
                        c.get("tol", 0.0)) for c in data["checks"]]
        report = cls(data["theorem_id"], data["instance"], checks, data.get("measured", {}))
        for c, raw in zip(checks, data["checks"]):
            if "passed" in raw and bool(raw["passed"]) != c.passed:
                raise TheoremCheckError(f"{report.theorem_id}/{c.name}: stored pass flag disagrees with its values")
        if bool(data.get("passed", report.passed)) != report.passed:
            raise TheoremCheckError(f"{report.theorem_id}: stored pass flag disagrees with its checks")
        return report


def _json_float(x: float):
    if math.isfinite(x):
        return x
    return "inf" if x > 0 else ("-inf" if x < 0 else "nan")


def _from_json_float(x) -> float:
    return float(x)


def _kernel(mat: np.ndarray, lam: float, base=ScoreMethod.ACP) -> Kernel:
    mat = np.array(mat, dtype=np.float64)
    mat = 0.5 * (mat + mat.T)
    mat.setflags(write=False)
    return Kernel(mat, float(lam), ScoreMethod(base))


# --- redundancy counterexample -------------------------------------------------

def reconstruction_error(table: synthgen.ExpertOutputTable, subset, ridge: float = 0.0) -> float:
    """Best mean-squared linear fit of the teacher output by the subset's outputs.

    Solved by normal equations with a small ridge so that identical experts
    do not make the system singular.
    """
    y = table.teacher_output()
    idx = list(subset)
    if not idx:
        return float(np.mean(y * y))
    X = table.outputs[idx].T
    P = table.n_points
    coef = np.linalg.solve(X.T @ X / P + ridge * np.eye(len(idx)), X.T @ y / P)
    r = X @ coef - y
    return float(np.mean(r * r))


def verify_redundancy(K: int) -> TheoremReport:
    if not 2 <= K <= 8:
        raise ValidationError("the redundancy check runs for 2 <= K <= 8")
    table = synthgen.gen_redundancy_counterexample(K)
    stats = calibration.collect_table(table)
    acp = scoring.score(stats, ScoreMethod.ACP)
    cp = scoring.score(stats, ScoreMethod.CP)
    E = 2 * K - 1
    beta = (1.0 / E) ** 1.5
    alpha = (K / E) ** 1.5
    kernel = scoring.build_kernel(acp, scoring.mean_gram(stats), K, lambda_override=beta)
    ridge = beta * 1e-12
    rep = TheoremReport("redundancy", f"counterexample K={K}, E={E}, lambda=beta")

    rep.add("teacher output is 1 everywhere", float(np.max(np.abs(table.teacher_output() - 1.0))), "<=", 0.0)
    rep.add("CP = 1 for every selected expert", float(np.max(np.abs(cp.values - 1.0))), "<=", 0.0, 1e-15)
    rep.add("I_A closed form", float(np.max(np.abs(acp.values[:K] - math.sqrt(K / E)))), "<=", 0.0, 1e-12)
    rep.add("I_B closed form", float(np.max(np.abs(acp.values[K:] - math.sqrt(1 / E)))), "<=", 0.0, 1e-12)
    rep.add("kernel K_11 = alpha", kernel.mat[0, 0], "==", alpha, 1e-12)
    rep.add("kernel K_{K+1,K+1} = beta", kernel.mat[K, K], "==", beta, 1e-12)

    top = scoring.topk_select(acp, K)
    loss_top = reconstruction_error(table, top.indices, ridge)
    rep.add("ACP top-K is the identical block", len(set(top.indices) - set(range(K))), "==", 0)
    rep.add("L(ACP top-K) = (K-1)/(2K-1)", loss_top, "==", (K - 1) / E, 1e-9)

    best = scoring.brute_force_select(kernel, K)
    rep.add("L(log-det maximizer)", reconstruction_error(table, best.indices, ridge), "<=", 1e-12)
    maximizers = scoring.brute_force_maximizers(kernel, K, rtol=1e-10)
    bad_t = sum(1 for s in maximizers if len(set(s) & set(range(K))) != 1)
    worst = max(reconstruction_error(table, s, ridge) for s in maximizers)
    rep.add("maximizers with t != 1", bad_t, "==", 0)
    rep.add("max L over all maximizers", worst, "<=", 1e-12)
    greedy = scoring.greedy_do_select(kernel, K)
    rep.add("greedy picks one identical-block expert", len(set(greedy.indices) & set(range(K))), "==", 1)
    rep.measured = {"L_topk": loss_top, "n_maximizers": len(maximizers),
                    "maximizer": list(best.indices), "greedy": list(greedy.indices),
                    "objective_max": best.objective}
    return rep


# --- submodularity and greedy ratio --------------------------------------------

def random_psd_kernel(rng: np.random.Generator, E: int) -> np.ndarray:
    """Low-rank or clustered PSD matrix with random importance weighting."""
    rank = int(rng.integers(1, E + 1))
    X = rng.standard_normal((E, rank))
    if rng.random() < 0.5:
        # near-duplicate rows make diversity matter
        src = rng.integers(0, E, size=E)
        X = X[src] + 0.05 * rng.standard_normal((E, rank))
    w = np.exp(rng.normal(0.0, 1.0, size=E))
    mat = (X * np.sqrt(w)[:, None]) @ (X * np.sqrt(w)[:, None]).T
    return 0.5 * (mat + mat.T)


def _gain(kernel: Kernel, S, e) -> float:
    return scoring.normalized_logdet(kernel, list(S) + [e]) - scoring.normalized_logdet(kernel, S)


def verify_submodularity(seed: int = 0, trials: int = 10_000, tol: float = 1e-9) -> TheoremReport:
    rng = np.random.default_rng(seed)
    rep = TheoremReport("submodularity", f"{trials} random (kernel, S subset T, e) triples, seed {seed}")
    worst_mono, worst_dr, violations = math.inf, math.inf, 0
    for _ in range(trials):
        E = int(rng.integers(3, 11))
        mat = random_psd_kernel(rng, E)
        lam = float(np.trace(mat) / E * np.exp(rng.uniform(np.log(1e-3), np.log(10.0))))
        kernel = _kernel(mat, lam)
        perm = rng.permutation(E)
        t_size = int(rng.integers(0, E))
        T = [int(i) for i in perm[:t_size]]
        e = int(perm[t_size])
        S = [i for i in T if rng.random() < 0.5]
        g_s, g_t = _gain(kernel, S, e), _gain(kernel, T, e)
        worst_mono = min(worst_mono, g_s, g_t)
        worst_dr = min(worst_dr, g_s - g_t)
        violations += (min(g_s, g_t) < -tol) or (g_s - g_t < -tol)
    rep.add("monotonicity: min marginal gain", worst_mono, ">=", 0.0, tol)
    rep.add("diminishing returns: min gain(S) - gain(T)", worst_dr, ">=", 0.0, tol)
    rep.add("violations", violations, "==", 0)

    diag = np.diag(rng.uniform(0.1, 5.0, size=6))
    kd = _kernel(diag, 0.7)
    diffs = [abs(_gain(kd, [j for j in range(6) if j != e][:s], e) - math.log1p(diag[e, e] / 0.7))
             for e in range(6) for s in range(0, 5)]
    rep.add("diagonal kernel gains equal log(1 + K_ee / lambda)", max(diffs), "<=", 0.0, 1e-12)
    rep.measured = {"violations": violations, "min_gain": worst_mono, "min_gain_gap": worst_dr}
    return rep


def verify_greedy_bound(seed: int = 0, n_instances: int = 200) -> TheoremReport:
    rng = np.random.default_rng(seed)
    bound = 1.0 - 1.0 / math.e
    ratios = []
    worst_gap = 0.0
    for _ in range(n_instances):
        E = int(rng.integers(2, 13))
        K = int(rng.integers(1, min(5, E) + 1))
        mat = random_psd_kernel(rng, E)
        kernel = _kernel(mat, scoring.default_lambda(mat, K))
        g = scoring.greedy_do_select(kernel, K)
        b = scoring.brute_force_select(kernel, K)
        fg = scoring.normalized_logdet(kernel, g.indices)
        fb = scoring.normalized_logdet(kernel, b.indices)
        ratios.append(fg / fb if fb > 0 else 1.0)
        worst_gap = max(worst_gap, fg - fb)
    rep = TheoremReport("greedy_bound", f"{n_instances} random kernels, E <= 12, K <= 5, seed {seed}")
    rep.add("worst F~(greedy) / F~(brute force)", min(ratios), ">=", bound)
    rep.add("greedy never beats brute force", worst_gap, "<=", 0.0, 1e-9)
    rep.measured = {"worst_ratio": min(ratios), "mean_ratio": float(np.mean(ratios)),
                    "optimal_fraction": float(np.mean(np.isclose(ratios, 1.0, rtol=0, atol=1e-12)))}
    return rep


# --- incoherence ---------------------------------------------------------------

def incoherence_bound(K: int, mu: float) -> float:
    x = (K - 1) * mu
    return K * math.log((1 + x) / (1 - x))


def residual_spectrum(kernel: Kernel, subset) -> np.ndarray:
    """Eigenvalues of ``B^{-1/2} (K_S - diag K_S) B^{-1/2}``, ``B = diag(K_ee + lambda)``."""
    idx = list(subset)
    sub = kernel.mat[np.ix_(idx, idx)]
    b = np.sqrt(np.diag(sub) + kernel.lambda_reg)
    R = (sub - np.diag(np.diag(sub))) / b[:, None] / b[None, :]
    return np.linalg.eigvalsh(R)


def _incoherence_case(kernel: Kernel, K: int) -> dict:
    mu = scoring.mutual_coherence(kernel.mat)
    s_diag = scoring.topk_select(np.diag(kernel.mat), K).indices
    best = scoring.brute_force_select(kernel, K)
    f_diag = scoring.logdet_objective(kernel, s_diag)
    bnd = incoherence_bound(K, mu)
    radius = (K - 1) * mu
    eigs = np.concatenate([residual_spectrum(kernel, s_diag), residual_spectrum(kernel, best.indices)])
    return {"mu": mu, "K": K, "slack": f_diag - (best.objective - bnd), "bound": bnd,
            "gershgorin_excess": float(np.max(np.abs(eigs)) - radius),
            "same_subset": set(s_diag) == set(best.indices)}


def equicorrelated_kernel(E: int, rho: float, diag) -> np.ndarray:
    root = np.sqrt(np.asarray(diag, dtype=np.float64))
    C = (1 - rho) * np.eye(E) + rho * np.ones((E, E))
    return root[:, None] * C * root[None, :]


def verify_incoherence(seed: int = 0, n_instances: int = 200) -> TheoremReport:
    rng = np.random.default_rng(seed)
    cases = []
    while len(cases) < n_instances:
        K = int(rng.integers(2, 6))
        E = int(rng.integers(K, 11))
        target = rng.uniform(0.0, 0.97) / (K - 1)
        X = rng.standard_normal((E, int(rng.integers(2, 40))))
        X /= np.linalg.norm(X, axis=1, keepdims=True)
        C = X @ X.T
        off = np.abs(C - np.diag(np.diag(C))).max()
        t = min(1.0, target / off) if off > 0 else 1.0
        C = (1 - t) * np.eye(E) + t * C
        root = np.exp(rng.normal(0.0, 1.0, size=E) / 2)
        mat = root[:, None] * C * root[None, :]
        kernel = _kernel(mat, scoring.default_lambda(mat, K))
        if (K - 1) * scoring.mutual_coherence(kernel.mat) >= 1:
            continue
        cases.append(_incoherence_case(kernel, K))
    rep = TheoremReport("incoherence", f"{n_instances} random kernels with (K-1) mu < 1, seed {seed}")
    rep.add("min slack of F(S_diag) >= F* - bound", min(c["slack"] for c in cases), ">=", 0.0, 1e-9)
    rep.add("Gershgorin: spectral radius of R_S minus (K-1) mu", max(c["gershgorin_excess"] for c in cases),
            "<=", 0.0, 1e-12)

    diag = rng.uniform(0.5, 3.0, size=8)
    c0 = _incoherence_case(_kernel(np.diag(diag), float(diag.sum() / (4 * 8))), 4)
    rep.add("diagonal kernel: S_diag is optimal", float(c0["same_subset"]), "==", 1.0)
    rep.add("diagonal kernel: bound is zero", c0["bound"], "==", 0.0)
    for label, K, mu in (("mu=0.1, K=4", 4, 0.1), ("(K-1) mu = 0.95, K=4", 4, 0.95 / 3)):
        mat = equicorrelated_kernel(8, mu, rng.uniform(0.5, 3.0, size=8))
        c = _incoherence_case(_kernel(mat, scoring.default_lambda(mat, K)), K)
        rep.add(f"{label}: slack", c["slack"], ">=", 0.0, 1e-9)
        cases.append(c)
    slacks = [c["slack"] for c in cases]
    rep.measured = {"min_slack": min(slacks), "median_slack": float(np.median(slacks)),
                    "max_mu_times_K_minus_1": max(c["mu"] * (c["K"] - 1) for c in cases),
                    "diag_optimal_fraction": float(np.mean([c["same_subset"] for c in cases]))}
    return rep


# --- grouping recovery ---------------------------------------------------------

def same_partition(groups_a, groups_b) -> bool:
    return {frozenset(g) for g in groups_a} == {frozenset(g) for g in groups_b}


def recover_output_clusters(stats: calibration.CalibStats, G: int) -> list[list[int]]:
    diss = grouping.build_dissimilarity(grouping.DissimilaritySource.OUTPUT_GRAM, range(stats.E), stats=stats)
    return [[diss.labels[i] for i in c] for c in grouping.agglomerative_cluster(diss, G)]


def _random_planted(rng: np.random.Generator):
    G = int(rng.integers(2, 6))
    size = int(rng.integers(1, 6))
    d_in = float(rng.uniform(0.0, 0.6))
    hi = min(2.0, 1.0 + (1.0 - d_in) / (G - 1))
    d_out = float(rng.uniform(min(d_in + 0.05, hi), hi))
    dim = 1 + G + G * size + int(rng.integers(0, 8))
    return G, size, d_in, d_out, dim


def oc_sample_bound(table: synthgen.ExpertOutputTable, gap: float, delta: float = 0.05) -> dict:
    """Constants of the finite-sample recovery bound for a planted table."""
    M = table.gram()
    B_f = float(np.max(np.abs(table.outputs)))
    s2 = float(np.min(np.diag(M)))
    c_oc = 2 / s2 + 4 * B_f**2 / s2**2
    tau = min(s2 / 2, gap / (4 * c_oc))
    n_star = 2 * B_f**4 / tau**2 * math.log(2 * table.E**2 / delta)
    return {"B_f": B_f, "sigma_min_sq": s2, "C_oc": c_oc, "tau_star": tau, "n_bound": n_star}


def verify_recovery(seed: int = 0, n_population: int = 100, n_grid=(64, 256, 1024), n_seeds: int = 20,
                    trials: int = 10, G: int = 3, group_size: int = 4, delta_in: float = 0.3,
                    delta_out: float = 0.4, dim: int = 24) -> TheoremReport:
    rng = np.random.default_rng(seed)
    hits = 0
    for i in range(n_population):
        Gi, size, d_in, d_out, dm = _random_planted(rng)
        table, truth = synthgen.gen_planted_clusters(Gi, size, d_in, d_out, dm, seed=seed * 1000 + i)
        hits += same_partition(recover_output_clusters(calibration.collect_table(table), Gi), truth)
    rep = TheoremReport("recovery", f"{n_population} population instances; finite-sample grid {list(n_grid)}")
    rep.add("population instances recovered", hits, "==", n_population)

    rates = np.zeros((n_seeds, len(n_grid)))
    bounds = []
    for s in range(n_seeds):
        table, truth = synthgen.gen_planted_clusters(G, group_size, delta_in, delta_out, dim, seed=10_000 + s)
        bounds.append(oc_sample_bound(table, delta_out - delta_in)["n_bound"])
        srng = np.random.default_rng([seed, s])
        for j, n in enumerate(n_grid):
            ok = 0
            for _ in range(trials):
                pts = srng.integers(0, table.n_points, size=n)
                ok += same_partition(recover_output_clusters(calibration.collect_table(table, pts), G), truth)
            rates[s, j] = ok / trials
    med = np.median(rates, axis=0)
    for j in range(1, len(n_grid)):
        rep.add(f"median recovery rate n={n_grid[j]} >= n={n_grid[j - 1]}", med[j], ">=", med[j - 1])
    rep.measured = {"population_recovered": hits, "n_grid": list(n_grid),
                    "median_rate": med.tolist(), "mean_rate": rates.mean(axis=0).tolist(),
                    "theory_sample_bound_median": float(np.median(bounds))}
    return rep


# --- merging optimality and scaling --------------------------------------------

def _h_norm_sq(v: np.ndarray) -> float:
    return float(np.mean(v * v))


def _distortion(outputs: np.ndarray, scores: np.ndarray, members, mu: np.ndarray) -> float:
    return float(sum(scores[e] * _h_norm_sq(outputs[e] - mu) for e in members))


def _random_partition(rng, E: int, G: int) -> list[list[int]]:
    labels = np.concatenate([np.arange(G), rng.integers(0, G, size=E - G)])
    labels = rng.permutation(labels)
    return [np.flatnonzero(labels == g).tolist() for g in range(G)]


def verify_merge_oracle(seed: int = 0, n_instances: int = 100, n_mu: int = 100) -> TheoremReport:
    rng = np.random.default_rng(seed)
    worst_identity, worst_excess, worst_eta_float = 0.0, 0.0, 0.0
    eta_exact_fail = mass_exact_fail = 0
    worst_proxy = 0.0
    singleton_loss = 0.0
    for _ in range(n_instances):
        E = int(rng.integers(2, 13))
        G = int(rng.integers(1, E + 1))
        P = int(rng.integers(3, 20))
        outputs = rng.standard_normal((E, P)) * np.exp(rng.normal(size=(E, 1)))
        scores = np.exp(rng.normal(size=E))
        groups = _random_partition(rng, E, G)
        part = grouping.make_partition(groups, scores, G)
        for g in part.groups:
            S_g = scores[list(g)].sum()
            mu_star = sum(scores[e] * outputs[e] for e in g) / S_g
            base = _distortion(outputs, scores, g, mu_star)
            if len(g) == 1:
                singleton_loss = max(singleton_loss, base)
            for _ in range(n_mu):
                mu = mu_star + rng.standard_normal(P) * rng.uniform(0.01, 3.0)
                lhs = _distortion(outputs, scores, g, mu)
                rhs = base + S_g * _h_norm_sq(mu - mu_star)
                worst_identity = max(worst_identity, abs(lhs - rhs) / max(1.0, abs(lhs)))
                worst_excess = max(worst_excess, base - lhs)

        # exact rational arithmetic on the float scores
        fs = [Fraction(float(s)) for s in scores]
        total = sum(fs[e] for g in part.groups for e in g)
        for g in part.groups:
            S_g = sum(fs[e] for e in g)
            a_prop = S_g / total
            a_unif = Fraction(1, G)
            for e in g:
                eta_exact_fail += (a_prop * fs[e] / S_g) != fs[e] / total
            mass_exact_fail += sum(a_unif * fs[e] / S_g for e in g) != Fraction(1, G)

        # the float implementation
        alpha = compute_alpha(part, scores, ScalingMode.PROPORTIONAL)
        sel_total = sum(scores[e] for g in part.groups for e in g)
        proxy = np.zeros(P)
        direct = np.zeros(P)
        for a, g in zip(alpha, part.groups):
            S_g = scores[list(g)].sum()
            proxy += a * sum(scores[e] / S_g * outputs[e] for e in g)
            for e in g:
                eta = a * scores[e] / S_g
                worst_eta_float = max(worst_eta_float, abs(eta - scores[e] / sel_total) / (scores[e] / sel_total))
                direct += scores[e] / sel_total * outputs[e]
        worst_proxy = max(worst_proxy, float(np.max(np.abs(proxy - direct)) / max(1.0, np.max(np.abs(direct)))))

    rep = TheoremReport("merge_oracle", f"{n_instances} random output tables and partitions, seed {seed}")
    rep.add("distortion identity L(mu) = L(mu*) + S_g ||mu - mu*||^2", worst_identity, "<=", 1e-9)
    rep.add("no mu beats mu*", worst_excess, "<=", 0.0, 1e-9)
    rep.add("singleton group has zero distortion", singleton_loss, "<=", 0.0, 1e-20)
    rep.add("proportional eta_e = s_e / sum s (exact rationals)", eta_exact_fail, "==", 0)
    rep.add("uniform group mass = 1/G (exact rationals)", mass_exact_fail, "==", 0)
    rep.add("proportional eta in float64 (relative)", worst_eta_float, "<=", 1e-14)
    rep.add("scaled proxy equals global score-weighted average", worst_proxy, "<=", 1e-12)
    rep.measured = {"worst_identity_error": worst_identity, "worst_eta_float_error": worst_eta_float}
    return rep


# --- finite-sample kernel concentration ----------------------------------------

def kernel_from_stats(stats: calibration.CalibStats, base, K: int) -> np.ndarray:
    return scoring.build_kernel(scoring.score(stats, base), scoring.mean_gram(stats), K).mat


def concentration_constants(stats: calibration.CalibStats, b_f: float, K: int, delta: float = 0.05) -> dict:
    """Constants of the uniform-stability bound, estimated from reference statistics."""
    n = stats.n
    q = stats.sel_count / n
    v = stats.act_sq_sum / n
    cp = scoring.conditional_probability(stats)
    acp = cp * np.sqrt(v)
    q_min, v_min = float(q.min()), float(v.min())
    i_min, i_max = float(acp.min()), float(acp.max())
    c_cp = 4 / q_min
    c_acp = 4 * b_f / q_min + b_f**2 / math.sqrt(2 * v_min)
    c_h = b_f**2 * math.sqrt(2 * i_max / i_min + 1) + i_max + i_min / 2
    return {"q_min": q_min, "v_min": v_min, "I_min": i_min, "I_max": i_max, "B_f": b_f,
            "C_CP": c_cp, "C_ACP": c_acp, "C_h": c_h, "delta": delta,
            "eps": lambda m: c_h * max(c_acp, b_f**2) * math.sqrt(2 * math.log(8 * stats.E**2 / delta) / m)}


def verify_concentration(layer=None, n_grid=(256, 1024, 4096), n_seeds: int = 20, base=ScoreMethod.ACP,
                         K: int = 4, ref_factor: int = 64, seed: int = 0) -> TheoremReport:
    if layer is None:
        layer = synthgen.gen_random_moe(seed, d=8, d_expert=8, E=8, k=2)
    n_ref = ref_factor * max(n_grid)
    ref_tokens = synthgen.gaussian_tokens(10**6 + seed, n_ref, layer.d)
    ref_stats = calibration.collect(layer, ref_tokens)
    ref = kernel_from_stats(ref_stats, base, K)
    b_f = max(float(np.sqrt(np.max(np.sum(all_expert_outputs(layer, ref_tokens[i:i + 8192]) ** 2, axis=-1))))
              for i in range(0, n_ref, 8192))
    consts = concentration_constants(ref_stats, b_f, K)
    errors = np.zeros((n_seeds, len(n_grid)))
    for s in range(n_seeds):
        for j, n in enumerate(n_grid):
            tokens = np.random.default_rng([seed, s, n]).standard_normal((n, layer.d))
            errors[s, j] = np.max(np.abs(kernel_from_stats(calibration.collect(layer, tokens), base, K) - ref))
    med = np.median(errors, axis=0)
    rep = TheoremReport("concentration", f"E={layer.E}, k={layer.k}, base={ScoreMethod(base).value}, "
                                         f"n_ref={n_ref}, {n_seeds} seeds")
    for j in range(1, len(n_grid)):
        # strict decrease: the gap must be positive
        rep.add(f"median error decrease n={n_grid[j - 1]} -> n={n_grid[j]}", med[j - 1] - med[j], ">=",
                np.nextafter(0.0, 1.0))
        ratio = float(np.median(errors[:, j] / errors[:, j - 1]))
        if n_grid[j] == 4 * n_grid[j - 1]:
            rep.add(f"median error ratio n={n_grid[j]} / n={n_grid[j - 1]}", ratio, "<=", 0.75)
    eps = [consts["eps"](n) for n in n_grid]
    rep.add("measured error within the theoretical envelope", float(np.max(errors / np.array(eps))), "<=", 1.0)
    rep.measured = {"n_grid": list(n_grid), "median_error": med.tolist(),
                    "median_ratio": [float(np.median(errors[:, j] / errors[:, j - 1])) for j in range(1, len(n_grid))],
                    "eps_bound": eps,
                    **{k: v for k, v in consts.items() if k != "eps"}}
    return rep


VERIFIERS = {
    "redundancy": lambda: [verify_redundancy(K) for K in range(2, 9)],
    "submodularity": lambda: [verify_submodularity()],
    "greedy_bound": lambda: [verify_greedy_bound()],
    "incoherence": lambda: [verify_incoherence()],
    "recovery": lambda: [verify_recovery()],
    "merge_oracle": lambda: [verify_merge_oracle()],
    "concentration": lambda: [verify_concentration()],
}


def verify_all(only=None) -> list[TheoremReport]:
    names = list(VERIFIERS) if not only else list(only)
    unknown = set(names) - set(VERIFIERS)
    if unknown:
        raise ValidationError(f"unknown theorem ids: {sorted(unknown)}")
    reports = []
    for name in names:
        reports.extend(VERIFIERS[name]())
    return reports
