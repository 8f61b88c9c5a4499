"""Expert importance scores and D-optimal subset selection."""
from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .calibration import CalibStats
from .errors import NumericError, ValidationError

BRUTE_FORCE_LIMIT = 10**6


class ScoreMethod(str, enum.Enum):
    SF = "sf"  # selection frequency
    PP = "pp"  # pre-selection probability
    PS = "ps"  # post-selection probability
    CP = "cp"  # conditional probability
    ACP = "acp"  # activation-weighted conditional probability


class SelectMethod(str, enum.Enum):
    TOPK = "topk"
    GREEDY_DO = "greedy_do"
    BRUTE_DO = "brute_do"


@dataclass(frozen=True)
class ScoreVector:
    method: ScoreMethod
    values: np.ndarray


@dataclass(frozen=True)
class Kernel:
    mat: np.ndarray
    lambda_reg: float
    base_method: ScoreMethod

    @property
    def E(self) -> int:
        return self.mat.shape[0]


@dataclass(frozen=True)
class Selection:
    indices: tuple[int, ...]
    objective: float
    method: SelectMethod
    degenerate: bool = False

    def to_dict(self) -> dict:
        objective = self.objective if math.isfinite(self.objective) else None
        return {"indices": list(self.indices), "objective": objective,
                "method": self.method.value, "degenerate": self.degenerate}


def conditional_probability(stats: CalibStats) -> np.ndarray:
    """Mean routing probability over tokens that selected the expert; 0 if never selected."""
    count = stats.sel_count.astype(np.float64)
    return np.divide(stats.prob_sum_selected, count, out=np.zeros(stats.E), where=count > 0)


def score(stats: CalibStats, method) -> ScoreVector:
    method = ScoreMethod(method)
    if stats.n < 1:
        raise ValidationError("scoring needs statistics over at least one token")
    n = float(stats.n)
    if method is ScoreMethod.SF:
        values = stats.sel_count / n
    elif method is ScoreMethod.PP:
        values = stats.prob_sum_all / n
    elif method is ScoreMethod.PS:
        values = stats.prob_sum_selected / n
    elif method is ScoreMethod.CP:
        values = conditional_probability(stats)
    else:
        values = conditional_probability(stats) * np.sqrt(stats.act_sq_sum / n)
    values = np.asarray(values, dtype=np.float64)
    values.setflags(write=False)
    return ScoreVector(method, values)


def mean_gram(stats: CalibStats) -> np.ndarray:
    return np.asarray(stats.gram_sum) / stats.n


def default_lambda(mat: np.ndarray, K: int) -> float:
    """Diagonal rule: mean kernel diagonal divided by ``K``."""
    return float(np.trace(mat)) / (K * mat.shape[0])


def build_kernel(scores: ScoreVector, gram, K: int, lambda_override: float | None = None) -> Kernel:
    """Importance-weighted kernel ``sqrt(I_i I_j) * G_ij``."""
    gram = np.asarray(gram, dtype=np.float64)
    imp = np.asarray(scores.values, dtype=np.float64)
    if K < 1:
        raise ValidationError("K must be >= 1")
    if gram.shape != (imp.size, imp.size):
        raise ValidationError(f"gram shape {gram.shape} does not match {imp.size} scores")
    if np.any(imp < 0):
        raise ValidationError("importance scores must be non-negative")
    root = np.sqrt(imp)
    mat = root[:, None] * gram * root[None, :]
    mat = 0.5 * (mat + mat.T)
    mat.setflags(write=False)
    lam = default_lambda(mat, K) if lambda_override is None else float(lambda_override)
    if lam < 0:
        raise ValidationError("lambda_reg must be non-negative")
    return Kernel(mat, lam, ScoreMethod(scores.method))


def logdet_objective(kernel: Kernel, subset, lambda_reg: float | None = None) -> float:
    """``log det(K_S + lambda I)`` via a Cholesky factorization."""
    idx = list(subset)
    if len(set(idx)) != len(idx):
        raise ValidationError("subset indices must be distinct")
    if not idx:
        return 0.0
    lam = kernel.lambda_reg if lambda_reg is None else lambda_reg
    a = kernel.mat[np.ix_(idx, idx)] + lam * np.eye(len(idx))
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise NumericError("regularized kernel submatrix is not positive definite") from None
    return float(2.0 * np.sum(np.log(np.diag(chol))))


def normalized_logdet(kernel: Kernel, subset) -> float:
    """``log det(I + K_S / lambda)``, the monotone submodular form."""
    return logdet_objective(kernel, subset) - len(list(subset)) * math.log(kernel.lambda_reg)


def _degenerate(kernel: Kernel, K: int, method: SelectMethod) -> Selection:
    return Selection(tuple(range(K)), float("-inf"), method, degenerate=True)


def _check_K(kernel: Kernel, K: int) -> None:
    if not 1 <= K <= kernel.E:
        raise ValidationError(f"K={K} outside [1, {kernel.E}]")


def greedy_do_select(kernel: Kernel, K: int) -> Selection:
    """Greedy log-det maximization with Schur-complement gains.

    The inverse of ``K_S + lambda I`` is recomputed once per step; each
    candidate's gain is ``log(K_ee + lambda - K_eS A_S^{-1} K_Se)``.  Ties go
    to the lowest expert index.
    """
    _check_K(kernel, K)
    if kernel.lambda_reg <= 0:
        if not np.any(kernel.mat):
            return _degenerate(kernel, K, SelectMethod.GREEDY_DO)
        raise NumericError("greedy selection needs lambda_reg > 0")
    mat, lam = kernel.mat, kernel.lambda_reg
    diag = np.diag(mat) + lam
    chosen: list[int] = []
    for _ in range(K):
        cand = np.array([e for e in range(kernel.E) if e not in chosen])
        if not chosen:
            sigma = diag[cand]
        else:
            a = mat[np.ix_(chosen, chosen)] + lam * np.eye(len(chosen))
            try:
                np.linalg.cholesky(a)
            except np.linalg.LinAlgError:
                raise NumericError("A_S is not positive definite") from None
            a_inv = np.linalg.inv(a)
            cross = mat[np.ix_(chosen, cand)]
            sigma = diag[cand] - np.einsum("ic,ij,jc->c", cross, a_inv, cross)
        if np.any(sigma <= 0):
            raise NumericError("non-positive Schur complement")
        gains = np.log(sigma)
        chosen.append(int(cand[np.argmax(gains)]))
    return Selection(tuple(chosen), logdet_objective(kernel, chosen), SelectMethod.GREEDY_DO)


def _batched_logdets(kernel: Kernel, subsets: np.ndarray) -> np.ndarray:
    mats = kernel.mat[subsets[:, :, None], subsets[:, None, :]]
    mats = mats + kernel.lambda_reg * np.eye(subsets.shape[1])
    try:
        chol = np.linalg.cholesky(mats)
    except np.linalg.LinAlgError:
        raise NumericError("regularized kernel submatrix is not positive definite") from None
    return 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)


def subset_objectives(kernel: Kernel, K: int, batch: int = 20000):
    """All size-``K`` subsets in lexicographic order with their log-det values."""
    _check_K(kernel, K)
    total = math.comb(kernel.E, K)
    if total > BRUTE_FORCE_LIMIT:
        raise ValidationError(f"C({kernel.E}, {K}) = {total} subsets exceeds the brute-force limit")
    combos = itertools.combinations(range(kernel.E), K)
    subsets, values = [], []
    while True:
        block = np.array(list(itertools.islice(combos, batch)), dtype=np.int64)
        if block.size == 0:
            break
        subsets.append(block)
        values.append(_batched_logdets(kernel, block))
    return np.concatenate(subsets), np.concatenate(values)


def brute_force_select(kernel: Kernel, K: int) -> Selection:
    """Global maximizer of the log-det objective; first in lexicographic order on ties."""
    _check_K(kernel, K)
    if kernel.lambda_reg <= 0 and not np.any(kernel.mat):
        return _degenerate(kernel, K, SelectMethod.BRUTE_DO)
    subsets, values = subset_objectives(kernel, K)
    best = int(np.argmax(values))
    return Selection(tuple(int(i) for i in subsets[best]), float(values[best]), SelectMethod.BRUTE_DO)


def brute_force_maximizers(kernel: Kernel, K: int, rtol: float = 1e-12) -> list[tuple[int, ...]]:
    """Every subset whose objective is within ``rtol`` (relative) of the maximum."""
    subsets, values = subset_objectives(kernel, K)
    top = values.max()
    keep = values >= top - rtol * max(1.0, abs(top))
    return [tuple(int(i) for i in s) for s in subsets[keep]]


def topk_select(kernel_or_scores, K: int) -> Selection:
    """Independent ranking: the ``K`` largest scores, ties to lower index."""
    values = np.asarray(getattr(kernel_or_scores, "values", kernel_or_scores), dtype=np.float64)
    if not 1 <= K <= values.size:
        raise ValidationError(f"K={K} outside [1, {values.size}]")
    idx = tuple(int(i) for i in np.argsort(-values, kind="stable")[:K])
    return Selection(idx, float("nan"), SelectMethod.TOPK)


def effective_rank(kernel: Kernel | np.ndarray, subset) -> float:
    """``exp`` of the Shannon entropy of the normalized eigenvalues of ``K_S``."""
    idx = list(subset)
    if not idx:
        raise ValidationError("effective rank needs a non-empty subset")
    mat = getattr(kernel, "mat", kernel)
    eig = np.clip(np.linalg.eigvalsh(np.asarray(mat)[np.ix_(idx, idx)]), 0.0, None)
    total = eig.sum()
    if total <= 0:
        return 0.0
    p = eig[eig > 0] / total
    return float(np.exp(-np.sum(p * np.log(p))))


def selection_overlap(a: Selection, b: Selection) -> float:
    if len(a.indices) != len(b.indices):
        raise ValidationError(f"selections of size {len(a.indices)} and {len(b.indices)} differ")
    return len(set(a.indices) & set(b.indices)) / len(a.indices)


def mutual_coherence(mat: np.ndarray) -> float:
    """Largest normalized off-diagonal magnitude over pairs with positive diagonals."""
    mat = np.asarray(getattr(mat, "mat", mat))
    diag = np.diag(mat)
    ok = diag > 0
    sub = mat[np.ix_(ok, ok)]
    root = np.sqrt(diag[ok])
    rho = np.abs(sub / root[:, None] / root[None, :])
    np.fill_diagonal(rho, 0.0)
    return float(rho.max()) if rho.size else 0.0
