"""Synthetic instances: random MoE layers and expert-output tables."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConstructionError, ModelFormatError, ValidationError
from .model import ExpertWeights, MoeLayer, as_matrix, topk_indices


@dataclass(frozen=True)
class ExpertOutputTable:
    """Scalar expert outputs over a finite, uniformly weighted point set.

    ``outputs[e, x]`` is the output of expert ``e`` at point ``x``.  The router
    is deterministic: point ``x`` routes to ``router_choice[x]`` with
    probability one.  Viewing each row as a function on the points, inner
    products are means over points, so ``outputs @ outputs.T / n_points`` is
    the population Gram matrix.
    """

    outputs: np.ndarray
    router_choice: np.ndarray

    def __post_init__(self):
        outputs = as_matrix(self.outputs, "outputs")
        choice = np.array(self.router_choice, dtype=np.int64)
        if choice.shape != (outputs.shape[1],):
            raise ValidationError("router_choice needs one entry per point")
        if choice.size and (choice.min() < 0 or choice.max() >= outputs.shape[0]):
            raise ValidationError("router_choice entries must lie in [0, E)")
        choice.setflags(write=False)
        object.__setattr__(self, "outputs", outputs)
        object.__setattr__(self, "router_choice", choice)

    @property
    def E(self) -> int:
        return self.outputs.shape[0]

    @property
    def n_points(self) -> int:
        return self.outputs.shape[1]

    @property
    def point_weights(self) -> np.ndarray:
        return np.full(self.n_points, 1.0 / self.n_points)

    def probs(self) -> np.ndarray:
        """One-hot routing probabilities, shape ``(n_points, E)``."""
        p = np.zeros((self.n_points, self.E))
        p[np.arange(self.n_points), self.router_choice] = 1.0
        return p

    def gram(self) -> np.ndarray:
        return self.outputs @ self.outputs.T / self.n_points

    def teacher_output(self, k: int = 1) -> np.ndarray:
        """``sum_{e in top-k} p_e(x) f_e(x)`` at every point (raw probabilities)."""
        p = self.probs()
        sel = topk_indices(p, k)
        rows = np.arange(self.n_points)[:, None]
        return np.sum(p[rows, sel] * self.outputs.T[rows, sel], axis=1)


def check_moe_dims(d: int, d_expert: int, E: int, k: int, n_shared: int = 0) -> None:
    for name, v in (("d", d), ("d_expert", d_expert), ("E", E), ("k", k)):
        if int(v) < 1:
            raise ValidationError(f"{name} must be >= 1, got {v}")
    if k > E:
        raise ValidationError(f"k={k} exceeds E={E}")
    if n_shared < 0:
        raise ValidationError("n_shared must be >= 0")


def _random_expert(rng: np.random.Generator, d: int, d_expert: int) -> ExpertWeights:
    scale = 1.0 / np.sqrt(d)
    return ExpertWeights(
        rng.standard_normal((d_expert, d)) * scale,
        rng.standard_normal((d_expert, d)) * scale,
        rng.standard_normal((d, d_expert)) * scale,
    )


def gen_random_moe(seed: int, d: int, d_expert: int, E: int, k: int,
                   renormalize: bool = True, n_shared: int = 0) -> MoeLayer:
    """I.i.d. Gaussian weights scaled by ``1/sqrt(d)``; deterministic in ``seed``."""
    check_moe_dims(d, d_expert, E, k, n_shared)
    rng = np.random.default_rng(seed)
    router = rng.standard_normal((E, d)) / np.sqrt(d)
    experts = tuple(_random_expert(rng, d, d_expert) for _ in range(E))
    shared = tuple(_random_expert(rng, d, d_expert) for _ in range(n_shared))
    return MoeLayer(experts, router, k, renormalize, shared)


def gen_redundancy_counterexample(K: int) -> ExpertOutputTable:
    """Top-1 layer with ``K`` identical generalists and ``K-1`` orthogonal specialists.

    Points are ordered ``a_1..a_K, b_2..b_K``.  Experts ``0..K-1`` are the
    indicator of the ``a`` points; expert ``K+m`` is the indicator of point
    ``K+m``.  Each point routes to the expert with its own index, so the
    teacher output is 1 everywhere.
    """
    if K < 2:
        raise ValidationError(f"K must be >= 2, got {K}")
    E = 2 * K - 1
    outputs = np.zeros((E, E))
    outputs[:K, :K] = 1.0
    outputs[K:, K:] = np.eye(K - 1)
    return ExpertOutputTable(outputs, np.arange(E))


def _random_rotation(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def gen_planted_clusters(G: int, group_size: int, delta_in: float, delta_out: float,
                         dim: int, seed: int) -> tuple[ExpertOutputTable, list[list[int]]]:
    """Expert outputs with planted cosine-dissimilarity structure.

    Within a group every pair has dissimilarity exactly ``delta_in``; across
    groups exactly ``delta_out``.  Rows are randomly rotated, positively
    rescaled and shuffled.  Returns the table and the planted groups.
    """
    if G < 1 or group_size < 1:
        raise ValidationError("G and group_size must be >= 1")
    if not 0.0 <= delta_in < delta_out <= 2.0:
        raise ValidationError(f"need 0 <= delta_in < delta_out <= 2, got {delta_in}, {delta_out}")
    # cross-group centre cosine so that (1 - delta_in) * c = 1 - delta_out
    c = (1.0 - delta_out) / (1.0 - delta_in) if delta_in < 1.0 else -1.0
    if G > 1 and c < -1.0 / (G - 1) - 1e-15:
        raise ConstructionError(
            f"{G} directions cannot have pairwise cosine {c:.4f} (minimum {-1.0 / (G - 1):.4f})"
        )
    if delta_in >= 1.0 and G > 1:
        raise ConstructionError("delta_in >= 1 leaves no room for cross-group separation")
    need = 1 + G + (G * group_size if delta_in > 0 else 0)
    if dim < need:
        raise ConstructionError(f"dim={dim} too small; this separation needs at least {need}")

    basis = np.eye(dim)
    if G == 1:
        centres = basis[:1]
    else:
        simplex = basis[1:G + 1] - basis[1:G + 1].mean(axis=0)
        simplex /= np.linalg.norm(simplex, axis=1, keepdims=True)
        # simplex rows have pairwise cosine -1/(G-1); mix in a shared axis to reach c
        a2 = (c + 1.0 / (G - 1)) / (1.0 + 1.0 / (G - 1))
        a2 = min(max(a2, 0.0), 1.0)
        centres = np.sqrt(a2) * basis[0] + np.sqrt(1.0 - a2) * simplex

    rng = np.random.default_rng(seed)
    s = np.sqrt(delta_in)
    rows, labels = [], []
    spare = 1 + G
    for g in range(G):
        for _ in range(group_size):
            v = np.sqrt(1.0 - delta_in) * centres[g]
            if delta_in > 0:
                v = v + s * basis[spare]
                spare += 1
            rows.append(v)
            labels.append(g)
    rows = np.array(rows) @ _random_rotation(rng, dim).T
    rows *= rng.uniform(0.5, 2.0, size=(len(rows), 1))
    order = rng.permutation(len(rows))
    rows, labels = rows[order], np.asarray(labels)[order]
    # scale so that mean-over-points norms are O(1)
    rows *= np.sqrt(dim)
    table = ExpertOutputTable(rows, np.argmax(rows, axis=0))
    groups = [sorted(np.flatnonzero(labels == g).tolist()) for g in range(G)]
    return table, groups


def gen_redundant_pool(E: int, n_duplicate_groups: int, noise: float, seed: int, *,
                       d: int = 16, d_expert: int = 8, k: int = 2,
                       renormalize: bool = True) -> tuple[MoeLayer, np.ndarray]:
    """Layer whose experts come in near-duplicate groups.

    The first ``n_duplicate_groups * (E // n_duplicate_groups)`` experts are
    split into equal groups; each member copies its group's prototype expert
    and router row, plus Gaussian noise of standard deviation ``noise``.
    Prototypes get distinct output scales so groups differ in importance.
    Leftover experts are independent.  Returns the layer and a label per
    expert (leftovers get their own labels).
    """
    if n_duplicate_groups < 1 or n_duplicate_groups > E:
        raise ValidationError(f"n_duplicate_groups must lie in [1, {E}]")
    if noise < 0:
        raise ValidationError("noise must be >= 0")
    check_moe_dims(d, d_expert, E, k)
    rng = np.random.default_rng(seed)
    size = E // n_duplicate_groups
    labels = np.empty(E, dtype=np.int64)
    experts, router = [], np.empty((E, d))
    e = 0
    for g in range(n_duplicate_groups):
        proto = _random_expert(rng, d, d_expert)
        scale = rng.uniform(0.5, 2.0)
        row = rng.standard_normal(d) / np.sqrt(d)
        for _ in range(size):
            experts.append(ExpertWeights(
                proto.w_gate + noise * rng.standard_normal(proto.w_gate.shape),
                proto.w_up + noise * rng.standard_normal(proto.w_up.shape),
                scale * proto.w_down + noise * rng.standard_normal(proto.w_down.shape),
            ))
            router[e] = row + noise * rng.standard_normal(d)
            labels[e] = g
            e += 1
    label = n_duplicate_groups
    while e < E:
        experts.append(_random_expert(rng, d, d_expert))
        router[e] = rng.standard_normal(d) / np.sqrt(d)
        labels[e] = label
        label += 1
        e += 1
    return MoeLayer(tuple(experts), router, k, renormalize), labels


def gaussian_tokens(seed: int, n: int, d: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((n, d))


def save_table(table: ExpertOutputTable, path, truth: dict | None = None) -> Path:
    """JSON file with the outputs, the router choices and optional ground truth."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = {"kind": "expert_output_table", "outputs": table.outputs.tolist(),
            "router_choice": table.router_choice.tolist(), "ground_truth": truth or {}}
    path.write_text(json.dumps(body, sort_keys=True) + "\n")
    return path


def load_table(path) -> tuple[ExpertOutputTable, dict]:
    try:
        body = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ModelFormatError(f"{path}: no such table file") from None
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: table is not valid JSON ({exc})") from None
    if body.get("kind") != "expert_output_table":
        raise ModelFormatError(f"{path}: not an expert output table")
    return ExpertOutputTable(np.array(body["outputs"], dtype=np.float64), body["router_choice"]), \
        body.get("ground_truth", {})
