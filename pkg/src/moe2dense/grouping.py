"""Assigning selected experts to ``k`` groups."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .calibration import CalibStats
from .errors import ValidationError
from .model import MoeLayer


class GroupStrategy(str, enum.Enum):
    RR = "rr"  # round-robin over score ranks
    WC = "wc"  # weight clustering
    RC = "rc"  # router clustering
    AB = "ab"  # anchor-based
    OC = "oc"  # output clustering


class DissimilaritySource(str, enum.Enum):
    EXPERT_WEIGHTS_FLAT = "expert_weights_flat"
    ROUTER_ROWS = "router_rows"
    OUTPUT_GRAM = "output_gram"


@dataclass(frozen=True)
class Partition:
    """Groups of expert ids, ordered by descending group score.

    Members are sorted ascending; group-score ties go to the group with the
    smallest member.
    """

    groups: tuple[tuple[int, ...], ...]
    group_scores: tuple[float, ...]

    def as_sets(self) -> set[frozenset[int]]:
        return {frozenset(g) for g in self.groups}

    def to_dict(self) -> dict:
        return {"groups": [list(g) for g in self.groups], "group_scores": list(self.group_scores)}


@dataclass(frozen=True)
class Dissimilarity:
    """Cosine dissimilarities between the experts listed in ``labels``."""

    mat: np.ndarray
    labels: tuple[int, ...]
    flagged: tuple[int, ...] = field(default_factory=tuple)


def make_partition(groups, scores, k: int | None = None) -> Partition:
    scores = np.asarray(scores, dtype=np.float64)
    groups = [tuple(sorted(int(e) for e in g)) for g in groups]
    if any(not g for g in groups):
        raise ValidationError("empty group")
    members = [e for g in groups for e in g]
    if len(set(members)) != len(members):
        raise ValidationError("groups overlap")
    if k is not None and len(groups) != k:
        raise ValidationError(f"expected {k} groups, got {len(groups)}")
    totals = [float(sum(scores[e] for e in g)) for g in groups]
    order = sorted(range(len(groups)), key=lambda i: (-totals[i], groups[i][0]))
    return Partition(tuple(groups[i] for i in order), tuple(totals[i] for i in order))


def _rank(selected, scores) -> list[int]:
    """Selected experts by descending score, ties to lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    return sorted((int(e) for e in selected), key=lambda e: (-scores[e], e))


def _check_k(selected, k: int) -> None:
    if k < 1 or len(selected) < k:
        raise ValidationError(f"cannot form {k} groups from {len(selected)} experts")


def group_round_robin(selected, scores, k: int) -> Partition:
    """Rank ``r`` (0-indexed, by descending score) goes to group ``r mod k``."""
    _check_k(selected, k)
    ranked = _rank(selected, scores)
    return make_partition([ranked[g::k] for g in range(k)], scores, k)


def agglomerative_cluster(diss: Dissimilarity | np.ndarray, k: int) -> list[list[int]]:
    """Average-linkage clustering down to exactly ``k`` clusters.

    Returns clusters of row positions.  Each step merges the pair with the
    smallest mean pairwise dissimilarity; ties go to the lexicographically
    smallest pair of cluster minima.
    """
    mat = np.asarray(getattr(diss, "mat", diss), dtype=np.float64)
    n = mat.shape[0]
    if not 1 <= k <= n:
        raise ValidationError(f"cannot form {k} clusters from {n} items")
    clusters = [[i] for i in range(n)]
    # between-cluster sums of dissimilarities; average linkage is additive in them
    sums = mat.copy()
    while len(clusters) > k:
        best = None
        for a in range(len(clusters)):
            for b in range(a + 1, len(clusters)):
                dist = sums[a, b] / (len(clusters[a]) * len(clusters[b]))
                key = (dist, *sorted((clusters[a][0], clusters[b][0])))
                if best is None or key < best[0]:
                    best = (key, a, b)
        _, a, b = best
        clusters[a] = sorted(clusters[a] + clusters[b])
        sums[a, :] += sums[b, :]
        sums[:, a] += sums[:, b]
        sums = np.delete(np.delete(sums, b, axis=0), b, axis=1)
        del clusters[b]
    return clusters


def cosine_dissimilarity(features: np.ndarray, labels) -> Dissimilarity:
    """``1 - cos`` between feature rows; a zero row is flagged and sits at 1 from all others."""
    features = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(features, axis=1)
    zero = norms == 0
    unit = np.divide(features, norms[:, None], out=np.zeros_like(features), where=~zero[:, None])
    return _finish(1.0 - unit @ unit.T, labels, zero)


def _finish(mat: np.ndarray, labels, flagged_mask: np.ndarray) -> Dissimilarity:
    mat = np.clip(mat, 0.0, 2.0)
    mat[flagged_mask, :] = 1.0
    mat[:, flagged_mask] = 1.0
    upper = np.triu(mat, 1)
    mat = upper + upper.T
    mat.setflags(write=False)
    labels = tuple(int(e) for e in labels)
    flagged = tuple(e for e, f in zip(labels, flagged_mask) if f)
    return Dissimilarity(mat, labels, flagged)


def build_dissimilarity(source, selected, layer: MoeLayer | None = None,
                        stats: CalibStats | None = None) -> Dissimilarity:
    source = DissimilaritySource(source)
    selected = [int(e) for e in selected]
    if source is DissimilaritySource.OUTPUT_GRAM:
        if stats is None:
            raise ValidationError("output clustering needs calibration statistics")
        if selected and max(selected) >= stats.E:
            raise ValidationError("selected index out of range")
        gram = np.asarray(stats.gram_sum)[np.ix_(selected, selected)] / stats.n
        var = np.asarray(stats.act_sq_sum)[selected] / stats.n
        denom = np.sqrt(np.outer(var, var))
        rho = np.divide(gram, denom, out=np.zeros_like(gram), where=denom > 0)
        return _finish(1.0 - rho, selected, np.zeros(len(selected), dtype=bool))
    if layer is None:
        raise ValidationError(f"{source.value} dissimilarity needs the MoE layer")
    if selected and max(selected) >= layer.E:
        raise ValidationError("selected index out of range")
    if source is DissimilaritySource.ROUTER_ROWS:
        feats = layer.router[selected]
    else:
        feats = np.stack([
            np.concatenate([layer.experts[e].w_gate.ravel(), layer.experts[e].w_up.ravel(),
                            layer.experts[e].w_down.ravel()])
            for e in selected
        ])
    return cosine_dissimilarity(feats, selected)


def group_by_clustering(diss: Dissimilarity, scores, k: int) -> Partition:
    _check_k(diss.labels, k)
    clusters = agglomerative_cluster(diss, k)
    return make_partition([[diss.labels[i] for i in c] for c in clusters], scores, k)


def group_anchor_based(selected, scores, router: np.ndarray, k: int) -> Partition:
    """Top-``k`` experts anchor the groups; the rest join the most router-similar anchor."""
    _check_k(selected, k)
    ranked = _rank(selected, scores)
    anchors = sorted(ranked[:k])
    router = np.asarray(router, dtype=np.float64)
    norms = np.linalg.norm(router, axis=1)
    groups = {a: [a] for a in anchors}
    for e in ranked[k:]:
        sims = []
        for a in anchors:
            denom = norms[e] * norms[a]
            sims.append(float(router[e] @ router[a]) / denom if denom > 0 else 0.0)
        best = anchors[int(np.argmax(sims))]  # argmax returns the lowest anchor on ties
        groups[best].append(e)
    return make_partition(list(groups.values()), scores, k)


def group(strategy, selected, scores, k: int, layer: MoeLayer | None = None,
          stats: CalibStats | None = None) -> Partition:
    strategy = GroupStrategy(strategy)
    if strategy is GroupStrategy.RR:
        return group_round_robin(selected, scores, k)
    if strategy is GroupStrategy.AB:
        if layer is None:
            raise ValidationError("anchor-based grouping needs the router")
        return group_anchor_based(selected, scores, layer.router, k)
    source = {
        GroupStrategy.WC: DissimilaritySource.EXPERT_WEIGHTS_FLAT,
        GroupStrategy.RC: DissimilaritySource.ROUTER_ROWS,
        GroupStrategy.OC: DissimilaritySource.OUTPUT_GRAM,
    }[strategy]
    return group_by_clustering(build_dissimilarity(source, selected, layer, stats), scores, k)
