"""MoE layer to dense FFN: select, group, merge, scale, concatenate."""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field

import numpy as np

from . import grouping, scoring
from .calibration import CalibStats
from .errors import MergeError, ShapeError, ValidationError
from .model import DenseFfn, ExpertWeights, MoeLayer, dense_forward, expert_forward
from .scoring import ScoreMethod, SelectMethod


class ScalingMode(str, enum.Enum):
    UNIFORM = "uniform"
    PROPORTIONAL = "proportional"
    CONDITIONAL_PROB = "conditional_prob"


@dataclass(frozen=True)
class ConversionConfig:
    scoring_method: ScoreMethod = ScoreMethod.ACP
    selection_algo: SelectMethod = SelectMethod.GREEDY_DO
    K: int = 8
    grouping_strategy: grouping.GroupStrategy = grouping.GroupStrategy.RR
    scaling_mode: ScalingMode = ScalingMode.UNIFORM
    base_for_kernel: ScoreMethod | None = None
    seed: int = 0
    n_probes: int = 64

    def __post_init__(self):
        object.__setattr__(self, "scoring_method", ScoreMethod(self.scoring_method))
        object.__setattr__(self, "selection_algo", SelectMethod(self.selection_algo))
        object.__setattr__(self, "grouping_strategy", grouping.GroupStrategy(self.grouping_strategy))
        object.__setattr__(self, "scaling_mode", ScalingMode(self.scaling_mode))
        base = self.base_for_kernel
        if self.selection_algo is not SelectMethod.TOPK:
            base = ScoreMethod(base if base is not None else self.scoring_method)
            if base not in (ScoreMethod.CP, ScoreMethod.ACP):
                raise ValidationError(f"D-optimal selection needs a cp or acp kernel base, got {base.value}")
        elif base is not None:
            base = ScoreMethod(base)
        object.__setattr__(self, "base_for_kernel", base)
        if int(self.K) < 1:
            raise ValidationError("K must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "ConversionConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown conversion config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        out = asdict(self)
        return {k: (v.value if isinstance(v, enum.Enum) else v) for k, v in out.items()}

    @property
    def method_name(self) -> str:
        if self.selection_algo is SelectMethod.TOPK:
            return self.scoring_method.value
        return f"do_{self.base_for_kernel.value}"

    def validate_for(self, layer: MoeLayer) -> None:
        if not layer.k <= self.K <= layer.E:
            raise ValidationError(f"K={self.K} must satisfy k={layer.k} <= K <= E={layer.E}")
        if self.scaling_mode is ScalingMode.CONDITIONAL_PROB and layer.renormalize_topk:
            raise ValidationError("conditional_prob scaling applies only to layers without top-k renormalization")


def method_config(name: str, **kw) -> ConversionConfig:
    """Config for one of the seven named scoring methods (``sf`` .. ``do_acp``)."""
    if name.startswith("do_"):
        base = name[3:]
        return ConversionConfig(scoring_method=base, base_for_kernel=base, **{"selection_algo": "greedy_do", **kw})
    return ConversionConfig(scoring_method=name, selection_algo="topk", **kw)


METHOD_NAMES = ("sf", "pp", "ps", "cp", "acp", "do_cp", "do_acp")


@dataclass
class ConversionReport:
    selected: tuple[int, ...]
    scores: np.ndarray
    partition: grouping.Partition
    alpha: np.ndarray
    equivalence_error: float
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "selected": list(self.selected),
            "scores": [float(s) for s in self.scores],
            "partition": self.partition.to_dict(),
            "alpha": [float(a) for a in self.alpha],
            "equivalence_error": float(self.equivalence_error),
            "metadata": self.metadata,
        }


def merge_group(members: list[ExpertWeights], member_scores) -> ExpertWeights:
    """Score-weighted average of each projection across the group."""
    if not members:
        raise MergeError("cannot merge an empty group")
    s = np.asarray(member_scores, dtype=np.float64)
    if s.shape != (len(members),):
        raise ValidationError("one score per member required")
    if np.any(s < 0):
        raise ValidationError("merge scores must be non-negative")
    total = s.sum()
    if not total > 0:
        raise MergeError("group has zero total score; weighted average undefined")
    if len(members) == 1:
        return members[0]
    w = s / total

    def avg(name):
        return sum(wi * getattr(m, name) for wi, m in zip(w, members))

    return ExpertWeights(avg("w_gate"), avg("w_up"), avg("w_down"))


def compute_alpha(partition: grouping.Partition, scores, mode, stats: CalibStats | None = None) -> np.ndarray:
    mode = ScalingMode(mode)
    k = len(partition.groups)
    scores = np.asarray(scores, dtype=np.float64)
    if mode is ScalingMode.UNIFORM:
        return np.full(k, 1.0 / k)
    if mode is ScalingMode.PROPORTIONAL:
        mass = np.array([sum(scores[e] for e in g) for g in partition.groups])
        total = mass.sum()
        if not total > 0:
            raise MergeError("proportional scaling with zero total score")
        return mass / total
    if stats is None:
        raise ValidationError("conditional_prob scaling needs calibration statistics")
    cp = scoring.conditional_probability(stats)
    return np.array([np.mean([cp[e] for e in g]) for g in partition.groups])


def concat(groups: list[ExpertWeights], alpha, shared: tuple[ExpertWeights, ...] = ()) -> DenseFfn:
    """Row-stack gate/up, column-stack scaled down projections; shared experts go last at scale 1."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if len(groups) != alpha.size:
        raise ShapeError(f"{len(groups)} groups but {alpha.size} scaling factors")
    blocks = list(groups) + list(shared)
    scales = list(alpha) + [1.0] * len(shared)
    if not blocks:
        raise ShapeError("nothing to concatenate")
    if len({(b.d, b.d_expert) for b in blocks}) != 1:
        raise ShapeError("blocks disagree on (d, d_expert)")
    return DenseFfn(
        np.vstack([b.w_gate for b in blocks]),
        np.vstack([b.w_up for b in blocks]),
        np.hstack([a * b.w_down for a, b in zip(scales, blocks)]),
    )


def pad_dense(ffn: DenseFfn, d_dense: int) -> DenseFfn:
    """Zero-pad the intermediate dimension up to ``d_dense``; outputs are unchanged."""
    extra = d_dense - ffn.d_dense
    if extra < 0:
        raise ShapeError(f"cannot pad width {ffn.d_dense} down to {d_dense}")
    return DenseFfn(
        np.vstack([ffn.w_gate, np.zeros((extra, ffn.d))]),
        np.vstack([ffn.w_up, np.zeros((extra, ffn.d))]),
        np.hstack([ffn.w_down, np.zeros((ffn.d, extra))]),
    )


def check_concat_equivalence(dense: DenseFfn, groups: list[ExpertWeights], alpha, probes,
                             shared: tuple[ExpertWeights, ...] = ()) -> float:
    """Max relative gap between the dense layer and ``sum_g alpha_g f_g`` over probes."""
    probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    got = dense_forward(dense, probes)
    want = np.zeros_like(got)
    for a, g in zip(alpha, groups):
        want = want + a * expert_forward(g, probes)
    for s in shared:
        want = want + expert_forward(s, probes)
    num = np.linalg.norm(got - want, axis=1)
    den = np.linalg.norm(want, axis=1) + np.finfo(np.float64).tiny
    return float(np.max(num / den))


def select_experts(stats: CalibStats, config: ConversionConfig) -> tuple[scoring.Selection, scoring.Kernel | None]:
    merge_scores = scoring.score(stats, config.scoring_method)
    if config.selection_algo is SelectMethod.TOPK:
        return scoring.topk_select(merge_scores, config.K), None
    base = scoring.score(stats, config.base_for_kernel)
    kernel = scoring.build_kernel(base, scoring.mean_gram(stats), config.K)
    if config.selection_algo is SelectMethod.GREEDY_DO:
        return scoring.greedy_do_select(kernel, config.K), kernel
    return scoring.brute_force_select(kernel, config.K), kernel


def convert_layer(layer: MoeLayer, stats: CalibStats, config: ConversionConfig,
                  probes: np.ndarray | None = None) -> tuple[DenseFfn, ConversionReport]:
    config.validate_for(layer)
    if stats.E != layer.E:
        raise ValidationError(f"statistics cover {stats.E} experts, layer has {layer.E}")
    scores = scoring.score(stats, config.scoring_method).values
    selection, kernel = select_experts(stats, config)
    partition = grouping.group(config.grouping_strategy, selection.indices, scores, layer.k, layer, stats)
    merged = [merge_group([layer.experts[e] for e in g], [scores[e] for e in g]) for g in partition.groups]
    alpha = compute_alpha(partition, scores, config.scaling_mode, stats)
    dense = concat(merged, alpha, layer.shared_experts)
    if probes is None:
        probes = np.random.default_rng(config.seed).standard_normal((config.n_probes, layer.d))
    err = check_concat_equivalence(dense, merged, alpha, probes, layer.shared_experts)
    km = kernel.mat if kernel is not None else scoring.build_kernel(
        scoring.score(stats, ScoreMethod.ACP), scoring.mean_gram(stats), config.K).mat
    metadata = {
        "E": layer.E, "k": layer.k, "K": config.K, "d": layer.d, "d_expert": layer.d_expert,
        "d_dense": dense.d_dense, "n_shared": len(layer.shared_experts),
        "renormalize_topk": layer.renormalize_topk, "calibration_tokens": stats.n,
        "method": config.method_name, "config": config.to_dict(),
        "selection": selection.to_dict(),
        "lambda_reg": None if kernel is None else kernel.lambda_reg,
        "effective_rank": scoring.effective_rank(km, selection.indices),
    }
    return dense, ConversionReport(selection.indices, scores, partition, alpha, err, metadata)
