"""Layer types and forward passes.

Every weight is a read-only float64 ``numpy`` array.  Forward functions accept
either a single hidden vector of shape ``(d,)`` or a batch ``(n, d)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import NumericError, ShapeError, ValidationError


def as_matrix(x, name: str = "tensor") -> np.ndarray:
    """Return a read-only, C-contiguous float64 copy of a 2-D array."""
    arr = np.array(x, dtype=np.float64, copy=True, order="C")
    if arr.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name}: non-finite entries")
    arr.setflags(write=False)
    return arr


def silu(x: np.ndarray) -> np.ndarray:
    return x * expit(x)


def silu_grad(x: np.ndarray) -> np.ndarray:
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def topk_indices(probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries along the last axis, largest first.

    Ties go to the lower index (a stable sort of the negated values).
    """
    return np.argsort(-probs, axis=-1, kind="stable")[..., :k]


@dataclass(frozen=True)
class ExpertWeights:
    """One SwiGLU expert: ``w_down @ (silu(w_gate @ h) * (w_up @ h))``."""

    w_gate: np.ndarray  # (d_expert, d)
    w_up: np.ndarray  # (d_expert, d)
    w_down: np.ndarray  # (d, d_expert)

    def __post_init__(self):
        gate = as_matrix(self.w_gate, "w_gate")
        up = as_matrix(self.w_up, "w_up")
        down = as_matrix(self.w_down, "w_down")
        if gate.shape != up.shape:
            raise ShapeError(f"w_gate {gate.shape} and w_up {up.shape} differ")
        if down.shape != gate.shape[::-1]:
            raise ShapeError(f"w_down {down.shape} does not match w_gate {gate.shape}")
        object.__setattr__(self, "w_gate", gate)
        object.__setattr__(self, "w_up", up)
        object.__setattr__(self, "w_down", down)

    @property
    def d(self) -> int:
        return self.w_gate.shape[1]

    @property
    def d_expert(self) -> int:
        return self.w_gate.shape[0]


@dataclass(frozen=True)
class DenseFfn:
    """A dense SwiGLU feed-forward layer of width ``d_dense``."""

    w_gate: np.ndarray  # (d_dense, d)
    w_up: np.ndarray  # (d_dense, d)
    w_down: np.ndarray  # (d, d_dense)

    __post_init__ = ExpertWeights.__post_init__

    @property
    def d(self) -> int:
        return self.w_gate.shape[1]

    @property
    def d_dense(self) -> int:
        return self.w_gate.shape[0]


@dataclass(frozen=True)
class MoeLayer:
    experts: tuple[ExpertWeights, ...]
    router: np.ndarray  # (E, d)
    k: int
    renormalize_topk: bool = True
    shared_experts: tuple[ExpertWeights, ...] = field(default_factory=tuple)

    def __post_init__(self):
        experts = tuple(self.experts)
        shared = tuple(self.shared_experts)
        if not experts:
            raise ValidationError("an MoE layer needs at least one expert")
        router = as_matrix(self.router, "router")
        shape = (experts[0].d, experts[0].d_expert)
        for i, e in enumerate(experts + shared):
            if (e.d, e.d_expert) != shape:
                raise ShapeError(f"expert {i} has (d, d_expert)={(e.d, e.d_expert)}, expected {shape}")
        if router.shape != (len(experts), shape[0]):
            raise ShapeError(f"router shape {router.shape}, expected {(len(experts), shape[0])}")
        if not 1 <= int(self.k) <= len(experts):
            raise ValidationError(f"k={self.k} outside [1, {len(experts)}]")
        object.__setattr__(self, "experts", experts)
        object.__setattr__(self, "shared_experts", shared)
        object.__setattr__(self, "router", router)
        object.__setattr__(self, "k", int(self.k))
        object.__setattr__(self, "renormalize_topk", bool(self.renormalize_topk))

    @property
    def E(self) -> int:
        return len(self.experts)

    @property
    def d(self) -> int:
        return self.experts[0].d

    @property
    def d_expert(self) -> int:
        return self.experts[0].d_expert


def _check_input(h, d: int) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim not in (1, 2) or h.shape[-1] != d:
        raise ShapeError(f"input of shape {h.shape} does not match hidden size {d}")
    return h


def _swiglu(w_gate, w_up, w_down, h):
    act = silu(h @ w_gate.T) * (h @ w_up.T)
    return act @ w_down.T


def expert_forward(e: ExpertWeights, h) -> np.ndarray:
    h = _check_input(h, e.d)
    return _swiglu(e.w_gate, e.w_up, e.w_down, h)


def dense_forward(ffn: DenseFfn, h) -> np.ndarray:
    h = _check_input(h, ffn.d)
    return _swiglu(ffn.w_gate, ffn.w_up, ffn.w_down, h)


def router_probs(layer: MoeLayer, h) -> np.ndarray:
    """Softmax routing probabilities over all ``E`` experts."""
    h = _check_input(h, layer.d)
    logits = h @ layer.router.T
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite router logits")
    return softmax(logits)


def all_expert_outputs(layer: MoeLayer, h) -> np.ndarray:
    """Outputs of every routed expert, shape ``(E, *h.shape)``."""
    h = _check_input(h, layer.d)
    return np.stack([expert_forward(e, h) for e in layer.experts])


def shared_output(layer: MoeLayer, h) -> np.ndarray:
    h = _check_input(h, layer.d)
    out = np.zeros_like(h)
    for e in layer.shared_experts:
        out = out + expert_forward(e, h)
    return out


def moe_forward(layer: MoeLayer, h, k_override: int | None = None):
    """Routed forward pass for one token.

    Returns ``(out, probs, selected)``; ``selected`` lists expert indices in
    descending probability order.  Shared experts are added with weight 1.
    """
    h = _check_input(h, layer.d)
    if h.ndim != 1:
        raise ShapeError("moe_forward takes a single hidden vector")
    k = layer.k if k_override is None else int(k_override)
    if not 1 <= k <= layer.E:
        raise ValidationError(f"k_override={k_override} outside [1, {layer.E}]")
    probs = router_probs(layer, h)
    selected = topk_indices(probs, k)
    weights = probs[selected]
    if layer.renormalize_topk:
        weights = weights / weights.sum()
    out = shared_output(layer, h)
    for w, e in zip(weights, selected):
        out = out + w * expert_forward(layer.experts[e], h)
    return out, probs, selected
