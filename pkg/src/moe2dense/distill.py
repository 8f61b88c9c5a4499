"""Toy knowledge distillation of a dense student from an MoE teacher layer.

Student and teacher share a linear logit head on top of the layer output.
Training is plain gradient descent with linear warmup and cosine decay.
"""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import log_softmax

from .errors import NumericError, ShapeError, ValidationError
from .model import (DenseFfn, MoeLayer, all_expert_outputs, as_matrix, router_probs,
                    shared_output, silu, silu_grad, topk_indices)


class LossType(str, enum.Enum):
    FORWARD_KL = "forward_kl"
    REVERSE_KL = "reverse_kl"
    LAYER_MSE = "layer_mse"
    FKL_PLUS_HIDDEN_MSE = "fkl_plus_hidden_mse"


@dataclass(frozen=True)
class LogitHead:
    w_out: np.ndarray  # (V, d)

    def __post_init__(self):
        object.__setattr__(self, "w_out", as_matrix(self.w_out, "w_out"))

    def __call__(self, y: np.ndarray) -> np.ndarray:
        return y @ self.w_out.T


def gen_logit_head(seed: int, V: int, d: int, scale: float = 4.0) -> LogitHead:
    return LogitHead(np.random.default_rng(seed).standard_normal((V, d)) * scale / math.sqrt(d))


@dataclass(frozen=True)
class DistillConfig:
    loss: LossType = LossType.FORWARD_KL
    k_prime: int | None = None  # None: the teacher's own k
    steps: int = 200
    peak_lr: float = 0.5
    min_lr: float = 0.05
    warmup_steps: int = 20
    batch_size: int = 64
    eval_tokens: int = 256
    hidden_mse_coef: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "loss", LossType(self.loss))
        if int(self.steps) < 1:
            raise ValidationError("steps must be >= 1")
        if self.batch_size < 1 or self.eval_tokens < 1:
            raise ValidationError("batch_size and eval_tokens must be >= 1")
        if self.min_lr < 0 or self.peak_lr < 0 or self.warmup_steps < 0:
            raise ValidationError("learning rates and warmup must be non-negative")

    @classmethod
    def from_dict(cls, data: dict) -> "DistillConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown distill config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["loss"] = self.loss.value
        return out


def _log_probs(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    return log_softmax(logits, axis=-1)


def forward_kl(teacher_logits, student_logits) -> float:
    """``KL(p_teacher || p_student)``, averaged over tokens for 2-D input."""
    lt, ls = _log_probs(teacher_logits), _log_probs(student_logits)
    kl = np.sum(np.exp(lt) * (lt - ls), axis=-1)
    return float(np.mean(np.maximum(kl, 0.0)))


def reverse_kl(teacher_logits, student_logits) -> float:
    """``KL(p_student || p_teacher)``, averaged over tokens for 2-D input."""
    return forward_kl(student_logits, teacher_logits)


def teacher_forward_expanded(layer: MoeLayer, h, k_prime: int) -> np.ndarray:
    """Teacher output mixing the ``k_prime`` most probable experts with raw probabilities.

    Shared experts are always added with weight 1.
    """
    if not layer.k <= k_prime <= layer.E:
        raise ValidationError(f"k_prime={k_prime} outside [{layer.k}, {layer.E}]")
    h = np.asarray(h, dtype=np.float64)
    single = h.ndim == 1
    h2 = np.atleast_2d(h)
    probs = router_probs(layer, h2)
    sel = topk_indices(probs, k_prime)
    weights = np.zeros_like(probs)
    rows = np.arange(h2.shape[0])[:, None]
    weights[rows, sel] = probs[rows, sel]
    outs = all_expert_outputs(layer, h2)  # (E, n, d)
    out = shared_output(layer, h2) + np.einsum("ne,end->nd", weights, outs)
    return out[0] if single else out


def teacher_forward(layer: MoeLayer, h, k_prime: int | None = None) -> np.ndarray:
    """Batched teacher output; ``k_prime=None`` uses the layer's own routing."""
    if k_prime is not None:
        return teacher_forward_expanded(layer, h, k_prime)
    h2 = np.atleast_2d(np.asarray(h, dtype=np.float64))
    probs = router_probs(layer, h2)
    sel = topk_indices(probs, layer.k)
    rows = np.arange(h2.shape[0])[:, None]
    weights = np.zeros_like(probs)
    weights[rows, sel] = probs[rows, sel]
    if layer.renormalize_topk:
        weights /= weights.sum(axis=1, keepdims=True)
    return shared_output(layer, h2) + np.einsum("ne,end->nd", weights, all_expert_outputs(layer, h2))


@dataclass
class Targets:
    logits: np.ndarray  # (n, V)
    hidden: np.ndarray  # (n, d)


def make_targets(layer: MoeLayer, head: LogitHead, h, k_prime: int | None = None) -> Targets:
    hidden = teacher_forward(layer, h, k_prime)
    return Targets(head(hidden), hidden)


@dataclass
class Gradients:
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray

    def norm(self) -> float:
        return float(math.sqrt(sum(np.sum(g * g) for g in (self.w_gate, self.w_up, self.w_down))))


def _forward_parts(w_gate, w_up, w_down, h):
    g = h @ w_gate.T
    u = h @ w_up.T
    act = silu(g) * u
    return g, u, act, act @ w_down.T


def loss_and_grad(student: DenseFfn, head: LogitHead, h, targets: Targets, loss,
                  hidden_mse_coef: float = 1.0, need_grad: bool = True):
    """Mean-over-tokens loss and its analytic gradient w.r.t. the student weights.

    Hidden MSE is ``mean_t ||y_s - y_t||^2 / d``.
    """
    loss = LossType(loss)
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    n, d = h.shape
    if d != student.d or head.w_out.shape[1] != d:
        raise ShapeError("student, head and batch disagree on the hidden size")
    g, u, act, y = _forward_parts(student.w_gate, student.w_up, student.w_down, h)
    if not np.all(np.isfinite(y)):
        raise NumericError("non-finite student activations")
    value = 0.0
    dy = np.zeros_like(y)
    if loss in (LossType.FORWARD_KL, LossType.REVERSE_KL, LossType.FKL_PLUS_HIDDEN_MSE):
        z = head(y)
        ls = _log_probs(z)
        lt = _log_probs(targets.logits)
        ps, pt = np.exp(ls), np.exp(lt)
        if loss is LossType.REVERSE_KL:
            kl = np.sum(ps * (ls - lt), axis=1)
            dz = ps * ((ls - lt) - kl[:, None]) / n
        else:
            kl = np.sum(pt * (lt - ls), axis=1)
            dz = (ps - pt) / n
        value += float(np.mean(kl))
        dy += dz @ head.w_out
    if loss in (LossType.LAYER_MSE, LossType.FKL_PLUS_HIDDEN_MSE):
        coef = 1.0 if loss is LossType.LAYER_MSE else hidden_mse_coef
        diff = y - targets.hidden
        value += coef * float(np.sum(diff * diff)) / (n * d)
        dy += coef * 2.0 * diff / (n * d)
    if not need_grad:
        return value, None
    d_act = dy @ student.w_down
    grads = Gradients(
        w_gate=(d_act * u * silu_grad(g)).T @ h,
        w_up=(d_act * silu(g)).T @ h,
        w_down=dy.T @ act,
    )
    return value, grads


def grad_student(student: DenseFfn, head: LogitHead, batch, targets: Targets, loss,
                 hidden_mse_coef: float = 1.0) -> Gradients:
    return loss_and_grad(student, head, batch, targets, loss, hidden_mse_coef)[1]


def lr_at(step: int, config: DistillConfig) -> float:
    """Linear warmup to ``peak_lr`` then cosine decay to ``min_lr``."""
    if config.warmup_steps and step < config.warmup_steps:
        return config.peak_lr * (step + 1) / config.warmup_steps
    span = max(config.steps - config.warmup_steps, 1)
    progress = min((step - config.warmup_steps) / span, 1.0)
    return config.min_lr + 0.5 * (config.peak_lr - config.min_lr) * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainResult:
    student: DenseFfn
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)

    def curve_rows(self) -> list[tuple[int, float, float]]:
        return [(i, loss, lr) for i, (loss, lr) in enumerate(zip(self.losses, self.lrs))]


def train(student_init: DenseFfn, teacher: MoeLayer, head: LogitHead, config: DistillConfig) -> TrainResult:
    """Gradient descent on fresh Gaussian batches.

    ``losses[i]`` is the loss on a fixed evaluation batch before update ``i``,
    so the curve has exactly ``config.steps`` entries.
    """
    if student_init.d != teacher.d:
        raise ShapeError("student and teacher hidden sizes differ")
    rng = np.random.default_rng(config.seed)
    eval_h = rng.standard_normal((config.eval_tokens, teacher.d))
    eval_t = make_targets(teacher, head, eval_h, config.k_prime)
    wg, wu, wd = (np.array(w) for w in (student_init.w_gate, student_init.w_up, student_init.w_down))
    result = TrainResult(student_init)
    for step in range(config.steps):
        student = DenseFfn(wg, wu, wd)
        value, _ = loss_and_grad(student, head, eval_h, eval_t, config.loss, config.hidden_mse_coef,
                                 need_grad=False)
        if not math.isfinite(value):
            raise NumericError(f"loss diverged at step {step}")
        lr = lr_at(step, config)
        result.losses.append(value)
        result.lrs.append(lr)
        batch = rng.standard_normal((config.batch_size, teacher.d))
        _, grads = loss_and_grad(student, head, batch, make_targets(teacher, head, batch, config.k_prime),
                                 config.loss, config.hidden_mse_coef)
        wg = wg - lr * grads.w_gate
        wu = wu - lr * grads.w_up
        wd = wd - lr * grads.w_down
    result.student = DenseFfn(wg, wu, wd)
    return result


def steps_to_reach(losses, target: float) -> int | None:
    """First step whose loss is at or below ``target``."""
    for i, v in enumerate(losses):
        if v <= target:
            return i
    return None


def random_dense(seed: int, d: int, d_dense: int) -> DenseFfn:
    """Same Gaussian scaling as the synthetic experts."""
    rng = np.random.default_rng(seed)
    s = 1.0 / math.sqrt(d)
    return DenseFfn(rng.standard_normal((d_dense, d)) * s, rng.standard_normal((d_dense, d)) * s,
                    rng.standard_normal((d, d_dense)) * s)
