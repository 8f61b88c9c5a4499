import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from moe2dense import distill, synthgen
from moe2dense.distill import DistillConfig, LossType
from moe2dense.errors import NumericError, ShapeError, ValidationError
from moe2dense.model import DenseFfn, moe_forward

# two-class logits [0, log 3] vs [0, 0]: p = (1/4, 3/4), q = (1/2, 1/2)
P_LOGITS = np.array([0.0, math.log(3.0)])
Q_LOGITS = np.zeros(2)
FKL_PQ = 0.25 * math.log(0.5) + 0.75 * math.log(1.5)  # 0.1308...
RKL_PQ = 0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0)  # 0.1438...


def test_kl_frozen_values():
    assert distill.forward_kl(P_LOGITS, Q_LOGITS) == pytest.approx(FKL_PQ, rel=1e-14)
    assert distill.reverse_kl(P_LOGITS, Q_LOGITS) == pytest.approx(RKL_PQ, rel=1e-14)


def test_kl_is_asymmetric_and_zero_on_self():
    assert distill.forward_kl(P_LOGITS, Q_LOGITS) != distill.reverse_kl(P_LOGITS, Q_LOGITS)
    z = np.random.default_rng(0).standard_normal((5, 7))
    assert distill.forward_kl(z, z) == 0.0
    assert distill.forward_kl(z, z + 3.0) <= 1e-15  # shift invariance


def test_kl_non_negative_on_many_pairs():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((10000, 6)) * 3
    b = rng.standard_normal((10000, 6)) * 3
    lt, ls = distill._log_probs(a), distill._log_probs(b)
    kl = np.sum(np.exp(lt) * (lt - ls), axis=1)
    assert kl.min() >= -1e-12
    with pytest.raises(NumericError):
        distill.forward_kl([np.nan, 0.0], [0.0, 0.0])


def _problem(seed, n=6, d=4, d_dense=5, V=7):
    teacher = synthgen.gen_random_moe(seed, d=d, d_expert=3, E=5, k=2)
    head = distill.gen_logit_head(seed + 100, V, d)
    student = distill.random_dense(seed + 200, d, d_dense)
    h = np.random.default_rng(seed).standard_normal((n, d))
    return student, head, h, distill.make_targets(teacher, head, h)


def _numeric_grad(student, head, h, targets, loss, name, step=1e-5):
    base = {k: np.array(getattr(student, k)) for k in ("w_gate", "w_up", "w_down")}
    out = np.zeros_like(base[name])
    for idx in np.ndindex(out.shape):
        vals = []
        for sign in (1, -1):
            w = dict(base)
            w[name] = base[name].copy()
            w[name][idx] += sign * step
            vals.append(distill.loss_and_grad(DenseFfn(**w), head, h, targets, loss, need_grad=False)[0])
        out[idx] = (vals[0] - vals[1]) / (2 * step)
    return out


@pytest.mark.parametrize("loss", list(LossType))
@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_finite_differences(loss, seed):
    student, head, h, targets = _problem(seed)
    _, grads = distill.loss_and_grad(student, head, h, targets, loss)
    for name in ("w_gate", "w_up", "w_down"):
        num = _numeric_grad(student, head, h, targets, loss, name)
        ana = getattr(grads, name)
        rel = np.linalg.norm(ana - num) / max(np.linalg.norm(num), 1e-12)
        assert rel <= 1e-4, (name, rel)


def test_layer_mse_gradient_by_hand():
    # one token, scalar SwiGLU: y = silu(a) * b * c with h = 1
    student = DenseFfn([[0.3]], [[2.0]], [[0.5]])
    head = distill.LogitHead([[1.0]])
    targets = distill.Targets(np.zeros((1, 1)), np.array([[0.1]]))
    value, grads = distill.loss_and_grad(student, head, [[1.0]], targets, "layer_mse")
    s = 0.3 / (1 + math.exp(-0.3))
    y = s * 2.0 * 0.5
    assert value == pytest.approx((y - 0.1) ** 2, rel=1e-14)
    assert grads.w_down[0, 0] == pytest.approx(2 * (y - 0.1) * s * 2.0, rel=1e-14)


@pytest.mark.parametrize("loss", list(LossType))
def test_gradient_vanishes_at_the_teacher(loss):
    student, head, h, _ = _problem(3)
    targets = distill.Targets(head(distill._forward_parts(student.w_gate, student.w_up, student.w_down, h)[3]),
                              distill._forward_parts(student.w_gate, student.w_up, student.w_down, h)[3])
    value, grads = distill.loss_and_grad(student, head, h, targets, loss)
    assert value <= 1e-15
    assert grads.norm() <= 1e-8


def test_zero_hidden_coefficient_is_forward_kl():
    student, head, h, targets = _problem(4)
    a, ga = distill.loss_and_grad(student, head, h, targets, "forward_kl")
    b, gb = distill.loss_and_grad(student, head, h, targets, "fkl_plus_hidden_mse", hidden_mse_coef=0.0)
    assert a == b
    assert np.array_equal(ga.w_gate, gb.w_gate) and np.array_equal(ga.w_down, gb.w_down)


def test_shape_mismatch_rejected():
    student, head, h, targets = _problem(0)
    with pytest.raises(ShapeError):
        distill.loss_and_grad(student, head, h[:, :3], targets, "forward_kl")


@pytest.fixture(scope="module")
def no_renorm():
    return synthgen.gen_random_moe(9, d=5, d_expert=3, E=6, k=2, renormalize=False)


def test_expanded_teacher_at_own_k_is_the_moe(no_renorm):
    h = np.random.default_rng(0).standard_normal((10, 5))
    want = np.stack([moe_forward(no_renorm, x)[0] for x in h])
    np.testing.assert_allclose(distill.teacher_forward(no_renorm, h, 2), want, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(distill.teacher_forward(no_renorm, h), want, rtol=1e-12, atol=1e-14)


def test_expanded_teacher_at_E_is_full_mixture(no_renorm):
    h = np.random.default_rng(1).standard_normal((4, 5))
    from moe2dense.model import all_expert_outputs, router_probs
    want = np.einsum("ne,end->nd", router_probs(no_renorm, h), all_expert_outputs(no_renorm, h))
    np.testing.assert_allclose(distill.teacher_forward(no_renorm, h, 6), want, rtol=1e-12, atol=1e-14)


def test_expanded_teacher_moves_monotonically_towards_full_mixture(no_renorm):
    # adding the next most probable expert only adds one non-negative-weight term
    h = np.random.default_rng(2).standard_normal((50, 5))
    full = distill.teacher_forward(no_renorm, h, 6)
    gaps = [np.abs(distill.teacher_forward(no_renorm, h, k) - full).max() for k in range(2, 7)]
    assert gaps[-1] == 0.0
    with pytest.raises(ValidationError):
        distill.teacher_forward(no_renorm, h, 1)
    with pytest.raises(ValidationError):
        distill.teacher_forward(no_renorm, h, 7)


def test_teacher_forward_single_token(small_layer):
    h = np.random.default_rng(3).standard_normal(small_layer.d)
    np.testing.assert_allclose(distill.teacher_forward(small_layer, h)[0], moe_forward(small_layer, h)[0],
                               rtol=1e-12, atol=1e-14)


def test_lr_schedule():
    cfg = DistillConfig(steps=100, peak_lr=1.0, min_lr=0.1, warmup_steps=10)
    assert distill.lr_at(0, cfg) == pytest.approx(0.1)
    assert distill.lr_at(9, cfg) == pytest.approx(1.0)
    assert distill.lr_at(10, cfg) == pytest.approx(1.0)
    assert distill.lr_at(100, cfg) == pytest.approx(0.1)
    lrs = [distill.lr_at(s, cfg) for s in range(10, 100)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def _train_setup(seed=0):
    teacher = synthgen.gen_random_moe(seed, d=6, d_expert=4, E=4, k=2)
    head = distill.gen_logit_head(seed, 16, 6)
    return teacher, head, distill.random_dense(seed + 1, 6, 8)


def test_zero_lr_gives_constant_curve():
    teacher, head, student = _train_setup()
    res = distill.train(student, teacher, head, DistillConfig(steps=15, peak_lr=0.0, min_lr=0.0))
    assert len(res.losses) == 15 and len(set(res.losses)) == 1
    assert np.array_equal(res.student.w_down, student.w_down)


def test_training_reduces_loss_and_is_deterministic():
    teacher, head, student = _train_setup()
    cfg = DistillConfig(steps=60, seed=5)
    a = distill.train(student, teacher, head, cfg)
    b = distill.train(student, teacher, head, cfg)
    assert a.losses == b.losses and a.lrs == b.lrs
    assert a.losses[-1] < 0.5 * a.losses[0]
    assert [r[0] for r in a.curve_rows()] == list(range(60))


def test_divergence_raises():
    teacher, head, student = _train_setup()
    with pytest.raises(NumericError):
        with np.errstate(all="ignore"):
            distill.train(student, teacher, head, DistillConfig(steps=200, peak_lr=1e6, min_lr=1e6, warmup_steps=0))


def test_steps_to_reach():
    assert distill.steps_to_reach([3.0, 2.0, 1.0], 2.0) == 1
    assert distill.steps_to_reach([3.0], 1.0) is None


def test_config_validation_and_round_trip():
    with pytest.raises(ValidationError):
        DistillConfig(steps=0)
    with pytest.raises(ValidationError):
        DistillConfig(peak_lr=-1)
    with pytest.raises(ValidationError):
        DistillConfig.from_dict({"epochs": 3})
    with pytest.raises(ValueError):
        DistillConfig(loss="cross_entropy")
    cfg = DistillConfig(loss="reverse_kl", k_prime=3)
    assert DistillConfig.from_dict(cfg.to_dict()) == cfg


@given(a=st.lists(st.floats(-20, 20), min_size=3, max_size=3), b=st.lists(st.floats(-20, 20), min_size=3, max_size=3))
def test_kl_property_non_negative(a, b):
    assert distill.forward_kl(a, b) >= 0.0
    assert distill.reverse_kl(a, b) >= 0.0
