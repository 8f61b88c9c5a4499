import itertools
import math

import numpy as np
import pytest

from moe2dense import calibration, conversion, scoring, synthgen
from moe2dense.errors import ConstructionError, ValidationError
from moe2dense.model import all_expert_outputs


def test_random_moe_is_seeded():
    a = synthgen.gen_random_moe(11, d=6, d_expert=4, E=5, k=2)
    b = synthgen.gen_random_moe(11, d=6, d_expert=4, E=5, k=2)
    c = synthgen.gen_random_moe(12, d=6, d_expert=4, E=5, k=2)
    assert np.array_equal(a.router, b.router)
    assert all(np.array_equal(x.w_down, y.w_down) for x, y in zip(a.experts, b.experts))
    assert not np.array_equal(a.router, c.router)


def test_random_moe_scaling():
    layer = synthgen.gen_random_moe(0, d=400, d_expert=50, E=4, k=1)
    # entries ~ N(0, 1/d)
    assert np.std(layer.router) == pytest.approx(1 / math.sqrt(400), rel=0.1)


def test_qwen_geometry_is_accepted():
    synthgen.check_moe_dims(2048, 768, 128, 8)


@pytest.mark.parametrize("dims", [(4, 2, 3, 4), (0, 2, 3, 1), (4, 2, 0, 1)])
def test_invalid_dims(dims):
    with pytest.raises(ValidationError):
        synthgen.gen_random_moe(0, *dims)


def test_counterexample_k2():
    t = synthgen.gen_redundancy_counterexample(2)
    assert t.E == 3 and t.n_points == 3
    assert t.outputs.tolist() == [[1, 1, 0], [1, 1, 0], [0, 0, 1]]
    assert t.router_choice.tolist() == [0, 1, 2]


@pytest.mark.parametrize("K", range(2, 9))
def test_counterexample_teacher_output_is_one(K):
    t = synthgen.gen_redundancy_counterexample(K)
    assert np.array_equal(t.teacher_output(), np.ones(2 * K - 1))


def test_counterexample_k4_acp_closed_forms():
    stats = calibration.collect_table(synthgen.gen_redundancy_counterexample(4))
    acp = scoring.score(stats, "acp").values
    np.testing.assert_allclose(acp[:4], 0.7559289460184544, rtol=1e-14)
    np.testing.assert_allclose(acp[4:], 0.3779644730092272, rtol=1e-14)


def test_counterexample_rejects_small_k():
    with pytest.raises(ValidationError):
        synthgen.gen_redundancy_counterexample(1)


def _ls_error(table, subset):
    # least-squares oracle independent of the theory module
    X = table.outputs[list(subset)].T
    y = table.teacher_output()
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return float(np.mean((X @ coef - y) ** 2))


@pytest.mark.parametrize("K", range(2, 9))
def test_counterexample_reconstruction_errors(K):
    t = synthgen.gen_redundancy_counterexample(K)
    assert _ls_error(t, range(K)) == pytest.approx((K - 1) / (2 * K - 1), abs=1e-9)
    assert _ls_error(t, [0, *range(K, 2 * K - 1)]) <= 1e-18


def _pairwise_diss(table):
    g = table.gram()
    v = np.sqrt(np.diag(g))
    return 1 - g / np.outer(v, v)


@pytest.mark.parametrize("G,size,din,dout,dim", [(3, 4, 0.1, 0.8, 24), (2, 3, 0.0, 1.0, 8),
                                                 (4, 2, 0.3, 1.2, 16), (5, 1, 0.0, 1.25, 6)])
def test_planted_separation_is_exact(G, size, din, dout, dim):
    table, groups = synthgen.gen_planted_clusters(G, size, din, dout, dim, seed=5)
    d = _pairwise_diss(table)
    label = {e: g for g, members in enumerate(groups) for e in members}
    for i, j in itertools.combinations(range(table.E), 2):
        want = din if label[i] == label[j] else dout
        assert d[i, j] == pytest.approx(want, abs=1e-12)
    assert sorted(e for g in groups for e in g) == list(range(G * size))


def test_planted_collinear_members():
    table, groups = synthgen.gen_planted_clusters(3, 3, 0.0, 1.0, 8, seed=1)
    for g in groups:
        rows = table.outputs[g]
        unit = rows / np.linalg.norm(rows, axis=1, keepdims=True)
        np.testing.assert_allclose(unit, np.broadcast_to(unit[0], unit.shape), atol=1e-12)
        assert np.all(rows @ rows[0] > 0)  # positive scalings


def test_planted_antipodal():
    table, groups = synthgen.gen_planted_clusters(2, 2, 0.0, 2.0, 4, seed=2)
    a, b = table.outputs[groups[0][0]], table.outputs[groups[1][0]]
    assert a @ b / (np.linalg.norm(a) * np.linalg.norm(b)) == pytest.approx(-1.0, abs=1e-12)


def test_planted_infeasible():
    with pytest.raises(ConstructionError):
        synthgen.gen_planted_clusters(4, 2, 0.0, 2.0, 10, seed=0)  # 4 mutually antipodal directions
    with pytest.raises(ConstructionError):
        synthgen.gen_planted_clusters(3, 4, 0.2, 0.8, 5, seed=0)  # dim too small
    with pytest.raises(ValidationError):
        synthgen.gen_planted_clusters(3, 4, 0.5, 0.4, 30, seed=0)


def test_redundant_pool_noise_zero_duplicates(rng):
    layer, labels = synthgen.gen_redundant_pool(12, 3, 0.0, seed=3)
    outs = all_expert_outputs(layer, rng.standard_normal((7, layer.d)))
    for g in range(3):
        members = np.flatnonzero(labels == g)
        for e in members[1:]:
            assert np.array_equal(outs[e], outs[members[0]])


def test_redundant_pool_labels_and_errors():
    _, labels = synthgen.gen_redundant_pool(10, 3, 0.01, seed=0)
    assert labels.tolist() == [0, 0, 0, 1, 1, 1, 2, 2, 2, 3]
    with pytest.raises(ValidationError):
        synthgen.gen_redundant_pool(4, 5, 0.01, seed=0)
    with pytest.raises(ValidationError):
        synthgen.gen_redundant_pool(4, 2, -1.0, seed=0)


@pytest.mark.parametrize("seed", range(5))
def test_do_acp_spans_every_duplicate_group(seed):
    layer, labels = synthgen.gen_redundant_pool(16, 4, 0.01, seed=seed)
    stats = calibration.collect(layer, synthgen.gaussian_tokens(seed, 2048, layer.d))
    sel, _ = conversion.select_experts(stats, conversion.method_config("do_acp", K=8))
    assert len({labels[e] for e in sel.indices}) >= 4


def test_table_round_trip(tmp_path):
    table, groups = synthgen.gen_planted_clusters(2, 2, 0.1, 0.9, 8, seed=0)
    synthgen.save_table(table, tmp_path / "t.json", {"groups": groups})
    back, truth = synthgen.load_table(tmp_path / "t.json")
    assert np.array_equal(back.outputs, table.outputs)
    assert truth["groups"] == groups
