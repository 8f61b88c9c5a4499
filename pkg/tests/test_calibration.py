import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from moe2dense import calibration, io, synthgen
from moe2dense.calibration import CalibStats, collect, collect_table, merge_stats
from moe2dense.errors import ModelFormatError, ShapeError, ValidationError
from moe2dense.model import MoeLayer, all_expert_outputs, router_probs, topk_indices


def naive_stats(layer, inputs):
    """Token-by-token float accumulation straight from the definitions."""
    E = layer.E
    sel_count = np.zeros(E)
    p_all = np.zeros(E)
    p_sel = np.zeros(E)
    act = np.zeros(E)
    gram = np.zeros((E, E))
    for h in inputs:
        p = router_probs(layer, h)
        sel = topk_indices(p, layer.k)
        f = all_expert_outputs(layer, h)  # (E, d)
        sel_count[sel] += 1
        p_all += p
        p_sel[sel] += p[sel]
        act += np.sum(f * f, axis=1)
        gram += f @ f.T
    return sel_count, p_all, p_sel, act, gram


def test_matches_naive_oracle(small_layer, rng):
    x = rng.standard_normal((300, small_layer.d))
    s = collect(small_layer, x, chunk_size=64)
    sc, pa, ps, act, gram = naive_stats(small_layer, x)
    assert s.n == 300
    assert np.array_equal(s.sel_count, sc)
    np.testing.assert_allclose(s.prob_sum_all, pa, rtol=1e-12)
    np.testing.assert_allclose(s.prob_sum_selected, ps, rtol=1e-12)
    np.testing.assert_allclose(s.act_sq_sum, act, rtol=1e-12)
    np.testing.assert_allclose(s.gram_sum, gram, rtol=1e-12, atol=1e-12)


def test_single_token_two_experts():
    base = synthgen.gen_random_moe(0, d=2, d_expert=2, E=2, k=1)
    layer = MoeLayer(base.experts, np.array([[3.0, 0.0], [0.0, 0.0]]), 1)
    s = collect(layer, np.array([[1.0, 0.0]]))
    p0 = np.exp(3.0) / (np.exp(3.0) + 1.0)
    assert s.sel_count.tolist() == [1, 0]
    assert s.prob_sum_selected[0] == pytest.approx(p0, rel=1e-15)
    assert s.prob_sum_selected[1] == 0.0


def test_identical_router_rows_give_equal_probability_sums(rng):
    base = synthgen.gen_random_moe(0, d=3, d_expert=2, E=3, k=1)
    row = rng.standard_normal(3)
    layer = MoeLayer(base.experts, np.stack([row, row, row]), 1)
    s = collect(layer, rng.standard_normal((50, 3)))
    assert s.prob_sum_all[0] == s.prob_sum_all[1] == s.prob_sum_all[2]


def test_counterexample_selection_counts():
    s = collect_table(synthgen.gen_redundancy_counterexample(4))
    assert s.sel_count.tolist() == [1] * 7
    assert s.prob_sum_selected.tolist() == [1.0] * 7


@pytest.mark.parametrize("seed", range(5))
def test_invariants(seed):
    layer = synthgen.gen_random_moe(seed, d=5, d_expert=3, E=7, k=3)
    s = collect(layer, synthgen.gaussian_tokens(seed, 200, 5))
    g = np.asarray(s.gram_sum)
    assert np.array_equal(g, g.T)
    eig = np.linalg.eigvalsh(g / s.n)
    assert eig.min() >= -1e-9 * np.trace(g / s.n)
    np.testing.assert_allclose(np.diag(g), s.act_sq_sum, rtol=1e-9)
    assert np.all(s.prob_sum_selected >= 0) and np.all(s.prob_sum_selected <= s.sel_count)
    assert np.all(s.sel_count <= s.n)
    assert s.sel_count.sum() == 3 * 200


def test_split_at_chunk_boundary_is_bit_identical(small_layer, rng):
    x = rng.standard_normal((1000, small_layer.d))
    full = collect(small_layer, x, chunk_size=128)
    a, b = collect(small_layer, x[:512], chunk_size=128), collect(small_layer, x[512:], chunk_size=128)
    assert merge_stats(a, b) == full
    assert merge_stats(b, a) == full
    for name in ("prob_sum_all", "gram_sum", "act_sq_sum"):
        assert np.array_equal(getattr(merge_stats(a, b), name), getattr(full, name))


def test_merge_identity_and_errors(small_layer, rng):
    s = collect(small_layer, rng.standard_normal((20, small_layer.d)))
    assert merge_stats(s, CalibStats.empty(small_layer.E)) == s
    with pytest.raises(ValidationError):
        merge_stats(s, CalibStats.empty(small_layer.E + 1))


@given(seed=st.integers(0, 1000), cuts=st.lists(st.integers(1, 59), min_size=2, max_size=2, unique=True))
def test_merge_associative_and_commutative(seed, cuts):
    layer = synthgen.gen_random_moe(seed, d=3, d_expert=2, E=4, k=2)
    x = np.random.default_rng(seed).standard_normal((60, 3)) * 4
    i, j = sorted(cuts)
    a, b, c = collect(layer, x[:i]), collect(layer, x[i:j]), collect(layer, x[j:])
    assert merge_stats(merge_stats(a, b), c) == merge_stats(a, merge_stats(b, c))
    assert merge_stats(a, b) == merge_stats(b, a)
    assert merge_stats(merge_stats(c, a), b) == merge_stats(a, merge_stats(c, b))


def test_input_errors(small_layer):
    with pytest.raises(ShapeError):
        collect(small_layer, np.ones((3, small_layer.d + 1)))
    with pytest.raises(ValidationError):
        collect(small_layer, np.ones((0, small_layer.d)))


def test_table_sampling_counts_repeats():
    t = synthgen.gen_redundancy_counterexample(2)
    s = collect_table(t, points=[0, 0, 2])
    assert s.n == 3
    assert s.sel_count.tolist() == [2, 0, 1]
    assert s.gram_sum.tolist() == [[2, 2, 0], [2, 2, 0], [0, 0, 1]]


def test_stats_file_round_trip(tmp_path, small_layer, rng):
    s = collect(small_layer, rng.standard_normal((40, small_layer.d)))
    calibration.save_stats(s, tmp_path / "s.stats", extra={"tag": "x"})
    back = calibration.load_stats(tmp_path / "s.stats")
    assert back == s
    assert np.array_equal(back.gram_sum, s.gram_sum)


def test_stats_file_kind_checked(tmp_path):
    io.write_bundle(tmp_path / "x", {"kind": "other"}, {})
    with pytest.raises(ModelFormatError):
        calibration.load_stats(tmp_path / "x")


def test_fields_read_only(small_layer, rng):
    s = collect(small_layer, rng.standard_normal((4, small_layer.d)))
    with pytest.raises(ValueError):
        s.gram_sum[0, 0] = 0.0
