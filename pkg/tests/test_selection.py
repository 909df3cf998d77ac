import math
import time

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from oracles import (
    bed_expansion_listsim, best_by_enumeration, block_scores_bruteforce, kept_l1_bruteforce,
    quantized_layer, top_k_sum,
)
from ubp.selection import (
    NEG_INF, BlockSelection, EfficacyUndefined, InfeasibleSelectionError, PruningConfig,
    SelectionError, SelectionTimeout, aligned_scores, block_division, block_expansion,
    blocks_for_sparsity, efficacy, efficacy_from, elements_for_sparsity, kept_score, max_blocks,
    reference_scores, score_blocks, select, select_abp, select_bed, select_ep, select_greedy,
    select_optimal, select_optimal_indexset,
)
from ubp.tensor_io import WeightTensor, gen_tensor

COLUMN = [3, 9, 8, 1, 1, 7, 6, 2]


def column_layer(values):
    return WeightTensor.from_array(np.asarray(values, dtype=np.float32).reshape(-1, 1, 1, 1))


@pytest.fixture
def example():
    w = column_layer(COLUMN)
    return w, score_blocks(w, 2)


# -- scoring --------------------------------------------------------------

def test_score_column_with_sentinel():
    s = score_blocks(column_layer([0.5, -1.5, 2.0, -1.0]), 2)
    assert s.scores.tolist() == [2.0, 3.5, 3.0, -math.inf]


def test_scores_flat_index_runs_down_columns():
    arr = np.arange(6, dtype=np.float32).reshape(3, 2, 1, 1)
    s = score_blocks(WeightTensor.from_array(arr), 2)
    # k = i + c_out * j
    assert s.scores.tolist() == [0 + 2, 2 + 4, -math.inf, 1 + 3, 3 + 5, -math.inf]


def test_n_equal_c_out_leaves_one_finite_score_per_column():
    s = score_blocks(gen_tensor((4, 5, 1, 1), 0), 4)
    assert np.isfinite(s.scores).reshape(5, 4).sum(axis=1).tolist() == [1] * 5


def test_spatial_kernels_match_elementwise_sum():
    rng = np.random.default_rng(3)
    arr = rng.standard_normal((6, 3, 2, 2)).astype(np.float32)
    s = score_blocks(WeightTensor.from_array(arr), 3)
    oracle = block_scores_bruteforce(arr, 3)
    assert len(oracle) == s.b
    for got, want in zip(s.scores.tolist(), oracle):
        assert got == want or math.isclose(got, want, rel_tol=1e-6)


def test_score_errors():
    w = gen_tensor((4, 2, 1, 1), 0)
    with pytest.raises(SelectionError):
        score_blocks(w, 5)
    with pytest.raises(SelectionError):
        score_blocks(w, 2, "l2")


# -- block counts -----------------------------------------------------------

@pytest.mark.parametrize("b,n,p,m", [(8, 2, 0.25, 3), (4096, 4, 0.9, 102), (8, 2, 0.999, 0),
                                     (4096, 4, 0.8, 204), (100, 1, 0.7, 30)])
def test_blocks_for_sparsity(b, n, p, m):
    assert blocks_for_sparsity(b, n, p) == m


def test_block_count_is_exact_at_decimal_boundaries():
    # 10 * (1 - 0.7) is 2.9999999999999996 in binary floating point
    assert blocks_for_sparsity(10, 1, 0.7) == 3
    assert elements_for_sparsity(10, 0.7) == 3


# -- worked example ---------------------------------------------------------

def test_example_greedy(example):
    w, s = example
    sel = select_greedy(s, 3)
    assert sel.starts == (1, 3, 5)
    assert kept_score(w, sel) == 32


def test_example_greedy_pick_order(example):
    # the first pick is (w1, w2), then (w5, w6), then (w3, w4)
    _, s = example
    assert select_greedy(s, 1).starts == (1,)
    assert select_greedy(s, 2).starts == (1, 5)


def test_example_optimal(example):
    w, s = example
    sel = select_optimal(s, 3)
    assert sel.starts == (0, 2, 5)
    assert kept_score(w, sel) == 34


def test_example_bed_trace(example):
    w, s = example
    assert block_expansion(s, 3) == [1, 5, 0]
    assert block_division([0, 1, 5], 2) == [0, 2, 5]
    sel = select_bed(s, 3)
    assert sel.starts == (0, 2, 5)
    assert kept_score(w, sel) == 34


def test_example_abp(example):
    w, s = example
    assert aligned_scores(s).scores.tolist() == [12, -math.inf, 9, -math.inf, 8, -math.inf, 8, -math.inf]
    sel = select_abp(s, 3)
    assert sel.starts == (0, 2, 4)
    assert kept_score(w, sel) == 29


def test_example_ep(example):
    w, _ = example
    mask = select_ep(w, 0.25)
    assert sorted(np.asarray(COLUMN)[mask.mask.reshape(-1)].tolist()) == [2, 3, 6, 7, 8, 9]
    assert kept_score(w, mask) == 35


def test_example_efficacy(example):
    w, _ = example
    cfg = PruningConfig(2, 0.25)
    assert efficacy(w, cfg, 32) == 0.5
    assert efficacy(w, cfg, 34) == 5 / 6
    assert efficacy(w, cfg, 29) == 0.0
    assert efficacy(w, cfg, 35) == 1.0


def test_example_values_agree_with_oracles(example):
    w, s = example
    arr = w.array()
    scores = block_scores_bruteforce(arr, 2)
    assert scores == s.scores.tolist()
    best, argset, _ = best_by_enumeration(scores, 2, 3)
    assert (best, argset) == (34, (0, 2, 5))
    assert kept_l1_bruteforce(arr, (1, 3, 5), 2) == 32
    assert top_k_sum(COLUMN, elements_for_sparsity(8, 0.25)) == 35


# -- constructed instances --------------------------------------------------

def test_expansion_merges_neighbours_of_best_block():
    # (5, 6) scores 11 and its neighbours 4 and 7 carry 6, so the 2N window 4..7 wins
    w = column_layer([4, 0, 0, 1, 0, 6, 5, 6])
    s = score_blocks(w, 2)
    assert select_greedy(s, 2).starts == (0, 5)
    assert kept_score(w, select_greedy(s, 2)) == 15
    assert block_expansion(s, 2) == [5, 4]
    bed = select_bed(s, 2)
    assert bed.starts == (4, 6)
    assert kept_score(w, bed) == 17
    best, argset, _ = best_by_enumeration(block_scores_bruteforce(w.array(), 2), 2, 2)
    assert (best, argset) == (17, (4, 6))


def test_bed_equals_greedy_without_profitable_expansion():
    w = column_layer([9, 9, 0, 0, 8, 8, 0, 0, 7, 7, 0, 0])
    s = score_blocks(w, 2)
    assert select_bed(s, 3).starts == select_greedy(s, 3).starts == (0, 4, 8)
    best, argset, count = best_by_enumeration(block_scores_bruteforce(w.array(), 2), 2, 3)
    assert argset == (0, 4, 8) and best == 48


def test_optimal_returns_unique_dominant_set():
    w = column_layer([9, 9, 0, 0, 8, 8, 0, 0, 7, 7, 0, 0])
    s = score_blocks(w, 2)
    assert select_optimal(s, 3).starts == (0, 4, 8)
    assert select_optimal_indexset(s, 3).starts == (0, 4, 8)


def test_equal_scores_tie_break_low():
    s = score_blocks(WeightTensor.from_array(np.ones((8, 1, 1, 1), np.float32)), 2)
    assert select_greedy(s, 4).starts == (0, 2, 4, 6)
    assert select_abp(s, 2).starts == (0, 2)


def test_empty_selections(example):
    w, s = example
    for fn in (select_greedy, select_bed, select_optimal, select_optimal_indexset, select_abp):
        sel = fn(s, 0)
        assert sel.starts == () and kept_score(w, sel) == 0


def test_n_equal_c_out_gives_one_block_per_column():
    s = score_blocks(gen_tensor((4, 6, 1, 1), 2), 4)
    sel = select_optimal(s, 6)
    assert [k % 4 for k in sel.starts] == [0] * 6
    assert sorted(k // 4 for k in sel.starts) == list(range(6))


def test_abp_all_aligned_blocks():
    s = score_blocks(gen_tensor((8, 3, 1, 1), 1), 4)
    assert select_abp(s, 6).starts == (0, 4, 8, 12, 16, 20)


# -- errors -----------------------------------------------------------------

def test_infeasible_counts(example):
    _, s = example
    assert max_blocks(s) == 4
    for fn in (select_greedy, select_bed, select_optimal, select_optimal_indexset):
        with pytest.raises(InfeasibleSelectionError):
            fn(s, 5)
    with pytest.raises(InfeasibleSelectionError):
        select_abp(s, 5)
    with pytest.raises(SelectionError):
        select_greedy(s, -1)


def test_greedy_can_strand_itself():
    # picking (1, 2) first leaves no room for a second block
    w = column_layer([1, 5, 5, 1])
    s = score_blocks(w, 2)
    assert select_optimal(s, 2).starts == (0, 2)
    with pytest.raises(InfeasibleSelectionError):
        select_greedy(s, 2)


def test_dp_deadline():
    s = score_blocks(gen_tensor((64, 64, 1, 1), 0), 4)
    with pytest.raises(SelectionTimeout):
        select_optimal(s, 100, deadline=time.perf_counter())
    with pytest.raises(SelectionTimeout):
        select_optimal_indexset(s, 100, deadline=time.perf_counter())
    with pytest.raises(SelectionTimeout):
        select_optimal(s, 100, max_table_bytes=1000)


def test_efficacy_undefined_on_degenerate_layer():
    w = WeightTensor.from_array(np.zeros((4, 4, 1, 1), np.float32))
    with pytest.raises(EfficacyUndefined):
        efficacy(w, PruningConfig(2, 0.5), 0.0)
    with pytest.raises(EfficacyUndefined):
        efficacy_from(1.0, 2.0, 2.0 + 1e-13)


def test_selection_validation():
    with pytest.raises(SelectionError, match="overlap"):
        BlockSelection((0, 1), 2, 8, 1)
    with pytest.raises(SelectionError, match="boundary"):
        BlockSelection((7,), 2, 8, 1)
    with pytest.raises(SelectionError, match="out of range"):
        BlockSelection((8,), 2, 8, 1)
    with pytest.raises(SelectionError):
        BlockSelection((0,), 2, 8, 1, m=2)


def test_config_validation():
    with pytest.raises(SelectionError):
        PruningConfig(0, 0.5)
    with pytest.raises(SelectionError):
        PruningConfig(2, 1.0)
    with pytest.raises(SelectionError):
        PruningConfig(2, 0.5, method="random")


def test_select_dispatch(example):
    w, _ = example
    assert select(w, PruningConfig(2, 0.25, "optimal")).starts == (0, 2, 5)
    assert select(w, PruningConfig(2, 0.25, "greedy")).starts == (1, 3, 5)
    assert kept_score(w, select(w, PruningConfig(2, 0.25, "ep"))) == 35
    assert reference_scores(w, 2, 0.25) == (29, 35)


def test_p_zero_keeps_everything():
    w = gen_tensor((4, 4, 1, 1), 0)
    assert select_ep(w, 0.0).mask.all()


# -- properties -------------------------------------------------------------

layers = st.tuples(
    st.integers(1, 12), st.integers(1, 5), st.sampled_from([1, 2, 3, 4]),
    st.integers(0, 2**32 - 1), st.sampled_from([0.3, 0.5, 0.75, 0.9]),
)


def _instance(c_out, c_in, n, seed, p):
    assume(n <= c_out)
    arr = quantized_layer(np.random.default_rng(seed), c_out, c_in)
    w = WeightTensor.from_array(arr)
    s = score_blocks(w, n)
    m = min(blocks_for_sparsity(s.b, n, p), max_blocks(s))
    return w, s, m


@settings(max_examples=150, deadline=None)
@given(layers)
def test_all_selectors_produce_valid_selections(params):
    w, s, m = _instance(*params)
    for fn in (select_bed, select_optimal, select_optimal_indexset):
        sel = fn(s, m)
        assert sel.m == m and not sel.violations()
        assert sel.kernel_mask().sum() == m * s.n
        assert all(np.isfinite(s.scores[list(sel.starts)]))


@settings(max_examples=150, deadline=None)
@given(layers)
def test_dominance(params):
    w, s, m = _instance(*params)
    opt = kept_score(w, select_optimal(s, m))
    assert opt == kept_score(w, select_optimal_indexset(s, m))
    assert opt >= kept_score(w, select_bed(s, m))
    try:
        assert opt >= kept_score(w, select_greedy(s, m))
    except InfeasibleSelectionError:
        pass
    try:
        abp = select_abp(s, m)
    except InfeasibleSelectionError:
        pass
    else:
        assert opt >= kept_score(w, abp)
    # EP keeps at least N*m elements, so it bounds every block method
    p = params[4]
    full = blocks_for_sparsity(s.b, s.n, p)
    assert elements_for_sparsity(s.b, p) >= s.n * full
    if full == m:
        assert kept_score(w, select_ep(w, p)) >= opt


@settings(max_examples=150, deadline=None)
@given(layers)
def test_optimal_matches_enumeration(params):
    w, s, m = _instance(*params)
    assume(m <= 6 and math.comb(s.b, m) <= 200_000)
    best, _, _ = best_by_enumeration(s.scores.tolist(), s.n, m)
    assert kept_score(w, select_optimal(s, m)) == best


@settings(max_examples=300, deadline=None)
@given(
    st.integers(2, 14), st.integers(1, 4), st.sampled_from([2, 3, 4]), st.integers(0, 2**32 - 1),
    st.integers(1, 12), st.booleans(),
)
def test_expansion_matches_list_semantics(c_out, c_in, n, seed, m, ties):
    assume(n <= c_out)
    rng = np.random.default_rng(seed)
    arr = rng.integers(0, 4, (c_out, c_in, 1, 1)) if ties else rng.standard_normal((c_out, c_in, 1, 1))
    s = score_blocks(WeightTensor.from_array(arr.astype(np.float32)), n)
    want = bed_expansion_listsim(s.scores.tolist(), n, m)
    if want is None:
        with pytest.raises(InfeasibleSelectionError):
            block_expansion(s, m)
    else:
        assert block_expansion(s, m) == want


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 60), min_size=1, max_size=15, unique=True), st.integers(1, 5))
def test_division_separates_blocks(expanded, n):
    out = block_division(expanded, n)
    assert len(out) == len(expanded)
    assert all(b - a >= n for a, b in zip(out, out[1:]))
    assert out[0] == min(expanded)


@settings(max_examples=100, deadline=None)
@given(layers)
def test_abp_reduction(params):
    w, s, _ = _instance(*params)
    masked = aligned_scores(s)
    m = min(blocks_for_sparsity(s.b, s.n, params[4]), max_blocks(masked))
    assert kept_score(w, select_optimal(masked, m)) == kept_score(w, select_abp(s, m))


@settings(max_examples=50, deadline=None)
@given(layers)
def test_selectors_are_deterministic(params):
    _, s, m = _instance(*params)
    for fn in (select_bed, select_optimal, select_abp):
        try:
            assert fn(s, m) == fn(s, m)
        except InfeasibleSelectionError:
            pass


def test_bed_not_worse_than_greedy_on_average():
    rng = np.random.default_rng(0)
    diffs = []
    for _ in range(40):
        w = WeightTensor.from_array(rng.standard_normal((32, 16, 1, 1)).astype(np.float32))
        s = score_blocks(w, 4)
        m = blocks_for_sparsity(s.b, 4, 0.8)
        diffs.append(kept_score(w, select_bed(s, m)) - kept_score(w, select_greedy(s, m)))
    assert np.mean(diffs) >= 0


def test_sentinel_never_selected():
    s = score_blocks(gen_tensor((5, 3, 1, 1), 4), 3)
    assert (s.scores == NEG_INF).sum() == 6
    for fn in (select_greedy, select_bed, select_optimal):
        sel = fn(s, 3)
        assert all(k % 5 <= 2 for k in sel.starts)
