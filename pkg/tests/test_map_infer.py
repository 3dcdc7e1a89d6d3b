import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import typo_greedy
from conftest import full_rank_kernels, psd_kernels, random_psd
from dppselect.errors import InputError, KTooLarge, SingularConditioning, TooLarge
from dppselect.kernel import det_submatrix, fuse_quality
from dppselect.map_infer import GreedyConfig, conditional_gain, exact_map, greedy_map

HAND = np.array([[1.0, 0.9, 0.1], [0.9, 1.0, 0.1], [0.1, 0.1, 1.0]])


def test_config_validation():
    with pytest.raises(InputError):
        GreedyConfig(0)
    with pytest.raises(InputError):
        GreedyConfig(2, epsilon=0.0)


def test_identity_lowest_index():
    res = greedy_map(np.eye(5), GreedyConfig(3))
    assert res.order == [0, 1, 2]
    assert res.step_gain == [1.0, 1.0, 1.0]
    assert res.logdet_final == 0.0
    assert not res.stopped_early


def test_hand_3x3():
    res = greedy_map(HAND, GreedyConfig(2))
    assert res.order == [0, 2]
    assert res.step_gain[1] == pytest.approx(0.99, abs=1e-15)
    assert math.exp(res.logdet_final) == pytest.approx(0.99, abs=1e-14)


def test_hand_3x3_second_step_variances():
    # after picking 0 the conditional variances are 0.19 and 0.99
    assert conditional_gain(HAND, [0], 1) == pytest.approx(0.19, abs=1e-14)
    assert conditional_gain(HAND, [0], 2) == pytest.approx(0.99, abs=1e-14)


def test_identical_rows_stop_early():
    res = greedy_map(np.ones((2, 2)), GreedyConfig(2))
    assert res.order == [0]
    assert res.stopped_early


def test_epsilon_guards_first_pick():
    res = greedy_map(np.zeros((3, 3)), GreedyConfig(2))
    assert res.order == [] and res.stopped_early and res.logdet_final == 0.0


def test_k_too_large():
    with pytest.raises(KTooLarge):
        greedy_map(np.eye(3), GreedyConfig(4))


def test_int_config_shorthand():
    assert greedy_map(np.eye(4), 2).order == [0, 1]


def test_selected_is_sorted_order():
    res = greedy_map(HAND, 2)
    assert res.selected == [0, 2]


def test_exact_identity_lexicographic():
    assert exact_map(np.eye(4), 2) == [0, 1]


def test_exact_hand_3x3():
    assert exact_map(HAND, 2) == [0, 2]
    assert det_submatrix(HAND, [0, 2]) == pytest.approx(0.99, abs=1e-14)


def test_exact_full_set(rng):
    assert exact_map(random_psd(rng, 5), 5) == [0, 1, 2, 3, 4]


def test_exact_too_large():
    with pytest.raises(TooLarge):
        exact_map(np.eye(40), 10)


def test_conditional_gain_empty_set(rng):
    K = random_psd(rng, 4)
    assert conditional_gain(K, [], 2) == K[2, 2]


def test_conditional_gain_identity():
    assert conditional_gain(np.eye(5), [0, 3], 1) == pytest.approx(1.0, abs=1e-15)


def test_conditional_gain_singular():
    with pytest.raises(SingularConditioning):
        conditional_gain(np.ones((3, 3)), [0, 1], 2)


def test_conditional_gain_rejects_member():
    with pytest.raises(InputError):
        conditional_gain(np.eye(3), [1], 1)


def test_conditional_gain_schur_form(rng):
    K = random_psd(rng, 5)
    S, i = [0, 3], 4
    schur = K[i, i] - K[i, S] @ np.linalg.solve(K[np.ix_(S, S)], K[S, i])
    assert conditional_gain(K, S, i) == pytest.approx(schur, rel=1e-12)


@given(full_rank_kernels(min_n=2, max_n=50), st.integers(1, 10))
def test_step_gain_matches_conditional_gain(K, k):
    k = min(k, K.shape[0])
    res = greedy_map(K, GreedyConfig(k))
    assert len(res.order) == k
    for t, j in enumerate(res.order):
        assert res.step_gain[t] == pytest.approx(conditional_gain(K, res.order[:t], j), abs=1e-8)
    assert math.exp(res.logdet_final) == pytest.approx(det_submatrix(K, res.order), rel=1e-7)


@given(psd_kernels(min_n=1, max_n=20), st.integers(1, 8))
def test_result_invariants(K, k):
    k = min(k, K.shape[0])
    cfg = GreedyConfig(k)
    res = greedy_map(K, cfg)
    assert len(res.order) <= k
    assert len(set(res.order)) == len(res.order)
    assert all(0 <= i < K.shape[0] for i in res.order)
    assert all(g > cfg.epsilon for g in res.step_gain)
    assert res.logdet_final == pytest.approx(sum(math.log(g) for g in res.step_gain), abs=1e-8)
    assert res.stopped_early == (len(res.order) < k)


@given(full_rank_kernels(min_n=2, max_n=15), st.integers(0, 2**32 - 1))
def test_permutation_equivariance(K, seed):
    n = K.shape[0]
    perm = np.random.default_rng(seed).permutation(n)
    k = min(4, n)
    base = greedy_map(K, k).order
    # perm maps new index a to old index perm[a]
    moved = greedy_map(K[np.ix_(perm, perm)], k).order
    assert [int(perm[a]) for a in moved] == base


@given(full_rank_kernels(min_n=2, max_n=15), st.floats(0.5, 2.0), st.integers(0, 2**32 - 1))
def test_uniform_score_scaling(L, c, seed):
    q = np.random.default_rng(seed).uniform(0.3, 1.5, size=L.shape[0])
    k = min(4, L.shape[0])
    cfg = GreedyConfig(k, epsilon=1e-12)
    a = greedy_map(fuse_quality(L, q), cfg)
    b = greedy_map(fuse_quality(L, c * q), cfg)
    assert a.selected == b.selected


@given(psd_kernels(min_n=2, max_n=9), st.integers(1, 4))
def test_greedy_never_beats_exact(K, k):
    k = min(k, K.shape[0])
    best = max(np.linalg.det(K[np.ix_(S, S)]) for S in itertools.combinations(range(K.shape[0]), k))
    res = greedy_map(K, k)
    got = np.linalg.det(K[np.ix_(res.order, res.order)]) if len(res.order) == k else 0.0
    assert got <= best + 1e-9


def test_typo_update_breaks_conditional_gain(rng):
    K = random_psd(rng, 12)
    res = greedy_map(K, GreedyConfig(5), impl=typo_greedy)
    errs = [abs(res.step_gain[t] - conditional_gain(K, res.order[:t], j)) for t, j in enumerate(res.order)]
    assert max(errs) > 1e-6
