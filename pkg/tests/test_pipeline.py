import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import unit_rows
from dppselect.adapter import init_params
from dppselect.errors import (
    EmptyGold,
    InputError,
    InvalidConfig,
    KTooLarge,
    MissingParams,
    MissingScores,
    TooFewNegatives,
)
from dppselect.kernel import build_kernel
from dppselect.pipeline import (
    CandidatePool,
    PipelineConfig,
    evaluate,
    hits_at_k,
    margin_analysis,
    margin_from_dets,
    ndcg_at_k,
    recall_at_k,
    select_context,
    stratified_split,
    synth_dataset,
    topk_context,
)


def pool_of(E, gold=(0,), scores=None, hop=None, qid="q"):
    ids = [f"{qid}-{i}" for i in range(len(E))]
    return CandidatePool(qid, ids, E, list(gold), scores, hop)


# --------------------------------------------------------------------------
# pools and config


def test_pool_rejects_bad_gold():
    with pytest.raises(InputError):
        pool_of(np.eye(3), gold=[3])


def test_pool_rejects_duplicate_ids():
    with pytest.raises(InputError):
        CandidatePool("q", ["a", "a"], np.eye(2), [0])


def test_pool_rejects_score_length():
    with pytest.raises(InputError):
        pool_of(np.eye(3), scores=[1.0, 2.0])


def test_pool_truncation_drops_gold_beyond_n():
    p = pool_of(np.eye(4), gold=[1, 3], scores=[4, 3, 2, 1])
    t = p.truncated(2)
    assert t.ids == p.ids[:2] and t.gold == [1] and t.scores.tolist() == [4, 3]


def test_config_k_above_pool_size():
    with pytest.raises(InvalidConfig):
        PipelineConfig(pool_size=4, select_k=5)


# --------------------------------------------------------------------------
# selection


def test_orthogonal_pool_lowest_index():
    res = select_context(pool_of(np.eye(6)), cfg=PipelineConfig(pool_size=None, select_k=3))
    assert res.order == [0, 1, 2]
    assert res.kernel_ms >= 0 and res.select_ms >= 0


def test_uniform_scores_quality_noop(rng):
    E = rng.standard_normal((12, 8))
    p = pool_of(E, scores=np.full(12, 0.7))
    a = select_context(p, cfg=PipelineConfig(select_k=4))
    b = select_context(p, cfg=PipelineConfig(select_k=4, use_quality=True))
    assert a.selected == b.selected


def test_duplicates_never_both_selected(rng):
    base = unit_rows(rng, 3, 8)
    E = np.vstack([base, base, base])  # rows i, i+3, i+6 identical
    for k in (2, 3):
        res = select_context(pool_of(E), cfg=PipelineConfig(pool_size=None, select_k=k))
        assert len({i % 3 for i in res.order}) == len(res.order) == k


def test_missing_scores():
    with pytest.raises(MissingScores):
        select_context(pool_of(np.eye(3)), cfg=PipelineConfig(select_k=2, use_quality=True))
    with pytest.raises(MissingScores):
        topk_context(pool_of(np.eye(3)), PipelineConfig(select_k=2, use_quality=True))


def test_missing_params():
    with pytest.raises(MissingParams):
        select_context(pool_of(np.eye(3)), cfg=PipelineConfig(select_k=2, use_adapter=True))


def test_k_too_large_for_pool():
    with pytest.raises(KTooLarge):
        select_context(pool_of(np.eye(3)), cfg=PipelineConfig(select_k=4))


def test_adapter_off_path_purity(rng):
    p = pool_of(rng.standard_normal((10, 4)))
    cfg = PipelineConfig(select_k=4)
    base = select_context(p, None, cfg)
    for seed in range(3):
        assert select_context(p, init_params(4, seed), cfg).order == base.order


def test_adapter_path_changes_kernel(rng):
    p = pool_of(rng.standard_normal((10, 4)))
    a = select_context(p, init_params(4, 0), PipelineConfig(select_k=4, use_adapter=True))
    b = select_context(p, None, PipelineConfig(select_k=4))
    assert a.logdet_final != b.logdet_final


def test_topk_orders():
    p = pool_of(np.eye(4), scores=[0.1, 0.9, 0.5, 0.9])
    assert topk_context(p, PipelineConfig(select_k=3)) == [0, 1, 2]
    assert topk_context(p, PipelineConfig(select_k=3, use_quality=True)) == [1, 3, 2]


# --------------------------------------------------------------------------
# metrics


def test_recall_examples():
    assert recall_at_k(["a", "x", "c", "y"], {"a", "b", "c"}, 4) == pytest.approx(2 / 3)
    assert recall_at_k(["a", "b"], {"a", "b"}, 2) == 1.0
    assert recall_at_k(["x", "y"], {"a"}, 2) == 0.0


def test_hits_examples():
    assert hits_at_k(["x", "y"], {"a"}, 2) == 0.0
    assert hits_at_k(["x", "a"], {"a", "b"}, 2) == 1.0
    assert hits_at_k(["a", "b"], {"a", "b"}, 2) == 1.0


def test_ndcg_examples():
    assert ndcg_at_k(["a", "x", "b"], {"a", "b"}, 3) == pytest.approx(1.5 / 1.63093, abs=1e-5)
    assert ndcg_at_k(["a", "b", "x"], {"a", "b"}, 3) == 1.0
    assert ndcg_at_k(["x", "y"], {"a"}, 2) == 0.0


def test_ndcg_hand_value():
    expected = (1 + 1 / math.log2(4)) / (1 + 1 / math.log2(3))
    assert ndcg_at_k(["a", "x", "b"], {"a", "b"}, 3) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("fn", [recall_at_k, hits_at_k, ndcg_at_k])
def test_metrics_reject_empty_gold(fn):
    with pytest.raises(EmptyGold):
        fn(["a"], set(), 1)


@pytest.mark.parametrize("fn", [recall_at_k, hits_at_k, ndcg_at_k])
def test_metrics_reject_zero_k(fn):
    with pytest.raises(InputError):
        fn(["a"], {"a"}, 0)


@given(
    st.lists(st.integers(0, 15), min_size=1, max_size=15, unique=True),
    st.sets(st.integers(0, 15), min_size=1),
    st.integers(1, 15),
)
def test_metric_bounds(ranked, gold, k):
    r, h, n = recall_at_k(ranked, gold, k), hits_at_k(ranked, gold, k), ndcg_at_k(ranked, gold, k)
    assert 0.0 <= r <= 1.0 and 0.0 <= n <= 1.0 + 1e-12 and h in (0.0, 1.0)
    assert h >= r


# --------------------------------------------------------------------------
# evaluate


def test_evaluate_single_perfect_pool():
    rep = evaluate([pool_of(np.eye(4), gold=[0, 1], hop=2)], cfg=PipelineConfig(select_k=2))
    assert rep.groups["overall"] == {"count": 1, "ndcg@2": 1.0, "recall@2": 1.0, "hits@2": 1.0}


def test_evaluate_means_and_groups():
    good = pool_of(np.eye(4), gold=[0], hop=2, qid="a")
    bad = pool_of(np.eye(4), gold=[3], hop=2, qid="b")
    other = pool_of(np.eye(4), gold=[0], hop=3, qid="c")
    rep = evaluate([good, bad, other], cfg=PipelineConfig(select_k=1))
    assert {g: v["count"] for g, v in rep.groups.items()} == {"overall": 3, "2": 2, "3": 1}
    assert rep.groups["2"]["recall@1"] == 0.5
    assert rep.failed == 0


def test_evaluate_counts_failures():
    ok = pool_of(np.eye(4), gold=[0], qid="a")
    short = pool_of(np.eye(2), gold=[0], qid="b")
    rep = evaluate([ok, short], cfg=PipelineConfig(select_k=3))
    assert rep.failed == 1 and rep.failed_ids == ["b"]
    assert rep.groups["overall"]["count"] == 1


def test_evaluate_thread_invariant():
    pools, _ = synth_dataset(12, 12, [2, 3], seed=2)
    cfg = PipelineConfig(select_k=4)
    assert evaluate(pools, cfg=cfg).to_dict() == evaluate(pools, cfg=cfg, threads=4).to_dict()


def test_evaluate_unknown_method():
    with pytest.raises(InvalidConfig):
        evaluate([pool_of(np.eye(3))], cfg=PipelineConfig(select_k=1), method="mmr")


# --------------------------------------------------------------------------
# margins


def test_margin_from_table_rows():
    assert margin_from_dets(0.7396, [0.8451, 0.2]).margin == pytest.approx(-0.1055, abs=1e-12)
    assert margin_from_dets(0.9982, [0.3342, 0.1]).margin == pytest.approx(0.6640, abs=1e-12)


def test_margin_orthogonal_vs_duplicates():
    E = np.vstack([np.eye(4)[:2], np.tile(np.eye(4)[2], (3, 1))])
    rep = margin_analysis(E, [0, 1], [2, 3, 4])
    assert rep.det_pos == pytest.approx(1.0, abs=1e-12)
    assert rep.det_neg_max <= 1e-9 and rep.margin > 0.99
    assert rep.n_neg_subsets == 3


@given(st.integers(0, 2**32 - 1))
def test_margin_algebra(seed):
    rng = np.random.default_rng(seed)
    rep = margin_analysis(rng.standard_normal((8, 5)), [0, 1], list(range(2, 8)))
    assert rep.margin == rep.det_pos - rep.det_neg_max
    assert rep.det_neg_max >= rep.det_neg_mean - 1e-12


def test_margin_uses_adapter(rng):
    E = rng.standard_normal((7, 4))
    raw = margin_analysis(E, [0, 1], [2, 3, 4, 5, 6])
    ada = margin_analysis(E, [0, 1], [2, 3, 4, 5, 6], params=init_params(4, 0))
    assert raw.det_pos != ada.det_pos


def test_margin_k_mismatch():
    with pytest.raises(InputError):
        margin_analysis(np.eye(5), [0, 1], [2, 3, 4], k=3)


def test_margin_too_few_negatives():
    with pytest.raises(TooFewNegatives):
        margin_analysis(np.eye(4), [0, 1, 2], [3])


# --------------------------------------------------------------------------
# synthetic data


def test_synth_deterministic():
    a, ea = synth_dataset(6, 12, [2, 3], seed=4)
    b, eb = synth_dataset(6, 12, [2, 3], seed=4)
    assert all(np.array_equal(x.embeddings, y.embeddings) and x.gold == y.gold for x, y in zip(a, b))
    assert [e.negatives for e in ea] == [e.negatives for e in eb]


def test_synth_shapes_and_hops():
    pools, exs = synth_dataset(6, 12, [2, 3, 4], seed=0)
    assert [p.hop_count for p in pools] == [2, 3, 4, 2, 3, 4]
    assert all(len(p.ids) == 20 and len(p.gold) == p.hop_count for p in pools)
    assert all(np.allclose(np.linalg.norm(p.embeddings, axis=1), 1.0) for p in pools)
    for p, e in zip(pools, exs):
        assert e.positives == p.gold and sorted(e.positives + e.negatives) == list(range(20))


def test_synth_full_redundancy_duplicates():
    pools, _ = synth_dataset(4, 16, 3, redundancy=1.0, noise=0.0, seed=1)
    for p in pools:
        cos = p.embeddings @ p.embeddings[p.gold].T
        assert np.allclose(cos.max(axis=1), 1.0, atol=1e-12)


def test_synth_zero_redundancy_without_push_is_isotropic():
    pools, _ = synth_dataset(50, 32, 2, redundancy=0.0, noise=0.0, signature=0.0, drift=0.0, seed=1)
    cos = [np.abs(np.delete(p.embeddings, p.gold, axis=0) @ p.embeddings[p.gold].T) for p in pools]
    # mean |cos| of independent unit vectors in d = 32 is about sqrt(2 / (pi d))
    assert np.mean(np.concatenate(cos)) == pytest.approx(math.sqrt(2 / (math.pi * 32)), rel=0.1)


def test_synth_positive_volume():
    frame_only, _ = synth_dataset(200, 16, 3, noise=0.05, topic=0.0, seed=0)
    assert min(np.linalg.det(build_kernel(p.embeddings[p.gold])) for p in frame_only) >= 0.9
    default, _ = synth_dataset(200, 16, 3, noise=0.05, seed=0)
    assert np.mean([np.linalg.det(build_kernel(p.embeddings[p.gold])) for p in default]) >= 0.9


def test_synth_raw_space_is_redundant():
    pools, _ = synth_dataset(40, 32, [2, 3, 4], seed=0)
    negative = 0
    for p in pools:
        negs = [i for i in range(20) if i not in p.gold]
        negative += margin_analysis(p.embeddings, p.gold, negs).margin < 0
    assert negative >= 0.8 * len(pools)


def test_synth_rejects_small_dimension():
    with pytest.raises(InvalidConfig):
        synth_dataset(2, 4, 3)


def test_synth_rejects_bad_redundancy():
    with pytest.raises(InvalidConfig):
        synth_dataset(2, 8, 2, redundancy=1.5)


# --------------------------------------------------------------------------
# split


def test_split_single_stratum():
    parts = stratified_split(list(range(10)), key=lambda x: 0)
    assert [len(p) for p in parts] == [5, 1, 4]
    assert sorted(sum(parts, [])) == list(range(10))


def test_split_hundred():
    assert [len(p) for p in stratified_split(list(range(100)), key=lambda x: 0)] == [50, 10, 40]


def test_split_deterministic():
    a = stratified_split(list(range(30)), key=lambda x: x % 2, seed=3)
    assert a == stratified_split(list(range(30)), key=lambda x: x % 2, seed=3)
    assert a != stratified_split(list(range(30)), key=lambda x: x % 2, seed=4)


def test_split_two_strata_independent():
    items = [(h, i) for h in (2, 3) for i in range(10)]
    parts = stratified_split(items, key=lambda x: x[0])
    for h in (2, 3):
        assert [sum(1 for x in p if x[0] == h) for p in parts] == [5, 1, 4]


def test_split_largest_remainder():
    # 7 * (0.5, 0.1, 0.4) = (3.5, 0.7, 2.8): floors 3/0/2, two extra go to 0.8 and 0.7
    assert [len(p) for p in stratified_split(list(range(7)), key=lambda x: 0)] == [3, 1, 3]


def test_split_keeps_input_order():
    for part in stratified_split(list(range(20)), key=lambda x: 0, seed=9):
        assert part == sorted(part)


def test_split_default_key_uses_hop_count():
    pools, _ = synth_dataset(20, 8, [2, 3], seed=0)
    parts = stratified_split(pools)
    assert [sum(p.hop_count == 2 for p in part) for part in parts] == [5, 1, 4]


def test_split_bad_ratios():
    with pytest.raises(InvalidConfig):
        stratified_split([1, 2], ratios=(1, -1))
