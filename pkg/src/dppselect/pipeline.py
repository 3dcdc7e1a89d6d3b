"""End-to-end context selection, retrieval metrics, margin analysis and the
synthetic redundancy benchmark."""

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _backend
from .adapter import adapter_forward
from .errors import DPPError, EmptyGold, InputError, InvalidConfig, KTooLarge, MissingParams, MissingScores
from .kernel import as_embedding_matrix, build_kernel, fuse_quality, normalize_rows, quality_from_scores
from .map_infer import GreedyConfig, greedy_map
from .objective import LossConfig, TrainingExample, negative_subsets

METHODS = ("dpp", "topk")


@dataclass
class CandidatePool:
    query_id: str
    ids: list
    embeddings: np.ndarray
    gold: list
    scores: np.ndarray = None
    hop_count: int = None

    def __post_init__(self):
        self.embeddings = as_embedding_matrix(self.embeddings)
        self.ids = [str(i) for i in self.ids]
        n = len(self.ids)
        if self.embeddings.shape[0] != n:
            raise InputError(f"{self.query_id}: {n} ids but {self.embeddings.shape[0]} vectors")
        if len(set(self.ids)) != n:
            raise InputError(f"{self.query_id}: candidate ids are not unique")
        self.gold = sorted({int(g) for g in self.gold})
        if any(g < 0 or g >= n for g in self.gold):
            raise InputError(f"{self.query_id}: gold index out of bounds")
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
            if self.scores.shape[0] != n:
                raise InputError(f"{self.query_id}: {self.scores.shape[0]} scores for {n} candidates")

    @property
    def gold_ids(self):
        return [self.ids[g] for g in self.gold]

    def truncated(self, n):
        if n is None or n >= len(self.ids):
            return self
        return CandidatePool(
            self.query_id,
            self.ids[:n],
            self.embeddings[:n],
            [g for g in self.gold if g < n],
            None if self.scores is None else self.scores[:n],
            self.hop_count,
        )


@dataclass(frozen=True)
class PipelineConfig:
    pool_size: int = 20
    select_k: int = 10
    use_adapter: bool = False
    use_quality: bool = False
    epsilon: float = 1e-10
    gamma: float = 1.0

    def __post_init__(self):
        if self.select_k < 1:
            raise InvalidConfig("select_k must be >= 1")
        if self.pool_size is not None and self.select_k > self.pool_size:
            raise InvalidConfig(f"select_k={self.select_k} exceeds pool_size={self.pool_size}")


def pool_kernel(pool, params=None, cfg=PipelineConfig()):
    """Selection kernel of a pool: optional adapter, unit rows, cosine, optional quality."""
    E = pool.embeddings
    if cfg.use_adapter:
        if params is None:
            raise MissingParams("use_adapter is set but no adapter parameters were given")
        E, _ = adapter_forward(params, E)
    K = build_kernel(normalize_rows(E))
    if cfg.use_quality:
        if pool.scores is None:
            raise MissingScores(f"{pool.query_id}: quality fusion needs reranker scores")
        q, _ = quality_from_scores(pool.scores)
        K = fuse_quality(K, q)
    return K


def select_context(pool, params=None, cfg=PipelineConfig()):
    """Adapter-aware DPP selection over the first ``cfg.pool_size`` candidates."""
    pool = pool.truncated(cfg.pool_size)
    if cfg.select_k > len(pool.ids):
        raise KTooLarge(f"{pool.query_id}: k={cfg.select_k} but only {len(pool.ids)} candidates")
    t0 = time.perf_counter()
    K = pool_kernel(pool, params, cfg)
    t1 = time.perf_counter()
    result = greedy_map(K, GreedyConfig(cfg.select_k, cfg.epsilon))
    t2 = time.perf_counter()
    result.kernel_ms = 1e3 * (t1 - t0)
    result.select_ms = 1e3 * (t2 - t1)
    return result


def topk_context(pool, cfg=PipelineConfig()):
    """Standard top-k: retriever order, or reranker order when ``use_quality``."""
    pool = pool.truncated(cfg.pool_size)
    if cfg.select_k > len(pool.ids):
        raise KTooLarge(f"{pool.query_id}: k={cfg.select_k} but only {len(pool.ids)} candidates")
    order = list(range(len(pool.ids)))
    if cfg.use_quality:
        if pool.scores is None:
            raise MissingScores(f"{pool.query_id}: reranked top-k needs scores")
        order = sorted(order, key=lambda i: -pool.scores[i])  # stable
    return order[: cfg.select_k]


# --------------------------------------------------------------------------
# metrics


def _check_gold(gold):
    gold = set(gold)
    if not gold:
        raise EmptyGold("gold set is empty")
    return gold


def recall_at_k(ranked, gold, k):
    gold = _check_gold(gold)
    if k < 1:
        raise InputError("k must be >= 1")
    return len(set(ranked[:k]) & gold) / len(gold)


def hits_at_k(ranked, gold, k):
    gold = _check_gold(gold)
    if k < 1:
        raise InputError("k must be >= 1")
    return 1.0 if set(ranked[:k]) & gold else 0.0


def ndcg_at_k(ranked, gold, k):
    """Binary-relevance NDCG; the ideal ranking fills ``min(|gold|, k)`` slots."""
    gold = _check_gold(gold)
    if k < 1:
        raise InputError("k must be >= 1")
    dcg = sum(1.0 / math.log2(r + 2) for r, item in enumerate(ranked[:k]) if item in gold)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(len(gold), k)))
    return dcg / idcg


@dataclass
class MetricsReport:
    k: int
    groups: dict
    failed: int = 0
    failed_ids: list = field(default_factory=list)

    def to_dict(self):
        return {"k": self.k, "groups": self.groups, "failed": self.failed, "failed_ids": self.failed_ids}


def _group_key(hop):
    return "overall" if hop is None else str(hop)


def _aggregate(rows, k):
    buckets = {}
    for hop, m in rows:
        for key in ("overall",) + ((_group_key(hop),) if hop is not None else ()):
            buckets.setdefault(key, []).append(m)
    groups = {}
    for key in sorted(buckets, key=lambda s: (s != "overall", len(s), s)):
        ms = buckets[key]
        groups[key] = {
            "count": len(ms),
            f"ndcg@{k}": float(np.mean([m[0] for m in ms])),
            f"recall@{k}": float(np.mean([m[1] for m in ms])),
            f"hits@{k}": float(np.mean([m[2] for m in ms])),
        }
    return groups


def rank_pool(pool, params, cfg, method="dpp"):
    """Ranked candidate ids for one pool under ``method``."""
    if method == "topk":
        order = topk_context(pool, cfg)
    elif method == "dpp":
        order = select_context(pool, params, cfg).order
    else:
        raise InvalidConfig(f"unknown method {method!r}; expected one of {METHODS}")
    return [pool.ids[i] for i in order]


def evaluate(pools, params=None, cfg=PipelineConfig(), method="dpp", threads=1):
    """Mean NDCG/Recall/Hits at ``cfg.select_k``, overall and per hop count.

    Pools whose selection raises are excluded and counted in ``failed``.
    """
    if method not in METHODS:
        raise InvalidConfig(f"unknown method {method!r}; expected one of {METHODS}")
    k = cfg.select_k

    def one(pool):
        try:
            ranked = rank_pool(pool, params, cfg, method)
        except DPPError as exc:
            return pool, exc
        gold = pool.gold_ids
        return pool, (ndcg_at_k(ranked, gold, k), recall_at_k(ranked, gold, k), hits_at_k(ranked, gold, k))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            outcomes = list(ex.map(one, pools))  # map preserves input order
    else:
        outcomes = [one(p) for p in pools]

    rows, failed_ids = [], []
    for pool, out in outcomes:
        if isinstance(out, Exception):
            failed_ids.append(pool.query_id)
        else:
            rows.append((pool.hop_count, out))
    return MetricsReport(k=k, groups=_aggregate(rows, k), failed=len(failed_ids), failed_ids=failed_ids)


# --------------------------------------------------------------------------
# margins


@dataclass(frozen=True)
class MarginReport:
    det_pos: float
    det_neg_max: float
    det_neg_mean: float
    det_neg_std: float
    margin: float
    n_neg_subsets: int

    def to_dict(self):
        return {
            "det_pos": self.det_pos,
            "det_neg_max": self.det_neg_max,
            "det_neg_mean": self.det_neg_mean,
            "det_neg_std": self.det_neg_std,
            "margin": self.margin,
            "n_neg_subsets": self.n_neg_subsets,
        }


def margin_from_dets(det_pos, det_negs):
    det_negs = np.asarray(det_negs, dtype=np.float64)
    neg_max = float(np.max(det_negs))
    return MarginReport(
        det_pos=float(det_pos),
        det_neg_max=neg_max,
        det_neg_mean=float(np.mean(det_negs)),
        det_neg_std=float(np.std(det_negs)),
        margin=float(det_pos) - neg_max,
        n_neg_subsets=int(det_negs.size),
    )


def margin_analysis(embeddings, positives, negatives, k=None, params=None, cap=5000, seed=0):
    """Positive-subset determinant against the size-``k`` negative subsets.

    Uses raw embeddings, or adapter outputs when ``params`` is given.
    """
    E = as_embedding_matrix(embeddings)
    if params is not None:
        E, _ = adapter_forward(params, E)
    L = np.ascontiguousarray(build_kernel(normalize_rows(E)))
    Y = np.asarray(sorted(int(i) for i in positives), dtype=np.intp)
    k = len(Y) if k is None else k
    if k != len(Y):
        raise InputError(f"k={k} must equal the positive set size {len(Y)}")
    negs = negative_subsets(negatives, k, LossConfig(max_neg_subsets=cap, seed=seed))
    det_pos = float(_backend.subset_dets(L, Y[None, :])[0])
    det_negs = _backend.subset_dets(L, np.ascontiguousarray(negs))
    return margin_from_dets(det_pos, det_negs)


# --------------------------------------------------------------------------
# synthetic benchmark


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def synth_dataset(
    n_queries,
    d,
    k_pos,
    n_distractors=None,
    redundancy=0.95,
    seed=0,
    *,
    pool_size=20,
    noise=0.04,
    topic=0.4,
    signature=3.0,
    signed=False,
    drift=1.0,
):
    """Desk-scale multi-hop benchmark with redundant distractors.

    Per query, ``k_pos`` gold vectors come from a random orthonormal frame plus
    a shared topic direction and Gaussian noise.  Each distractor copies one
    gold vector: ``unit(r * gold + sqrt(1 - r^2) * z + noise)`` with
    ``r = redundancy``, where ``z`` is a random unit vector pushed along a
    dataset-wide nuisance axis (strength ``signature``, random sign when
    ``signed``) and away from the query topic (strength ``drift``).  Gold
    vectors have no component on the nuisance axis, so a learned map can
    separate the two families while raw cosine geometry cannot.

    Candidates are ordered by a retriever score that favours the first hop
    and its copies, so plain top-k is crowded by near-duplicates.

    Args:
        k_pos: an int, or a sequence of hop counts cycled over queries.
        n_distractors: defaults to ``pool_size - k_pos``.

    Returns:
        (pools, examples): :class:`CandidatePool` list and matching
        :class:`TrainingExample` list (negatives = pool minus gold).
    """
    hops = [int(k_pos)] if np.isscalar(k_pos) else [int(h) for h in k_pos]
    if not 0.0 <= redundancy <= 1.0:
        raise InvalidConfig("redundancy must lie in [0, 1]")
    if any(h < 1 for h in hops):
        raise InvalidConfig("k_pos must be >= 1")
    if max(hops) + 2 > d:
        raise InvalidConfig(f"k_pos={max(hops)} needs d >= k_pos + 2 (frame, topic and nuisance axes), got d={d}")
    rng = np.random.default_rng(seed)
    nuisance = _unit(rng.standard_normal(d))
    comp = np.eye(d) - np.outer(nuisance, nuisance)
    mix = math.sqrt(max(0.0, 1.0 - redundancy**2))

    pools, examples = [], []
    width = len(str(max(n_queries - 1, 0)))
    for qi in range(n_queries):
        kq = hops[qi % len(hops)]
        nd = (pool_size - kq) if n_distractors is None else int(n_distractors)
        if nd < 0:
            raise InvalidConfig(f"pool_size={pool_size} is smaller than k_pos={kq}")
        # frame + topic inside the nuisance complement
        basis, _ = np.linalg.qr(comp @ rng.standard_normal((d, kq + 1)))
        frame, topic_dir = basis[:, :kq].T, basis[:, kq]
        gold_noise = (comp @ rng.standard_normal((d, kq))).T
        gold = _unit(frame + topic * topic_dir + noise * gold_noise)

        src = rng.integers(0, kq, size=nd)
        signs = rng.choice([-1.0, 1.0], size=nd) if signed else np.ones(nd)
        z = _unit(_unit(rng.standard_normal((nd, d))) + signature * signs[:, None] * nuisance - drift * topic_dir)
        distract = redundancy * gold[src] + mix * z + noise * rng.standard_normal((nd, d))
        distract = _unit(distract) if nd else distract.reshape(0, d)

        rel = 0.9 * 0.75 ** np.arange(kq)
        score = np.concatenate([rel, rel[src] * rng.uniform(0.9, 1.08, size=nd)])
        vectors = np.vstack([gold, distract])
        order = np.argsort(-score, kind="stable")
        qid = f"q{qi:0{width}d}"
        ids = [f"{qid}-c{r:02d}" for r in range(len(order))]
        gold_idx = sorted(int(np.flatnonzero(order == g)[0]) for g in range(kq))
        pool = CandidatePool(qid, ids, vectors[order], gold_idx, score[order], hop_count=kq)
        pools.append(pool)
        examples.append(example_from_pool(pool))
    return pools, examples


def example_from_pool(pool):
    """Training tuple with negatives = pool minus gold."""
    negs = [i for i in range(len(pool.ids)) if i not in set(pool.gold)]
    return TrainingExample(pool.query_id, pool.embeddings, pool.gold, negs, pool.hop_count)


def stratified_split(items, ratios=(5, 1, 4), key=lambda x: getattr(x, "hop_count", None), seed=0):
    """Seeded per-stratum shuffle and proportional partition.

    Part sizes use largest-remainder rounding (ties go to the earlier part).
    Each part keeps the input order.  Returns a tuple with one list per ratio.
    """
    ratios = [float(r) for r in ratios]
    if not ratios or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise InvalidConfig(f"bad split ratios {ratios}")
    rng = np.random.default_rng(seed)
    strata = {}
    for pos, item in enumerate(items):
        strata.setdefault(key(item), []).append(pos)
    parts = [[] for _ in ratios]
    total = sum(ratios)
    for skey in sorted(strata, key=lambda s: (s is None, str(s))):
        members = strata[skey]
        n = len(members)
        if n == 0:
            continue
        exact = [n * r / total for r in ratios]
        sizes = [int(math.floor(x)) for x in exact]
        rest = n - sum(sizes)
        by_frac = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - sizes[i]), i))
        for i in by_frac[:rest]:
            sizes[i] += 1
        shuffled = [members[i] for i in rng.permutation(n)]
        start = 0
        for part, size in zip(parts, sizes):
            part.extend(shuffled[start : start + size])
            start += size
    return tuple([items[i] for i in sorted(part)] for part in parts)
