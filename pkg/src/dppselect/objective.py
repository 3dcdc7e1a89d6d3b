"""Set-level training objectives for the adapter and the loop that optimizes them.

Two losses are available on the adapter kernel ``L`` (no quality fusion at
training time):

* ``dml``: smooth diverse-margin loss
  ``log(1 + [sum_Y' exp(gamma * (det L_Y' - det L_Y))] ** (1 / gamma))``,
  a convex (in determinant space) upper bound of the hinge
  ``[max_Y' det L_Y' - det L_Y]^+``.
* ``nll``: ``-log det L_Y + log det(L + I)``.
"""

import functools
import itertools
import math
from dataclasses import dataclass, replace

import numpy as np

from . import _backend
from .adapter import AdapterParams, adapter_backward, adapter_forward
from .errors import (
    DegeneratePositive,
    InputError,
    InvalidConfig,
    NumericalFailure,
    TooFewNegatives,
    TrainingAborted,
)
from .kernel import as_kernel, as_subset, build_kernel, logdet_plus_identity, logdet_submatrix, normalize_rows

LOSS_KINDS = ("dml", "nll")
SOFTPLUS_LINEAR = 30.0
DEGENERATE_DET = 1e-300


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 1.0
    max_neg_subsets: int = 5000
    seed: int = 0
    loss_kind: str = "dml"

    def __post_init__(self):
        if not self.gamma > 0:
            raise InvalidConfig(f"gamma must be > 0, got {self.gamma}")
        if self.max_neg_subsets < 1:
            raise InvalidConfig("max_neg_subsets must be >= 1")
        if self.loss_kind not in LOSS_KINDS:
            raise InvalidConfig(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")


@dataclass
class TrainingExample:
    query_id: str
    pool: np.ndarray
    positives: list
    negatives: list
    hop_count: int = None

    def __post_init__(self):
        self.pool = np.asarray(self.pool, dtype=np.float64)
        n = self.pool.shape[0]
        self.positives = as_subset(self.positives, n).tolist()
        self.negatives = as_subset(self.negatives, n).tolist()
        if set(self.positives) & set(self.negatives):
            raise InputError(f"{self.query_id}: positives and negatives overlap")
        if not self.positives:
            raise InputError(f"{self.query_id}: empty positive set")

    @property
    def k(self):
        return len(self.positives)


# --------------------------------------------------------------------------
# negatives


@functools.lru_cache(maxsize=4096)
def _negative_subsets_cached(negs, k, cap, seed):
    n = len(negs)
    total = math.comb(n, k)
    if total <= cap:
        out = np.array(list(itertools.combinations(negs, k)), dtype=np.intp).reshape(-1, k)
    else:
        rng = np.random.default_rng(seed)
        seen, rows = set(), []
        pool = np.asarray(negs, dtype=np.intp)
        while len(rows) < cap:
            pick = tuple(sorted(rng.choice(pool, size=k, replace=False).tolist()))
            if pick not in seen:
                seen.add(pick)
                rows.append(pick)
        out = np.array(rows, dtype=np.intp)
    out.setflags(write=False)
    return out


def negative_subsets(negatives, k, cfg=LossConfig()):
    """All size-``k`` subsets of ``negatives`` in lexicographic order, or
    ``cfg.max_neg_subsets`` distinct uniform samples when there are more.

    Returns an ``(m, k)`` integer array (read-only).
    """
    negs = tuple(sorted(int(i) for i in negatives))
    if k < 1:
        raise InputError("k must be >= 1")
    if len(negs) < k:
        raise TooFewNegatives(f"need at least {k} negatives, got {len(negs)}")
    return _negative_subsets_cached(negs, int(k), int(cfg.max_neg_subsets), int(cfg.seed))


# --------------------------------------------------------------------------
# scalar pieces


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x > SOFTPLUS_LINEAR, x, np.log1p(np.exp(np.minimum(x, SOFTPLUS_LINEAR))))
    return out if out.ndim else float(out)


def sigmoid(x):
    return 0.5 * (1.0 + math.tanh(0.5 * x))


def lse(x, gamma=1.0):
    """``(1/gamma) * log(sum(exp(gamma * x)))`` with max shift."""
    z = gamma * np.asarray(x, dtype=np.float64)
    top = float(np.max(z))
    return (top + math.log(float(np.sum(np.exp(z - top))))) / gamma


def hinge_from_dets(det_pos, det_negs):
    return max(float(np.max(det_negs)) - float(det_pos), 0.0)


def smooth_from_dets(det_pos, det_negs, gamma=1.0):
    return float(softplus(lse(np.asarray(det_negs) - det_pos, gamma)))


def smooth_det_gradient(det_pos, det_negs, gamma=1.0):
    """Partial derivatives of the smooth loss w.r.t. each determinant.

    Returns ``(w_negs, w_pos)``.  For ``gamma = 1`` the negative weights are
    ``exp(delta_i) / (1 + sum_j exp(delta_j))`` and ``w_pos = -sum(w_negs)``.
    """
    delta = np.asarray(det_negs, dtype=np.float64) - det_pos
    x = lse(delta, gamma)
    z = gamma * delta
    soft = np.exp(z - z.max())
    soft /= soft.sum()
    w_negs = sigmoid(x) * soft
    return w_negs, -float(np.sum(w_negs))


def _subset_array(negs, k):
    arr = np.asarray(negs, dtype=np.intp)
    if arr.ndim != 2 or arr.shape[1] != k or arr.shape[0] < 1:
        raise InputError(f"negative subsets must be a non-empty (m, {k}) array")
    return arr


def _dets(L, Y, negs):
    L = np.ascontiguousarray(as_kernel(L))
    Y = as_subset(Y, L.shape[0])
    negs = _subset_array(negs, Y.size)
    det_pos = float(_backend.subset_dets(L, Y[None, :])[0])
    det_negs = _backend.subset_dets(L, np.ascontiguousarray(negs))
    if not (np.isfinite(det_pos) and np.all(np.isfinite(det_negs))):
        raise NumericalFailure("non-finite subset determinant")
    return det_pos, det_negs


def dml_raw(L, Y, negs):
    """Hinge ``[max_Y' det(L_Y') - det(L_Y)]^+``."""
    return hinge_from_dets(*_dets(L, Y, negs))


def dml_smooth(L, Y, negs, gamma=1.0):
    """Smooth surrogate of :func:`dml_raw` (log-space, overflow free)."""
    det_pos, det_negs = _dets(L, Y, negs)
    return smooth_from_dets(det_pos, det_negs, gamma)


def nll_loss(L, Y):
    """``-log det(L_Y) + log det(L + I)``."""
    L = as_kernel(L)
    Y = as_subset(Y, L.shape[0])
    logdet_y = logdet_submatrix(L, Y)
    if not logdet_y > math.log(DEGENERATE_DET):
        raise DegeneratePositive(f"det(L_Y) underflows (log det = {logdet_y})")
    return -logdet_y + logdet_plus_identity(L)


def det_gradient(K_S):
    """``d det(K_S) / d K_S`` = transpose of the adjugate; fine for singular input."""
    A = np.ascontiguousarray(np.asarray(K_S, dtype=np.float64))
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InputError("det_gradient expects a square matrix")
    k = A.shape[0]
    _, adj = _backend.subset_dets_adj(A, np.arange(k, dtype=np.intp)[None, :])
    return adj[0].T.copy()


# --------------------------------------------------------------------------
# full chain


def _adapted_kernel(p, pool):
    U, cache = adapter_forward(p, pool)
    Vhat = normalize_rows(U)
    return build_kernel(Vhat), Vhat, U, cache


def example_loss(p, ex, cfg):
    """Forward only; the value :func:`loss_and_grads` differentiates."""
    L, *_ = _adapted_kernel(p, ex.pool)
    if cfg.loss_kind == "nll":
        return nll_loss(L, ex.positives)
    negs = negative_subsets(ex.negatives, ex.k, cfg)
    return dml_smooth(L, ex.positives, negs, cfg.gamma)


def loss_and_grads(p, ex, cfg, return_info=False):
    """Loss of one example and its exact gradient w.r.t. every adapter block.

    Chain: adapter -> row normalization -> ``L = V V^T`` -> subset
    determinants -> loss.  With ``return_info`` a dict with the determinants
    and the per-determinant weights is returned as a third element.
    """
    L, Vhat, U, cache = _adapted_kernel(p, ex.pool)
    n = L.shape[0]
    Y = np.asarray(ex.positives, dtype=np.intp)
    G = np.zeros((n, n))
    info = {}

    if cfg.loss_kind == "dml":
        negs = negative_subsets(ex.negatives, ex.k, cfg)
        det_negs, adj_negs = _backend.subset_dets_adj(L, np.ascontiguousarray(negs))
        det_pos_arr, adj_pos = _backend.subset_dets_adj(L, Y[None, :])
        det_pos = float(det_pos_arr[0])
        if not (np.isfinite(det_pos) and np.all(np.isfinite(det_negs))):
            raise NumericalFailure("non-finite subset determinant")
        loss = smooth_from_dets(det_pos, det_negs, cfg.gamma)
        w_negs, w_pos = smooth_det_gradient(det_pos, det_negs, cfg.gamma)
        # d det / d L_S = adj(L_S)^T
        np.add.at(G, (negs[:, :, None], negs[:, None, :]), w_negs[:, None, None] * np.swapaxes(adj_negs, 1, 2))
        G[np.ix_(Y, Y)] += w_pos * adj_pos[0].T
        info.update(det_pos=det_pos, det_negs=det_negs, neg_weights=w_negs, pos_weight=w_pos)
    else:
        loss = nll_loss(L, Y)
        LY = L[np.ix_(Y, Y)]
        G[np.ix_(Y, Y)] -= np.linalg.inv(LY).T
        G += np.linalg.inv(L + np.eye(n)).T

    if not np.isfinite(loss) or not np.all(np.isfinite(G)):
        raise NumericalFailure("non-finite loss or kernel gradient")

    dV = (G + G.T) @ Vhat
    norms = np.linalg.norm(U, axis=1)
    radial = np.einsum("ij,ij->i", dV, Vhat)
    dU = (dV - Vhat * radial[:, None]) / norms[:, None]
    grads, _ = adapter_backward(p, cache, dU)
    if return_info:
        return float(loss), grads, info
    return float(loss), grads


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptimState:
    m1: AdapterParams
    m2: AdapterParams
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, p, lr=1e-4, **kw):
        return cls(m1=p.zeros_like(), m2=p.zeros_like(), lr=lr, **kw)


def adam_step(p, g, st):
    """One bias-corrected Adam update; returns new ``(params, state)``."""
    t = st.step + 1
    c1 = 1.0 - st.beta1**t
    c2 = 1.0 - st.beta2**t
    new_p, new_m1, new_m2 = {}, {}, {}
    for name, theta in p.blocks():
        grad = getattr(g, name)
        if grad.shape != theta.shape:
            raise InputError(f"gradient block {name} has shape {grad.shape}, expected {theta.shape}")
        m1 = st.beta1 * getattr(st.m1, name) + (1.0 - st.beta1) * grad
        m2 = st.beta2 * getattr(st.m2, name) + (1.0 - st.beta2) * grad * grad
        new_p[name] = theta - st.lr * (m1 / c1) / (np.sqrt(m2 / c2) + st.eps)
        new_m1[name], new_m2[name] = m1, m2
    state = replace(st, m1=AdapterParams(**new_m1), m2=AdapterParams(**new_m2), step=t)
    return AdapterParams(**new_p), state


# --------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class EpochStat:
    epoch: int
    mean_loss: float
    skipped_examples: int


def _mean_grads(grads):
    out = {}
    for name, _ in grads[0].blocks():
        acc = np.zeros_like(getattr(grads[0], name))
        for g in grads:  # fixed order keeps sums bit-stable
            acc += getattr(g, name)
        out[name] = acc / len(grads)
    return AdapterParams(**out)


def train(dataset, p0, cfg=LossConfig(), epochs=20, batch=8, lr=1e-4, seed=0, log=None):
    """Minibatch Adam on the configured loss.

    Each epoch reshuffles with a generator seeded once from ``seed``.  Examples
    whose loss fails numerically are skipped and counted; a batch in which
    every example fails aborts the run with :class:`TrainingAborted`.

    Returns:
        (params, history) with one :class:`EpochStat` per epoch.
    """
    if not dataset:
        raise InputError("training set is empty")
    if batch < 1:
        raise InvalidConfig("batch must be >= 1")
    rng = np.random.default_rng(seed)
    p = p0.copy()
    state = OptimState.for_params(p, lr=lr)
    history = []
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(len(dataset))
        losses, skipped = [], 0
        for start in range(0, len(perm), batch):
            grads = []
            for idx in perm[start : start + batch]:
                try:
                    loss, g = loss_and_grads(p, dataset[idx], cfg)
                except NumericalFailure:
                    skipped += 1
                    continue
                losses.append(loss)
                grads.append(g)
            if not grads:
                raise TrainingAborted(f"epoch {epoch}: every example in a batch failed")
            p, state = adam_step(p, _mean_grads(grads), state)
        stat = EpochStat(epoch, float(np.mean(losses)), skipped)
        history.append(stat)
        if log is not None:
            log(stat)
    return p, history
