"""Greedy MAP subset selection with exact oracles.

The greedy routine grows a Cholesky factor of the selected submatrix one row
at a time, so every candidate's conditional variance is refreshed in ``O(t)``
per step and the whole run costs ``O(k^2 N)``.
"""

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import _backend
from .errors import InputError, KTooLarge, SingularConditioning, TooLarge
from .kernel import as_kernel, as_subset

EXACT_MAX_SUBSETS = 200_000


@dataclass(frozen=True)
class GreedyConfig:
    k: int
    epsilon: float = 1e-10

    def __post_init__(self):
        if self.k < 1:
            raise InputError(f"k must be >= 1, got {self.k}")
        if not self.epsilon > 0:
            raise InputError(f"epsilon must be > 0, got {self.epsilon}")


@dataclass
class SelectionResult:
    """Greedy output; ``order`` is the ranking used for ranked metrics."""

    order: list
    step_gain: list
    logdet_final: float
    stopped_early: bool
    kernel_ms: float = field(default=0.0, compare=False)
    select_ms: float = field(default=0.0, compare=False)

    @property
    def selected(self):
        return sorted(self.order)


def greedy_map(gamma, cfg, *, impl=None):
    """Fast greedy MAP inference.

    Args:
        gamma: ``N x N`` PSD kernel.
        cfg: :class:`GreedyConfig` (or an int ``k``).
        impl: backend module override; defaults to the compiled core when built.

    Stops early, without error, once the best remaining conditional variance
    is ``<= cfg.epsilon``.  Ties go to the lowest index.
    """
    if not isinstance(cfg, GreedyConfig):
        cfg = GreedyConfig(int(cfg))
    K = np.ascontiguousarray(as_kernel(gamma))
    n = K.shape[0]
    if cfg.k > n:
        raise KTooLarge(f"k={cfg.k} exceeds the number of items N={n}")
    backend = impl if impl is not None else _backend.impl
    order, gains, stopped = backend.greedy_map(K, cfg.k, float(cfg.epsilon))
    gains = [float(g) for g in gains]
    return SelectionResult(
        order=[int(i) for i in order],
        step_gain=gains,
        logdet_final=float(sum(math.log(g) for g in gains)),
        stopped_early=bool(stopped),
    )


def _combination_block(n, k, start, stop):
    combos = itertools.islice(itertools.combinations(range(n), k), start, stop)
    return np.array(list(combos), dtype=np.intp).reshape(-1, k)


def exact_map(gamma, k):
    """Brute-force argmax of ``det(gamma_S)`` over all ``|S| = k``.

    Ties resolve to the lexicographically smallest index list.
    """
    K = np.ascontiguousarray(as_kernel(gamma))
    n = K.shape[0]
    if not 1 <= k <= n:
        raise KTooLarge(f"k={k} must lie in [1, {n}]")
    total = math.comb(n, k)
    if total > EXACT_MAX_SUBSETS:
        raise TooLarge(f"C({n}, {k}) = {total} subsets exceeds {EXACT_MAX_SUBSETS}")
    subsets = _combination_block(n, k, 0, total)
    dets = _backend.subset_dets(K, subsets)
    best = int(np.argmax(dets))  # first maximum in lexicographic order
    return [int(i) for i in subsets[best]]


def conditional_gain(gamma, S, i):
    """``det(gamma_{S+i}) / det(gamma_S)`` from direct LU determinants.

    LU rather than the jittered Cholesky path keeps this oracle independent of
    the greedy recurrence and lets exactly singular conditioning sets surface.
    """
    K = as_kernel(gamma)
    idx = as_subset(S, K.shape[0])
    if not 0 <= i < K.shape[0]:
        raise InputError(f"item {i} out of bounds")
    if i in set(idx.tolist()):
        raise InputError(f"item {i} is already in the conditioning set")
    if idx.size == 0:
        return float(K[i, i])
    base = float(np.linalg.det(K[np.ix_(idx, idx)]))
    if base <= 1e-14:
        raise SingularConditioning(f"det of conditioning set is {base:.3e}")
    full = np.append(idx, i)
    return float(np.linalg.det(K[np.ix_(full, full)])) / base
