"""Self-check suite run by ``dppselect check``.

Each oracle recomputes a quantity by an independent route (subset
enumeration, direct determinants, finite differences) and reports the worst
discrepancy against its tolerance.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

from .adapter import adapter_backward, adapter_forward, init_params
from .errors import DPPError
from .kernel import det_submatrix, dpp_probability, partition_check
from .map_infer import GreedyConfig, conditional_gain, exact_map, greedy_map
from .objective import (
    LossConfig,
    TrainingExample,
    dml_raw,
    dml_smooth,
    example_loss,
    loss_and_grads,
    lse,
    negative_subsets,
    nll_loss,
    smooth_from_dets,
    softplus,
)

FD_STEP = 1e-5


@dataclass
class OracleResult:
    name: str
    passed: bool
    trials: int
    worst: float
    tolerance: float

    def to_dict(self):
        return asdict(self)


def random_psd(rng, n, rank=None, unit_diag=False):
    """``V V^T / r`` with Gaussian ``V``; full rank unless ``rank`` is given."""
    r = n + 2 if rank is None else rank
    V = rng.standard_normal((n, r))
    if unit_diag:
        V /= np.linalg.norm(V, axis=1, keepdims=True)
        return V @ V.T
    return V @ V.T / r


def check_partition(rng, trials):
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, 11))
        _, _, rel = partition_check(random_psd(rng, n, rank=int(rng.integers(1, n + 3))))
        worst = max(worst, rel)
    return OracleResult("partition_identity", worst < 1e-9, trials, worst, 1e-9)


def check_greedy_gains(rng, trials, impl=None):
    """Step gains against direct conditional determinants, plus telescoping."""
    worst_gain, worst_tele = 0.0, 0.0
    for _ in range(trials):
        n = int(rng.integers(2, 51))
        k = int(rng.integers(1, min(10, n) + 1))
        K = random_psd(rng, n)
        res = greedy_map(K, GreedyConfig(k), impl=impl)
        try:
            for t, j in enumerate(res.order):
                ref = conditional_gain(K, res.order[:t], j)
                worst_gain = max(worst_gain, abs(res.step_gain[t] - ref))
            direct = det_submatrix(K, res.order)
            worst_tele = max(worst_tele, abs(math.exp(res.logdet_final) - direct) / direct)
        except DPPError:
            worst_gain = worst_tele = math.inf
    return [
        OracleResult("greedy_step_gain", worst_gain <= 1e-8, trials, worst_gain, 1e-8),
        OracleResult("greedy_telescoping", worst_tele <= 1e-7, trials, worst_tele, 1e-7),
    ]


def check_greedy_vs_exact(rng, trials, impl=None):
    """Fraction of trials where greedy reaches half the exact MAP determinant."""
    good = 0
    for _ in range(trials):
        n = int(rng.integers(2, 13))
        k = int(rng.integers(1, min(4, n) + 1))
        # rank >= k keeps the optimum nonsingular; below that both sides are round-off
        K = random_psd(rng, n, rank=int(rng.integers(k, n + 3)))
        res = greedy_map(K, GreedyConfig(k), impl=impl)
        best = det_submatrix(K, exact_map(K, k))
        got = det_submatrix(K, res.order) if len(res.order) == k else 0.0
        good += got >= 0.5 * best - 1e-15
    frac = good / trials
    hand = np.array([[1.0, 0.9, 0.1], [0.9, 1.0, 0.1], [0.1, 0.1, 1.0]])
    hand_ok = greedy_map(hand, GreedyConfig(2), impl=impl).order == [0, 2] and exact_map(hand, 2) == [0, 2]
    return [
        OracleResult("greedy_vs_exact", frac >= 0.95, trials, 1.0 - frac, 0.05),
        OracleResult("greedy_hand_3x3", hand_ok, 1, 0.0 if hand_ok else 1.0, 0.0),
    ]


def check_smooth_bounds(rng, trials):
    """LSE sandwich, softplus over hinge, surrogate over raw loss, midpoint convexity."""
    worst_lse, worst_sp, worst_dom, worst_mid = 0.0, 0.0, 0.0, 0.0
    for _ in range(trials):
        m = int(rng.integers(1, 40))
        x = rng.normal(scale=3.0, size=m)
        for gamma in (0.5, 1.0, 4.0):
            f = lse(x, gamma)
            worst_lse = max(worst_lse, x.max() - f, f - x.max() - math.log(m) / gamma)
        w = rng.uniform(-20, 20)
        worst_sp = max(worst_sp, max(0.0, w) - softplus(w))

        n = int(rng.integers(3, 9))
        k = int(rng.integers(1, n // 2 + 1))
        L = random_psd(rng, n, unit_diag=True)
        perm = rng.permutation(n)
        Y = np.sort(perm[:k])
        negs = negative_subsets(tuple(int(i) for i in np.sort(perm[k:])), k, LossConfig())
        worst_dom = max(worst_dom, dml_raw(L, Y, negs) - dml_smooth(L, Y, negs))

        a = rng.uniform(0, 1, size=m + 1)
        b = rng.uniform(0, 1, size=m + 1)
        mid = smooth_from_dets((a[-1] + b[-1]) / 2, (a[:-1] + b[:-1]) / 2)
        avg = (smooth_from_dets(a[-1], a[:-1]) + smooth_from_dets(b[-1], b[:-1])) / 2
        worst_mid = max(worst_mid, mid - avg)
    return [
        OracleResult("lse_bounds", worst_lse <= 1e-12, trials, worst_lse, 1e-12),
        OracleResult("softplus_dominance", worst_sp <= 0.0, trials, worst_sp, 0.0),
        OracleResult("surrogate_dominance", worst_dom <= 0.0, trials, worst_dom, 0.0),
        OracleResult("midpoint_convexity", worst_mid <= 1e-12, trials, worst_mid, 1e-12),
    ]


def _rel_err(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / scale)


def _perturbed_params(d, rng):
    p = init_params(d, int(rng.integers(2**31)))
    for _, arr in p.blocks():
        arr += 0.1 * rng.standard_normal(arr.shape)
    return p


def _fd_grad(p, f):
    out = p.zeros_like()
    for (_, arr), (_, g) in zip(p.blocks(), out.blocks()):
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + FD_STEP
            up = f()
            flat[i] = old - FD_STEP
            down = f()
            flat[i] = old
            gflat[i] = (up - down) / (2 * FD_STEP)
    return out


def fd_example(seed, d=6, n=6, k=2):
    rng = np.random.default_rng(seed)
    p = _perturbed_params(d, rng)
    pool = rng.standard_normal((n, d))
    perm = rng.permutation(n)
    return p, TrainingExample(f"fd{seed}", pool, sorted(perm[:k]), sorted(perm[k:]))


def check_gradients(seeds, d=6, n=6, k=2):
    """Central differences on the adapter alone and on the full loss chain."""
    worst = {"adapter": 0.0, "dml": 0.0, "nll": 0.0}
    for seed in range(seeds):
        p, ex = fd_example(seed, d, n, k)
        rng = np.random.default_rng(10_000 + seed)
        R = rng.standard_normal((n, d))
        out, cache = adapter_forward(p, ex.pool)
        g, dX = adapter_backward(p, cache, R)
        fd = _fd_grad(p, lambda: float(np.sum(R * adapter_forward(p, ex.pool)[0])))
        X = ex.pool.copy()
        fdX = np.zeros_like(X)
        for idx in np.ndindex(X.shape):
            old = X[idx]
            X[idx] = old + FD_STEP
            up = float(np.sum(R * adapter_forward(p, X)[0]))
            X[idx] = old - FD_STEP
            down = float(np.sum(R * adapter_forward(p, X)[0]))
            X[idx] = old
            fdX[idx] = (up - down) / (2 * FD_STEP)
        worst["adapter"] = max(worst["adapter"], _rel_err(g.flat(), fd.flat()), _rel_err(dX, fdX))
        for kind in ("dml", "nll"):
            cfg = LossConfig(loss_kind=kind)
            _, g = loss_and_grads(p, ex, cfg)
            fd = _fd_grad(p, lambda: example_loss(p, ex, cfg))
            worst[kind] = max(worst[kind], _rel_err(g.flat(), fd.flat()))
    return [OracleResult(f"fd_gradient_{name}", w <= 1e-4, seeds, w, 1e-4) for name, w in worst.items()]


def check_nll(rng, trials):
    worst, worst_id = 0.0, 0.0
    for _ in range(trials):
        n = int(rng.integers(1, 9))
        L = random_psd(rng, n, unit_diag=True)
        k = int(rng.integers(1, n + 1))
        Y = np.sort(rng.permutation(n)[:k])
        worst = max(worst, abs(nll_loss(L, Y) + math.log(dpp_probability(L, Y))))
        worst_id = max(worst_id, abs(nll_loss(np.eye(n), Y) - n * math.log(2.0)))
    return [
        OracleResult("nll_probability", worst <= 1e-10, trials, worst, 1e-10),
        OracleResult("nll_identity", worst_id <= 1e-12, trials, worst_id, 1e-12),
    ]


def run_checks(trials=100, seed=0, greedy_impl=None):
    """Every oracle at ``trials`` instances (gradient checks use ``trials // 10`` seeds)."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    results = [check_partition(rng, trials)]
    results += check_greedy_gains(rng, trials, greedy_impl)
    results += check_greedy_vs_exact(rng, trials, greedy_impl)
    results += check_smooth_bounds(rng, trials)
    results += check_gradients(max(2, trials // 10))
    results += check_nll(rng, trials)
    return results

