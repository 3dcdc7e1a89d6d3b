import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dppselect.adapter import (
    FORMAT_VERSION,
    AdapterParams,
    adapter_backward,
    adapter_forward,
    gelu,
    gelu_grad,
    init_params,
    layer_norm,
    load_params,
    params_from_dict,
    params_to_dict,
    save_params,
)
from dppselect.errors import BadFormat, DimensionMismatch, InputError, StaleCache, VersionMismatch

H = 1e-5


def perturbed(d, seed):
    rng = np.random.default_rng(seed)
    p = init_params(d, seed)
    for _, arr in p.blocks():
        arr += 0.1 * rng.standard_normal(arr.shape)
    return p


def test_shapes():
    p = init_params(3, 0)
    assert p.W1.shape == (12, 3) and p.W2.shape == (3, 12)
    assert p.b1.shape == p.ln_scale.shape == p.ln_shift.shape == (12,)
    assert p.b2.shape == (3,)


def test_init_defaults():
    p = init_params(5, 0)
    assert np.all(p.ln_scale == 1.0) and np.all(p.ln_shift == 0.0)
    assert np.all(p.b1 == 0.0) and np.all(p.b2 == 0.0)


def test_init_xavier_bound():
    d = 8
    p = init_params(d, 3)
    bound = math.sqrt(6.0 / (5 * d))
    assert np.abs(p.W1).max() <= bound and np.abs(p.W2).max() <= bound
    assert np.abs(p.W1).max() > 0.8 * bound  # draws span the range


def test_init_deterministic():
    a, b = init_params(4, 7), init_params(4, 7)
    assert all(np.array_equal(x, y) for (_, x), (_, y) in zip(a.blocks(), b.blocks()))
    assert not np.array_equal(a.W1, init_params(4, 8).W1)


def test_init_rejects_zero_dim():
    with pytest.raises(InputError):
        init_params(0, 0)


def test_params_validate_shapes():
    p = init_params(2, 0)
    with pytest.raises(DimensionMismatch):
        AdapterParams(p.W1, p.b1, p.ln_scale, p.ln_shift, p.W2, np.zeros(3))


def test_params_reject_nonfinite():
    p = init_params(2, 0)
    W1 = p.W1.copy()
    W1[0, 0] = np.nan
    with pytest.raises(InputError):
        AdapterParams(W1, p.b1, p.ln_scale, p.ln_shift, p.W2, p.b2)


# --------------------------------------------------------------------------
# forward


def test_zero_network_outputs_zero(rng):
    out, _ = adapter_forward(AdapterParams.zeros(4), rng.standard_normal(4))
    assert np.array_equal(out, np.zeros(4))


def test_constant_path_outputs_bias(rng):
    p = init_params(4, 0)
    p.W1[:] = 0.0
    p.b2[:] = [1.0, -2.0, 0.5, 3.0]
    out, _ = adapter_forward(p, rng.standard_normal(4))
    assert np.array_equal(out, p.b2)


def test_output_shapes(rng):
    p = init_params(6, 1)
    assert adapter_forward(p, rng.standard_normal(6))[0].shape == (6,)
    assert adapter_forward(p, rng.standard_normal((5, 6)))[0].shape == (5, 6)


def test_forward_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        adapter_forward(init_params(3, 0), np.ones(4))


def test_forward_deterministic(rng):
    p, X = perturbed(5, 2), rng.standard_normal((4, 5))
    assert np.array_equal(adapter_forward(p, X)[0], adapter_forward(p, X)[0])


def test_batch_matches_rows(rng):
    p, X = perturbed(5, 2), rng.standard_normal((4, 5))
    batch = adapter_forward(p, X)[0]
    rows = np.vstack([adapter_forward(p, x)[0] for x in X])
    assert np.allclose(batch, rows, atol=1e-14)


def test_gelu_values():
    assert gelu(np.array(0.0)) == 0.0
    x = np.array([1.0])
    ref = 0.5 * (1 + math.tanh(math.sqrt(2 / math.pi) * (1 + 0.044715)))
    assert gelu(x)[0] == pytest.approx(ref, abs=1e-15)


def test_gelu_grad_matches_difference():
    x = np.linspace(-4, 4, 33)
    fd = (gelu(x + H) - gelu(x - H)) / (2 * H)
    assert np.allclose(gelu_grad(x), fd, atol=1e-9)


@given(st.integers(2, 64), st.integers(0, 2**32 - 1), st.floats(1e-2, 1e3))
def test_layer_norm_standardizes(h, seed, scale):
    x = scale * np.random.default_rng(seed).standard_normal((3, h))
    xhat, _, guarded = layer_norm(x)
    if guarded.any():
        return
    assert np.all(np.abs(xhat.mean(axis=1)) <= 1e-9)
    assert np.all(np.abs(xhat.var(axis=1) - 1.0) <= 1e-6)


def test_layer_norm_constant_row_is_zero():
    xhat, _, guarded = layer_norm(np.full((1, 8), 3.0))
    assert guarded.all() and np.array_equal(xhat, np.zeros((1, 8)))


# --------------------------------------------------------------------------
# backward


def test_zero_upstream_zero_grads(rng):
    p = perturbed(4, 0)
    _, cache = adapter_forward(p, rng.standard_normal((3, 4)))
    g, dX = adapter_backward(p, cache, np.zeros((3, 4)))
    assert not np.any(g.flat()) and not np.any(dX)


def test_b2_gradient_is_upstream(rng):
    p = perturbed(4, 0)
    _, cache = adapter_forward(p, rng.standard_normal(4))
    up = rng.standard_normal(4)
    g, _ = adapter_backward(p, cache, up)
    assert np.array_equal(g.b2, up)


def test_stale_cache(rng):
    p = perturbed(4, 0)
    _, cache = adapter_forward(p, rng.standard_normal((3, 4)))
    with pytest.raises(StaleCache):
        adapter_backward(p, cache, np.zeros((2, 4)))
    with pytest.raises(StaleCache):
        adapter_backward(perturbed(5, 0), cache, np.zeros((3, 5)))


def _fd_block(p, X, R, name):
    arr = getattr(p, name).reshape(-1)
    out = np.empty_like(arr)
    for i in range(arr.size):
        old = arr[i]
        arr[i] = old + H
        up = np.sum(R * adapter_forward(p, X)[0])
        arr[i] = old - H
        down = np.sum(R * adapter_forward(p, X)[0])
        arr[i] = old
        out[i] = (up - down) / (2 * H)
    return out


@pytest.mark.parametrize("name", ["W1", "b1", "ln_scale", "ln_shift", "W2", "b2"])
def test_finite_difference_per_block(name):
    rng = np.random.default_rng(5)
    p = perturbed(6, 5)
    X, R = rng.standard_normal((3, 6)), rng.standard_normal((3, 6))
    _, cache = adapter_forward(p, X)
    g, _ = adapter_backward(p, cache, R)
    fd = _fd_block(p, X, R, name)
    ana = getattr(g, name).reshape(-1)
    assert np.linalg.norm(ana - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-12)


def test_finite_difference_guarded_row():
    # a zero pre-activation row sits on the variance floor
    p = perturbed(3, 1)
    p.W1[:] = 0.0
    p.b1[:] = 1e-4 * np.arange(12)
    X, R = np.ones((1, 3)), np.random.default_rng(0).standard_normal((1, 3))
    _, cache = adapter_forward(p, X)
    assert cache["guarded"].all()
    g, _ = adapter_backward(p, cache, R)
    fd = _fd_block(p, X, R, "b1")
    assert np.allclose(g.b1, fd, rtol=1e-5, atol=1e-8)


# --------------------------------------------------------------------------
# serialization


def test_roundtrip(tmp_path):
    p = perturbed(4, 3)
    path = tmp_path / "a.json"
    save_params(p, path)
    q = load_params(path)
    assert all(np.max(np.abs(x - y)) <= 1e-15 for (_, x), (_, y) in zip(p.blocks(), q.blocks()))


def test_document_layout():
    doc = params_to_dict(init_params(2, 0))
    assert doc["format_version"] == FORMAT_VERSION and doc["d"] == 2
    assert len(doc["W1"]) == 8 and len(doc["W1"][0]) == 2


def test_truncated_file(tmp_path):
    path = tmp_path / "a.json"
    save_params(init_params(2, 0), path)
    path.write_text(path.read_text()[:40])
    with pytest.raises(BadFormat):
        load_params(path)


def test_version_mismatch():
    doc = params_to_dict(init_params(2, 0))
    doc["format_version"] = 99
    with pytest.raises(VersionMismatch):
        params_from_dict(doc)


def test_missing_block():
    doc = params_to_dict(init_params(2, 0))
    del doc["ln_shift"]
    with pytest.raises(BadFormat):
        params_from_dict(doc)


def test_declared_d_mismatch():
    doc = params_to_dict(init_params(2, 0))
    doc["d"] = 3
    with pytest.raises(BadFormat):
        params_from_dict(doc)


def test_expected_d_mismatch(tmp_path):
    path = tmp_path / "a.json"
    save_params(init_params(2, 0), path)
    with pytest.raises(DimensionMismatch):
        load_params(path, expected_d=3)


def test_not_an_object():
    with pytest.raises(BadFormat):
        params_from_dict(json.loads("[1, 2]"))
