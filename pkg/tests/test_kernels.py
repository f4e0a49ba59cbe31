"""Backend agreement (numba vs numpy) and hand-checked attention values."""
import math

import numpy as np
import pytest

from crkt import kernels

pytestmark = pytest.mark.skipif(not kernels.HAS_NUMBA, reason="numba unavailable")


@pytest.fixture
def case():
    rng = np.random.default_rng(3)
    B, H, T, dk, dv = 3, 2, 7, 4, 5
    q = rng.normal(size=(B, H, T, dk))
    k = rng.normal(size=(B, H, T, dk))
    v = rng.normal(size=(B, H, T, dv))
    dist = np.abs(np.arange(T)[:, None] - np.arange(T)[None, :]).astype(float)
    mask = np.tril(np.ones((T, T), dtype=bool))[None].repeat(B, 0)
    mask[1, 5:, :] = False  # shorter sequence in the batch
    return q, k, v, 0.4, dist, mask


def _both(fn_numpy, fn_numba, *args):
    return fn_numpy(*args), fn_numba(*args)


def test_forward_backends_agree(case):
    q, k, v, eta, dist, mask = case
    (o1, w1, p1) = kernels._attention_forward_numpy(q, k, v, eta, dist, mask)
    (o2, w2, p2) = kernels._attention_forward_numba(q, k, v, eta, dist, mask)
    np.testing.assert_allclose(o1, o2, atol=1e-12)
    np.testing.assert_allclose(w1, w2, atol=1e-12)
    np.testing.assert_allclose(p1, p2, atol=1e-12)


def test_backward_backends_agree(case):
    q, k, v, eta, dist, mask = case
    _, _, p = kernels._attention_forward_numpy(q, k, v, eta, dist, mask)
    dout = np.random.default_rng(5).normal(size=v.shape[:-1] + (v.shape[-1],))
    g1 = kernels._attention_backward_numpy(q, k, v, eta, dist, mask, p, dout)
    g2 = kernels._attention_backward_numba(q, k, v, eta, dist, mask, p, dout)
    for a, b in zip(g1, g2):
        np.testing.assert_allclose(np.asarray(a), np.asarray(b), atol=1e-12)


def test_step_matches_full_row(case):
    q, k, v, eta, dist, mask = case
    out, w, _ = kernels._attention_forward_numpy(q, k, v, eta, dist, mask)
    b, h, i = 0, 1, 4
    row_np, w_np = kernels._attention_step_numpy(q[b, h, i], k[b, h, : i + 1], v[b, h, : i + 1], eta, dist[i, : i + 1])
    row_nb, w_nb = kernels._attention_step_numba(q[b, h, i], k[b, h, : i + 1], v[b, h, : i + 1], eta, dist[i, : i + 1])
    np.testing.assert_allclose(row_np, out[b, h, i], atol=1e-12)
    np.testing.assert_allclose(row_nb, out[b, h, i], atol=1e-12)
    np.testing.assert_allclose(w_np, w[b, h, i, : i + 1], atol=1e-12)


def test_hand_example_two_steps():
    # d_k = 1: q = [1, 1], k = [0, ln 2], v = [10, 20], eta = 0.
    # Row 1 raw scores: (1*0, 1*ln2) -> softmax (1/3, 2/3) -> maxout (0.5, 1).
    # Output row 1 = 0.5 * 10 + 1.0 * 20 = 25.
    q = np.array([[[[1.0], [1.0]]]])
    k = np.array([[[[0.0], [math.log(2.0)]]]])
    v = np.array([[[[10.0], [20.0]]]])
    dist = np.zeros((2, 2))
    mask = np.tril(np.ones((2, 2), dtype=bool))[None]
    out, w, _ = kernels.attention_forward(q, k, v, 0.0, dist, mask)
    np.testing.assert_allclose(w[0, 0, 1], [0.5, 1.0], atol=1e-12)
    np.testing.assert_allclose(out[0, 0, 1, 0], 25.0, atol=1e-12)
    # row 0 is a singleton: weight exactly 1, output = v[0]
    assert w[0, 0, 0, 0] == 1.0
    assert out[0, 0, 0, 0] == 10.0


def test_maxout_row_max_is_exactly_one(case):
    q, k, v, eta, dist, mask = case
    _, w, _ = kernels.attention_forward(q, k, v, eta, dist, mask)
    for b in range(w.shape[0]):
        for h in range(w.shape[1]):
            for i in range(w.shape[2]):
                if mask[b, i].any():
                    assert w[b, h, i].max() == 1.0
                else:
                    assert w[b, h, i].max() == 0.0


def test_eta_zero_disables_decay(case):
    q, k, v, _, dist, mask = case
    out_decay, _, _ = kernels.attention_forward(q, k, v, 0.0, dist, mask)
    out_nodist, _, _ = kernels.attention_forward(q, k, v, 0.0, np.zeros_like(dist), mask)
    np.testing.assert_allclose(out_decay, out_nodist, atol=1e-15)


def test_kernel_gradients_match_fd(case):
    q, k, v, eta, dist, mask = case
    rng = np.random.default_rng(7)
    dout = rng.normal(size=v.shape)

    def loss(qq, kk, vv, ee):
        out, _, _ = kernels._attention_forward_numpy(qq, kk, vv, ee, dist, mask)
        return float((out * dout).sum())

    _, _, p = kernels._attention_forward_numpy(q, k, v, eta, dist, mask)
    dq, dk, dv, deta = kernels._attention_backward_numpy(q, k, v, eta, dist, mask, p, dout)
    eps = 1e-6
    for arr, grad in ((q, dq), (k, dk), (v, dv)):
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(0, flat.size, 17):  # spot-check a spread of entries
            orig = flat[i]
            flat[i] = orig + eps
            fp = loss(q, k, v, eta)
            flat[i] = orig - eps
            fm = loss(q, k, v, eta)
            flat[i] = orig
            fd = (fp - fm) / (2 * eps)
            assert abs(gflat[i] - fd) < 1e-6 * max(1.0, abs(fd))
    fd_eta = (loss(q, k, v, eta + eps) - loss(q, k, v, eta - eps)) / (2 * eps)
    assert abs(deta - fd_eta) < 1e-6 * max(1.0, abs(fd_eta))


def test_backend_env_flag(monkeypatch):
    monkeypatch.setattr(kernels, "_backend", None)
    monkeypatch.setenv("CRKT_BACKEND", "numpy")
    assert kernels.get_backend() == "numpy"
    monkeypatch.setattr(kernels, "_backend", None)
    monkeypatch.setenv("CRKT_BACKEND", "bogus")
    with pytest.raises(ValueError):
        kernels.get_backend()
    monkeypatch.setattr(kernels, "_backend", None)
    monkeypatch.delenv("CRKT_BACKEND", raising=False)
    assert kernels.get_backend() in kernels.available_backends()
