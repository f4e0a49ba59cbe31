"""Engine gradients vs central finite differences, op by op."""
import numpy as np
import pytest

from crkt import autodiff as ad


def fd_check(fn, tensors, eps=1e-6, tol=1e-6):
    """Compare every tensor's analytic gradient against central differences."""
    out = fn()
    for t in tensors:
        t.grad = None
    out = fn()
    out.backward()
    for t in tensors:
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn().item()
            flat[i] = orig - eps
            fm = fn().item()
            flat[i] = orig
            fd = (fp - fm) / (2 * eps)
            assert abs(gflat[i] - fd) < tol * max(1.0, abs(fd)), (
                f"grad mismatch at {i}: {gflat[i]} vs {fd}"
            )


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def test_add_mul_broadcast(rng):
    a = ad.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = ad.Tensor(rng.normal(size=(4,)), requires_grad=True)
    fd_check(lambda: ((a + b) * (a - 2.0) / 3.0).sum(), [a, b])


def test_matmul_batched(rng):
    a = ad.Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    b = ad.Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    c = ad.Tensor(rng.normal(size=(2, 5, 3)), requires_grad=True)
    fd_check(lambda: ((a @ b) @ c).sum(), [a, b, c])


def test_pow_and_rsqrt(rng):
    a = ad.Tensor(rng.uniform(0.5, 2.0, size=(3, 3)), requires_grad=True)
    fd_check(lambda: (a.sum(axis=1) ** -0.5).sum(), [a])


def test_elementwise_chain(rng):
    x = ad.Tensor(rng.normal(size=(2, 5)), requires_grad=True)
    fd_check(
        lambda: (ad.sigmoid(x) + ad.softplus(x) + ad.exp(x * 0.1)).mean(), [x]
    )


def test_log_clip(rng):
    x = ad.Tensor(rng.uniform(0.1, 0.9, size=(6,)), requires_grad=True)
    fd_check(lambda: ad.log(ad.clip(x, 1e-12, 1 - 1e-12)).sum(), [x])


def test_relu_subgradient(rng):
    x = ad.Tensor(rng.normal(size=(4, 4)) + 0.05, requires_grad=True)
    fd_check(lambda: (ad.relu(x) * 2.0).sum(), [x])


def test_softmax_grad(rng):
    x = ad.Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    w = rng.normal(size=(3, 5))
    fd_check(lambda: (ad.softmax(x, axis=-1) * w).sum(), [x])


def test_max_routes_to_first_argmax():
    x = ad.Tensor(np.array([[1.0, 3.0, 3.0, 0.0]]), requires_grad=True)
    out = x.max(axis=-1)
    out.sum().backward()
    assert x.grad.tolist() == [[0.0, 1.0, 0.0, 0.0]]


def test_max_grad_fd(rng):
    x = ad.Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    fd_check(lambda: (x.max(axis=-1) ** 2).sum(), [x])


def test_where_mask(rng):
    x = ad.Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    mask = np.array([[True, False, True, True], [False, True, True, False]])
    fd_check(lambda: ad.softmax(ad.where_mask(mask, x, -np.inf)).sum(), [x])


def test_masked_softmax_exact_zero():
    x = ad.Tensor(np.array([1.0, 2.0, 3.0]))
    p = ad.softmax(ad.where_mask(np.array([True, False, True]), x, -np.inf))
    assert p.data[1] == 0.0


def test_concat_split(rng):
    a = ad.Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    b = ad.Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    w = rng.normal(size=(3, 5))
    fd_check(lambda: (ad.concat([a, b], axis=1) * w).sum(), [a, b])


def test_rows_scatter_add(rng):
    table = ad.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    idx = np.array([0, 2, 2, 1])
    fd_check(lambda: (ad.rows(table, idx) ** 2).sum(), [table])


def test_segment_sum(rng):
    x = ad.Tensor(rng.normal(size=(5, 2)), requires_grad=True)
    ids = np.array([0, 1, 0, 2, 1])
    fd_check(lambda: (ad.segment_sum(x, ids, 3) ** 2).sum(), [x])


def test_scatter_edges(rng):
    vals = ad.Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    src = np.array([0, 1, 2])
    dst = np.array([1, 2, 0])
    fd_check(lambda: (ad.scatter_edges(vals, src, dst, 3) ** 2).sum(), [vals])


def test_broadcast_to(rng):
    x = ad.Tensor(rng.normal(size=(1, 3)), requires_grad=True)
    w = rng.normal(size=(4, 3))
    fd_check(lambda: (ad.broadcast_to(x, (4, 3)) * w).sum(), [x])


def test_swapaxes_reshape(rng):
    x = ad.Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    fd_check(lambda: (x.swapaxes(1, 2).reshape(2, 12) ** 2).sum(), [x])


def test_grad_accumulates_over_reuse(rng):
    x = ad.Tensor(np.array([2.0]), requires_grad=True)
    y = x * x + x * 3.0
    y.sum().backward()
    assert np.allclose(x.grad, [7.0])


def test_no_grad_builds_no_graph():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = (x * 2.0).sum()
    assert y._parents == ()
    with pytest.raises(ValueError):
        y2 = x * 2.0  # graph active again
        (y2.sum() + 0.0).backward()
        x.grad = None
        (x * 2.0).backward()  # non-scalar


def test_backward_requires_scalar():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_numpy_left_operand_defers_to_tensor():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    y = np.array([1.0, 2.0, 3.0]) * x
    assert isinstance(y, ad.Tensor)
    assert y.data.tolist() == [1.0, 2.0, 3.0]
