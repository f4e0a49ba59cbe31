"""Hot attention kernels: numba-jitted with a pure-numpy fallback.

The temporal maxout attention (scores -> decay -> causal mask -> softmax ->
divide-by-row-max -> weighted sum) is the innermost loop of both training
and inference, so it ships in two interchangeable implementations:

* ``numba``  -- @njit kernels looping over batch/head/row, no large temporaries
* ``numpy``  -- vectorized einsum fallback

Selection: env var ``CRKT_BACKEND`` in {"numba", "numpy"}; default is numba
when importable. ``benchmarks/bench_kernels.py`` compares the two. Both
backends must agree bit-for-bit in tests up to summation-order tolerance.

Shapes: q, k are (B, H, T, d_k); v is (B, H, T, d_v); ``dist`` is the (T, T)
temporal distance matrix; ``mask`` is (B, T, T) boolean, True where a query
row may attend a key (callers pass causal-and-length masks). Returns the
attended output plus the per-row maxout weights and the softmax they came
from (the softmax is what backward needs).
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep, but degrade anyway
    HAS_NUMBA = False

_VALID_BACKENDS = ("numba", "numpy")
_backend = None


def available_backends():
    return _VALID_BACKENDS if HAS_NUMBA else ("numpy",)


def get_backend():
    """Resolve the active backend (env var read once, overridable via set_backend)."""
    global _backend
    if _backend is None:
        name = os.environ.get("CRKT_BACKEND", "numba" if HAS_NUMBA else "numpy")
        set_backend(name)
    return _backend


def set_backend(name):
    global _backend
    if name not in _VALID_BACKENDS:
        raise ValueError(f"unknown backend {name!r}; expected one of {_VALID_BACKENDS}")
    if name == "numba" and not HAS_NUMBA:
        raise ValueError("numba backend requested but numba is not importable")
    _backend = name


# ---------------------------------------------------------------------------
# numpy reference implementation
# ---------------------------------------------------------------------------


def _attention_forward_numpy(q, k, v, eta, dist, mask):
    B, H, T, dk = q.shape
    scale = 1.0 / np.sqrt(dk)
    decay = np.exp(-eta * dist)  # (T, T)
    scores = np.einsum("bhid,bhjd->bhij", q, k) * scale * decay
    m4 = mask[:, None, :, :]
    scores = np.where(m4, scores, -np.inf)
    row_has = m4.any(axis=-1, keepdims=True)
    shifted = scores - np.where(row_has, scores.max(axis=-1, keepdims=True), 0.0)
    e = np.where(m4, np.exp(shifted), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    p = np.where(row_has, e / np.where(denom == 0.0, 1.0, denom), 0.0)
    pmax = p.max(axis=-1, keepdims=True)
    w = np.where(row_has, p / np.where(pmax == 0.0, 1.0, pmax), 0.0)
    out = np.einsum("bhij,bhjd->bhid", w, v)
    return out, w, p


def _attention_backward_numpy(q, k, v, eta, dist, mask, p, dout):
    B, H, T, dk = q.shape
    scale = 1.0 / np.sqrt(dk)
    m4 = mask[:, None, :, :]
    pmax = p.max(axis=-1, keepdims=True)
    safe_max = np.where(pmax == 0.0, 1.0, pmax)
    w = p / safe_max
    dv = np.einsum("bhij,bhid->bhjd", w, dout)
    dw = np.einsum("bhid,bhjd->bhij", dout, v)
    # w = p / max(p): quotient rule, max routed to the first argmax per row
    amax = np.argmax(p, axis=-1)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, amax[..., None], 1.0, axis=-1)
    dp = dw / safe_max - onehot * (dw * w).sum(axis=-1, keepdims=True) / safe_max
    # softmax backward
    ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
    ds = np.where(m4, ds, 0.0)
    decay = np.exp(-eta * dist)
    g = ds * decay * scale  # d(raw dot)
    dq = np.einsum("bhij,bhjd->bhid", g, k)
    dk_ = np.einsum("bhij,bhid->bhjd", g, q)
    raw = np.einsum("bhid,bhjd->bhij", q, k) * scale * decay
    deta = float(np.sum(np.where(m4, ds * raw * (-dist), 0.0)))
    return dq, dk_, dv, deta


def _attention_step_numpy(q_row, K, V, eta, drow):
    dk = q_row.shape[0]
    s = (K @ q_row) / np.sqrt(dk) * np.exp(-eta * drow)
    e = np.exp(s - s.max())
    p = e / e.sum()
    w = p / p.max()
    return w @ V, w


# ---------------------------------------------------------------------------
# numba implementation
# ---------------------------------------------------------------------------

if HAS_NUMBA:
    from numba import njit

    @njit(cache=True)
    def _attention_forward_numba(q, k, v, eta, dist, mask):
        B, H, T, dkdim = q.shape
        dv = v.shape[3]
        scale = 1.0 / np.sqrt(dkdim)
        out = np.zeros((B, H, T, dv))
        w = np.zeros((B, H, T, T))
        p = np.zeros((B, H, T, T))
        s = np.empty(T)
        for b in range(B):
            for h in range(H):
                for i in range(T):
                    n = 0
                    smax = -1e300
                    for j in range(T):
                        if not mask[b, i, j]:
                            continue
                        dot = 0.0
                        for d in range(dkdim):
                            dot += q[b, h, i, d] * k[b, h, j, d]
                        val = dot * scale * np.exp(-eta * dist[i, j])
                        s[j] = val
                        n += 1
                        if val > smax:
                            smax = val
                    if n == 0:
                        continue
                    esum = 0.0
                    for j in range(T):
                        if mask[b, i, j]:
                            e = np.exp(s[j] - smax)
                            p[b, h, i, j] = e
                            esum += e
                    pmax = 0.0
                    for j in range(T):
                        if mask[b, i, j]:
                            p[b, h, i, j] /= esum
                            if p[b, h, i, j] > pmax:
                                pmax = p[b, h, i, j]
                    for j in range(T):
                        if mask[b, i, j]:
                            wij = p[b, h, i, j] / pmax
                            w[b, h, i, j] = wij
                            for d in range(dv):
                                out[b, h, i, d] += wij * v[b, h, j, d]
        return out, w, p

    @njit(cache=True)
    def _attention_backward_numba(q, k, v, eta, dist, mask, p, dout):
        B, H, T, dkdim = q.shape
        dvdim = v.shape[3]
        scale = 1.0 / np.sqrt(dkdim)
        dq = np.zeros_like(q)
        dk_ = np.zeros_like(k)
        dv = np.zeros_like(v)
        deta = 0.0
        dw = np.empty(T)
        dp = np.empty(T)
        ds = np.empty(T)
        for b in range(B):
            for h in range(H):
                for i in range(T):
                    pmax = 0.0
                    jstar = -1
                    for j in range(T):
                        if mask[b, i, j] and p[b, h, i, j] > pmax:
                            pmax = p[b, h, i, j]
                            jstar = j
                    if jstar < 0:
                        continue
                    dww_sum = 0.0
                    for j in range(T):
                        if not mask[b, i, j]:
                            continue
                        dot = 0.0
                        for d in range(dvdim):
                            dot += dout[b, h, i, d] * v[b, h, j, d]
                        dw[j] = dot
                        wij = p[b, h, i, j] / pmax
                        dww_sum += dot * wij
                        for d in range(dvdim):
                            dv[b, h, j, d] += wij * dout[b, h, i, d]
                    dpp_sum = 0.0
                    for j in range(T):
                        if mask[b, i, j]:
                            val = dw[j] / pmax
                            if j == jstar:
                                val -= dww_sum / pmax
                            dp[j] = val
                            dpp_sum += val * p[b, h, i, j]
                    for j in range(T):
                        if not mask[b, i, j]:
                            continue
                        ds[j] = p[b, h, i, j] * (dp[j] - dpp_sum)
                        dot = 0.0
                        for d in range(dkdim):
                            dot += q[b, h, i, d] * k[b, h, j, d]
                        decay = np.exp(-eta * dist[i, j])
                        g = ds[j] * decay * scale
                        for d in range(dkdim):
                            dq[b, h, i, d] += g * k[b, h, j, d]
                            dk_[b, h, j, d] += g * q[b, h, i, d]
                        deta += ds[j] * dot * scale * decay * (-dist[i, j])
        return dq, dk_, dv, deta

    @njit(cache=True)
    def _attention_step_numba(q_row, K, V, eta, drow):
        t, dkdim = K.shape
        dvdim = V.shape[1]
        scale = 1.0 / np.sqrt(dkdim)
        s = np.empty(t)
        smax = -1e300
        for j in range(t):
            dot = 0.0
            for d in range(dkdim):
                dot += q_row[d] * K[j, d]
            s[j] = dot * scale * np.exp(-eta * drow[j])
            if s[j] > smax:
                smax = s[j]
        esum = 0.0
        for j in range(t):
            s[j] = np.exp(s[j] - smax)
            esum += s[j]
        pmax = 0.0
        for j in range(t):
            s[j] /= esum
            if s[j] > pmax:
                pmax = s[j]
        out = np.zeros(dvdim)
        for j in range(t):
            s[j] /= pmax
            for d in range(dvdim):
                out[d] += s[j] * V[j, d]
        return out, s


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def _contig(*arrays):
    return tuple(np.ascontiguousarray(a, dtype=np.float64) for a in arrays)


def attention_forward(q, k, v, eta, dist, mask):
    """Maxout attention over a batch; returns (out, weights, softmax)."""
    q, k, v, dist = _contig(q, k, v, dist)
    mask = np.ascontiguousarray(mask, dtype=bool)
    if get_backend() == "numba":
        return _attention_forward_numba(q, k, v, float(eta), dist, mask)
    return _attention_forward_numpy(q, k, v, float(eta), dist, mask)


def attention_backward(q, k, v, eta, dist, mask, p, dout):
    q, k, v, dist, p, dout = _contig(q, k, v, dist, p, dout)
    mask = np.ascontiguousarray(mask, dtype=bool)
    if get_backend() == "numba":
        return _attention_backward_numba(q, k, v, float(eta), dist, mask, p, dout)
    return _attention_backward_numpy(q, k, v, float(eta), dist, mask, p, dout)


def attention_step(q_row, K, V, eta, drow):
    """One new attention row over cached keys/values (incremental inference)."""
    q_row, K, V, drow = _contig(q_row, K, V, drow)
    if get_backend() == "numba":
        return _attention_step_numba(q_row, K, V, float(eta), drow)
    return _attention_step_numpy(q_row, K, V, float(eta), drow)
