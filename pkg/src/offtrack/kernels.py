"""Hot numeric kernels.

Each kernel has a loop implementation compiled with numba when
acceleration is on and a vectorised numpy counterpart. ``USE_NUMBA`` picks
the dispatch target, except for the GRU forward pass (see
:func:`gru_forward_kernel`).
"""

import numpy as np

from ._accel import USE_NUMBA, maybe_njit


# --------------------------------------------------------------------------
# GRU recurrence (time-major layout, masked carry)
# --------------------------------------------------------------------------
def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _gru_forward_numpy(gx, h0, mask, w_h, b_h):
    T, B, H3 = gx.shape
    H = H3 // 3
    out = np.empty((T, B, H), dtype=gx.dtype)
    r_buf = np.empty_like(out)
    z_buf = np.empty_like(out)
    n_buf = np.empty_like(out)
    ghn_buf = np.empty_like(out)
    h = h0.copy()
    for t in range(T):
        gh = h @ w_h + b_h
        g = gx[t]
        r = _sigmoid(g[:, :H] + gh[:, :H])
        z = _sigmoid(g[:, H:2 * H] + gh[:, H:2 * H])
        ghn = gh[:, 2 * H:]
        n = np.tanh(g[:, 2 * H:] + r * ghn)
        hn = (1.0 - z) * n + z * h
        m = mask[t][:, None]
        h = m * hn + (1.0 - m) * h
        out[t] = h
        r_buf[t] = r
        z_buf[t] = z
        n_buf[t] = n
        ghn_buf[t] = ghn
    return out, r_buf, z_buf, n_buf, ghn_buf


@maybe_njit
def _gru_forward_loop(gx, h0, mask, w_h, b_h):
    # Scalar loops keep every buffer in the input dtype (numba would
    # otherwise promote float32 arrays combined with float literals).
    T, B, H3 = gx.shape
    H = H3 // 3
    out = np.empty((T, B, H), dtype=gx.dtype)
    r_buf = np.empty_like(out)
    z_buf = np.empty_like(out)
    n_buf = np.empty_like(out)
    ghn_buf = np.empty_like(out)
    h = h0.copy()
    for t in range(T):
        gh = np.dot(h, w_h)
        for b in range(B):
            m = mask[t, b]
            for j in range(H):
                ar = gx[t, b, j] + gh[b, j] + b_h[j]
                az = gx[t, b, H + j] + gh[b, H + j] + b_h[H + j]
                ghn = gh[b, 2 * H + j] + b_h[2 * H + j]
                r = 0.5 * (1.0 + np.tanh(0.5 * ar))
                z = 0.5 * (1.0 + np.tanh(0.5 * az))
                n = np.tanh(gx[t, b, 2 * H + j] + r * ghn)
                hp = h[b, j]
                hn = (1.0 - z) * n + z * hp
                h[b, j] = m * hn + (1.0 - m) * hp
                out[t, b, j] = h[b, j]
                r_buf[t, b, j] = r
                z_buf[t, b, j] = z
                n_buf[t, b, j] = n
                ghn_buf[t, b, j] = ghn
    return out, r_buf, z_buf, n_buf, ghn_buf


def _gru_backward_numpy(dout, dh_last, h0, mask, w_h, out, r_buf, z_buf, n_buf, ghn_buf):
    T, B, H = out.shape
    dgx = np.empty((T, B, 3 * H), dtype=out.dtype)
    dw_h = np.zeros(w_h.shape, dtype=out.dtype)
    db_h = np.zeros(3 * H, dtype=out.dtype)
    dh = dh_last.copy()
    for t in range(T - 1, -1, -1):
        dh = dh + dout[t]
        h_prev = h0 if t == 0 else out[t - 1]
        m = mask[t][:, None]
        r, z, n, ghn = r_buf[t], z_buf[t], n_buf[t], ghn_buf[t]
        dhn = m * dh
        dh_prev = (1.0 - m) * dh + dhn * z
        dz = dhn * (h_prev - n)
        dan = dhn * (1.0 - z) * (1.0 - n * n)
        dar = dan * ghn * r * (1.0 - r)
        daz = dz * z * (1.0 - z)
        dgh = np.concatenate([dar, daz, dan * r], axis=1)
        dgx[t] = np.concatenate([dar, daz, dan], axis=1)
        dw_h += h_prev.T @ dgh
        db_h += dgh.sum(axis=0)
        dh = dh_prev + dgh @ w_h.T
    return dgx, dh, dw_h, db_h


@maybe_njit
def _gru_backward_loop(dout, dh_last, h0, mask, w_h, out, r_buf, z_buf, n_buf, ghn_buf):
    T, B, H = out.shape
    dgx = np.empty((T, B, 3 * H), dtype=out.dtype)
    dgh = np.empty((B, 3 * H), dtype=out.dtype)
    dw_h = np.zeros(w_h.shape, dtype=out.dtype)
    db_h = np.zeros(3 * H, dtype=out.dtype)
    w_h_t = np.ascontiguousarray(w_h.T)
    dh = dh_last.copy()
    for t in range(T - 1, -1, -1):
        h_prev = h0 if t == 0 else out[t - 1]
        for b in range(B):
            m = mask[t, b]
            for j in range(H):
                g = dh[b, j] + dout[t, b, j]
                r = r_buf[t, b, j]
                z = z_buf[t, b, j]
                n = n_buf[t, b, j]
                dhn = m * g
                dan = dhn * (1.0 - z) * (1.0 - n * n)
                dar = dan * ghn_buf[t, b, j] * r * (1.0 - r)
                daz = dhn * (h_prev[b, j] - n) * z * (1.0 - z)
                dh[b, j] = (1.0 - m) * g + dhn * z
                dgh[b, j] = dar
                dgh[b, H + j] = daz
                dgh[b, 2 * H + j] = dan * r
                dgx[t, b, j] = dar
                dgx[t, b, H + j] = daz
                dgx[t, b, 2 * H + j] = dan
        dw_h += np.dot(np.ascontiguousarray(h_prev.T), dgh)
        db_h += dgh.sum(axis=0)
        dh += np.dot(dgh, w_h_t)
    return dgx, dh, dw_h, db_h


def gru_forward_kernel(gx, h0, mask, w_h, b_h):
    """Run a masked GRU over a time-major sequence.

    Args:
        gx: (T, B, 3H) input projections ``x @ W_x + b_x`` in r|z|n order.
        h0: (B, H) initial state.
        mask: (T, B) 1 where the step is real, 0 where the state is carried.
        w_h: (H, 3H) recurrent weights.
        b_h: (3H,) recurrent bias.

    Returns:
        (out, r, z, n, ghn), each (T, B, H). ``out[t]`` is the state after
        step ``t``; the rest are cached for the backward pass. All arrays
        must share one float dtype.
    """
    # The compiled loop calls scalar libm tanh, which loses to numpy's SIMD
    # ufuncs at every batch size we measured (benchmarks/bench_kernels.py),
    # so the forward recurrence stays on numpy in both modes.
    return _gru_forward_numpy(gx, h0, mask, w_h, b_h)


def gru_backward_kernel(dout, dh_last, h0, mask, w_h, out, r_buf, z_buf, n_buf, ghn_buf):
    """Reverse pass of :func:`gru_forward_kernel`.

    Returns ``(dgx, dh0, dw_h, db_h)``.
    """
    fn = _gru_backward_loop if USE_NUMBA else _gru_backward_numpy
    return fn(dout, dh_last, h0, mask, w_h, out, r_buf, z_buf, n_buf, ghn_buf)


# --------------------------------------------------------------------------
# Greedy assignment
# --------------------------------------------------------------------------
@maybe_njit
def _greedy_match_loop(scores, valid):
    n, m = scores.shape
    row_used = np.zeros(n, dtype=np.bool_)
    col_used = np.zeros(m, dtype=np.bool_)
    pairs = np.empty((min(n, m), 2), dtype=np.int64)
    k = 0
    while True:
        best = -np.inf
        bi = -1
        bj = -1
        for i in range(n):
            if row_used[i]:
                continue
            for j in range(m):
                if col_used[j] or not valid[i, j]:
                    continue
                s = scores[i, j]
                if s > best or bi < 0:
                    best = s
                    bi = i
                    bj = j
        if bi < 0:
            break
        pairs[k, 0] = bi
        pairs[k, 1] = bj
        k += 1
        row_used[bi] = True
        col_used[bj] = True
    return pairs[:k]


def _greedy_match_numpy(scores, valid):
    s = np.where(valid, scores, -np.inf).astype(np.float64)
    live = valid.copy()
    pairs = []
    while live.any():
        flat = np.argmax(np.where(live, s, -np.inf))
        i, j = divmod(int(flat), s.shape[1])
        pairs.append((i, j))
        live[i, :] = False
        live[:, j] = False
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def greedy_match_indices(scores: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Repeatedly take the highest valid entry and retire its row and column.

    Ties resolve to the lowest (row, col) in row-major order. Returns a
    (k, 2) int array of matched (row, col) pairs in selection order.
    """
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    valid = np.ascontiguousarray(valid, dtype=np.bool_)
    if scores.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if USE_NUMBA:
        return _greedy_match_loop(scores, valid)
    return _greedy_match_numpy(scores, valid)


# --------------------------------------------------------------------------
# Radius neighbourhoods
# --------------------------------------------------------------------------
@maybe_njit
def _radius_mask_loop(dst, src, dst_ok, src_ok, radius):
    B, M, _ = dst.shape
    N = src.shape[1]
    out = np.zeros((B, M, N), dtype=np.bool_)
    r2 = radius * radius
    for b in range(B):
        for i in range(M):
            if not dst_ok[b, i]:
                continue
            for j in range(N):
                if not src_ok[b, j]:
                    continue
                dx = dst[b, i, 0] - src[b, j, 0]
                dy = dst[b, i, 1] - src[b, j, 1]
                if dx * dx + dy * dy <= r2:
                    out[b, i, j] = True
    return out


def radius_mask(dst: np.ndarray, src: np.ndarray, radius: float,
                dst_ok: np.ndarray = None, src_ok: np.ndarray = None) -> np.ndarray:
    """Boolean (B, M, N) mask of source points within ``radius`` of each destination.

    ``dst`` is (B, M, 2) and ``src`` is (B, N, 2); optional validity masks
    drop padded rows on either side. A radius of 0 or less selects nothing.
    """
    dst = np.ascontiguousarray(dst, dtype=np.float64)
    src = np.ascontiguousarray(src, dtype=np.float64)
    B, M = dst.shape[:2]
    N = src.shape[1]
    if dst_ok is None:
        dst_ok = np.ones((B, M), dtype=np.bool_)
    if src_ok is None:
        src_ok = np.ones((B, N), dtype=np.bool_)
    if radius <= 0 or M == 0 or N == 0:
        return np.zeros((B, M, N), dtype=np.bool_)
    if USE_NUMBA:
        return _radius_mask_loop(dst, src, np.ascontiguousarray(dst_ok, dtype=np.bool_),
                                 np.ascontiguousarray(src_ok, dtype=np.bool_), float(radius))
    d2 = ((dst[:, :, None, :] - src[:, None, :, :]) ** 2).sum(-1)
    return (d2 <= radius * radius) & dst_ok[:, :, None] & src_ok[:, None, :]
