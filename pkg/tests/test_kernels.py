import os
import subprocess
import sys

import numpy as np
import pytest

from offtrack import kernels as K
from offtrack._accel import USE_NUMBA


def reference_greedy(scores, valid):
    """Repeated global argmax over live entries, lowest (row, col) on ties."""
    s = np.array(scores, dtype=float)
    live = np.array(valid, dtype=bool)
    out = []
    while live.any():
        best = max((s[i, j], -i, -j) for i, j in zip(*np.nonzero(live)))
        i, j = -best[1], -best[2]
        out.append((i, j))
        live[i, :] = False
        live[:, j] = False
    return out


def random_matrix(rng):
    n, m = rng.integers(1, 9, size=2)
    # Coarse values so ties actually occur.
    s = rng.integers(0, 6, size=(n, m)) / 5.0 if rng.random() < 0.3 else rng.random((n, m))
    valid = rng.random((n, m)) > rng.uniform(0, 0.8)
    return s, valid


def test_greedy_match_examples():
    s = np.array([[0.95, 0.20], [0.90, 0.99]])
    v = np.ones_like(s, dtype=bool)
    assert K.greedy_match_indices(s, v).tolist() == [[1, 1], [0, 0]]
    v1 = np.zeros_like(v)
    v1[0, 1] = True
    assert K.greedy_match_indices(s, v1).tolist() == [[0, 1]]
    assert K.greedy_match_indices(s, ~v).shape == (0, 2)
    assert K.greedy_match_indices(np.zeros((0, 3)), np.zeros((0, 3), bool)).shape == (0, 2)


def test_greedy_match_tie_break_lowest_index():
    s = np.ones((3, 3))
    assert K.greedy_match_indices(s, s > 0).tolist() == [[0, 0], [1, 1], [2, 2]]


@pytest.mark.parametrize("impl", ["dispatch", "loop", "numpy"])
def test_greedy_match_against_reference(impl, rng):
    fn = {"dispatch": K.greedy_match_indices, "loop": K._greedy_match_loop, "numpy": K._greedy_match_numpy}[impl]
    for _ in range(300):
        s, v = random_matrix(rng)
        got = [tuple(p) for p in fn(np.ascontiguousarray(s, float), np.ascontiguousarray(v)).tolist()]
        assert got == reference_greedy(s, v)


def test_greedy_match_is_a_matching_and_padding_invariant(rng):
    for _ in range(200):
        s, v = random_matrix(rng)
        pairs = K.greedy_match_indices(s, v)
        assert len(set(pairs[:, 0])) == len(pairs) == len(set(pairs[:, 1]))
        assert all(v[i, j] for i, j in pairs)
        big_s = np.pad(s, ((0, 2), (0, 3)), constant_values=5.0)
        big_v = np.pad(v, ((0, 2), (0, 3)), constant_values=False)
        assert K.greedy_match_indices(big_s, big_v).tolist() == pairs.tolist()


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-5)])
def test_gru_kernels_loop_matches_numpy(dtype, tol, rng):
    T, B, H = 5, 7, 4
    gx = rng.normal(size=(T, B, 3 * H)).astype(dtype)
    h0 = rng.normal(size=(B, H)).astype(dtype)
    mask = (rng.random((T, B)) > 0.3).astype(dtype)
    w_h = (0.5 * rng.normal(size=(H, 3 * H))).astype(dtype)
    b_h = rng.normal(size=3 * H).astype(dtype)
    fa = K._gru_forward_numpy(gx, h0, mask, w_h, b_h)
    fb = K._gru_forward_loop(gx, h0, mask, w_h, b_h)
    for a, b in zip(fa, fb):
        assert a.dtype == b.dtype == dtype
        assert np.allclose(a, b, atol=tol, rtol=tol)
    dout = rng.normal(size=(T, B, H)).astype(dtype)
    dlast = rng.normal(size=(B, H)).astype(dtype)
    ba = K._gru_backward_numpy(dout, dlast, h0, mask, w_h, *fa)
    bb = K._gru_backward_loop(dout, dlast, h0, mask, w_h, *fa)
    for a, b in zip(ba, bb):
        assert np.allclose(a, b, atol=tol, rtol=tol)


def test_radius_mask_matches_numpy(rng):
    for _ in range(20):
        B, M, N = rng.integers(1, 5, size=3)
        dst = rng.uniform(-10, 10, (B, M, 2))
        src = rng.uniform(-10, 10, (B, N, 2))
        ok_d = rng.random((B, M)) > 0.2
        ok_s = rng.random((B, N)) > 0.2
        r = float(rng.uniform(0.1, 12))
        want = (((dst[:, :, None] - src[:, None]) ** 2).sum(-1) <= r * r) & ok_d[:, :, None] & ok_s[:, None]
        assert np.array_equal(K.radius_mask(dst, src, r, ok_d, ok_s), want)
        assert np.array_equal(K._radius_mask_loop(dst, src, ok_d, ok_s, r), want)
    assert not K.radius_mask(dst, src, 0.0).any()


def test_disable_flag_selects_numpy_backend():
    env = dict(os.environ, OFFTRACK_DISABLE_NUMBA="1")
    code = "from offtrack._accel import backend, USE_NUMBA; print(backend(), USE_NUMBA)"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["numpy", "False"]


@pytest.mark.skipif(not USE_NUMBA, reason="numba disabled")
def test_loops_are_compiled():
    assert hasattr(K._greedy_match_loop, "signatures")
    assert hasattr(K._gru_backward_loop, "signatures")
