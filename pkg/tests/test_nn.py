import math

import numpy as np
import pytest

from offtrack.nn import (GRU, MLP, UGRU, Linear, NonFiniteGradient, ParamStore, SpatialAttention, Tensor,
                         adamw_step, dot_attention, grad_check, mlp_forward, no_grad, step_decay_lr)
from offtrack.nn import tensor as T
from offtrack.nn.layers import gru_cell_reference
from offtrack.nn.params import read_checkpoint_metadata

import gradcases


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


# -- tensor ops -------------------------------------------------------------
@pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "matmul", "exp", "log", "sqrt", "tanh", "sigmoid",
                                "softplus", "sin", "cos", "concat", "stack", "getitem", "flip", "sum", "mean",
                                "where", "masked_softmax", "power"])
def test_tensor_op_gradients(op, rng):
    a = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    b = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    m = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    cond = rng.random((3, 4)) > 0.5
    fns = {
        "add": (lambda x, y: x + y, [a, b]),
        "sub": (lambda x, y: x - y[0], [a, b]),  # broadcasting
        "mul": (lambda x, y: x * y, [a, b]),
        "div": (lambda x, y: x / y, [a, b]),
        "matmul": (lambda x, y: x @ y, [a, m]),
        "exp": (T.exp, [a]),
        "log": (T.log, [a]),
        "sqrt": (T.sqrt, [a]),
        "tanh": (T.tanh, [a]),
        "sigmoid": (T.sigmoid, [a]),
        "softplus": (T.softplus, [a]),
        "sin": (T.sin, [a]),
        "cos": (T.cos, [a]),
        "concat": (lambda x, y: T.concat([x, y], axis=0), [a, b]),
        "stack": (lambda x, y: T.stack([x, y], axis=1), [a, b]),
        "getitem": (lambda x: x[1:, ::2], [a]),
        "flip": (lambda x: T.flip(x, 1), [a]),
        "sum": (lambda x: x.sum(axis=0), [a]),
        "mean": (lambda x: x.mean(axis=1, keepdims=True), [a]),
        "where": (lambda x, y: T.where(cond, x, y), [a, b]),
        "masked_softmax": (lambda x: T.masked_softmax(x, cond | np.eye(3, 4, dtype=bool)), [a]),
        "power": (lambda x: T.power(x, 3), [a]),
    }
    f, inputs = fns[op]
    assert grad_check(f, inputs, tol=1e-6).passed


def test_backward_accumulates_and_no_grad(rng):
    a = Tensor(rng.normal(size=3), requires_grad=True)
    (a * a).sum().backward()
    (a * 2.0).sum().backward()
    assert np.allclose(a.grad, 2 * a.data + 2.0)
    with no_grad():
        y = a * a
    assert y._backward is None
    with pytest.raises(ValueError):
        (a * 1.0).backward()


def test_masked_softmax_rows_sum_to_one(rng):
    x = Tensor(rng.normal(size=(5, 6)) * 10)
    mask = rng.random((5, 6)) > 0.5
    mask[0] = False
    mask[1, 0] = True
    w = T.masked_softmax(x, mask).data
    live = mask.any(axis=1)
    assert np.allclose(w[live].sum(axis=1), 1.0, atol=1e-6)
    assert np.all(w[~live] == 0) and np.all(w[~mask] == 0)


# -- MLP ----------------------------------------------------------------------
def test_mlp_identity_and_scalar_example():
    st = ParamStore()
    lin = Linear(st, "l", 3, 3, np.random.default_rng(0))
    lin.w.data = np.eye(3)
    lin.b.data = np.zeros(3)
    x = Tensor(np.arange(6.0).reshape(2, 3))
    assert np.array_equal(mlp_forward(x, [lin], "linear").data, x.data)
    one = Linear(st, "one", 1, 1, np.random.default_rng(0))
    one.w.data = np.array([[2.0]])
    one.b.data = np.array([1.0])
    assert mlp_forward(Tensor([[3.0]]), [one], ["linear"]).item() == 7.0


def test_linear_shape_error_names_shapes():
    st = ParamStore()
    lin = Linear(st, "l", 3, 2, np.random.default_rng(0))
    with pytest.raises(ValueError, match=r"\(4, 5\).*\(3, 2\)"):
        lin(Tensor(np.zeros((4, 5))))


# -- GRU / UGRU -----------------------------------------------------------
def _scalar_gru(x, h, p):
    """H=1, D=1 GRU step written out by hand (gate order r, z, n)."""
    wx, bx, wh, bh = (np.ravel(p[k]) for k in ("w_x", "b_x", "w_h", "b_h"))
    r = sig(wx[0] * x + bx[0] + wh[0] * h + bh[0])
    z = sig(wx[1] * x + bx[1] + wh[1] * h + bh[1])
    n = math.tanh(wx[2] * x + bx[2] + r * (wh[2] * h + bh[2]))
    return (1 - z) * n + z * h


def test_gru_single_step_scalar_oracle():
    rng = np.random.default_rng(3)
    st = ParamStore()
    g = GRU(st, "g", 1, 1, rng)
    p = {k: st[f"g.{k}"].data for k in ("w_x", "b_x", "w_h", "b_h")}
    out, h = g(Tensor([[[0.7]]]), Tensor([[-0.2]]))
    assert out.shape == (1, 1, 1)
    assert h.item() == pytest.approx(_scalar_gru(0.7, -0.2, p), abs=1e-12)


def test_gru_zero_weights_give_zero_outputs():
    st = ParamStore()
    g = GRU(st, "g", 3, 4, np.random.default_rng(0))
    for _, t in st.items():
        t.data[:] = 0
    out, h = g(Tensor(np.random.default_rng(1).normal(size=(2, 5, 3))))
    assert np.all(out.data == 0) and np.all(h.data == 0)


def test_gru_last_output_is_final_state_and_mask_carries(rng):
    st = ParamStore()
    g = GRU(st, "g", 2, 3, rng)
    x = Tensor(rng.normal(size=(2, 4, 2)))
    mask = np.array([[1, 1, 0, 0], [1, 1, 1, 1]], float)
    out, h = g(x, mask=mask)
    assert np.allclose(out.data[:, -1], h.data)
    assert np.allclose(out.data[0, 1], out.data[0, 3])
    short, _ = g(x[:1, :2])
    assert np.allclose(short.data[0, -1], h.data[0])
    with pytest.raises(ValueError):
        g(Tensor(np.zeros((2, 4, 5))))
    with pytest.raises(ValueError):
        g(x, Tensor(np.zeros((3, 3))))


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_fused_scan_matches_composed_cells(dtype, rng):
    st = ParamStore(dtype)
    g = GRU(st, "g", 3, 5, rng)
    st.astype(dtype)
    x = Tensor(rng.normal(size=(4, 6, 3)).astype(dtype), requires_grad=True)
    h0 = Tensor(rng.normal(size=(4, 5)).astype(dtype), requires_grad=True)
    out, _ = g(x, h0)
    (out * out).sum().backward()
    fused = [out.data, x.grad, h0.grad] + [st[k].grad for k in st.names()]
    st.zero_grad()
    x.grad = h0.grad = None
    h = h0
    steps = []
    for t in range(6):
        h = gru_cell_reference(x[:, t], h, g)
        steps.append(h)
    ref = T.stack(steps, axis=1)
    (ref * ref).sum().backward()
    composed = [ref.data, x.grad, h0.grad] + [st[k].grad for k in st.names()]
    tol = 1e-12 if dtype == np.float64 else 1e-5
    for a, b in zip(fused, composed):
        assert np.allclose(a, b, atol=tol, rtol=tol)


def test_ugru_single_step_is_two_chained_cells():
    rng = np.random.default_rng(5)
    st = ParamStore()
    u = UGRU(st, "u", 1, 1, rng)
    pf = {k: st[f"u.fwd.{k}"].data for k in ("w_x", "b_x", "w_h", "b_h")}
    pb = {k: st[f"u.bwd.{k}"].data for k in ("w_x", "b_x", "w_h", "b_h")}
    out, h = u(Tensor([[[0.4]]]), Tensor([[0.1]]))
    want = _scalar_gru(0.4, _scalar_gru(0.4, 0.1, pf), pb)
    assert h.item() == pytest.approx(want, abs=1e-12)
    assert out.data[0, 0, 0] == pytest.approx(want, abs=1e-12)


def test_ugru_every_output_sees_every_input(rng):
    st = ParamStore()
    u = UGRU(st, "u", 2, 3, rng)
    x = Tensor(rng.normal(size=(1, 5, 2)), requires_grad=True)
    for t in range(5):
        x.grad = None
        out, _ = u(x)
        assert out.shape == (1, 5, 3)
        out[:, t].sum().backward()
        assert np.all(np.abs(x.grad[0]).sum(axis=1) > 0)


# -- attention -------------------------------------------------------------
def test_dot_attention_examples(rng):
    q = Tensor(rng.normal(size=(3, 2)))
    v1 = Tensor([[1.0, -2.0, 3.0]])
    assert np.allclose(dot_attention(q, Tensor(rng.normal(size=(1, 2))), v1).data, v1.data)
    k_same = Tensor(np.ones((4, 2)))
    v = Tensor(rng.normal(size=(4, 3)))
    assert np.allclose(dot_attention(q, k_same, v).data, v.data.mean(axis=0))
    # Scores (0, ln 3) -> weights (1/4, 3/4). With d=1 the 1/sqrt(d) scale is 1.
    out = dot_attention(Tensor([[1.0]]), Tensor([[0.0], [math.log(3.0)]]), Tensor([[4.0], [8.0]]))
    assert out.item() == pytest.approx(0.25 * 4 + 0.75 * 8, abs=1e-12)


def test_dot_attention_all_masked_gives_zero_and_flag(rng):
    q, k, v = (Tensor(rng.normal(size=s)) for s in ((2, 3), (4, 3), (4, 2)))
    mask = np.array([[False] * 4, [True, False, False, False]])
    out, empty = dot_attention(q, k, v, mask, return_empty=True)
    assert empty.tolist() == [True, False]
    assert np.all(out.data[0] == 0) and np.allclose(out.data[1], v.data[0])
    assert np.all(np.isfinite(out.data))


def test_spatial_attention_radius_and_reduction(rng):
    st = ParamStore()
    sa = SpatialAttention(st, "sa", 3, 2, 4, rng)
    dst = Tensor(rng.normal(size=(1, 3, 3)))
    src = Tensor(rng.normal(size=(1, 4, 2)))
    dpos = np.array([[[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]]])
    spos = dpos[:, [0, 0, 1, 2]] + 0.5
    assert np.array_equal(sa(dst, dpos, src, spos, 0.0).data, dst.data)
    # One source within reach: attention output is that source's value projection.
    far = np.full((1, 4, 2), 1e3)
    far[0, 2] = dpos[0, 0]
    out = sa(dst, dpos, src, far, 1.0).data
    s = sa.pos_scale
    v = np.concatenate([src.data[0, 2], far[0, 2] / s]) @ st["sa.v.w"].data @ st["sa.o.w"].data
    assert np.allclose(out[0, 0], dst.data[0, 0] + v)
    assert np.array_equal(out[0, 1:], dst.data[0, 1:])


def test_radius_neighbours_match_brute_force(rng):
    st = ParamStore()
    sa = SpatialAttention(st, "sa", 2, 2, 2, rng)
    for _ in range(20):
        M, N = rng.integers(1, 12, size=2)
        dpos = rng.uniform(-20, 20, (2, M, 2))
        spos = rng.uniform(-20, 20, (2, N, 2))
        r = float(rng.uniform(0, 15))
        got = sa.neighbours(dpos, spos, r)
        want = np.array([[[math.dist(dpos[b, i], spos[b, j]) <= r for j in range(N)] for i in range(M)]
                         for b in range(2)])
        assert np.array_equal(got, want)


@pytest.mark.parametrize("case", list(gradcases.layer_cases()), ids=lambda c: c[0])
def test_layer_gradients(case):
    name, f, inputs = case
    rep = grad_check(f, inputs, tol=1e-4)
    assert rep.passed, f"{name}: {rep}"


# -- optimizer and checkpoints -------------------------------------------
def test_adamw_zero_grad_zero_decay_is_identity(rng):
    st = ParamStore()
    st.add("w", (3, 2), rng)
    before = st["w"].data.copy()
    adamw_step(st, {"w": np.zeros((3, 2))}, lr=0.1, weight_decay=0.0)
    assert np.array_equal(st["w"].data, before)


def test_adamw_scalar_oracle():
    st = ParamStore()
    st.add("p", (1,), np.random.default_rng(0))
    st["p"].data = np.array([0.5])
    lr, wd, b1, b2, eps, g = 0.01, 0.1, 0.9, 0.999, 1e-8, 0.2
    p = 0.5
    m = v = 0.0
    for t in (1, 2):
        adamw_step(st, {"p": np.array([g])}, lr=lr, weight_decay=wd, betas=(b1, b2), eps=eps)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p * (1 - lr * wd) - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        assert st["p"].data[0] == pytest.approx(p, abs=1e-12)


def test_adamw_rejects_non_finite(rng):
    st = ParamStore()
    st.add("enc.w", (2,), rng)
    with pytest.raises(NonFiniteGradient, match="enc.w"):
        adamw_step(st, {"enc.w": np.array([1.0, np.nan])})


def test_step_decay_schedule():
    assert step_decay_lr(1e-3, 9, 0.6) == 1e-3
    assert step_decay_lr(1e-3, 10, 0.6) == pytest.approx(6e-4)
    assert step_decay_lr(1e-3, 25, 0.5) == pytest.approx(2.5e-4)


def test_checkpoint_save_load_save_is_byte_identical(tmp_path, rng):
    st = ParamStore(np.float32)
    MLP(st, "m", [3, 4, 2], rng)
    st.astype(np.float32)
    for _, t in st.items():
        t.grad = rng.normal(size=t.shape)
    adamw_step(st, lr=1e-2)
    a = tmp_path / "a.json"
    st.save(a, {"config_hash": "abc", "epoch": 3})
    st2 = ParamStore()
    MLP(st2, "m", [3, 4, 2], np.random.default_rng(99))
    meta = st2.load(a)
    b = tmp_path / "b.json"
    st2.save(b, meta)
    assert a.read_bytes() == b.read_bytes()
    assert read_checkpoint_metadata(b) == {"config_hash": "abc", "epoch": 3}
    assert st2.step == 1 and st2.dtype == np.float32


def test_param_names_unique(rng):
    st = ParamStore()
    st.add("a", (1,), rng)
    with pytest.raises(KeyError):
        st.add("a", (2,), rng)


def test_forward_is_deterministic(rng):
    st = ParamStore()
    u = UGRU(st, "u", 2, 3, rng)
    x = Tensor(rng.normal(size=(2, 4, 2)))
    assert u(x)[0].data.tobytes() == u(x)[0].data.tobytes()
