"""Layers used by the Re-ID and completion networks.

Every layer registers its weights in a shared :class:`ParamStore` under a
dotted prefix and is otherwise stateless, so one store fully describes a
network.
"""

import math

import numpy as np

from . import tensor as T
from .params import ParamStore
from .tensor import Tensor


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int, rng, bias=True):
        self.d_in, self.d_out = d_in, d_out
        self.w = store.add(f"{name}.w", (d_in, d_out), rng, fan_in=d_in)
        self.b = store.add(f"{name}.b", (d_out,), rng, fan_in=d_in) if bias else None

    def __call__(self, x):
        if x.shape[-1] != self.d_in:
            raise ValueError(f"Linear expects last dim {self.d_in}, got input shape {x.shape} "
                             f"for weight shape {self.w.shape}")
        y = x @ self.w
        return y + self.b if self.b is not None else y


def mlp_forward(x, layers, activations):
    """Affine layer then activation, for each (layer, activation) pair."""
    if isinstance(activations, str):
        activations = [activations] * len(layers)
    if len(activations) != len(layers):
        raise ValueError("one activation per layer required")
    for layer, act in zip(layers, activations):
        x = T.ACTIVATIONS[act](layer(x))
    return x


class MLP:
    """Stack of Linear layers; ``activations`` defaults to relu with a linear head."""

    def __init__(self, store, name, sizes, rng, activations=None):
        self.layers = [Linear(store, f"{name}.{i}", a, b, rng)
                       for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
        if activations is None:
            activations = ["relu"] * (len(self.layers) - 1) + ["linear"]
        self.activations = list(activations)

    def __call__(self, x):
        return mlp_forward(x, self.layers, self.activations)


class GRU:
    """Single-layer GRU over batch-major (B, T, D) input with a (B, T) mask.

    Padded steps carry the previous state, so the last output row is the
    state after the last real step whichever side the padding is on.
    """

    def __init__(self, store, name, d_in, hidden, rng):
        self.d_in, self.hidden = d_in, hidden
        self.w_x = store.add(f"{name}.w_x", (d_in, 3 * hidden), rng, fan_in=hidden)
        self.b_x = store.add(f"{name}.b_x", (3 * hidden,), rng, fan_in=hidden)
        self.w_h = store.add(f"{name}.w_h", (hidden, 3 * hidden), rng, fan_in=hidden)
        self.b_h = store.add(f"{name}.b_h", (3 * hidden,), rng, fan_in=hidden)

    def __call__(self, seq, h0=None, mask=None, reverse=False):
        return gru_forward(seq, h0, self, mask=mask, reverse=reverse)


def gru_forward(seq, h0, params: GRU, mask=None, reverse=False):
    """Returns ``(outputs (B, T, H), h_T (B, H))``."""
    if seq.ndim != 3 or seq.shape[-1] != params.d_in:
        raise ValueError(f"GRU expects (B, T, {params.d_in}) input, got {seq.shape}")
    B, steps, _ = seq.shape
    if steps < 1:
        raise ValueError("GRU needs at least one time step")
    H = params.hidden
    if h0 is None:
        h0 = Tensor(np.zeros((B, H), dtype=seq.dtype))
    elif h0.shape != (B, H):
        raise ValueError(f"initial state shape {h0.shape} does not match (B, H)=({B}, {H})")
    m = np.ones((B, steps), dtype=seq.dtype) if mask is None else np.asarray(mask, dtype=seq.dtype)
    if reverse:
        seq = T.flip(seq, 1)
        m = m[:, ::-1]
    gx = seq @ params.w_x + params.b_x
    gx = T.transpose(gx, (1, 0, 2))
    out = T.gru_scan(gx, h0, np.ascontiguousarray(m.T), params.w_h, params.b_h)
    h_last = out[steps - 1]
    out = T.transpose(out, (1, 0, 2))
    if reverse:
        out = T.flip(out, 1)
    return out, h_last


def gru_cell_reference(x, h, params: GRU):
    """One GRU step built from primitive ops (test oracle for the fused scan)."""
    H = params.hidden
    gx = x @ params.w_x + params.b_x
    gh = h @ params.w_h + params.b_h
    r = T.sigmoid(gx[:, :H] + gh[:, :H])
    z = T.sigmoid(gx[:, H:2 * H] + gh[:, H:2 * H])
    n = T.tanh(gx[:, 2 * H:] + r * gh[:, 2 * H:])
    return (1.0 - z) * n + z * h


class UGRU:
    """Forward GRU pass, then a backward pass seeded with the forward final state.

    Per-step outputs are the backward-pass states in original time order;
    the final encoding is the backward pass's last state.
    """

    def __init__(self, store, name, d_in, hidden, rng):
        self.fwd = GRU(store, f"{name}.fwd", d_in, hidden, rng)
        self.bwd = GRU(store, f"{name}.bwd", d_in, hidden, rng)
        self.hidden = hidden

    def __call__(self, seq, h_init=None, mask=None):
        return ugru_encode(seq, h_init, self, mask=mask)


def ugru_encode(seq, h_init, params: UGRU, mask=None):
    _, h_fwd = params.fwd(seq, h_init, mask=mask)
    outputs, h_final = params.bwd(seq, h_fwd, mask=mask, reverse=True)
    return outputs, h_final


def dot_attention(q, k, v, mask=None, return_empty=False):
    """Scaled dot-product attention over the last two axes.

    ``q`` (..., m, d), ``k`` (..., n, d), ``v`` (..., n, dv), ``mask``
    broadcastable to (..., m, n) with True = attend. Queries with no
    unmasked key get a zero vector; ``return_empty`` also returns the
    boolean (..., m) array flagging them.
    """
    d = q.shape[-1]
    if k.shape[-1] != d:
        raise ValueError(f"query/key width mismatch: {q.shape} vs {k.shape}")
    scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d))
    if mask is None:
        mask = np.ones(scores.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
    w = T.masked_softmax(scores, mask, axis=-1)
    out = T.matmul(w, v)
    if return_empty:
        return out, ~mask.any(axis=-1)
    return out


class Attention:
    """Single-head projected attention with a residual connection."""

    def __init__(self, store, name, d_q, d_kv, d_att, rng, d_out=None):
        d_out = d_q if d_out is None else d_out
        self.q = Linear(store, f"{name}.q", d_q, d_att, rng, bias=False)
        self.k = Linear(store, f"{name}.k", d_kv, d_att, rng, bias=False)
        self.v = Linear(store, f"{name}.v", d_kv, d_att, rng, bias=False)
        self.o = Linear(store, f"{name}.o", d_att, d_out, rng, bias=False)

    def attend(self, x_q, x_kv, mask=None):
        out, empty = dot_attention(self.q(x_q), self.k(x_kv), self.v(x_kv), mask, return_empty=True)
        return self.o(out), empty

    def __call__(self, x_q, x_kv, mask=None):
        out, empty = self.attend(x_q, x_kv, mask)
        keep = (~empty)[..., None].astype(x_q.dtype)
        return x_q + out * keep


class SpatialAttention:
    """Radius-gated attention from source nodes onto destination nodes.

    Queries and keys see node positions (scaled by ``pos_scale``) next to
    the features, so the score depends on geometry as well as content.
    Destinations with no source inside ``radius`` pass through unchanged.
    """

    def __init__(self, store, name, d_dst, d_src, d_att, rng, pos_scale=10.0):
        self.pos_scale = pos_scale
        self.att = Attention(store, name, d_dst + 2, d_src + 2, d_att, rng, d_out=d_dst)

    def neighbours(self, dst_pos, src_pos, radius, dst_ok=None, src_ok=None):
        from ..kernels import radius_mask
        return radius_mask(dst_pos, src_pos, radius, dst_ok, src_ok)

    def __call__(self, dst, dst_pos, src, src_pos, radius, dst_ok=None, src_ok=None, mask=None):
        return spatial_attention(self, dst, dst_pos, src, src_pos, radius, dst_ok, src_ok, mask)


def spatial_attention(layer: SpatialAttention, dst, dst_pos, src, src_pos, radius,
                      dst_ok=None, src_ok=None, mask=None):
    """``dst`` (B, M, d) + attention over ``src`` (B, N, e) within ``radius`` metres.

    Positions may be arrays or Tensors; Tensor positions receive gradients
    through the position features (the radius gate itself is piecewise
    constant). ``mask`` may be supplied precomputed (B, M, N); otherwise it
    is derived from the positions.
    """
    if mask is None:
        mask = layer.neighbours(_raw(dst_pos), _raw(src_pos), radius, dst_ok, src_ok)
    s = 1.0 / layer.pos_scale
    dq = T.concat([dst, _pos_feature(dst_pos, s, dst.dtype)], axis=-1)
    sk = T.concat([src, _pos_feature(src_pos, s, src.dtype)], axis=-1)
    out, empty = layer.att.attend(dq, sk, mask)
    keep = (~empty)[..., None].astype(dst.dtype)
    return dst + out * keep


def _raw(pos):
    return np.asarray(pos.data if isinstance(pos, Tensor) else pos, dtype=np.float64)


def _pos_feature(pos, scale, dtype):
    if isinstance(pos, Tensor):
        return pos * scale
    return Tensor((np.asarray(pos) * scale).astype(dtype))


class LaneletAggregator:
    """Two-layer GRU over a lanelet's poses; the first layer is bidirectional.

    Returns the second layer's last state as the lanelet feature.
    """

    def __init__(self, store, name, d_in, hidden, rng):
        self.f = GRU(store, f"{name}.l1f", d_in, hidden, rng)
        self.b = GRU(store, f"{name}.l1b", d_in, hidden, rng)
        self.top = GRU(store, f"{name}.l2", 2 * hidden, hidden, rng)

    def __call__(self, poses, mask):
        of, _ = self.f(poses, mask=mask)
        ob, _ = self.b(poses, mask=mask, reverse=True)
        _, h = self.top(T.concat([of, ob], axis=-1), mask=mask)
        return h
