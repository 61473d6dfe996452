"""Trajectory completion across an occlusion gap.

A motion decoder proposes a trajectory at each missing timestamp from the
history and future tracklets; a map-aware refinement then corrects it with
the nearby lane poses. Both stages predict residuals on top of straight-line
interpolation between the gap endpoints.
"""

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numpy as np

from .baselines import linear_interpolate
from .geometry import from_local_array, shortest_arc_interp, tracklet_features, wrap_angle
from .lanes import LaneGraph
from .nn import tensor as T
from .nn.layers import GRU, MLP, UGRU, Linear, SpatialAttention
from .nn.optim import adamw_step, clip_grad_norm
from .nn.params import ParamStore
from .nn.tensor import Tensor, no_grad
from .synth import PseudoOcclusionSample, completion_frame, localize_sample
from .types import H_COL, L_COL, S_COL, T_COL, VX_COL, VY_COL, W_COL, Pose2D, Tracklet, merge_tracklets

POS_SCALE = 20.0
TIME_SCALE = 5.0
VEL_SCALE = 10.0
RES_SCALE = 5.0
YAW_RES_SCALE = 0.5

# Gap policy: model-based completion only when the gap is long or wide.
GAP_DISTANCE_M = 3.0
GAP_TIME_S = 1.8


@dataclass
class CompletionConfig:
    hidden: int = 48
    max_history_steps: int = 6
    max_future_steps: int = 6
    crop_radius: float = 15.0
    crop_step: float = 5.0
    max_lanelets: int = 64
    radius: float = 8.0
    coord_weight: float = 1.0
    yaw_weight: float = 0.5

    @classmethod
    def from_dict(cls, d):
        return cls(**(d or {}))


class TimeQuery(NamedTuple):
    t: float  # seconds after the history's last observation
    frac: float  # t / gap


def make_time_queries(gap: float, rate: float) -> list:
    """One query per missing grid timestamp: ``round(gap * rate) - 1`` of them."""
    if gap <= 0:
        raise ValueError(f"gap must be positive, got {gap}")
    n = int(round(gap * rate)) - 1
    return [TimeQuery(k / rate, (k / rate) / gap) for k in range(1, n + 1)]


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------
def smooth_l1_norm(r):
    """Smooth-L1 on the residual norm: 0.5 |r|^2 below 1, |r| - 0.5 above (numpy)."""
    n = np.linalg.norm(np.asarray(r, dtype=np.float64), axis=-1)
    return np.where(n < 1.0, 0.5 * n * n, n - 0.5)


def yaw_error(pred, gt):
    """|wrap(pred - gt)| in radians (numpy)."""
    return np.abs(wrap_angle(np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)))


def _coord_loss(pred_xy, gt_xy):
    d = pred_xy - Tensor(gt_xy)
    sq = (d * d).sum(axis=-1)
    norm = T.sqrt(sq + 1e-12)
    return T.where(norm.data < 1.0, 0.5 * sq, norm - 0.5)


def _yaw_loss(pred_yaw, gt_yaw):
    d = pred_yaw - Tensor(gt_yaw)
    # Subtracting the nearest multiple of 2 pi is the wrap; it has zero gradient.
    turns = np.round(d.data / (2.0 * math.pi)) * 2.0 * math.pi
    return T.tabs(d - Tensor(turns.astype(d.dtype)))


def completion_loss(pred_initial, pred_refined, gt, mask, coord_weight=1.0, yaw_weight=0.5):
    """Weighted coordinate + yaw loss over both heads, averaged over real queries.

    ``pred_*`` are ``(xy (B,Q,2), yaw (B,Q))`` tensor pairs, ``gt`` is (B,Q,3).
    """
    gt = np.asarray(gt)
    m = np.asarray(mask, dtype=bool)
    w = Tensor((m / max(1, m.sum())).astype(gt.dtype))
    total = None
    for xy, yaw in (pred_initial, pred_refined):
        term = coord_weight * (_coord_loss(xy, gt[..., :2]) * w).sum()
        term = term + yaw_weight * (_yaw_loss(yaw, gt[..., 2]) * w).sum()
        total = term if total is None else total + term
    return total


# --------------------------------------------------------------------------
# Batching
# --------------------------------------------------------------------------
def _scale_motion(f):
    out = f.copy()
    out[:, 0:2] /= POS_SCALE
    out[:, 3] /= TIME_SCALE
    out[:, 6:8] /= VEL_SCALE
    return out


@dataclass
class CompletionBatch:
    hist: np.ndarray
    hist_mask: np.ndarray
    fut: np.ndarray
    fut_mask: np.ndarray
    context: np.ndarray  # (B, 6) gap summary
    queries: np.ndarray  # (B, Q, 2) [t / TIME_SCALE, t / gap]
    q_mask: np.ndarray
    base: np.ndarray  # (B, Q, 3) straight-line interpolation, local frame
    gt: np.ndarray  # (B, Q, 3)
    lanes: np.ndarray  # (B, N, 8) flattened lane poses, scaled
    lane_xy: np.ndarray  # (B, N, 2) metres
    lane_mask: np.ndarray  # (B, N)


def completion_crop_centers(history: Tracklet, future: Tracklet, step: float = 5.0):
    a = history.xy[-1]
    b = future.xy[0]
    n = max(1, int(math.ceil(np.linalg.norm(b - a) / step)))
    return a[None] + np.linspace(0.0, 1.0, n + 1)[:, None] * (b - a)[None]


def localize_for_completion(sample: PseudoOcclusionSample, cfg: CompletionConfig) -> PseudoOcclusionSample:
    """Reduce a sample to its GT continuation in the completion frame."""
    fut = sample.gt_future
    slim = replace(sample, future_candidates=[fut], gt_match_index=0)
    origin = completion_frame(sample.history, fut)
    centers = completion_crop_centers(sample.history, fut, cfg.crop_step)
    return localize_sample(slim, origin, crop_radius=cfg.crop_radius, crop_centers=centers,
                           max_lanelets=cfg.max_lanelets)


def _base_trajectory(h_last, f_first, fracs):
    xy = h_last[None, :2] + fracs[:, None] * (f_first[None, :2] - h_last[None, :2])
    yaw = np.atleast_1d(shortest_arc_interp(h_last[2], f_first[2], fracs))
    return np.concatenate([xy, yaw[:, None]], axis=1)


def make_completion_batch(items, cfg: CompletionConfig, dtype=np.float64) -> CompletionBatch:
    """Batch ``(history, future, query_times, gt_or_None, lane_graph)`` tuples.

    Everything is expected in one local frame per item; ``query_times`` are
    seconds after the history's last observation.
    """
    B = len(items)
    th, tf = cfg.max_history_steps, cfg.max_future_steps
    Q = max([len(it[2]) for it in items] + [1])
    graphs = [it[4] if it[4] is not None else LaneGraph([]) for it in items]
    N = max([sum(len(ll.poses) for ll in g.lanelets) for g in graphs] + [1])
    hist = np.zeros((B, th, 8))
    hist_mask = np.zeros((B, th))
    fut = np.zeros((B, tf, 8))
    fut_mask = np.zeros((B, tf))
    context = np.zeros((B, 6))
    queries = np.zeros((B, Q, 2))
    q_mask = np.zeros((B, Q), dtype=bool)
    base = np.zeros((B, Q, 3))
    gt = np.zeros((B, Q, 3))
    lanes = np.zeros((B, N, 8))
    lane_mask = np.zeros((B, N), dtype=bool)
    ident = (0.0, 0.0, 0.0)
    for b, ((h, f, qt, g, _), graph) in enumerate(zip(items, graphs)):
        t0 = h.t_end
        gap = f.t_start - t0
        hf = tracklet_features(h.slice(max(0, len(h) - th)), ident, t0)
        ff = tracklet_features(f.slice(0, tf), ident, t0)
        hist[b, :len(hf)] = _scale_motion(hf)
        hist_mask[b, :len(hf)] = 1
        fut[b, :len(ff)] = _scale_motion(ff)
        fut_mask[b, :len(ff)] = 1
        h_last = h.poses[-1]
        f_first = f.poses[0]
        d = f_first[:2] - h_last[:2]
        context[b] = [d[0] / POS_SCALE, d[1] / POS_SCALE, gap / TIME_SCALE,
                      np.linalg.norm(d) / max(gap, 1e-6) / VEL_SCALE,
                      math.cos(wrap_angle(f_first[2] - h_last[2])), math.sin(wrap_angle(f_first[2] - h_last[2]))]
        qt = np.asarray(qt, dtype=np.float64)
        n = len(qt)
        if n:
            fr = qt / gap
            queries[b, :n, 0] = qt / TIME_SCALE
            queries[b, :n, 1] = fr
            q_mask[b, :n] = True
            base[b, :n] = _base_trajectory(h_last, f_first, fr)
            if g is not None:
                gt[b, :n] = g
        rows = graph.all_poses()
        lanes[b, :len(rows)] = rows
        lane_mask[b, :len(rows)] = True
    lane_xy = lanes[..., 0:2].copy()
    lanes[..., 0:2] /= POS_SCALE
    return CompletionBatch(hist.astype(dtype), hist_mask.astype(dtype), fut.astype(dtype),
                           fut_mask.astype(dtype), context.astype(dtype), queries.astype(dtype), q_mask,
                           base, gt, lanes.astype(dtype), lane_xy, lane_mask)


def sample_item(sample: PseudoOcclusionSample):
    """Batch item for a localized (completion-frame) pseudo-occlusion sample."""
    qt = np.asarray(sample.masked_times) - sample.history.t_end
    return (sample.history, sample.gt_future, qt, np.asarray(sample.masked_gt), sample.lane_graph)


# --------------------------------------------------------------------------
# Network
# --------------------------------------------------------------------------
class CompletionNet:
    """Motion decoder (initial trajectory) plus lane-aware refinement."""

    kind = "completion"

    def __init__(self, cfg: Optional[CompletionConfig] = None, seed: int = 0, dtype=np.float32):
        self.cfg = cfg or CompletionConfig()
        H = self.cfg.hidden
        rng = np.random.default_rng(seed)
        st = self.store = ParamStore(np.float64)
        self.hist_enc = GRU(st, "hist_enc", 8, H, rng)
        self.fut_enc = UGRU(st, "fut_enc", 8, H, rng)
        self.ctx = MLP(st, "ctx", [2 * H + 6, H, H], rng, activations=["relu", "relu"])
        self.dec = MLP(st, "dec", [H + 2, H, H, 3], rng)
        self.q_in = MLP(st, "ref_in", [H + 2 + 5, H, H], rng, activations=["relu", "relu"])
        self.lane_enc = MLP(st, "lane_enc", [8, H, H], rng, activations=["relu", "relu"])
        self.q2l = SpatialAttention(st, "q2l", H, H, H, rng, pos_scale=POS_SCALE)
        self.seq = UGRU(st, "ref_seq", H, H, rng)
        self.ref_out = MLP(st, "ref_out", [2 * H, H, 3], rng)
        self.store.astype(dtype)

    @property
    def dtype(self):
        return self.store.dtype

    def _pose_head(self, raw, base):
        dt = raw.dtype
        xy = Tensor(base[..., :2].astype(dt)) + RES_SCALE * raw[..., 0:2]
        yaw = Tensor(base[..., 2].astype(dt)) + YAW_RES_SCALE * raw[..., 2]
        return xy, yaw

    def forward(self, batch: CompletionBatch):
        """Returns ``((xy0, yaw0), (xy1, yaw1))`` for the initial and refined heads."""
        dt = self.dtype
        H = self.cfg.hidden
        B, Q = batch.q_mask.shape
        _, hh = self.hist_enc(Tensor(batch.hist.astype(dt)), mask=batch.hist_mask)
        _, hf = self.fut_enc(Tensor(batch.fut.astype(dt)), hh, mask=batch.fut_mask)
        c = self.ctx(T.concat([hh, hf, Tensor(batch.context.astype(dt))], axis=-1))
        c_rep = T.concat([c.reshape(B, 1, H)] * Q, axis=1) if Q > 1 else c.reshape(B, 1, H)
        q = Tensor(batch.queries.astype(dt))
        raw0 = self.dec(T.concat([c_rep, q], axis=-1))
        xy0, yaw0 = self._pose_head(raw0, batch.base)

        # Refinement: each query point attends to lane poses near its initial position.
        pad = Tensor((~batch.q_mask)[..., None].astype(dt))
        pose_feat = T.concat([xy0 * (1.0 / POS_SCALE), T.cos(yaw0).reshape(B, Q, 1),
                              T.sin(yaw0).reshape(B, Q, 1), pad], axis=-1)
        qf = self.q_in(T.concat([c_rep, q, pose_feat], axis=-1))
        if batch.lane_mask.any():
            lf = self.lane_enc(Tensor(batch.lanes.astype(dt)))
            qf = self.q2l(qf, xy0, lf, batch.lane_xy, self.cfg.radius, batch.q_mask, batch.lane_mask)
        seq, _ = self.seq(qf, c, mask=batch.q_mask.astype(dt))
        raw1 = self.ref_out(T.concat([qf, seq], axis=-1))
        # Without any lane pose there is nothing to refine against: keep the initial poses.
        has_lane = Tensor(batch.lane_mask.any(axis=1).astype(dt).reshape(B, 1, 1))
        raw1 = raw1 * has_lane
        xy1 = xy0 + RES_SCALE * raw1[..., 0:2]
        yaw1 = yaw0 + YAW_RES_SCALE * raw1[..., 2]
        return (xy0, yaw0), (xy1, yaw1)

    def loss(self, batch: CompletionBatch):
        init, ref = self.forward(batch)
        return completion_loss(init, ref, batch.gt, batch.q_mask, self.cfg.coord_weight, self.cfg.yaw_weight)


def completion_train_step(net: CompletionNet, batch: CompletionBatch, lr=1e-3, weight_decay=0.01,
                          max_grad_norm=5.0) -> float:
    if not batch.q_mask.any():
        raise ValueError("completion batch has no missing timestamps to supervise")
    net.store.zero_grad()
    loss = net.loss(batch)
    if not np.isfinite(loss.item()):
        raise FloatingPointError(f"non-finite completion loss {loss.item()}")
    loss.backward()
    clip_grad_norm(net.store, max_grad_norm)
    adamw_step(net.store, lr=lr, weight_decay=weight_decay)
    return loss.item()


def predict_batch(net: CompletionNet, batch: CompletionBatch):
    """Local-frame (B, Q, 3) initial and refined poses (yaw wrapped)."""
    with no_grad():
        (xy0, yaw0), (xy1, yaw1) = net.forward(batch)
    init = np.concatenate([xy0.data, yaw0.data[..., None]], axis=-1).astype(np.float64)
    ref = np.concatenate([xy1.data, yaw1.data[..., None]], axis=-1).astype(np.float64)
    init[..., 2] = wrap_angle(init[..., 2])
    ref[..., 2] = wrap_angle(ref[..., 2])
    return init, ref


# --------------------------------------------------------------------------
# Public completion API
# --------------------------------------------------------------------------
def _local_problem(history, future, graph, cfg):
    smp = PseudoOcclusionSample(history, [future], 0, 0.0, np.zeros((0, 3)), np.zeros(0), graph)
    return localize_for_completion(smp, cfg)


def decode_initial_trajectory(history: Tracklet, future: Tracklet, queries, net: CompletionNet) -> list:
    """Motion-only trajectory (global frame) at each time query."""
    return _complete_poses(history, future, None, queries, net)[0]


def refine_trajectory(history: Tracklet, future: Tracklet, queries, graph: Optional[LaneGraph],
                      net: CompletionNet, return_flag=False):
    """Lane-refined trajectory (global frame) at each time query.

    With no lane pose near the gap the initial trajectory comes back
    unchanged; ``return_flag`` also returns True in that case.
    """
    init, ref, fallback = _complete_poses(history, future, graph, queries, net, with_flag=True)
    return (ref, fallback) if return_flag else ref


def _complete_poses(history, future, graph, queries, net, with_flag=False):
    if not queries:
        return ([], [], True) if with_flag else ([], [])
    loc = _local_problem(history, future, graph, net.cfg)
    fallback = loc.lane_graph is None or loc.lane_graph.n_lane == 0
    qt = np.array([q.t for q in queries])
    batch = make_completion_batch([(loc.history, loc.future_candidates[0], qt, None, loc.lane_graph)],
                                  net.cfg, net.dtype)
    init, ref = predict_batch(net, batch)
    out = []
    for arr in (init[0, :len(qt)], ref[0, :len(qt)]):
        g = from_local_array(arr, loc.origin)
        out.append([Pose2D(*r) for r in g.tolist()])
    if with_flag:
        return out[0], out[1], fallback
    return out[0], out[1]


@dataclass
class CompletedTrack:
    """A history, the filled gap and the future, with per-row provenance."""

    id: object
    cls: str
    times: np.ndarray
    poses: np.ndarray  # (n, 3) filled poses only
    sizes: np.ndarray  # (n, 3)
    confidence: float
    method: str  # "model", "linear" or "none"
    history: Optional[Tracklet] = None
    future: Optional[Tracklet] = None

    def filled_tracklet(self) -> Optional[Tracklet]:
        if len(self.times) == 0:
            return None
        data = np.zeros((len(self.times), 10))
        data[:, T_COL] = self.times
        data[:, 1:4] = self.poses
        data[:, [L_COL, W_COL, H_COL]] = self.sizes
        data[:, S_COL] = self.confidence
        # Velocities from finite differences across history end, fill and future start.
        t = np.concatenate([[self.history.t_end], self.times, [self.future.t_start]])
        xy = np.concatenate([self.history.xy[-1:], self.poses[:, :2], self.future.xy[:1]])
        v = np.gradient(xy, t, axis=0)[1:-1]
        data[:, [VX_COL, VY_COL]] = v
        return Tracklet(self.id, self.cls, data, source=[self.method] * len(data))

    def merged(self) -> Tracklet:
        parts = [self.history]
        fill = self.filled_tracklet()
        if fill is not None:
            parts.append(fill)
        parts.append(self.future)
        return merge_tracklets(self.id, parts)


def use_model(history: Tracklet, future: Tracklet, distance_m=GAP_DISTANCE_M, time_s=GAP_TIME_S) -> bool:
    """Gap policy: model when the gap exceeds ``distance_m`` metres or ``time_s`` seconds."""
    dist = float(np.linalg.norm(future.xy[0] - history.xy[-1]))
    gap_t = future.t_start - history.t_end
    return dist > distance_m or gap_t > time_s


def complete_track(history: Tracklet, future: Tracklet, graph: Optional[LaneGraph], net: Optional[CompletionNet],
                   rate: float, distance_m=GAP_DISTANCE_M, time_s=GAP_TIME_S) -> CompletedTrack:
    """Fill the gap between ``history`` and ``future``.

    Short, narrow gaps are interpolated linearly; others use the refined
    model output (linear again when no model is given). Box sizes are
    interpolated linearly and confidence is the mean of the two endpoints.
    """
    end, start = history.last, future.first
    if start.t <= end.t:
        raise ValueError("future must start after the history ends")
    queries = make_time_queries(start.t - end.t, rate)
    times = end.t + np.array([q.t for q in queries])
    method = "none"
    if not queries:
        poses = np.zeros((0, 3))
    elif net is not None and use_model(history, future, distance_m, time_s):
        poses = np.asarray(refine_trajectory(history, future, queries, graph, net), dtype=np.float64)
        method = "model"
    else:
        poses = np.asarray(linear_interpolate(end, start, rate), dtype=np.float64).reshape(-1, 3)
        method = "linear"
    fr = np.array([q.frac for q in queries]).reshape(-1, 1)
    a = np.array([end.l, end.w, end.h])
    b = np.array([start.l, start.w, start.h])
    sizes = a[None] + fr * (b - a)[None]
    conf = 0.5 * (end.s + start.s)
    return CompletedTrack(history.id, history.cls, times, poses, sizes.reshape(-1, 3), conf, method,
                          history, future)
