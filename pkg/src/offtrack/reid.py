"""Tracklet re-identification: motion and map affinity branches plus association."""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .geometry import candidate_filter, tracklet_features
from .lanes import LaneGraph
from .nn import tensor as T
from .nn.layers import GRU, MLP, UGRU, Attention, LaneletAggregator, Linear, SpatialAttention
from .nn.optim import adamw_step, clip_grad_norm
from .nn.params import ParamStore
from .nn.tensor import Tensor, no_grad
from .synth import PseudoOcclusionSample, localize_sample, reid_frame

POS_SCALE = 20.0
TIME_SCALE = 5.0
VEL_SCALE = 10.0


@dataclass
class ReIDConfig:
    hidden: int = 32
    max_history_steps: int = 6
    max_future_steps: int = 6
    crop_radius: float = 15.0
    max_lanelets: int = 64
    radius: float = 10.0
    alpha: float = 0.5
    gamma: float = 2.0

    @classmethod
    def from_dict(cls, d):
        return cls(**(d or {}))


# --------------------------------------------------------------------------
# Batching
# --------------------------------------------------------------------------
def _scale_motion(f):
    out = f.copy()
    out[:, 0:2] /= POS_SCALE
    out[:, 3] /= TIME_SCALE
    if out.shape[1] > 6:
        out[:, 6:8] /= VEL_SCALE
    return out


def _scale_lanes(rows):
    out = rows.copy()
    out[..., 0:2] /= POS_SCALE
    return out


@dataclass
class ReIDBatch:
    hist: np.ndarray
    hist_mask: np.ndarray
    fut: np.ndarray
    fut_mask: np.ndarray
    fut_b: np.ndarray
    fut_slot: np.ndarray
    labels: np.ndarray
    hist_pos: np.ndarray
    fut_pos: np.ndarray
    lanes: np.ndarray  # (B, L, P, 8) scaled
    lane_xy: np.ndarray  # (B, L, P, 2) metres
    lane_mask: np.ndarray  # (B, L, P)
    counts: list = field(default_factory=list)

    @property
    def n_samples(self):
        return self.hist.shape[0]

    @property
    def n_candidates(self):
        return self.fut.shape[0]


def make_reid_batch(samples, cfg: ReIDConfig, dtype=np.float64, with_labels=True) -> ReIDBatch:
    """Pad localized samples into one batch.

    Samples must already be in the Re-ID frame (see :func:`localize_sample`).
    """
    B = len(samples)
    counts = [len(s.future_candidates) for s in samples]
    C = int(sum(counts))
    th = cfg.max_history_steps
    tf = cfg.max_future_steps
    hist = np.zeros((B, th, 8))
    hist_mask = np.zeros((B, th))
    fut = np.zeros((C, tf, 8))
    fut_mask = np.zeros((C, tf))
    fut_b = np.zeros(C, dtype=np.int64)
    fut_slot = np.zeros(C, dtype=np.int64)
    labels = np.zeros(C)
    hist_pos = np.zeros((B, 2))
    fut_pos = np.zeros((C, 2))
    graphs = [s.lane_graph if s.lane_graph is not None else LaneGraph([]) for s in samples]
    L = max([g.n_lane for g in graphs] + [0])
    P = max([g.max_poses for g in graphs] + [0])
    lanes = np.zeros((B, L, P, 8))
    lane_mask = np.zeros((B, L, P), dtype=bool)
    ident = (0.0, 0.0, 0.0)
    c = 0
    for b, s in enumerate(samples):
        h = s.history
        t0 = h.t_end
        hf = tracklet_features(h.slice(max(0, len(h) - th)), ident, t0)
        hist[b, :len(hf)] = _scale_motion(hf)
        hist_mask[b, :len(hf)] = 1.0
        hist_pos[b] = h.xy[-1]
        for k, cand in enumerate(s.future_candidates):
            ff = tracklet_features(cand.slice(0, tf), ident, t0)
            fut[c, :len(ff)] = _scale_motion(ff)
            fut_mask[c, :len(ff)] = 1.0
            fut_b[c] = b
            fut_slot[c] = k
            fut_pos[c] = cand.xy[0]
            if with_labels and k == s.gt_match_index:
                labels[c] = 1.0
            c += 1
        if graphs[b].n_lane:
            feats, m = graphs[b].feature_block(P)
            lanes[b, :feats.shape[0]] = feats
            lane_mask[b, :feats.shape[0]] = m
    lane_xy = lanes[..., 0:2].copy()
    return ReIDBatch(hist.astype(dtype), hist_mask.astype(dtype), fut.astype(dtype),
                     fut_mask.astype(dtype), fut_b, fut_slot, labels.astype(dtype), hist_pos,
                     fut_pos, _scale_lanes(lanes).astype(dtype), lane_xy, lane_mask, counts)


# --------------------------------------------------------------------------
# Networks
# --------------------------------------------------------------------------
class MotionAffinityNet:
    """GRU history encoder, UGRU future encoder seeded with the history state, MLP scorer."""

    kind = "reid-motion"

    def __init__(self, cfg: Optional[ReIDConfig] = None, seed: int = 0, dtype=np.float32):
        self.cfg = cfg or ReIDConfig()
        H = self.cfg.hidden
        rng = np.random.default_rng(seed)
        self.store = ParamStore(np.float64)
        self.hist_enc = GRU(self.store, "hist_enc", 8, H, rng)
        self.fut_enc = UGRU(self.store, "fut_enc", 8, H, rng)
        self.head = MLP(self.store, "head", [2 * H, H, H, 1], rng)
        self.store.astype(dtype)
        self.calibration = (1.0, 0.0)  # affine map on logits, see calibrate()

    @property
    def dtype(self):
        return self.store.dtype

    def encode(self, batch: ReIDBatch):
        dt = self.dtype
        _, h_hist = self.hist_enc(Tensor(batch.hist.astype(dt)), mask=batch.hist_mask)
        init = h_hist[batch.fut_b]
        _, h_fut = self.fut_enc(Tensor(batch.fut.astype(dt)), init, mask=batch.fut_mask)
        return h_hist, h_fut

    def logits(self, batch: ReIDBatch):
        h_hist, h_fut = self.encode(batch)
        out = self.head(T.concat([h_hist[batch.fut_b], h_fut], axis=-1))
        return out.reshape(batch.n_candidates)


class MapAffinityNet:
    """Tracklet encoders plus lane-graph attention, decoded to an affinity per candidate."""

    kind = "reid-map"

    def __init__(self, cfg: Optional[ReIDConfig] = None, seed: int = 0, dtype=np.float32):
        self.cfg = cfg or ReIDConfig()
        H = self.cfg.hidden
        rng = np.random.default_rng(seed)
        self.store = ParamStore(np.float64)
        st = self.store
        self.hist_enc = GRU(st, "hist_enc", 8, H, rng)
        self.fut_enc = UGRU(st, "fut_enc", 8, H, rng)
        self.lane_enc = Linear(st, "lane_enc", 8, H, rng)
        self.a2l = SpatialAttention(st, "a2l", H, H, H, rng, pos_scale=POS_SCALE)
        self.agg = LaneletAggregator(st, "agg", H, H, rng)
        self.glob = Attention(st, "glob", H, H, H, rng)
        self.l2a = SpatialAttention(st, "l2a", H, H, H, rng, pos_scale=POS_SCALE)
        self.head = MLP(st, "head", [2 * H, H, H, 1], rng)
        self.store.astype(dtype)
        self.calibration = (1.0, 0.0)
        self.last_fallback = False

    @property
    def dtype(self):
        return self.store.dtype

    def logits(self, batch: ReIDBatch):
        dt = self.dtype
        H = self.cfg.hidden
        B = batch.n_samples
        C = batch.n_candidates
        _, h_hist = self.hist_enc(Tensor(batch.hist.astype(dt)), mask=batch.hist_mask)
        init = h_hist[batch.fut_b]
        _, h_fut = self.fut_enc(Tensor(batch.fut.astype(dt)), init, mask=batch.fut_mask)
        L, P = batch.lane_mask.shape[1:3]
        self.last_fallback = L == 0 or not batch.lane_mask.any()
        if self.last_fallback:
            return self.head(T.concat([init, h_fut], axis=-1)).reshape(C)

        # Agents: slot 0 is the history, slots 1.. the candidates of that sample.
        cmax = max(batch.counts)
        A = 1 + cmax
        idx = np.full((B, cmax), C, dtype=np.int64)
        idx[batch.fut_b, batch.fut_slot] = np.arange(C)
        padded = T.concat([h_fut, Tensor(np.zeros((1, H), dtype=dt))], axis=0)[idx]
        agents = T.concat([h_hist.reshape(B, 1, H), padded], axis=1)
        agent_ok = np.zeros((B, A), dtype=bool)
        agent_ok[:, 0] = True
        agent_ok[batch.fut_b, 1 + batch.fut_slot] = True
        agent_pos = np.zeros((B, A, 2))
        agent_pos[:, 0] = batch.hist_pos
        agent_pos[batch.fut_b, 1 + batch.fut_slot] = batch.fut_pos

        lane_xy = batch.lane_xy.reshape(B, L * P, 2)
        pose_ok = batch.lane_mask.reshape(B, L * P)
        lane_h = T.relu(self.lane_enc(Tensor(batch.lanes.astype(dt)).reshape(B, L * P, 8)))
        lane_h = self.a2l(lane_h, lane_xy, agents, agent_pos, self.cfg.radius, pose_ok, agent_ok)

        node = self.agg(lane_h.reshape(B * L, P, H), batch.lane_mask.reshape(B * L, P)).reshape(B, L, H)
        lane_ok = batch.lane_mask.any(axis=2)
        node = self.glob(node, node, lane_ok[:, None, :] & lane_ok[:, :, None])

        near = kernels.radius_mask(agent_pos, lane_xy, self.cfg.radius, agent_ok, pose_ok)
        near = near.reshape(B, A, L, P).any(axis=3)
        cnt = np.maximum(batch.lane_mask.sum(axis=2, keepdims=True), 1)
        centroid = (batch.lane_xy * batch.lane_mask[..., None]).sum(axis=2) / cnt
        agents = self.l2a(agents, agent_pos, node, centroid, self.cfg.radius, mask=near)

        hh = agents[:, 0][batch.fut_b]
        hf = agents[batch.fut_b, 1 + batch.fut_slot]
        return self.head(T.concat([hh, hf], axis=-1)).reshape(C)


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------
def focal_loss_prob(k, y, alpha=0.5, gamma=2.0):
    """Binary focal loss for probability ``k`` and label ``y`` (numpy, elementwise)."""
    k = np.asarray(k, dtype=np.float64)
    y = np.asarray(y)
    kt = np.where(y == 1, k, 1.0 - k)
    at = np.where(y == 1, alpha, 1.0 - alpha)
    with np.errstate(divide="ignore"):
        logk = np.log(kt)
    out = -at * (1.0 - kt) ** gamma * logk
    return np.where(kt >= 1.0, 0.0, out)


def focal_loss(logits, labels, alpha=0.5, gamma=2.0):
    """Mean binary focal loss over all candidates, computed from logits."""
    labels = np.asarray(labels)
    sign = np.where(labels == 1, 1.0, -1.0).astype(logits.dtype)
    zt = logits * Tensor(sign)
    kt = T.sigmoid(zt)
    log_kt = -1.0 * T.softplus(-1.0 * zt)
    at = Tensor(np.where(labels == 1, alpha, 1.0 - alpha).astype(logits.dtype))
    loss = -1.0 * at * (1.0 - kt) ** gamma * log_kt
    return loss.mean()


class EmptyLabels(ValueError):
    pass


def reid_train_step(net, batch: ReIDBatch, lr=1e-3, weight_decay=0.01, max_grad_norm=5.0) -> float:
    """Forward, focal loss, backward and one AdamW step. Returns the batch loss."""
    if batch.labels.sum() < 1:
        raise EmptyLabels("training batch has no positive candidate")
    net.store.zero_grad()
    loss = focal_loss(net.logits(batch), batch.labels, net.cfg.alpha, net.cfg.gamma)
    if not np.isfinite(loss.item()):
        raise FloatingPointError(f"non-finite Re-ID loss {loss.item()}")
    loss.backward()
    clip_grad_norm(net.store, max_grad_norm)
    adamw_step(net.store, lr=lr, weight_decay=weight_decay)
    return loss.item()


def batch_loss(net, batch: ReIDBatch) -> float:
    with no_grad():
        return focal_loss(net.logits(batch), batch.labels, net.cfg.alpha, net.cfg.gamma).item()


# --------------------------------------------------------------------------
# Inference helpers
# --------------------------------------------------------------------------
def predict_logits(net, samples) -> list:
    """Raw (uncalibrated) logits per localized sample (list of arrays)."""
    if not samples:
        return []
    batch = make_reid_batch(samples, net.cfg, net.dtype, with_labels=False)
    if batch.n_candidates == 0:
        return [np.zeros(0) for _ in samples]
    with no_grad():
        z = net.logits(batch).data.astype(np.float64)
    out, c = [], 0
    for n in batch.counts:
        out.append(z[c:c + n])
        c += n
    return out


def predict_scores(net, samples) -> list:
    """Calibrated sigmoid affinities per localized sample (list of arrays)."""
    a, b = net.calibration
    return [0.5 * (1.0 + np.tanh(0.5 * (a * z + b))) for z in predict_logits(net, samples)]


def fit_platt(logits, labels, l2=1e-3, iters=100) -> tuple:
    """Fit ``sigmoid(a * z + b)`` to binary labels by Newton's method on the log loss.

    A small ridge pulls (a, b) toward the identity (1, 0). Falls back to
    the identity when the fit would flip the score order (a <= 0).
    """
    z = np.asarray(logits, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if z.size == 0 or y.min() == y.max():
        return 1.0, 0.0
    X = np.stack([z, np.ones_like(z)], axis=1)
    w0 = np.array([1.0, 0.0])
    w = w0.copy()
    for _ in range(iters):
        p = 0.5 * (1.0 + np.tanh(0.5 * (X @ w)))
        g = X.T @ (p - y) + l2 * (w - w0)
        H = (X * (p * (1 - p))[:, None]).T @ X + l2 * np.eye(2)
        step = np.linalg.solve(H, g)
        w -= step
        if np.abs(step).max() < 1e-10:
            break
    if not np.all(np.isfinite(w)) or w[0] <= 0:
        return 1.0, 0.0
    return float(w[0]), float(w[1])


def calibrate(net, samples, batch_size=64) -> tuple:
    """Set ``net.calibration`` from localized labelled samples and return it.

    Focal loss leaves the sigmoid outputs under-confident, so the raw scale
    says little about the fixed association threshold. The affine map keeps
    the candidate ranking (a > 0) and only rescales.
    """
    zs, ys = [], []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        for z, s in zip(predict_logits(net, chunk), chunk):
            zs.append(z)
            ys.append(np.arange(len(z)) == s.gt_match_index)
    net.calibration = fit_platt(np.concatenate(zs), np.concatenate(ys)) if zs else (1.0, 0.0)
    return net.calibration


def _query_sample(history, futures, graph, cfg):
    raw = PseudoOcclusionSample(history, list(futures), -1, 0.0, np.zeros((0, 3)), np.zeros(0), graph)
    return localize_sample(raw, reid_frame(raw), crop_radius=cfg.crop_radius, max_lanelets=cfg.max_lanelets)


def motion_affinity(history, futures, net: MotionAffinityNet) -> np.ndarray:
    """Motion affinity in [0, 1] for each future candidate (global-frame inputs)."""
    if not futures:
        return np.zeros(0)
    return predict_scores(net, [_query_sample(history, futures, None, net.cfg)])[0]


def map_affinity(history, futures, graph: Optional[LaneGraph], net: MapAffinityNet) -> np.ndarray:
    """Map-based affinity in [0, 1] per candidate; an empty graph uses tracklet encodings only."""
    if not futures:
        return np.zeros(0)
    return predict_scores(net, [_query_sample(history, futures, graph, net.cfg)])[0]


def fuse_scores(c_motion, c_map, w: float = 0.5):
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"fusion weight must lie in [0, 1], got {w}")
    return w * np.asarray(c_map) + (1.0 - w) * np.asarray(c_motion)


@dataclass
class AffinityResult:
    c_motion: float
    c_map: float
    c_final: float
    pair: tuple


@dataclass
class ScoreMatrix:
    rows: list
    cols: list
    scores: np.ndarray
    valid: np.ndarray
    c_motion: Optional[np.ndarray] = None
    c_map: Optional[np.ndarray] = None

    def affinities(self):
        out = []
        for i, j in zip(*np.nonzero(self.valid)):
            out.append(AffinityResult(float(self.c_motion[i, j]), float(self.c_map[i, j]),
                                      float(self.scores[i, j]), (self.rows[i], self.cols[j])))
        return out


def build_score_matrix(histories, tracklets, graph, motion_net=None, map_net=None, tau=1.5,
                       threshold=0.9, w=0.5) -> ScoreMatrix:
    """Fused n x N affinity matrix with validity (time gap and threshold).

    A pair is dropped when it fails the candidate filter or when both branch
    scores fall below ``threshold``. With one branch missing, the other's
    score stands in for it.
    """
    histories = list(histories)
    tracklets = list(tracklets)
    n, N = len(histories), len(tracklets)
    col = {id(t): j for j, t in enumerate(tracklets)}
    cm = np.zeros((n, N))
    cp = np.zeros((n, N))
    cand_mask = np.zeros((n, N), dtype=bool)
    jobs = []
    for i, h in enumerate(histories):
        cands = candidate_filter(h, tracklets, tau)
        if cands:
            jobs.append((i, cands))
    if jobs:
        for net, target in ((motion_net, cm), (map_net, cp)):
            if net is None:
                continue
            use_graph = graph if net is map_net else None
            samples = [_query_sample(histories[i], cands, use_graph, net.cfg) for i, cands in jobs]
            for (i, cands), sc in zip(jobs, predict_scores(net, samples)):
                for c, s in zip(cands, sc):
                    target[i, col[id(c)]] = s
        for i, cands in jobs:
            for c in cands:
                cand_mask[i, col[id(c)]] = True
    if motion_net is None:
        cm = cp.copy()
    if map_net is None:
        cp = cm.copy()
    return assemble_score_matrix([h.id for h in histories], [t.id for t in tracklets], cm, cp, cand_mask,
                                 threshold, w)


def assemble_score_matrix(rows, cols, c_motion, c_map, candidate_mask, threshold=0.9, w=0.5) -> ScoreMatrix:
    """Fuse branch scores; a pair is valid if it is a candidate and not both scores are below threshold."""
    cm = np.asarray(c_motion, dtype=np.float64).reshape(len(rows), len(cols))
    cp = np.asarray(c_map, dtype=np.float64).reshape(len(rows), len(cols))
    cand = np.asarray(candidate_mask, dtype=bool).reshape(cm.shape)
    fused = fuse_scores(cm, cp, w)
    valid = cand & ~((cm < threshold) & (cp < threshold))
    return ScoreMatrix(list(rows), list(cols), np.where(cand, fused, 0.0), valid, cm, cp)


def greedy_match(m: ScoreMatrix) -> list:
    """Greedy bipartite matching on the valid entries of a score matrix."""
    pairs = kernels.greedy_match_indices(m.scores, m.valid)
    return [(m.rows[i], m.cols[j]) for i, j in pairs.tolist()]


def branch_accuracy(scores_per_sample, samples) -> float:
    hits = [int(np.argmax(s)) == smp.gt_match_index for s, smp in zip(scores_per_sample, samples)]
    return float(np.mean(hits)) if hits else math.nan
