"""Synthetic driving scenes and pseudo-occlusion sampling.

Scenes are generated from a map template (straight road, curved road or a
four-way intersection). Vehicles follow lane routes with piecewise-constant
acceleration, a fraction of them changing lanes or drifting off the lane
centerline. Observations are sampled on a fixed grid with Gaussian noise.
"""

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import rotate_xy, to_local_array, transform_tracklet, wrap_angle
from .lanes import LaneGraph, LanePolyline, build_lane_graph
from .types import T_COL, VX_COL, VY_COL, X_COL, Y_COL, YAW_COL, Pose2D, Tracklet

SCHEMA_VERSION = 1
TEMPLATES = ("straight", "curved", "intersection")


class InfeasibleConfig(ValueError):
    pass


@dataclass
class GeneratorConfig:
    template: str = "mixed"  # one of TEMPLATES or "mixed"
    n_vehicles: int = 24
    duration: float = 20.0
    sample_rate: float = 2.0
    lanes_per_direction: int = 2
    lane_width: float = 3.5
    noise_xy: float = 0.15
    noise_theta: float = 0.02
    noise_v: float = 0.3
    speed_range: tuple = (0.0, 15.0)
    initial_speed: tuple = (4.0, 14.0)
    accel_range: tuple = (-3.0, 2.0)
    accel_std: float = 1.2
    lane_change_fraction: float = 0.15
    off_lane_fraction: float = 0.15
    late_entry_fraction: float = 0.3
    min_spacing: float = 10.0

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        for k in ("speed_range", "initial_speed", "accel_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# --------------------------------------------------------------------------
# Map templates
# --------------------------------------------------------------------------
def _resample(points, step=1.0):
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    n = max(1, int(round(s[-1] / step)))
    st = np.linspace(0, s[-1], n + 1)
    return np.stack([np.interp(st, s, points[:, 0]), np.interp(st, s, points[:, 1])], axis=1)


def _offset(points, d):
    tang = np.gradient(points, axis=0)
    tang /= np.linalg.norm(tang, axis=1, keepdims=True)
    normal = np.stack([-tang[:, 1], tang[:, 0]], axis=1)
    return points + d * normal


def _arc_path(pieces, step=0.25):
    """Concatenate straight pieces ``("S", length)`` and arcs ``("A", radius, angle)``."""
    pts = [np.zeros(2)]
    x, y, h = 0.0, 0.0, 0.0
    for piece in pieces:
        if piece[0] == "S":
            n = max(1, int(piece[1] / step))
            for _ in range(n):
                x += step * math.cos(h)
                y += step * math.sin(h)
                pts.append(np.array([x, y]))
        else:
            _, radius, angle = piece
            n = max(1, int(abs(angle) * radius / step))
            dh = angle / n
            chord = 2 * radius * math.sin(abs(dh) / 2)
            for _ in range(n):
                h_mid = h + dh / 2
                x += chord * math.cos(h_mid)
                y += chord * math.sin(h_mid)
                h += dh
                pts.append(np.array([x, y]))
    return np.asarray(pts)


def _flags(n):
    return np.zeros(n, dtype=bool), np.zeros(n, dtype=bool)


@dataclass
class RoadMap:
    lanes: dict  # id -> LanePolyline
    routes: list  # list of lists of lane ids (a vehicle's lane sequence)
    neighbours: dict = field(default_factory=dict)  # lane id -> {+1: id, -1: id} lateral
    starts: list = field(default_factory=list)  # lane ids where vehicles may start


def _two_way_road(ref, cfg, prefix, crosswalk_at=None):
    lanes, routes, neigh = {}, [], {}
    w = cfg.lane_width
    k_n = cfg.lanes_per_direction
    for direction in (1, -1):
        ids = []
        for k in range(k_n):
            off = -(k + 0.5) * w if direction == 1 else (k + 0.5) * w
            pts = _resample(_offset(ref, off))
            if direction == -1:
                pts = pts[::-1].copy()
            stop, cross = _flags(len(pts))
            if crosswalk_at is not None:
                s = np.concatenate([[0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
                mid = s[-1] * crosswalk_at if direction == 1 else s[-1] * (1 - crosswalk_at)
                cross[(s > mid - 2) & (s < mid + 2)] = True
                stop[(s > mid - 3.5) & (s <= mid - 2)] = True
            lid = f"{prefix}{'f' if direction == 1 else 'b'}{k}"
            lanes[lid] = LanePolyline(lid, pts, stop, cross)
            routes.append([lid])
            ids.append(lid)
        for k, lid in enumerate(ids):
            # Lane k+1 lies to the right of lane k for vehicles driving on it.
            neigh[lid] = {}
            if k + 1 < k_n:
                neigh[lid][-1] = ids[k + 1]
            if k > 0:
                neigh[lid][+1] = ids[k - 1]
    return RoadMap(lanes, routes, neigh, [r[0] for r in routes])


def straight_map(cfg, rng):
    length = 320.0
    ref = np.stack([np.linspace(-length / 2, length / 2, 641), np.zeros(641)], axis=1)
    return _two_way_road(ref, cfg, "s", crosswalk_at=0.5)


def curved_map(cfg, rng):
    pieces = [("S", rng.uniform(15, 30))]
    sign = rng.choice([-1.0, 1.0])
    for _ in range(4):
        pieces.append(("A", rng.uniform(35, 70), sign * math.radians(rng.uniform(50, 110))))
        pieces.append(("S", rng.uniform(10, 30)))
        sign = -sign if rng.random() < 0.75 else sign
    ref = _arc_path(pieces)
    ref -= ref.mean(axis=0)
    return _two_way_road(ref, cfg, "c")


def _bezier(p0, d0, p3, d3, step=0.25):
    c = 0.5 * np.linalg.norm(p3 - p0)
    p1 = p0 + c * d0
    p2 = p3 - c * d3
    n = max(8, int(np.linalg.norm(p3 - p0) / step) * 2)
    u = np.linspace(0, 1, n)[:, None]
    return ((1 - u) ** 3) * p0 + 3 * ((1 - u) ** 2) * u * p1 + 3 * (1 - u) * u ** 2 * p2 + u ** 3 * p3


def intersection_map(cfg, rng):
    w = cfg.lane_width
    k_n = cfg.lanes_per_direction
    hb = k_n * w + 4.0
    arm = 110.0
    lanes, routes, neigh = {}, [], {}
    inc, out = {}, {}
    for a in range(4):
        phi = a * math.pi / 2
        u = np.array([math.cos(phi), math.sin(phi)])
        n = np.array([-math.sin(phi), math.cos(phi)])
        in_ids, out_ids = [], []
        for k in range(k_n):
            off = (k + 0.5) * w
            p_far = (hb + arm) * u + off * n
            p_edge = hb * u + off * n
            pts = _resample(np.stack([p_far, p_edge]))
            stop, cross = _flags(len(pts))
            d_end = np.linalg.norm(pts - p_edge, axis=1)
            cross[d_end <= 3.0] = True
            stop[(d_end > 3.0) & (d_end <= 4.0)] = True
            lid = f"i{a}in{k}"
            lanes[lid] = LanePolyline(lid, pts, stop, cross)
            inc[(a, k)] = lid
            in_ids.append(lid)
            q_edge = hb * u - off * n
            q_far = (hb + arm) * u - off * n
            pts = _resample(np.stack([q_edge, q_far]))
            stop, cross = _flags(len(pts))
            cross[np.linalg.norm(pts - q_edge, axis=1) <= 3.0] = True
            lid = f"i{a}out{k}"
            lanes[lid] = LanePolyline(lid, pts, stop, cross)
            out[(a, k)] = lid
            out_ids.append(lid)
        for ids in (in_ids, out_ids):
            for k, lid in enumerate(ids):
                neigh[lid] = {}
                if k + 1 < k_n:
                    neigh[lid][-1] = ids[k + 1]
                if k > 0:
                    neigh[lid][+1] = ids[k - 1]
    succ = {lid: [] for lid in lanes}
    connectors = {}
    for a in range(4):
        for k in range(k_n):
            src = lanes[inc[(a, k)]]
            p0 = src.points[-1]
            d0 = src.points[-1] - src.points[-2]
            d0 /= np.linalg.norm(d0)
            targets = [((a + 2) % 4, k)]
            if k == 0:
                targets.append(((a + 3) % 4, 0))  # left turn
            if k == k_n - 1:
                targets.append(((a + 1) % 4, k_n - 1))  # right turn
            for tb, tk in targets:
                dst = lanes[out[(tb, tk)]]
                p3 = dst.points[0]
                d3 = dst.points[1] - dst.points[0]
                d3 /= np.linalg.norm(d3)
                pts = _resample(_bezier(p0, d0, p3, d3))
                cid = f"x{a}{k}to{tb}{tk}"
                stop, cross = _flags(len(pts))
                lanes[cid] = LanePolyline(cid, pts, stop, cross, (dst.id,))
                succ[src.id].append(cid)
                connectors[cid] = (src.id, dst.id)
                routes.append([src.id, cid, dst.id])
    for lid, s in succ.items():
        if s:
            p = lanes[lid]
            lanes[lid] = LanePolyline(p.id, p.points, p.stop_line, p.crosswalk, tuple(s))
    for (a, k), lid in out.items():
        routes.append([lid])
    starts = sorted({r[0] for r in routes})
    return RoadMap(lanes, routes, neigh, starts)


MAP_BUILDERS = {"straight": straight_map, "curved": curved_map, "intersection": intersection_map}


# --------------------------------------------------------------------------
# Scene record
# --------------------------------------------------------------------------
def track_to_dict(trk: Tracklet) -> dict:
    d = {"id": str(trk.id), "class": trk.cls, "obs": trk.data.tolist()}
    if trk.source is not None:
        d["source"] = list(trk.source)
    return d


def track_from_dict(d) -> Tracklet:
    return Tracklet(d["id"], d.get("class", "car"), np.asarray(d["obs"], dtype=np.float64),
                    d.get("source"))


@dataclass
class SceneRecord:
    scene_id: str
    lanes: list  # LanePolyline
    gt_tracks: list  # Tracklet
    sample_rate: float = 2.0
    template: str = ""
    seed: Optional[int] = None
    tracks: Optional[list] = None  # tracker-style fragments, when present
    _graph: Optional[LaneGraph] = field(default=None, repr=False, compare=False)

    @property
    def lane_graph(self) -> LaneGraph:
        if self._graph is None:
            self._graph = build_lane_graph(self.lanes)
        return self._graph

    def track(self, track_id) -> Tracklet:
        for trk in self.gt_tracks:
            if trk.id == track_id:
                return trk
        raise KeyError(track_id)

    @property
    def frame_times(self) -> np.ndarray:
        ts = np.concatenate([t.times for t in self.gt_tracks]) if self.gt_tracks else np.zeros(0)
        return np.unique(ts)

    def to_dict(self) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "scene_id": self.scene_id,
            "template": self.template,
            "seed": self.seed,
            "sample_rate": self.sample_rate,
            "lanes": [ln.to_dict() for ln in self.lanes],
            "gt_tracks": [track_to_dict(t) for t in self.gt_tracks],
        }
        if self.tracks is not None:
            d["tracks"] = [track_to_dict(t) for t in self.tracks]
        return d

    @classmethod
    def from_dict(cls, d) -> "SceneRecord":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported scene schema_version {d.get('schema_version')!r}")
        tracks = d.get("tracks")
        return cls(
            scene_id=d["scene_id"],
            lanes=[LanePolyline.from_dict(x) for x in d["lanes"]],
            gt_tracks=[track_from_dict(x) for x in d["gt_tracks"]],
            sample_rate=float(d.get("sample_rate", 2.0)),
            template=d.get("template", ""),
            seed=d.get("seed"),
            tracks=None if tracks is None else [track_from_dict(x) for x in tracks],
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))


def write_scenes(path, scenes):
    with open(path, "w") as fh:
        for sc in scenes:
            fh.write(sc.to_json())
            fh.write("\n")


def read_scenes(path) -> list:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(SceneRecord.from_dict(json.loads(line)))
    return out


# --------------------------------------------------------------------------
# Vehicle simulation
# --------------------------------------------------------------------------
class _Path:
    def __init__(self, points):
        seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
        keep = np.concatenate([[True], seg > 1e-9])
        points = points[keep]
        self.points = points
        self.s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(points, axis=0), axis=1))])
        self.length = float(self.s[-1])
        d = np.diff(points, axis=0)
        self.seg_yaw = np.arctan2(d[:, 1], d[:, 0])

    def at(self, s):
        s = np.clip(s, 0, self.length)
        x = np.interp(s, self.s, self.points[:, 0])
        y = np.interp(s, self.s, self.points[:, 1])
        # Smooth heading: interpolate unwrapped segment yaws at segment midpoints.
        mids = 0.5 * (self.s[1:] + self.s[:-1])
        yaw_u = np.unwrap(self.seg_yaw)
        h = np.interp(s, mids, yaw_u)
        return x, y, h


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3 - 2 * u)


def _speed_profile(rng, cfg, n_fine, dt):
    v = np.empty(n_fine)
    v0 = rng.uniform(*cfg.initial_speed)
    lo, hi = cfg.speed_range
    a_lo, a_hi = cfg.accel_range
    t_next = 0.0
    acc = 0.0
    cur = v0
    for i in range(n_fine):
        t = i * dt
        if t >= t_next:
            acc = float(np.clip(rng.normal(0.0, cfg.accel_std), a_lo, a_hi))
            t_next = t + rng.uniform(2.0, 5.0)
        v[i] = cur
        cur = min(max(cur + acc * dt, lo), hi)
    return v


def _lateral_profile(rng, cfg, kind, t, sign_options):
    if kind == "lane_change":
        sign = rng.choice(sign_options)
        t0 = rng.uniform(1.0, max(1.5, t[-1] - 6.0))
        dur = rng.uniform(3.0, 5.0)
        return sign * cfg.lane_width * _smoothstep((t - t0) / dur)
    if kind == "off_lane":
        sign = rng.choice([-1.0, 1.0])
        amp = rng.uniform(1.3, 2.2)
        t0 = rng.uniform(0.0, max(0.5, t[-1] - 8.0))
        dur = rng.uniform(2.0, 4.0)
        hold = rng.uniform(3.0, 10.0)
        return sign * amp * (_smoothstep((t - t0) / dur) - _smoothstep((t - t0 - dur - hold) / dur))
    return np.zeros_like(t)


def _round_row_yaw(yaw):
    r = np.round(yaw, 6)
    r = np.where(r > math.pi, np.round(r - 2 * math.pi, 6), r)
    r = np.where(r <= -math.pi, np.round(r + 2 * math.pi, 6), r)
    return r


def generate_scene(seed: int, config: Optional[GeneratorConfig] = None, scene_id=None) -> SceneRecord:
    """Generate one reproducible synthetic scene from ``seed``."""
    cfg = config or GeneratorConfig()
    rng = np.random.default_rng(seed)
    template = cfg.template
    if template == "mixed":
        template = TEMPLATES[int(rng.integers(len(TEMPLATES)))]
    if template not in MAP_BUILDERS:
        raise InfeasibleConfig(f"unknown map template {template!r}")
    road = MAP_BUILDERS[template](cfg, rng)
    start_len = sum(road.lanes[s].length for s in road.starts)
    capacity = int(start_len // cfg.min_spacing)
    if cfg.n_vehicles > capacity:
        raise InfeasibleConfig(f"{cfg.n_vehicles} vehicles exceed lane capacity {capacity} "
                               f"for template {template!r}")
    if cfg.sample_rate <= 0 or cfg.duration <= 0:
        raise InfeasibleConfig("duration and sample_rate must be positive")

    period = 1.0 / cfg.sample_rate
    n_frames = int(round(cfg.duration * cfg.sample_rate)) + 1
    sub = 5
    dt = period / sub
    n_fine = (n_frames - 1) * sub + 1
    t_fine = np.arange(n_fine) * dt

    occupied = {}
    tracks = []
    route_paths = {}
    for vid in range(cfg.n_vehicles):
        r_idx = int(rng.integers(len(road.routes)))
        route = road.routes[r_idx]
        if r_idx not in route_paths:
            pts = np.concatenate([road.lanes[l].points if i == 0 else road.lanes[l].points[1:]
                                  for i, l in enumerate(route)])
            route_paths[r_idx] = _Path(pts)
        path = route_paths[r_idx]
        late = rng.random() < cfg.late_entry_fraction
        first_lane_len = road.lanes[route[0]].length
        s0 = 0.0
        t_spawn = 0.0
        if late:
            t_spawn = float(rng.integers(1, max(2, n_frames // 2))) * period
        else:
            for _ in range(20):
                s0 = rng.uniform(0.0, max(1.0, first_lane_len - 5.0))
                taken = occupied.setdefault(route[0], [])
                if all(abs(s0 - o) >= cfg.min_spacing for o in taken):
                    break
            occupied.setdefault(route[0], []).append(s0)
        v = _speed_profile(rng, cfg, n_fine, dt)
        active = t_fine >= t_spawn - 1e-9
        v = np.where(active, v, 0.0)
        s = s0 + np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * dt)])
        u = rng.random()
        neigh = road.neighbours.get(route[0], {})
        if u < cfg.lane_change_fraction and neigh and len(route) == 1:
            kind, opts = "lane_change", sorted(neigh)
        elif u < cfg.lane_change_fraction + cfg.off_lane_fraction:
            kind, opts = "off_lane", [-1.0, 1.0]
        else:
            kind, opts = "none", [1.0]
        lat = _lateral_profile(rng, cfg, kind, t_fine - t_spawn, [float(o) for o in opts])
        bx, by, bh = path.at(s)
        px = bx - lat * np.sin(bh)
        py = by + lat * np.cos(bh)
        vx = np.gradient(px, dt)
        vy = np.gradient(py, dt)
        speed = np.hypot(vx, vy)
        yaw = np.where(speed > 0.5, np.arctan2(vy, vx), bh)
        inside = active & (s < path.length - 1e-6)
        size_l = rng.uniform(4.0, 5.2)
        size_w = rng.uniform(1.75, 2.1)
        size_h = rng.uniform(1.45, 1.85)
        rows = []
        for f in range(n_frames):
            i = f * sub
            if not inside[i]:
                continue
            rows.append([f * period, px[i], py[i], yaw[i], size_l, size_w, size_h, 1.0, vx[i], vy[i]])
        if len(rows) < 2:
            continue
        data = np.asarray(rows)
        n = len(data)
        data[:, X_COL] += rng.normal(0, cfg.noise_xy, n)
        data[:, Y_COL] += rng.normal(0, cfg.noise_xy, n)
        data[:, YAW_COL] = wrap_angle(data[:, YAW_COL] + rng.normal(0, cfg.noise_theta, n))
        data[:, VX_COL] += rng.normal(0, cfg.noise_v, n)
        data[:, VY_COL] += rng.normal(0, cfg.noise_v, n)
        data[:, 7] = rng.uniform(0.5, 1.0, n)
        # Keep runs contiguous: a vehicle that leaves the map does not return.
        gaps = np.flatnonzero(np.diff(np.round(data[:, T_COL] * cfg.sample_rate)) > 1)
        if len(gaps):
            data = data[:gaps[0] + 1]
            if len(data) < 2:
                continue
        data = np.round(data, 6)
        data[:, YAW_COL] = _round_row_yaw(data[:, YAW_COL])
        tracks.append(Tracklet(f"v{vid:03d}", "car", data))
    lanes = [road.lanes[k] for k in sorted(road.lanes)]
    lanes = [LanePolyline(l.id, np.round(l.points, 3), l.stop_line, l.crosswalk, l.successors) for l in lanes]
    return SceneRecord(scene_id or f"scene{seed}", lanes, tracks, cfg.sample_rate, template, int(seed))


# --------------------------------------------------------------------------
# Pseudo-occlusions
# --------------------------------------------------------------------------
@dataclass
class PseudoOcclusionSample:
    """A history tracklet, its future candidates and the hidden ground truth.

    Coordinates are global unless ``origin`` is set, in which case every
    tracklet, the masked poses and ``lane_graph`` are expressed in that frame.
    """

    history: Tracklet
    future_candidates: list
    gt_match_index: int
    occlusion_duration: float
    masked_gt: np.ndarray  # (n, 3) x, y, yaw
    masked_times: np.ndarray
    lane_graph: Optional[LaneGraph] = None
    origin: Optional[Pose2D] = None
    scene_id: str = ""
    target_id: str = ""

    @property
    def gt_future(self) -> Tracklet:
        return self.future_candidates[self.gt_match_index]

    @property
    def gap(self) -> float:
        return self.gt_future.t_start - self.history.t_end

    def masked_poses(self) -> list:
        return [Pose2D(*r) for r in self.masked_gt.tolist()]


class TrackTooShort(ValueError):
    pass


def _grid_steps(lo, hi, period):
    """Integer multiples k of ``period`` with lo <= k * period <= hi."""
    k_lo = int(math.ceil(lo / period - 1e-9))
    k_hi = int(math.floor(hi / period + 1e-9))
    return k_lo, k_hi


def mask_pseudo_occlusion(scene: SceneRecord, seed: int, target_track, history_max: float = 2.5,
                          duration_range=(1.5, 12.5), max_candidates: Optional[int] = None,
                          history_len: Optional[float] = None,
                          target_duration: Optional[float] = None) -> PseudoOcclusionSample:
    """Cut ``target_track`` into a history and masked futures.

    The history keeps at most ``history_max`` seconds (at least one pose)
    ending at a random cut. Every track still alive after the cut is hidden
    for a random number of grid periods between ``duration_range[0]`` and
    ``min(duration_range[1], remaining - one period)`` so at least its last
    pose stays visible. ``history_len`` / ``target_duration`` pin those
    draws for fixed evaluation protocols.
    """
    rng = np.random.default_rng([int(seed), _stable_hash(str(target_track)), _stable_hash(scene.scene_id)])
    period = 1.0 / scene.sample_rate
    trk = scene.track(target_track)
    d_lo, d_hi = duration_range
    times = trk.times
    n = len(trk)
    k_min, _ = _grid_steps(d_lo, d_hi, period)
    # Cut index c: history ends at times[c]; need k_min hidden + 1 visible after it.
    last_cut = n - 1 - (k_min + 1)
    if target_duration is not None:
        k_fix = int(round(target_duration / period))
        last_cut = n - 1 - (k_fix + 1)
    h_steps_max = int(math.floor(history_max / period + 1e-9))
    first_cut = 0
    if history_len is not None:
        first_cut = int(round(history_len / period))
    if last_cut < first_cut:
        raise TrackTooShort(f"track {target_track!r} too short for a pseudo-occlusion "
                            f"({n} poses at {scene.sample_rate} Hz)")
    c = int(rng.integers(first_cut, last_cut + 1))
    t_cut = float(times[c])
    if history_len is not None:
        h_steps = int(round(history_len / period))
    else:
        h_steps = int(rng.integers(0, min(h_steps_max, c) + 1))
    history = trk.slice(c - h_steps, c + 1)

    candidates = []
    gt_index = -1
    duration = None
    masked = None
    masked_t = None
    for other in sorted(scene.gt_tracks, key=lambda x: str(x.id)):
        if other.t_end <= t_cut:
            continue
        hi = min(d_hi, other.t_end - t_cut - period)
        k_a, k_b = _grid_steps(d_lo, hi, period)
        if k_b < k_a:
            continue
        if other.id == trk.id and target_duration is not None:
            k = int(round(target_duration / period))
        else:
            k = int(rng.integers(k_a, k_b + 1))
        d = k * period
        fut = other.select_time(t_cut + d + 1e-6)
        if other.id == trk.id:
            gt_index = len(candidates)
            duration = d
            hidden = other.select_time(t_cut + 1e-6, t_cut + d + 1e-6)
            masked = hidden.poses.copy()
            masked_t = hidden.times.copy()
        candidates.append(fut)
    if gt_index < 0:
        raise TrackTooShort(f"track {target_track!r} has no visible continuation")
    if max_candidates is not None and len(candidates) > max_candidates:
        others = [i for i in range(len(candidates)) if i != gt_index]
        keep = sorted(rng.choice(others, size=max_candidates - 1, replace=False).tolist() + [gt_index])
        gt_index = keep.index(gt_index)
        candidates = [candidates[i] for i in keep]
    candidates = [c.with_data(c.data, id=f"cand{k:02d}") for k, c in enumerate(candidates)]
    return PseudoOcclusionSample(history, candidates, gt_index, duration, masked, masked_t,
                                 scene.lane_graph, None, scene.scene_id, str(trk.id))


def _stable_hash(s: str) -> int:
    h = 2166136261
    for ch in s.encode():
        h = ((h ^ ch) * 16777619) & 0xFFFFFFFF
    return h


def eligible_targets(scene: SceneRecord, min_duration=1.5) -> list:
    """Ids of tracks long enough to be cut (>= 1 history pose, k_min hidden, 1 visible)."""
    period = 1.0 / scene.sample_rate
    k_min = int(math.ceil(min_duration / period - 1e-9))
    return [t.id for t in scene.gt_tracks if len(t) >= k_min + 2]


def localize_sample(sample: PseudoOcclusionSample, origin, crop_radius: Optional[float] = 15.0,
                    crop_centers=None, max_lanelets: Optional[int] = None) -> PseudoOcclusionSample:
    """Express a sample in the frame of ``origin`` and crop its lane graph.

    Lanelets are kept when any pose lies within ``crop_radius`` of the
    history end or a candidate's first pose (or of ``crop_centers``).
    """
    origin = Pose2D(*origin)
    graph = sample.lane_graph
    if graph is not None and crop_radius is not None:
        if crop_centers is None:
            crop_centers = [sample.history.xy[-1]] + [c.xy[0] for c in sample.future_candidates]
        graph = graph.crop(crop_centers, crop_radius, max_lanelets)
    if graph is not None:
        graph = graph.transformed(origin)
    masked = to_local_array(sample.masked_gt, origin) if len(sample.masked_gt) else sample.masked_gt
    return replace(
        sample,
        history=transform_tracklet(sample.history, origin),
        future_candidates=[transform_tracklet(c, origin) for c in sample.future_candidates],
        masked_gt=masked,
        lane_graph=graph,
        origin=origin,
    )


def reid_frame(sample: PseudoOcclusionSample) -> Pose2D:
    """Re-ID frame: the pose of the history's last observation."""
    return Pose2D(*sample.history.poses[-1])


def completion_frame(history: Tracklet, future: Tracklet) -> Pose2D:
    """Completion frame: midpoint of the gap endpoints, history end heading."""
    a = history.xy[-1]
    b = future.xy[0]
    mid = 0.5 * (a + b)
    return Pose2D(float(mid[0]), float(mid[1]), float(history.poses[-1, 2]))


DEFAULT_AUG_NOISE = {"x": 0.15, "y": 0.15, "theta": 0.02, "vx": 0.3, "vy": 0.3}


def augment_sample(sample: PseudoOcclusionSample, seed: int, rot_range: float = math.pi,
                   noise_std: Optional[dict] = None, angle: Optional[float] = None) -> PseudoOcclusionSample:
    """Random rotation about the coordinate origin plus input noise.

    Every tracklet, the masked ground truth and the lane graph rotate by a
    common angle drawn from ``[-rot_range, rot_range]``. Gaussian noise is
    then added to x, y, yaw, vx, vy of the input tracklets only. A given
    ``angle`` replaces the random draw.
    """
    rng = np.random.default_rng(seed)
    noise = DEFAULT_AUG_NOISE if noise_std is None else noise_std
    draw = float(rng.uniform(-rot_range, rot_range)) if rot_range > 0 else 0.0
    angle = draw if angle is None else float(angle)

    def rot_trk(trk):
        data = np.array(trk.data)
        if angle:
            data[:, [X_COL, Y_COL]] = rotate_xy(data[:, [X_COL, Y_COL]], angle)
            data[:, [VX_COL, VY_COL]] = rotate_xy(data[:, [VX_COL, VY_COL]], angle)
            data[:, YAW_COL] = wrap_angle(data[:, YAW_COL] + angle)
        n = len(data)
        for key, col in (("x", X_COL), ("y", Y_COL), ("vx", VX_COL), ("vy", VY_COL)):
            sd = noise.get(key, 0.0)
            if sd:
                data[:, col] += rng.normal(0.0, sd, n)
        sd = noise.get("theta", 0.0)
        if sd:
            data[:, YAW_COL] = wrap_angle(data[:, YAW_COL] + rng.normal(0.0, sd, n))
        return trk.with_data(data)

    history = rot_trk(sample.history)
    cands = [rot_trk(c) for c in sample.future_candidates]
    masked = np.array(sample.masked_gt, dtype=np.float64)
    if angle and len(masked):
        masked[:, :2] = rotate_xy(masked[:, :2], angle)
        masked[:, 2] = wrap_angle(masked[:, 2] + angle)
    graph = sample.lane_graph.rotated(angle) if (sample.lane_graph is not None and angle) else sample.lane_graph
    return replace(sample, history=history, future_candidates=cands, masked_gt=masked, lane_graph=graph)


# --------------------------------------------------------------------------
# Tracker-style fragmentation for end-to-end runs
# --------------------------------------------------------------------------
def fragment_scene(scene: SceneRecord, seed: int, fraction: float = 0.5,
                   gap_range=(2.0, 8.0), min_piece: int = 2) -> SceneRecord:
    """Hide a random middle segment of some GT tracks and relabel every piece.

    The result's ``tracks`` hold the fragments under fresh ids (no relation
    to GT ids); ``gt_tracks`` is unchanged.
    """
    rng = np.random.default_rng([int(seed), _stable_hash(scene.scene_id)])
    period = 1.0 / scene.sample_rate
    pieces = []
    for trk in scene.gt_tracks:
        n = len(trk)
        k_lo, k_hi = _grid_steps(gap_range[0], gap_range[1], period)
        k_hi = min(k_hi, n - 2 * min_piece)
        if rng.random() >= fraction or k_hi < k_lo:
            pieces.append(trk)
            continue
        k = int(rng.integers(k_lo, k_hi + 1))
        a = int(rng.integers(min_piece, n - min_piece - k + 1))
        pieces.append(trk.slice(0, a))
        pieces.append(trk.slice(a + k, n))
    order = rng.permutation(len(pieces))
    frags = [pieces[i].with_data(pieces[i].data, id=f"trk{j:04d}") for j, i in enumerate(order)]
    frags.sort(key=lambda t: t.id)
    return replace(scene, tracks=frags, _graph=scene._graph)


def config_to_dict(cfg: GeneratorConfig) -> dict:
    d = asdict(cfg)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d
