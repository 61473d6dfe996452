"""Vectorised lane map: centerline polylines -> lanelets -> lane graph.

Each lane pose row is ``[x, y, yaw, cos(yaw), sin(yaw), D, on_stop_line,
on_crosswalk]`` where ``D`` marks the final pose of a lane.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import rotate_xy, to_local_array, wrap_angle

log = logging.getLogger(__name__)

LANE_FEATURES = 8
MAX_LANELET_LENGTH = 20.0
RESOLUTION = 1.0


class LanePose:
    """Named view over one lane pose row."""

    __slots__ = ("x_lane", "y_lane", "theta_lane", "cos", "sin", "end_flag", "on_stop_line",
                 "on_crosswalk")

    def __init__(self, row):
        (self.x_lane, self.y_lane, self.theta_lane, self.cos, self.sin, d, stop, cross) = map(float, row)
        self.end_flag = int(d)
        self.on_stop_line = int(stop)
        self.on_crosswalk = int(cross)

    @property
    def L(self):
        return (self.on_stop_line, self.on_crosswalk)


@dataclass
class LanePolyline:
    """Raw lane centerline with optional per-point flags and successor lane ids."""

    id: str
    points: np.ndarray
    stop_line: Optional[np.ndarray] = None
    crosswalk: Optional[np.ndarray] = None
    successors: Sequence[str] = ()

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        n = len(self.points)
        for name in ("stop_line", "crosswalk"):
            v = getattr(self, name)
            v = np.zeros(n, dtype=bool) if v is None else np.asarray(v, dtype=bool).reshape(-1)
            if len(v) != n:
                raise ValueError(f"{name} flags must align with points ({len(v)} vs {n})")
            setattr(self, name, v)
        self.successors = tuple(self.successors)

    @property
    def length(self) -> float:
        if len(self.points) < 2:
            return 0.0
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())

    def to_dict(self):
        return {
            "id": self.id,
            "points": self.points.round(4).tolist(),
            "stop_line": np.flatnonzero(self.stop_line).tolist(),
            "crosswalk": np.flatnonzero(self.crosswalk).tolist(),
            "successors": list(self.successors),
        }

    @classmethod
    def from_dict(cls, d):
        pts = np.asarray(d["points"], dtype=np.float64).reshape(-1, 2)
        stop = np.zeros(len(pts), dtype=bool)
        stop[np.asarray(d.get("stop_line", []), dtype=int)] = True
        cross = np.zeros(len(pts), dtype=bool)
        cross[np.asarray(d.get("crosswalk", []), dtype=int)] = True
        return cls(d["id"], pts, stop, cross, d.get("successors", ()))


@dataclass
class Lanelet:
    id: int
    lane_id: str
    poses: np.ndarray  # (n, 8)
    successors: list = field(default_factory=list)
    predecessors: list = field(default_factory=list)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.poses[:, :2], axis=0), axis=1).sum())

    @property
    def lane_poses(self):
        return [LanePose(r) for r in self.poses]


@dataclass
class LaneGraph:
    lanelets: list
    skipped: int = 0

    @property
    def n_lane(self) -> int:
        return len(self.lanelets)

    @property
    def max_poses(self) -> int:
        return max((len(ll.poses) for ll in self.lanelets), default=0)

    def feature_block(self, width=None):
        """Zero-padded (N_lane, l, 8) pose features plus the (N_lane, l) validity mask."""
        width = width or self.max_poses
        feats = np.zeros((self.n_lane, width, LANE_FEATURES))
        mask = np.zeros((self.n_lane, width), dtype=bool)
        for i, ll in enumerate(self.lanelets):
            k = min(len(ll.poses), width)
            feats[i, :k] = ll.poses[:k]
            mask[i, :k] = True
        return feats, mask

    def all_poses(self) -> np.ndarray:
        if not self.lanelets:
            return np.zeros((0, LANE_FEATURES))
        return np.concatenate([ll.poses for ll in self.lanelets], axis=0)

    def subset(self, keep) -> "LaneGraph":
        keep = list(keep)
        remap = {ll_idx: i for i, ll_idx in enumerate(keep)}
        out = []
        for i, idx in enumerate(keep):
            ll = self.lanelets[idx]
            out.append(Lanelet(i, ll.lane_id, ll.poses,
                               [remap[s] for s in ll.successors if s in remap],
                               [remap[p] for p in ll.predecessors if p in remap]))
        return LaneGraph(out, self.skipped)

    def transformed(self, origin) -> "LaneGraph":
        """Copy of the graph expressed in the frame of ``origin`` (x, y, yaw)."""
        if not self.lanelets:
            return LaneGraph([], self.skipped)
        rows = self.all_poses().copy()
        rows[:, :3] = to_local_array(rows[:, :3], origin)
        rows[:, 3] = np.cos(rows[:, 2])
        rows[:, 4] = np.sin(rows[:, 2])
        cuts = np.cumsum([len(ll.poses) for ll in self.lanelets])[:-1]
        out = [Lanelet(ll.id, ll.lane_id, p, list(ll.successors), list(ll.predecessors))
               for ll, p in zip(self.lanelets, np.split(rows, cuts))]
        return LaneGraph(out, self.skipped)

    def rotated(self, angle: float) -> "LaneGraph":
        """Copy rotated by ``angle`` about the coordinate origin."""
        return self.transformed((0.0, 0.0, -angle))

    def crop(self, centers, radius: float, max_lanelets: Optional[int] = None) -> "LaneGraph":
        """Lanelets with at least one pose within ``radius`` of any of ``centers``."""
        centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
        if not self.lanelets or len(centers) == 0:
            return LaneGraph([], self.skipped)
        rows = self.all_poses()[:, :2]
        starts = np.concatenate([[0], np.cumsum([len(ll.poses) for ll in self.lanelets])[:-1]])
        d2 = ((rows[:, None, :] - centers[None]) ** 2).sum(-1).min(axis=1)
        dists = np.sqrt(np.minimum.reduceat(d2, starts))
        keep = np.flatnonzero(dists <= radius)
        if max_lanelets is not None and len(keep) > max_lanelets:
            keep = keep[np.argsort(dists[keep], kind="stable")[:max_lanelets]]
            keep.sort()
        return self.subset(keep.tolist())


def resample_polyline(points: np.ndarray, resolution: float = RESOLUTION):
    """Resample at near-uniform arc-length spacing ``length / round(length)``.

    Returns the new points, their arc-length stations and the index of the
    source segment each station falls in.
    """
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    length = s[-1]
    n_seg = max(1, int(round(length / resolution)))
    stations = np.linspace(0.0, length, n_seg + 1)
    x = np.interp(stations, s, points[:, 0])
    y = np.interp(stations, s, points[:, 1])
    src = np.clip(np.searchsorted(s, stations, side="right") - 1, 0, len(points) - 2)
    return np.stack([x, y], axis=1), stations, src


def _tangent_yaw(points: np.ndarray) -> np.ndarray:
    d = np.gradient(points, axis=0) if len(points) > 2 else np.repeat(np.diff(points, axis=0), len(points), axis=0)
    return np.arctan2(d[:, 1], d[:, 0])


def build_lane_graph(polylines) -> LaneGraph:
    """Resample lane polylines at 1 m and cut them into lanelets of at most 20 m.

    Consecutive lanelets of one lane share their boundary pose. ``D`` is set
    only on the final pose of a lane. Zero-length polylines are skipped and
    counted in ``LaneGraph.skipped``.
    """
    polys = [p if isinstance(p, LanePolyline) else LanePolyline.from_dict(p) for p in polylines]
    lanelets = []
    first_of_lane = {}
    last_of_lane = {}
    skipped = 0
    for poly in polys:
        if len(poly.points) < 2 or poly.length <= 1e-9:
            skipped += 1
            continue
        pts, stations, src = resample_polyline(poly.points)
        spacing = stations[1] - stations[0]
        yaw = wrap_angle(_tangent_yaw(pts))
        # Flags follow the nearer endpoint of the source segment.
        seg_len = np.linalg.norm(np.diff(poly.points, axis=0), axis=1)
        s_src = np.concatenate([[0.0], np.cumsum(seg_len)])
        frac = (stations - s_src[src]) / np.maximum(seg_len[src], 1e-12)
        near = np.where(frac < 0.5, src, src + 1)
        rows = np.zeros((len(pts), LANE_FEATURES))
        rows[:, 0:2] = pts
        rows[:, 2] = yaw
        rows[:, 3] = np.cos(yaw)
        rows[:, 4] = np.sin(yaw)
        rows[-1, 5] = 1.0
        rows[:, 6] = poly.stop_line[near]
        rows[:, 7] = poly.crosswalk[near]
        per = max(1, int(math.floor(MAX_LANELET_LENGTH / spacing + 1e-9)))
        n_seg = len(pts) - 1
        ids = []
        for a in range(0, n_seg, per):
            b = min(a + per, n_seg)
            ll = Lanelet(len(lanelets), poly.id, rows[a:b + 1].copy())
            if ids:
                lanelets[ids[-1]].successors.append(ll.id)
                ll.predecessors.append(ids[-1])
            lanelets.append(ll)
            ids.append(ll.id)
        first_of_lane[poly.id] = ids[0]
        last_of_lane[poly.id] = ids[-1]
    for poly in polys:
        if poly.id not in last_of_lane:
            continue
        tail = lanelets[last_of_lane[poly.id]]
        for succ in poly.successors:
            if succ in first_of_lane:
                head = lanelets[first_of_lane[succ]]
                tail.successors.append(head.id)
                head.predecessors.append(tail.id)
    if skipped:
        log.warning("build_lane_graph skipped %d degenerate polyline(s)", skipped)
    return LaneGraph(lanelets, skipped)


def rotate_lane_rows(rows: np.ndarray, angle: float) -> np.ndarray:
    out = rows.copy()
    out[..., 0:2] = rotate_xy(rows[..., 0:2], angle)
    out[..., 2] = wrap_angle(rows[..., 2] + angle)
    out[..., 3] = np.cos(out[..., 2])
    out[..., 4] = np.sin(out[..., 2])
    return out
