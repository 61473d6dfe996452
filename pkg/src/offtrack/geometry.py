"""SE(2) frame math and tracklet feature construction."""

import math

import numpy as np

from .types import T_COL, VX_COL, VY_COL, X_COL, Y_COL, YAW_COL, Pose2D, Tracklet

TWO_PI = 2.0 * math.pi


def wrap_angle(a):
    """Map an angle (scalar or array) into (-pi, pi]."""
    arr = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("wrap_angle needs finite input")
    w = np.mod(arr + math.pi, TWO_PI) - math.pi
    # np.mod puts odd multiples of pi at -pi; move them to the closed side.
    w = np.where(w <= -math.pi, w + TWO_PI, w)
    if np.ndim(a) == 0:
        return float(w)
    return w


def _as_pose_array(poses):
    arr = np.asarray([tuple(p) for p in poses] if not isinstance(poses, np.ndarray) else poses,
                     dtype=np.float64)
    return arr.reshape(-1, 3)


def to_local_array(poses: np.ndarray, origin) -> np.ndarray:
    """(n, 3) global poses -> (n, 3) poses in the frame of ``origin``."""
    ox, oy, oth = origin
    c, s = math.cos(oth), math.sin(oth)
    dx = poses[:, 0] - ox
    dy = poses[:, 1] - oy
    out = np.empty_like(poses, dtype=np.float64)
    out[:, 0] = c * dx + s * dy
    out[:, 1] = -s * dx + c * dy
    out[:, 2] = wrap_angle(poses[:, 2] - oth) if len(poses) else poses[:, 2]
    return out


def from_local_array(poses: np.ndarray, origin) -> np.ndarray:
    ox, oy, oth = origin
    c, s = math.cos(oth), math.sin(oth)
    out = np.empty_like(poses, dtype=np.float64)
    out[:, 0] = ox + c * poses[:, 0] - s * poses[:, 1]
    out[:, 1] = oy + s * poses[:, 0] + c * poses[:, 1]
    out[:, 2] = wrap_angle(poses[:, 2] + oth) if len(poses) else poses[:, 2]
    return out


def rotate_xy(xy: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    xy = np.asarray(xy, dtype=np.float64)
    return np.stack([c * xy[..., 0] - s * xy[..., 1], s * xy[..., 0] + c * xy[..., 1]], axis=-1)


def to_local_frame(poses, origin) -> list:
    """Express global ``poses`` in the frame whose origin is ``origin``."""
    arr = to_local_array(_as_pose_array(poses), tuple(origin))
    return [Pose2D(*row) for row in arr.tolist()]


def from_local_frame(poses, origin) -> list:
    """Inverse of :func:`to_local_frame`."""
    arr = from_local_array(_as_pose_array(poses), tuple(origin))
    return [Pose2D(*row) for row in arr.tolist()]


def transform_tracklet(trk: Tracklet, origin, inverse=False) -> Tracklet:
    """Rigidly move a whole tracklet (poses and velocities) into ``origin``'s frame."""
    data = np.array(trk.data)
    pose = data[:, [X_COL, Y_COL, YAW_COL]]
    if inverse:
        data[:, [X_COL, Y_COL, YAW_COL]] = from_local_array(pose, origin)
        data[:, [VX_COL, VY_COL]] = rotate_xy(data[:, [VX_COL, VY_COL]], origin[2])
    else:
        data[:, [X_COL, Y_COL, YAW_COL]] = to_local_array(pose, origin)
        data[:, [VX_COL, VY_COL]] = rotate_xy(data[:, [VX_COL, VY_COL]], -origin[2])
    return trk.with_data(data)


def tracklet_features(trk: Tracklet, origin, t0: float, include_velocity: bool = True) -> np.ndarray:
    """Per-observation motion features in the ``origin`` frame.

    Columns are ``[x, y, yaw, t - t0, cos(yaw), sin(yaw), vx, vy]``; the
    two velocity columns are dropped when ``include_velocity`` is False.
    """
    if trk is None or len(trk) == 0:
        raise ValueError("cannot featurise an empty tracklet")
    local = to_local_array(trk.poses, tuple(origin))
    width = 8 if include_velocity else 6
    out = np.empty((len(trk), width), dtype=np.float64)
    out[:, 0:3] = local
    out[:, 3] = trk.times - t0
    out[:, 4] = np.cos(local[:, 2])
    out[:, 5] = np.sin(local[:, 2])
    if include_velocity:
        out[:, 6:8] = rotate_xy(trk.data[:, [VX_COL, VY_COL]], -origin[2])
    return out


def candidate_filter(history: Tracklet, tracklets, tau: float = 1.5) -> list:
    """Tracklets that begin more than ``tau`` seconds after ``history`` ends.

    The history itself and tracklets of a different class are dropped.
    Output is ordered by (start time, id) so it does not depend on input order.
    """
    if tau < 0:
        raise ValueError("tau must be non-negative")
    end = history.t_end
    out = [trk for trk in tracklets
           if trk.id != history.id and trk.cls == history.cls and trk.t_start - end > tau]
    return sorted(out, key=lambda trk: (trk.t_start, str(trk.id)))


def shortest_arc_interp(a0: float, a1: float, frac):
    """Interpolate yaw from ``a0`` to ``a1`` along the shorter arc."""
    d = wrap_angle(a1 - a0)
    return wrap_angle(a0 + np.asarray(frac) * d)


def time_index(t: float, rate: float) -> int:
    return int(round(t * rate))
