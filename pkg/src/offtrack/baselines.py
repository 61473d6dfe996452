"""Non-learned reference methods."""

from typing import Optional

import numpy as np

from .geometry import candidate_filter, shortest_arc_interp
from .types import Observation, Pose2D, Tracklet


def cvm_associate(history: Tracklet, futures, tau: float = 1.5) -> Optional[int]:
    """Constant-velocity associator.

    Extrapolates the history's last position with its last velocity to each
    candidate's first timestamp and returns the index (into ``futures``) of
    the candidate whose first position is closest, or ``None``.
    """
    allowed = {id(c) for c in candidate_filter(history, futures, tau)}
    last = history.last
    best, best_d = None, np.inf
    for i, cand in enumerate(futures):
        if id(cand) not in allowed:
            continue
        first = cand.first
        dt = first.t - last.t
        px = last.x + last.vx * dt
        py = last.y + last.vy * dt
        d = float(np.hypot(first.x - px, first.y - py))
        if d < best_d:
            best, best_d = i, d
    return best


def gap_times(t_start: float, t_end: float, rate: float) -> np.ndarray:
    """Grid timestamps strictly between two observation times."""
    n = int(round((t_end - t_start) * rate))
    return t_start + np.arange(1, n) / rate


def linear_interpolate(end: Observation, start: Observation, rate: float) -> list:
    """Straight-line positions and shortest-arc yaw at each missing grid time."""
    if start.t <= end.t:
        raise ValueError("future observation must come after the history observation")
    n = int(round((start.t - end.t) * rate))
    if n <= 1:
        return []
    frac = np.arange(1, n) / n
    xs = end.x + frac * (start.x - end.x)
    ys = end.y + frac * (start.y - end.y)
    yaws = np.atleast_1d(shortest_arc_interp(end.theta, start.theta, frac))
    return [Pose2D(float(x), float(y), float(t)) for x, y, t in zip(xs, ys, yaws)]
