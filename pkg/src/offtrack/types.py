"""Domain types shared across the package."""

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

# Column layout of Tracklet.data.
T_COL, X_COL, Y_COL, YAW_COL, L_COL, W_COL, H_COL, S_COL, VX_COL, VY_COL = range(10)
OBS_FIELDS = ("t", "x", "y", "theta", "l", "w", "h", "s", "vx", "vy")


class Pose2D(NamedTuple):
    x: float
    y: float
    theta: float


@dataclass(frozen=True)
class Observation:
    """One timed box: position, yaw, size, confidence and velocity."""

    t: float
    x: float
    y: float
    theta: float
    l: float = 4.5
    w: float = 1.9
    h: float = 1.6
    s: float = 1.0
    vx: float = 0.0
    vy: float = 0.0

    def __post_init__(self):
        vals = (self.t, self.x, self.y, self.theta, self.l, self.w, self.h, self.s, self.vx, self.vy)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite observation field: {self}")
        if not 0.0 <= self.s <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.s}")
        if min(self.l, self.w, self.h) <= 0:
            raise ValueError(f"box size must be positive, got l={self.l} w={self.w} h={self.h}")
        if not -math.pi < self.theta <= math.pi:
            raise ValueError(f"yaw must lie in (-pi, pi], got {self.theta}")

    def as_row(self):
        return [self.t, self.x, self.y, self.theta, self.l, self.w, self.h, self.s, self.vx, self.vy]

    @property
    def pose(self) -> Pose2D:
        return Pose2D(self.x, self.y, self.theta)


class Tracklet:
    """A time-ordered run of observations of one object.

    Observations live in a read-only (n, 10) float array whose columns
    follow :data:`OBS_FIELDS`. ``source`` optionally tags each row (e.g.
    ``"observed"``, ``"model"``, ``"linear"``) for completed tracks.
    """

    __slots__ = ("id", "cls", "data", "source")

    def __init__(self, id, cls: str, obs, source: Optional[Sequence[str]] = None):
        if isinstance(obs, np.ndarray):
            data = np.array(obs, dtype=np.float64)
        else:
            obs = list(obs)
            data = np.array([o.as_row() if isinstance(o, Observation) else list(o) for o in obs],
                            dtype=np.float64)
        if data.ndim != 2 or data.shape[0] == 0:
            raise ValueError(f"tracklet {id!r} must have at least one observation")
        if data.shape[1] != len(OBS_FIELDS):
            raise ValueError(f"tracklet rows need {len(OBS_FIELDS)} fields, got {data.shape[1]}")
        if np.any(np.diff(data[:, T_COL]) <= 0):
            raise ValueError(f"tracklet {id!r} timestamps must strictly increase")
        data.setflags(write=False)
        self.id = id
        self.cls = cls
        self.data = data
        if source is not None:
            source = tuple(source)
            if len(source) != len(data):
                raise ValueError("source tags must align with observations")
        self.source = source

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        return (f"Tracklet(id={self.id!r}, cls={self.cls!r}, n={len(self)}, "
                f"t=[{self.t_start:.2f}, {self.t_end:.2f}])")

    @property
    def obs(self) -> list:
        return [Observation(*row) for row in self.data.tolist()]

    @property
    def times(self) -> np.ndarray:
        return self.data[:, T_COL]

    @property
    def xy(self) -> np.ndarray:
        return self.data[:, X_COL:Y_COL + 1]

    @property
    def poses(self) -> np.ndarray:
        """(n, 3) array of x, y, yaw."""
        return self.data[:, [X_COL, Y_COL, YAW_COL]]

    @property
    def t_start(self) -> float:
        return float(self.data[0, T_COL])

    @property
    def t_end(self) -> float:
        return float(self.data[-1, T_COL])

    @property
    def first(self) -> Observation:
        return Observation(*self.data[0].tolist())

    @property
    def last(self) -> Observation:
        return Observation(*self.data[-1].tolist())

    def slice(self, start=None, stop=None, id=None) -> "Tracklet":
        src = None if self.source is None else self.source[start:stop]
        return Tracklet(self.id if id is None else id, self.cls, self.data[start:stop], src)

    def select_time(self, lo=-np.inf, hi=np.inf, id=None) -> "Tracklet":
        """Observations with ``lo < t <= hi``."""
        keep = (self.times > lo) & (self.times <= hi)
        idx = np.flatnonzero(keep)
        if idx.size == 0:
            raise ValueError(f"no observations of {self.id!r} in ({lo}, {hi}]")
        return self.slice(int(idx[0]), int(idx[-1]) + 1, id=id)

    def with_data(self, data, id=None, source=None) -> "Tracklet":
        return Tracklet(self.id if id is None else id, self.cls, data,
                        self.source if source is None else source)


def merge_tracklets(id, parts: Iterable[Tracklet]) -> Tracklet:
    parts = sorted(parts, key=lambda p: p.t_start)
    data = np.concatenate([p.data for p in parts], axis=0)
    src = None
    if any(p.source is not None for p in parts):
        src = []
        for p in parts:
            src.extend(p.source if p.source is not None else ("observed",) * len(p))
    return Tracklet(id, parts[0].cls, data, src)
