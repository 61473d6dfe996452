"""Association, completion and tracking metrics plus the report container."""

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .geometry import wrap_angle

MISS_THRESHOLD_M = 2.0
MATCH_THRESHOLD_M = 2.0


def association_accuracy(predicted, gt_indices) -> float:
    """Fraction of samples whose predicted candidate index equals the GT index.

    ``None`` predictions count as wrong. An empty input is an error.
    """
    predicted = list(predicted)
    gt_indices = list(gt_indices)
    if len(predicted) != len(gt_indices):
        raise ValueError(f"{len(predicted)} predictions for {len(gt_indices)} samples")
    if not predicted:
        raise ValueError("association accuracy needs at least one sample")
    return float(np.mean([p is not None and int(p) == int(g) for p, g in zip(predicted, gt_indices)]))


def _pairs(pred, gt):
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape[:-1] != g.shape[:-1]:
        raise ValueError(f"prediction shape {p.shape} does not match ground truth {g.shape}")
    return p, g


def pointwise_errors(pred, gt) -> np.ndarray:
    p, g = _pairs(pred, gt)
    return np.linalg.norm(p[..., :2] - g[..., :2], axis=-1)


def ade(pred, gt) -> float:
    """Mean Euclidean distance between predicted and GT positions."""
    e = pointwise_errors(pred, gt)
    return float(e.mean()) if e.size else math.nan


def yaw_error_deg(pred, gt) -> float:
    """Mean absolute wrapped heading error in degrees."""
    p, g = _pairs(pred, gt)
    if p.size == 0:
        return math.nan
    return float(np.degrees(np.abs(wrap_angle(p[..., 2] - g[..., 2]))).mean())


def miss_rate(preds, gts, threshold: float = MISS_THRESHOLD_M) -> float:
    """Share of trajectories whose largest pointwise error exceeds ``threshold``."""
    misses = [float(pointwise_errors(p, g).max()) > threshold for p, g in zip(preds, gts) if len(g)]
    return float(np.mean(misses)) if misses else math.nan


def _frames(tracks, rate):
    out = {}
    for trk in tracks:
        for row in trk.data:
            k = int(round(row[0] * rate))
            out.setdefault(k, []).append((trk.id, row[1], row[2]))
    return out


def ids_and_recall(pred_tracks, gt_tracks, rate: float, threshold: float = MATCH_THRESHOLD_M):
    """Identity switches and detection recall of predicted tracks against GT.

    Each frame, GT and predicted boxes are matched greedily by centre
    distance within ``threshold``. An identity switch is counted when a GT
    object is matched to a different predicted id than at its previous
    match. Returns ``(ids, recall)``.
    """
    gt_f = _frames(gt_tracks, rate)
    pr_f = _frames(pred_tracks, rate)
    last = {}
    ids = 0
    matched = 0
    total = 0
    for k in sorted(gt_f):
        g = gt_f[k]
        p = pr_f.get(k, [])
        total += len(g)
        if not p:
            continue
        gxy = np.array([[x, y] for _, x, y in g])
        pxy = np.array([[x, y] for _, x, y in p])
        d = np.linalg.norm(gxy[:, None] - pxy[None], axis=-1)
        pairs = kernels.greedy_match_indices(-d, d <= threshold)
        for i, j in pairs.tolist():
            gid, pid = g[i][0], p[j][0]
            matched += 1
            if gid in last and last[gid] != pid:
                ids += 1
            last[gid] = pid
    return ids, (matched / total if total else math.nan)


def _fmt(v) -> str:
    if v is None or not math.isfinite(v):
        return "n/a"
    if float(v).is_integer() and abs(v) < 1e12:
        return str(int(v))
    return f"{v:.4f}"


@dataclass
class EvalReport:
    """Named metric values plus free-form run metadata."""

    metrics: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.metrics[key]

    def add(self, key, value):
        self.metrics[key] = None if value is None else float(value)
        return self

    def to_json(self) -> str:
        def clean(v):
            return None if isinstance(v, float) and not math.isfinite(v) else v
        return json.dumps({"metrics": {k: clean(v) for k, v in self.metrics.items()}, "meta": self.meta},
                          indent=2, sort_keys=True)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def from_json(cls, text) -> "EvalReport":
        d = json.loads(text)
        return cls({k: (math.nan if v is None else v) for k, v in d["metrics"].items()}, d.get("meta", {}))

    def to_text(self) -> str:
        w = max([len(k) for k in self.metrics] + [6])
        return "\n".join(f"{k:<{w}}  {_fmt(v)}" for k, v in self.metrics.items())

    def as_dict(self):
        return asdict(self)


def summarize_completion(preds, gts, prefix: str = "") -> dict:
    """ADE, yaw error and miss rate over a list of (n, 3) trajectories."""
    flat_p = np.concatenate([np.asarray(p).reshape(-1, 3) for p in preds]) if preds else np.zeros((0, 3))
    flat_g = np.concatenate([np.asarray(g).reshape(-1, 3) for g in gts]) if gts else np.zeros((0, 3))
    return {
        f"{prefix}ade": ade(flat_p, flat_g),
        f"{prefix}yaw_deg": yaw_error_deg(flat_p, flat_g),
        f"{prefix}miss_rate": miss_rate(preds, gts),
    }


def improvement(base: float, new: float) -> Optional[float]:
    """Relative reduction of ``new`` against ``base`` (0.2 means 20% lower)."""
    if not base or not math.isfinite(base):
        return None
    return (base - new) / base
