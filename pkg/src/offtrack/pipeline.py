"""Offline refinement of a fragmented scene: Re-ID links, then gap completion."""

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .completion import GAP_DISTANCE_M, GAP_TIME_S, CompletionNet, complete_track
from .reid import MapAffinityNet, MotionAffinityNet, build_score_matrix, greedy_match
from .synth import SceneRecord
from .types import Tracklet, merge_tracklets

log = logging.getLogger(__name__)

OBSERVED = "observed"


@dataclass
class PipelineConfig:
    tau: float = 1.5
    threshold: float = 0.9
    w: float = 0.5
    history_window: float = 2.5
    gap_distance: float = GAP_DISTANCE_M
    gap_time: float = GAP_TIME_S

    @classmethod
    def from_dict(cls, d):
        return cls(**(d or {}))


@dataclass
class Models:
    motion: Optional[MotionAffinityNet] = None
    map: Optional[MapAffinityNet] = None
    completion: Optional[CompletionNet] = None


@dataclass
class InferResult:
    scene: SceneRecord  # ``tracks`` replaced by the refined tracks
    links: list = field(default_factory=list)  # (history id, future id)
    fills: dict = field(default_factory=dict)  # method -> count


def scene_input_tracks(scene: SceneRecord) -> list:
    return list(scene.tracks) if scene.tracks is not None else list(scene.gt_tracks)


def link_tracks(tracks, graph, models: Models, cfg: PipelineConfig, scene_end: float) -> list:
    """Greedy Re-ID links between tracklets that end early and later-starting ones."""
    ended = [t for t in tracks if t.t_end < scene_end]
    if not ended or (models.motion is None and models.map is None):
        return []
    # Re-ID sees only the recent past of each history, as in training.
    recent = [t.select_time(t.t_end - cfg.history_window - 1e-6) for t in ended]
    m = build_score_matrix(recent, tracks, graph, models.motion, models.map, cfg.tau, cfg.threshold, cfg.w)
    return greedy_match(m)


def _chains(tracks, links):
    by_id = {t.id: t for t in tracks}
    nxt = dict(links)
    targets = set(nxt.values())
    out = []
    for t in sorted(tracks, key=lambda t: (t.t_start, str(t.id))):
        if t.id in targets:
            continue
        chain = [by_id[t.id]]
        while chain[-1].id in nxt:
            chain.append(by_id[nxt[chain[-1].id]])
        out.append(chain)
    return out


def _tag(trk: Tracklet, source=OBSERVED) -> Tracklet:
    if trk.source is not None:
        return trk
    return trk.with_data(trk.data, source=[source] * len(trk))


def infer_scene(scene: SceneRecord, models: Models, cfg: Optional[PipelineConfig] = None) -> InferResult:
    """Link fragments with Re-ID and fill every linked gap.

    Unlinked tracklets pass through unchanged apart from ``observed``
    provenance tags. A chain keeps the id of its first tracklet.
    """
    cfg = cfg or PipelineConfig()
    tracks = scene_input_tracks(scene)
    if not tracks:
        return InferResult(replace(scene, tracks=[], _graph=scene._graph))
    scene_end = max(t.t_end for t in tracks)
    graph = scene.lane_graph
    links = link_tracks(tracks, graph, models, cfg, scene_end)
    fills = {"model": 0, "linear": 0, "none": 0}
    out = []
    for chain in _chains(tracks, links):
        if len(chain) == 1:
            out.append(_tag(chain[0]))
            continue
        parts = [_tag(chain[0])]
        for prev, nxt in zip(chain[:-1], chain[1:]):
            done = complete_track(prev, nxt, graph, models.completion, scene.sample_rate,
                                  cfg.gap_distance, cfg.gap_time)
            fills[done.method] += 1
            fill = done.filled_tracklet()
            if fill is not None:
                parts.append(fill)
            parts.append(_tag(nxt))
        out.append(merge_tracklets(chain[0].id, parts))
    out.sort(key=lambda t: str(t.id))
    log.info("scene %s: %d tracklets, %d links, fills %s", scene.scene_id, len(tracks), len(links), fills)
    return InferResult(replace(scene, tracks=out, _graph=scene._graph), links, fills)


# --------------------------------------------------------------------------
# Scene-level evaluation against ground truth
# --------------------------------------------------------------------------
def _row_keys(trk: Tracklet, rate):
    return {(int(round(t * rate)), round(float(x), 6), round(float(y), 6))
            for t, x, y in trk.data[:, :3]}


def fragment_successors(scene: SceneRecord):
    """GT-consecutive fragment pairs ``(frag, next_frag, gt_track)`` of a fragmented scene."""
    if scene.tracks is None:
        return []
    rate = scene.sample_rate
    owner = {}
    for g in scene.gt_tracks:
        keys = _row_keys(g, rate)
        for f in scene.tracks:
            if _row_keys(f, rate) <= keys:
                owner.setdefault(g.id, []).append(f)
    out = []
    for g in scene.gt_tracks:
        frags = sorted(owner.get(g.id, []), key=lambda f: f.t_start)
        for a, b in zip(frags[:-1], frags[1:]):
            out.append((a, b, g))
    return out


def _containing(pred_tracks, frag, rate):
    keys = _row_keys(frag, rate)
    for p in pred_tracks:
        if keys <= _row_keys(p, rate):
            return p
    return None


def gap_outcomes(pred_scene: SceneRecord, gt_scene: SceneRecord):
    """For each GT gap between fragments: whether it was linked and the filled poses.

    Returns ``(linked_flags, [(pred_poses, gt_poses), ...])`` where the pose
    lists cover the gap timestamps the prediction actually filled.
    """
    rate = gt_scene.sample_rate
    pred = scene_input_tracks(pred_scene)
    flags, trajs = [], []
    for a, b, g in fragment_successors(gt_scene):
        pa = _containing(pred, a, rate)
        pb = _containing(pred, b, rate)
        ok = pa is not None and pa is pb
        flags.append(ok)
        if not ok:
            continue
        k_pred = np.round(pa.times * rate).astype(int)
        k_gt = np.round(g.times * rate).astype(int)
        lo, hi = int(round(a.t_end * rate)), int(round(b.t_start * rate))
        ks = [k for k in range(lo + 1, hi) if k in set(k_pred) and k in set(k_gt)]
        if not ks:
            continue
        ip = {k: i for i, k in enumerate(k_pred)}
        ig = {k: i for i, k in enumerate(k_gt)}
        trajs.append((pa.poses[[ip[k] for k in ks]], g.poses[[ig[k] for k in ks]]))
    return flags, trajs
