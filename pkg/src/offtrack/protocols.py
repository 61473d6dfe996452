"""Benchmark protocols on pseudo-occlusion samples (association and completion)."""

from dataclasses import replace

import numpy as np

from . import reid as R
from .baselines import cvm_associate, linear_interpolate
from .eval import association_accuracy, summarize_completion
from .synth import PseudoOcclusionSample, TrackTooShort, eligible_targets, mask_pseudo_occlusion
from .training import completion_predictions, localize_completion, localize_reid

COMPLETION_MASK_S = 6.0
COMPLETION_CONTEXT_S = 2.0


def reid_samples(scenes, seed, per_scene=8, min_candidates=5, limit=None) -> list:
    from .training import build_samples
    out = build_samples(scenes, seed, per_scene=per_scene, min_candidates=min_candidates)
    return out[:limit] if limit is not None else out


def reid_protocol(samples, motion=None, map_net=None, w=0.5, batch_size=64) -> dict:
    """Top-1 accuracy of CVM, each learned branch and their fusion."""
    gt = [s.gt_match_index for s in samples]
    out = {"n_samples": len(samples),
           "mean_candidates": float(np.mean([len(s.future_candidates) for s in samples])) if samples else 0.0,
           "cvm": association_accuracy([cvm_associate(s.history, s.future_candidates) for s in samples], gt)}
    scores = {}
    for name, net in (("motion", motion), ("map", map_net)):
        if net is None:
            continue
        loc = localize_reid(samples, net.cfg)
        sc = []
        for i in range(0, len(loc), batch_size):
            sc.extend(R.predict_scores(net, loc[i:i + batch_size]))
        scores[name] = sc
        out[name] = association_accuracy([int(np.argmax(s)) for s in sc], gt)
    if len(scores) == 2:
        fused = [R.fuse_scores(a, b, w) for a, b in zip(scores["motion"], scores["map"])]
        out["fused"] = association_accuracy([int(np.argmax(s)) for s in fused], gt)
    return out


def _trim_future(sample: PseudoOcclusionSample, seconds: float) -> PseudoOcclusionSample:
    fut = sample.gt_future
    cut = fut.select_time(hi=fut.t_start + seconds + 1e-6) if len(fut) > 1 else fut
    return replace(sample, future_candidates=[cut], gt_match_index=0)


def completion_samples(scenes, seed, per_scene=8, mask_s=COMPLETION_MASK_S, context_s=COMPLETION_CONTEXT_S,
                       limit=None) -> list:
    """Fixed-shape gaps: ``context_s`` of history, ``mask_s`` hidden, ``context_s`` of future."""
    out = []
    for sc in scenes:
        rng = np.random.default_rng([int(seed), int(sc.seed)])
        targets = eligible_targets(sc)
        for k in rng.permutation(len(targets))[:per_scene]:
            try:
                smp = mask_pseudo_occlusion(sc, seed, targets[k], history_len=context_s, target_duration=mask_s)
            except TrackTooShort:
                continue
            if smp.gt_future.t_end - smp.gt_future.t_start < context_s - 1e-6:
                continue
            out.append(_trim_future(smp, context_s))
    return out[:limit] if limit is not None else out


def completion_protocol(samples, net, rate=2.0) -> dict:
    """ADE / yaw error / miss rate of linear interpolation, the motion head and the refined head."""
    gts = [np.asarray(s.masked_gt) for s in samples]
    lin = [np.asarray(linear_interpolate(s.history.last, s.gt_future.first, rate), dtype=np.float64).reshape(-1, 3)
           for s in samples]
    out = {"n_samples": len(samples)}
    out.update(summarize_completion(lin, gts, "linear_"))
    if net is not None:
        preds = completion_predictions(net, localize_completion(samples, net.cfg))
        out.update(summarize_completion([p[0] for p in preds], [p[2] for p in preds], "motion_"))
        out.update(summarize_completion([p[1] for p in preds], [p[2] for p in preds], "refined_"))
    return out
