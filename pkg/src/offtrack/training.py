"""Epoch loops for the Re-ID branches and the completion network.

Every random choice in an epoch (sample order, augmentation) derives from
``(seed, epoch)``, and checkpoints carry the optimizer moments, so a run
resumed from the end of epoch ``k`` continues exactly as the uninterrupted
run would have.
"""

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import completion as C
from . import reid as R
from .eval import ade
from .nn.optim import step_decay_lr
from .nn.params import read_checkpoint_metadata, update_checkpoint_metadata
from .synth import TrackTooShort, augment_sample, eligible_targets, localize_sample, mask_pseudo_occlusion, reid_frame

log = logging.getLogger(__name__)

MODEL_KINDS = {
    R.MotionAffinityNet.kind: (R.MotionAffinityNet, R.ReIDConfig),
    R.MapAffinityNet.kind: (R.MapAffinityNet, R.ReIDConfig),
    C.CompletionNet.kind: (C.CompletionNet, C.CompletionConfig),
}


@dataclass
class TrainConfig:
    epochs: int = 12
    batch_size: int = 32
    lr: float = 3e-3
    lr_decay: float = 0.6
    decay_every: int = 10
    weight_decay: float = 0.01
    max_grad_norm: float = 5.0
    seed: int = 0
    augment: bool = True
    time_budget_s: Optional[float] = None

    @classmethod
    def from_dict(cls, d):
        return cls(**(d or {}))


@dataclass
class TrainResult:
    kind: str
    epochs_run: int
    best_epoch: int
    best_metric: float
    history: list = field(default_factory=list)
    checkpoint: Optional[str] = None


# --------------------------------------------------------------------------
# Sample construction
# --------------------------------------------------------------------------
def build_samples(scenes, seed: int, per_scene: int = 8, min_candidates: int = 1, **mask_kw) -> list:
    """Pseudo-occlusion samples from a list of scenes.

    Up to ``per_scene`` targets are drawn per scene (seeded by ``seed`` and
    the scene seed); samples with fewer than ``min_candidates`` candidates
    are dropped.
    """
    out = []
    for sc in scenes:
        rng = np.random.default_rng([int(seed), int(sc.seed)])
        targets = eligible_targets(sc)
        for k in rng.permutation(len(targets))[:per_scene]:
            try:
                smp = mask_pseudo_occlusion(sc, seed, targets[k], **mask_kw)
            except TrackTooShort:
                continue
            if len(smp.future_candidates) >= min_candidates:
                out.append(smp)
    return out


def localize_reid(samples, cfg: R.ReIDConfig) -> list:
    return [localize_sample(s, reid_frame(s), crop_radius=cfg.crop_radius, max_lanelets=cfg.max_lanelets)
            for s in samples]


def localize_completion(samples, cfg: C.CompletionConfig) -> list:
    return [C.localize_for_completion(s, cfg) for s in samples]


# --------------------------------------------------------------------------
# Model construction and checkpoints
# --------------------------------------------------------------------------
def build_model(kind: str, config: Optional[dict] = None, seed: int = 0):
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {sorted(MODEL_KINDS)}")
    cls, cfg_cls = MODEL_KINDS[kind]
    return cls(cfg_cls.from_dict(config), seed=seed)


def save_checkpoint(net, path, **meta):
    meta = dict(meta)
    meta.update(kind=net.kind, model_config=asdict(net.cfg))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    net.store.save(path, meta)


def load_model(path):
    """Rebuild a network (and its optimizer state) from a checkpoint file."""
    meta = read_checkpoint_metadata(path)
    if "kind" not in meta:
        raise ValueError(f"{path} is not a model checkpoint (no 'kind' in metadata)")
    net = build_model(meta["kind"], meta.get("model_config"), seed=0)
    net.store.load(path)
    if "calibration" in meta and hasattr(net, "calibration"):
        net.calibration = tuple(float(x) for x in meta["calibration"])
    return net, meta


# --------------------------------------------------------------------------
# Per-kind hooks
# --------------------------------------------------------------------------
def _epoch_seed(seed, epoch, index):
    return [int(seed), int(epoch), int(index)]


def _reid_batch(net, samples, idx, tcfg, epoch):
    smps = [samples[i] for i in idx]
    if tcfg.augment:
        smps = [augment_sample(s, _epoch_seed(tcfg.seed, epoch, i)) for s, i in zip(smps, idx)]
    return R.make_reid_batch(smps, net.cfg, net.dtype)


def _reid_step(net, batch, lr, tcfg):
    return R.reid_train_step(net, batch, lr, tcfg.weight_decay, tcfg.max_grad_norm)


def evaluate_reid(net, samples, batch_size=64) -> float:
    """Top-1 association accuracy over localized samples."""
    scores = []
    for i in range(0, len(samples), batch_size):
        scores.extend(R.predict_scores(net, samples[i:i + batch_size]))
    return R.branch_accuracy(scores, samples)


def _completion_batch(net, samples, idx, tcfg, epoch):
    items = []
    for i in idx:
        s = samples[i]
        if tcfg.augment:
            s = augment_sample(s, _epoch_seed(tcfg.seed, epoch, i))
        items.append(C.sample_item(s))
    return C.make_completion_batch(items, net.cfg, net.dtype)


def _completion_step(net, batch, lr, tcfg):
    return C.completion_train_step(net, batch, lr, tcfg.weight_decay, tcfg.max_grad_norm)


def completion_predictions(net, samples, batch_size=64):
    """Per-sample (initial, refined, gt) local-frame trajectories."""
    out = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        b = C.make_completion_batch([C.sample_item(s) for s in chunk], net.cfg, net.dtype)
        init, ref = C.predict_batch(net, b)
        for k, s in enumerate(chunk):
            n = len(s.masked_times)
            out.append((init[k, :n], ref[k, :n], np.asarray(s.masked_gt)))
    return out


def evaluate_completion(net, samples) -> dict:
    preds = completion_predictions(net, samples)
    cat = lambda j: np.concatenate([p[j] for p in preds]) if preds else np.zeros((0, 3))  # noqa: E731
    return {"ade_initial": ade(cat(0), cat(2)), "ade_refined": ade(cat(1), cat(2))}


def _hooks(net):
    if net.kind == C.CompletionNet.kind:
        return _completion_batch, _completion_step, lambda n, s: evaluate_completion(n, s)["ade_refined"], False
    return _reid_batch, _reid_step, evaluate_reid, True


# --------------------------------------------------------------------------
# Loop
# --------------------------------------------------------------------------
def fit(net, train_samples, val_samples, tcfg: TrainConfig, out_dir=None, resume=None,
        restore_best=True, checkpoint_meta=None) -> TrainResult:
    """Train ``net`` on localized samples, keeping the best validation checkpoint.

    With ``out_dir`` set, ``last.json`` is written after every epoch and
    ``best.json`` whenever validation improves. ``resume`` points at a
    ``last.json`` to continue from. With ``restore_best`` the network ends
    up holding the best-validation weights. ``checkpoint_meta`` is merged
    into every checkpoint's metadata.
    """
    make_batch, step, evaluate, higher = _hooks(net)
    if not train_samples:
        raise ValueError("no training samples")
    history = []
    start = 0
    best = -math.inf if higher else math.inf
    best_epoch = -1
    best_state = None
    if resume is not None:
        meta = net.store.load(resume)
        start = int(meta["epoch"]) + 1
        history = list(meta.get("history", []))
        best = meta.get("best_metric", best)
        best_epoch = int(meta.get("best_epoch", -1))
    out = Path(out_dir) if out_dir else None
    t_begin = time.time()
    epochs_run = start
    for epoch in range(start, tcfg.epochs):
        t0 = time.time()
        lr = step_decay_lr(tcfg.lr, epoch, tcfg.lr_decay, tcfg.decay_every)
        order = np.random.default_rng(_epoch_seed(tcfg.seed, epoch, 0)).permutation(len(train_samples))
        losses = []
        for i in range(0, len(order), tcfg.batch_size):
            idx = order[i:i + tcfg.batch_size].tolist()
            batch = make_batch(net, train_samples, idx, tcfg, epoch)
            try:
                losses.append(step(net, batch, lr, tcfg))
            except R.EmptyLabels:
                continue
        metric = float(evaluate(net, val_samples)) if val_samples else float("nan")
        # Wall time goes to the log only so checkpoints stay byte-reproducible.
        rec = {"epoch": epoch, "lr": lr, "loss": float(np.mean(losses)) if losses else float("nan"),
               "val": metric}
        history.append(rec)
        log.info("%s epoch %d loss %.5f val %.4f (%.1fs)", net.kind, epoch, rec["loss"], metric, time.time() - t0)
        improved = math.isfinite(metric) and ((metric > best) if higher else (metric < best))
        if improved:
            best, best_epoch = metric, epoch
            best_state = net.store.state_dict()
        if out is not None:
            meta = dict(checkpoint_meta or {})
            meta.update(epoch=epoch, history=history, best_metric=best, best_epoch=best_epoch,
                        train_config=asdict(tcfg))
            if improved:
                save_checkpoint(net, out / "best.json", **meta)
            save_checkpoint(net, out / "last.json", **meta)
        epochs_run = epoch + 1
        if tcfg.time_budget_s is not None and time.time() - t_begin > tcfg.time_budget_s:
            log.warning("%s training stopped at epoch %d: time budget of %.0fs used",
                        net.kind, epoch, tcfg.time_budget_s)
            break
    if restore_best and best_state is not None:
        net.store.load_state_dict(best_state)
    elif restore_best and resume is not None and out is not None and (out / "best.json").exists():
        net.store.load(out / "best.json")
    ckpt = str(out / "best.json") if out is not None and best_epoch >= 0 else None
    return TrainResult(net.kind, epochs_run, best_epoch, best, history, ckpt)


def train_from_scenes(run_cfg, kind: str, train_scenes, val_scenes, out_dir=None, resume=None) -> tuple:
    """Build, sample and fit one model of ``kind`` as configured by a run config.

    Returns ``(net, TrainResult)``; checkpoints carry the config's model
    hash and seed.
    """
    is_comp = kind == C.CompletionNet.kind
    tcfg = run_cfg.train_completion if is_comp else run_cfg.train_reid
    data = run_cfg.data
    net = build_model(kind, run_cfg.model_config(kind), seed=run_cfg.seed)
    train = build_samples(train_scenes, run_cfg.seed, data.samples_per_scene, data.min_candidates)
    val = build_samples(val_scenes, run_cfg.seed + 1, data.samples_per_scene, data.min_candidates)
    loc = localize_completion if is_comp else localize_reid
    val = loc(val, net.cfg)
    res = fit(net, loc(train, net.cfg), val, tcfg, out_dir=out_dir, resume=resume,
              checkpoint_meta={"config_hash": run_cfg.model_hash(kind), "seed": run_cfg.seed})
    if not is_comp:
        cal = R.calibrate(net, val)
        log.info("%s calibration a=%.4f b=%.4f", kind, *cal)
        if res.checkpoint:
            update_checkpoint_metadata(res.checkpoint, calibration=list(cal))
    return net, res
