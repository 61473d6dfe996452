"""Command-line entry points: generate, train, infer, eval, baseline.

Exit codes: 0 success, 2 invalid input (bad flags, config, schema or
checkpoint mismatch), 1 any other runtime failure.
"""

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .eval import EvalReport, ids_and_recall, summarize_completion
from .pipeline import Models, gap_outcomes, infer_scene, scene_input_tracks
from .synth import GeneratorConfig, SceneRecord, fragment_scene, generate_scene, read_scenes, write_scenes

log = logging.getLogger("offtrack")

SPLITS = ("train", "val", "test")
MODEL_CHOICES = ("reid-motion", "reid-map", "completion")
REPORT_SCHEMA = 1


class UsageError(ValueError):
    """Invalid input; maps to exit code 2."""


# --------------------------------------------------------------------------
# Scene generation
# --------------------------------------------------------------------------
def scene_seeds(seed: int, split: str, n: int) -> list:
    rng = np.random.default_rng([int(seed), SPLITS.index(split)])
    return [int(s) for s in rng.integers(0, 2**31 - 1, size=n)]


def _make_scene(args):
    seed, scene_id, gen_dict, frac, gap = args
    sc = generate_scene(seed, GeneratorConfig.from_dict(gen_dict), scene_id=scene_id)
    return fragment_scene(sc, seed, fraction=frac, gap_range=tuple(gap))


def make_scenes(cfg: RunConfig, split: str, n=None, jobs: int = 1) -> list:
    """Deterministic scenes for a split; worker count does not change the output."""
    n = getattr(cfg.data, f"{split}_scenes") if n is None else n
    gen = cfg.to_dict()["generator"]
    work = [(s, f"{split}-{i:05d}", gen, cfg.data.fragment_fraction, cfg.data.fragment_gap)
            for i, s in enumerate(scene_seeds(cfg.seed, split, n))]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_make_scene, work, chunksize=4))
    return [_make_scene(w) for w in work]


def _histogram(values, edges):
    counts, _ = np.histogram(values, bins=edges)
    return {"edges": [float(e) for e in edges], "counts": [int(c) for c in counts]}


def generation_stats(scenes, cfg: RunConfig) -> dict:
    from .training import build_samples
    samples = build_samples(scenes, cfg.seed, per_scene=cfg.data.samples_per_scene)
    cands = [len(s.future_candidates) for s in samples]
    durs = [s.occlusion_duration for s in samples]
    return {
        "schema_version": REPORT_SCHEMA,
        "n_scenes": len(scenes),
        "n_samples": len(samples),
        "candidate_count": _histogram(cands, np.arange(0, 70, 5)),
        "occlusion_duration_s": _histogram(durs, np.arange(1.5, 13.5, 1.0)),
        "candidate_range": [int(min(cands)), int(max(cands))] if cands else None,
        "config_hash": cfg.hash(),
    }


def cmd_generate(args, cfg: RunConfig):
    scenes = make_scenes(cfg, args.split, args.n_scenes, args.jobs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_scenes(out, scenes)
    stats = generation_stats(scenes, cfg)
    _write_json(out.with_suffix(".stats.json"), stats)
    print(json.dumps({k: stats[k] for k in ("n_scenes", "n_samples", "candidate_range")}))


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------
def _load_or_make(path, cfg, split, jobs):
    if path:
        return read_scenes(path)
    return make_scenes(cfg, split, jobs=jobs)


def cmd_train(args, cfg: RunConfig):
    from . import training as TR

    train_sc = _load_or_make(args.scenes, cfg, "train", args.jobs)
    val_sc = _load_or_make(args.val_scenes, cfg, "val", args.jobs)
    kinds = MODEL_CHOICES if args.model == "all" else (args.model,)
    out = Path(args.out)
    summary = {}
    for kind in kinds:
        resume = args.resume if len(kinds) == 1 else None
        if resume:
            _check_checkpoint(resume, cfg, kind)
        _, res = TR.train_from_scenes(cfg, kind, train_sc, val_sc, out_dir=out / kind, resume=resume)
        summary[kind] = {"best_epoch": res.best_epoch, "best_val": res.best_metric, "epochs": res.epochs_run,
                         # relative to --out so the summary does not depend on where the run lives
                         "checkpoint": f"{kind}/best.json" if res.checkpoint else None}
    _write_json(out / "train_summary.json", {"schema_version": REPORT_SCHEMA, "models": summary,
                                             "config": cfg.to_dict()})
    print(json.dumps(summary, indent=2))


def _check_checkpoint(path, cfg: RunConfig, kind: str):
    from .nn.params import read_checkpoint_metadata

    p = Path(path)
    if not p.exists():
        raise UsageError(f"checkpoint not found: {p}")
    meta = read_checkpoint_metadata(p)
    if meta.get("kind") != kind:
        raise UsageError(f"{p} holds a {meta.get('kind')!r} model, expected {kind!r}")
    want = cfg.model_hash(kind)
    if meta.get("config_hash") != want:
        raise UsageError(f"{p} was trained with config hash {meta.get('config_hash')}, current config gives {want}")


def load_models(model_dir, cfg: RunConfig, require=()) -> Models:
    """Best checkpoints under ``model_dir/<kind>/best.json`` after a hash check."""
    from .training import load_model

    found = {}
    for kind in MODEL_CHOICES:
        p = Path(model_dir) / kind / "best.json"
        if not p.exists():
            if kind in require:
                raise UsageError(f"missing checkpoint {p}")
            continue
        _check_checkpoint(p, cfg, kind)
        found[kind] = load_model(p)[0]
    return Models(found.get("reid-motion"), found.get("reid-map"), found.get("completion"))


# --------------------------------------------------------------------------
# Inference
# --------------------------------------------------------------------------
_WORKER = {}


def _init_worker(model_dir, cfg_dict):
    cfg = RunConfig.from_dict(cfg_dict)
    _WORKER["models"] = load_models(model_dir, cfg)
    _WORKER["pipeline"] = cfg.pipeline


def _infer_one(scene_dict):
    res = infer_scene(SceneRecord.from_dict(scene_dict), _WORKER["models"], _WORKER["pipeline"])
    return res.scene.to_dict(), len(res.links)


def cmd_infer(args, cfg: RunConfig):
    if not args.models:
        raise UsageError("infer needs --models <checkpoint dir>")
    scenes = read_scenes(args.scenes)
    models = load_models(args.models, cfg)
    if models.motion is None and models.map is None:
        raise UsageError(f"no Re-ID checkpoint under {args.models}")
    docs = [sc.to_dict() for sc in scenes]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs, initializer=_init_worker,
                                 initargs=(str(args.models), cfg.to_dict())) as ex:
            results = list(ex.map(_infer_one, docs))
    else:
        _WORKER.update(models=models, pipeline=cfg.pipeline)
        results = [_infer_one(d) for d in docs]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        for d, _ in results:
            fh.write(json.dumps(d, separators=(",", ":")) + "\n")
    print(json.dumps({"scenes": len(results), "links": int(sum(n for _, n in results))}))


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------
def tracking_report(pred_scenes, gt_scenes, cfg: RunConfig) -> EvalReport:
    """IDS / recall and gap metrics of predicted tracks against GT scenes."""
    gt_by_id = {s.scene_id: s for s in gt_scenes}
    ids_total, matched, boxes = 0, 0.0, 0
    flags, trajs = [], []
    for pred in pred_scenes:
        gt = gt_by_id.get(pred.scene_id)
        if gt is None:
            raise UsageError(f"prediction scene {pred.scene_id!r} has no ground truth")
        ids, recall = ids_and_recall(scene_input_tracks(pred), gt.gt_tracks, gt.sample_rate)
        n = sum(len(t) for t in gt.gt_tracks)
        ids_total += ids
        matched += recall * n
        boxes += n
        f, tr = gap_outcomes(pred, gt)
        flags += f
        trajs += tr
    rep = EvalReport(meta={"schema_version": REPORT_SCHEMA, "config": cfg.to_dict(), "config_hash": cfg.hash()})
    rep.add("n_scenes", len(pred_scenes))
    rep.add("ids", ids_total)
    rep.add("recall", matched / boxes if boxes else float("nan"))
    rep.add("n_samples", len(flags))
    rep.add("association_accuracy", float(np.mean(flags)) if flags else float("nan"))
    comp = summarize_completion([p for p, _ in trajs], [g for _, g in trajs])
    rep.add("ade", comp["ade"])
    rep.add("yaw_error", comp["yaw_deg"])
    rep.add("miss_rate", comp["miss_rate"])
    return rep


def _scene_ids(a, b):
    return sorted(s.scene_id for s in a) == sorted(s.scene_id for s in b)


def cmd_eval(args, cfg: RunConfig):
    if not args.pred or not args.gt:
        raise UsageError("eval needs --pred <tracks.jsonl> and --gt <scenes.jsonl>")
    pred, gt = read_scenes(args.pred), read_scenes(args.gt)
    if not _scene_ids(pred, gt):
        raise UsageError("prediction and ground-truth files cover different scenes")
    rep = tracking_report(pred, gt, cfg)
    if args.models:
        from .protocols import completion_protocol, completion_samples, reid_protocol, reid_samples

        models = load_models(args.models, cfg)
        rs = reid_samples(gt, cfg.seed, cfg.data.samples_per_scene, min_candidates=5)
        for k, v in reid_protocol(rs, models.motion, models.map, cfg.pipeline.w).items():
            rep.add(f"pseudo_reid_{k}", v)
        cs = completion_samples(gt, cfg.seed, cfg.data.samples_per_scene)
        for k, v in completion_protocol(cs, models.completion, gt[0].sample_rate if gt else 2.0).items():
            rep.add(f"pseudo_completion_{k}", v)
    _emit_report(rep, args.out)


def cmd_baseline(args, cfg: RunConfig):
    from .protocols import completion_protocol, completion_samples, reid_protocol, reid_samples

    scenes = read_scenes(args.scenes) if args.scenes else make_scenes(cfg, "test", jobs=args.jobs)
    rep = EvalReport(meta={"schema_version": REPORT_SCHEMA, "config": cfg.to_dict(), "config_hash": cfg.hash(),
                           "method": "cvm+linear"})
    frag = tracking_report([s for s in scenes if s.tracks is not None], scenes, cfg)
    for k in ("ids", "recall"):
        rep.add(f"fragmented_{k}", frag[k])
    rs = reid_samples(scenes, cfg.seed, cfg.data.samples_per_scene, min_candidates=5)
    r = reid_protocol(rs)
    rep.add("n_samples", r["n_samples"])
    rep.add("association_accuracy", r["cvm"])
    cs = completion_samples(scenes, cfg.seed, cfg.data.samples_per_scene)
    c = completion_protocol(cs, None, scenes[0].sample_rate if scenes else 2.0)
    rep.add("ade", c["linear_ade"])
    rep.add("yaw_error", c["linear_yaw_deg"])
    rep.add("miss_rate", c["linear_miss_rate"])
    _emit_report(rep, args.out)


def _emit_report(rep: EvalReport, out):
    text = rep.to_text()
    if out:
        p = Path(out)
        p.parent.mkdir(parents=True, exist_ok=True)
        rep.save(p)
        p.with_suffix(".txt").write_text(text + "\n")
    print(text)


def _write_json(path, obj):
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------
def _common(p):
    p.add_argument("--config", help="run config (JSON or YAML); defaults to the built-in desk profile")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for scene-parallel steps")
    p.add_argument("--out", help="output path")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    ap = argparse.ArgumentParser(prog="offtrack", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"offtrack {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write synthetic scenes (JSONL) plus a stats sidecar")
    _common(p)
    p.add_argument("--split", choices=SPLITS, default="train")
    p.add_argument("--n-scenes", type=int, help="override the split's scene count")

    p = sub.add_parser("train", help="train one model (or all) and keep the best-validation checkpoint")
    _common(p)
    p.add_argument("--model", choices=MODEL_CHOICES + ("all",), default="all")
    p.add_argument("--scenes", help="training scenes (default: generate the train split)")
    p.add_argument("--val-scenes", help="validation scenes (default: generate the val split)")
    p.add_argument("--resume", help="last.json checkpoint to continue from")

    p = sub.add_parser("infer", help="link and complete fragmented tracks")
    _common(p)
    p.add_argument("--models", help="checkpoint directory written by 'train'")
    p.add_argument("--scenes", required=True)

    p = sub.add_parser("eval", help="score predicted tracks against ground truth")
    _common(p)
    p.add_argument("--pred", help="output of 'infer'")
    p.add_argument("--gt", help="scenes file with ground truth")
    p.add_argument("--models", help="also run the pseudo-occlusion protocols with these checkpoints")

    p = sub.add_parser("baseline", help="CVM association and linear interpolation metrics")
    _common(p)
    p.add_argument("--scenes", help="scenes file (default: generate the test split)")
    return ap


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "baseline": cmd_baseline}


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)  # exits with 2 on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise UsageError("--jobs must be at least 1")
        if args.seed is not None and args.seed < 0:
            raise UsageError("--seed must be non-negative")
        if args.command in ("generate", "train") and not args.out:
            raise UsageError(f"{args.command} needs --out")
        if args.command == "infer" and not args.out:
            raise UsageError("infer needs --out")
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg = cfg.with_seed(args.seed)
        COMMANDS[args.command](args, cfg)
        return 0
    except (UsageError, ConfigError) as e:
        print(f"offtrack: error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"offtrack: error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        # Schema/version problems in input files surface as ValueError from the readers.
        print(f"offtrack: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - top-level guard
        log.debug("failure", exc_info=True)
        print(f"offtrack: runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def main_entry():  # console-script wrapper
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    main_entry()
