"""Command-line entry point: data generation, training, inference, evaluation and ablations."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .config import Config, SceneConfig, replace
from .errors import LacosteError

log = logging.getLogger("lacoste")


def _load_config(path) -> Config:
    return Config.load(path) if path else Config()


def _num_classes(data_dir: Path, default: int) -> int:
    meta = data_dir / "dataset.json"
    if meta.exists():
        scene = json.loads(meta.read_text()).get("scene")
        if scene:
            return int(scene["num_classes"])
    return default


def _jsonable(obj):
    """Plain JSON types with undefined (NaN) scores written as null."""
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return None if math.isnan(obj) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    from .synthdata import generate_dataset, serialize_dataset

    freq = tuple(np.full(args.classes, 1.0 / args.classes)) if args.classes != 4 else SceneConfig.class_frequencies
    scene = SceneConfig(num_classes=args.classes, class_frequencies=freq, seed=args.seed, noise_std=args.noise,
                        stereo=not args.mono, clip_length=args.length)
    clips = generate_dataset(scene, args.clips, start=args.start)
    serialize_dataset(clips, args.out, scene)
    print(f"wrote {len(clips)} clips to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .pipeline import Lacoste, save_system, train
    from .synthdata import load_dataset

    data = Path(args.data)
    cfg = _load_config(args.config)
    cfg = replace(cfg, model__num_classes=_num_classes(data, cfg.model.num_classes))
    if args.steps is not None:
        cfg = replace(cfg, train__steps=args.steps)
    clips = load_dataset(data)
    mode = args.mode
    if mode == "stereo" and not all(c.is_stereo for c in clips):
        log.info("dataset has no right views; training on pseudo-stereo")
        mode = "pseudo"
    state = train(clips, cfg, mode)
    lacls = _load_lacls(args.lacls, cfg) if args.lacls else None
    system = Lacoste(cfg, state.qbs, state.stscls, lacls, mode)
    save_system(args.out, system)
    (Path(args.out) / "history.json").write_text(json.dumps(state.history))
    print(f"saved checkpoint to {args.out}")
    return 0


def _load_lacls(root, cfg: Config):
    from .io import load_component
    from .lacls import PatchClassifier

    model = PatchClassifier(cfg.lacls, cfg.model.num_classes)
    load_component(root, "lacls", model)
    return model.eval()


def cmd_train_lacls(args) -> int:
    from .lacls import train_lacls_offline
    from .pipeline import save_lacls
    from .synthdata import load_dataset

    data = Path(args.data)
    cfg = _load_config(args.config)
    cfg = replace(cfg, model__num_classes=_num_classes(data, cfg.model.num_classes))
    model, history = train_lacls_offline(load_dataset(data), cfg.lacls, cfg.model.num_classes, seed=args.seed)
    save_lacls(args.out, model, cfg)
    print(f"saved location-agnostic classifier to {args.out} (final loss {history[-1]:.4f})")
    return 0


def _instance_map(pred, k: int) -> np.ndarray:
    """Top-k object queries painted as ``query index + 1`` in ascending confidence."""
    probs = pred.probs
    labels = probs.argmax(1)
    conf = probs.max(1)
    keep = np.nonzero(labels != probs.shape[1] - 1)[0]
    keep = keep[np.argsort(-conf[keep], kind="stable")][:k]
    out = np.zeros(pred.mask_logits.shape[1:], dtype=np.uint16)
    for q in keep[::-1]:
        out[pred.mask_logits[q] > 0] = q + 1
    return out


def cmd_infer(args) -> int:
    from .io import write_u16_png
    from .pipeline import MemoryBank, infer_clip, load_system
    from .synthdata import load_dataset

    system = load_system(args.ckpt, lacls_root=args.lacls)
    if system.lacls is None and system.cfg.ensemble.alpha_a > 0:
        log.warning("no location-agnostic classifier found; its ensemble weight is set to 0")
        system.cfg = replace(system.cfg, ensemble__alpha_a=0.0)
    if system.stscls is None and system.cfg.ensemble.alpha_s > 0:
        log.warning("no set classifier found; its ensemble weight is set to 0")
        system.cfg = replace(system.cfg, ensemble__alpha_s=0.0)
    out = Path(args.out)
    k = system.cfg.infer.top_k
    for clip in load_dataset(args.data):
        if system.stereo_mode == "stereo" and not clip.is_stereo:
            system.stereo_mode = "pseudo"
        seq = out / clip.name
        (seq / "masks").mkdir(parents=True, exist_ok=True)
        (seq / "semantic").mkdir(parents=True, exist_ok=True)
        bank = MemoryBank(system.cfg.infer.memory_capacity)
        for t in range(clip.length):
            fp = infer_clip(system, clip, t, bank, frame_only=args.frame_only)
            write_u16_png(seq / "masks" / f"{t:06d}.png", _instance_map(fp, k))
            write_u16_png(seq / "semantic" / f"{t:06d}.png", fp.semantic.astype(np.uint16))
            queries = [{
                "query": q + 1,
                "p_b": fp.p_frame[q].tolist(), "p_s": fp.p_tracklet[q].tolist(),
                "p_a": fp.p_agnostic[q].tolist(), "p_f": fp.probs[q].tolist(),
                "class": int(fp.probs[q].argmax() + 1) if fp.probs[q].argmax() < fp.probs.shape[1] - 1 else 0,
            } for q in range(fp.probs.shape[0])]
            (seq / f"{t:06d}.json").write_text(json.dumps({"frame": t, "queries": queries}))
    print(f"wrote predictions to {out}")
    return 0


def cmd_eval(args) -> int:
    from .io import read_u16_png
    from .metrics import evaluate
    from .synthdata import load_dataset

    gt_dir = Path(args.gt)
    preds, gts = [], []
    for clip in load_dataset(gt_dir):
        for t in range(clip.length):
            path = Path(args.pred) / clip.name / "semantic" / f"{t:06d}.png"
            if not path.exists():
                raise LacosteError(f"missing prediction: {path}")
            preds.append(read_u16_png(path).astype(np.int64))
            gts.append(clip.semantic(t))
    report = evaluate(preds, gts, _num_classes(gt_dir, args.classes))
    report = _jsonable(report)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(report, indent=2))
    print(" ".join(f"{k} {100 * report[k]:.2f}" for k in ("Ch_IoU", "ISI_IoU", "mcIoU")))
    return 0


def cmd_ablate(args) -> int:
    from .benchmark import VARIANTS, BenchmarkConfig, alpha_sweep, run_benchmark

    if args.sweep == "components":
        bench = BenchmarkConfig(train_clips=args.train_clips, val_clips=args.val_clips)
        if args.steps is not None:
            bench.steps = args.steps
        variants = args.variants.split(",") if args.variants else VARIANTS
        results = run_benchmark(bench, variants, cache_dir=args.cache)
        rows = [{"variant": v, "mcIoU": results[v]["mcIoU"], "Ch_IoU": results[v]["Ch_IoU"],
                 "ISI_IoU": results[v]["ISI_IoU"], "accuracy": results[v]["accuracy"]} for v in variants]
    else:
        from .pipeline import load_system
        from .synthdata import load_dataset

        if not args.ckpt or not args.data:
            raise LacosteError("--sweep alpha needs --ckpt and --data")
        system = load_system(args.ckpt, lacls_root=args.lacls)
        rows = alpha_sweep(system, load_dataset(args.data))
    for row in rows:
        label = row.get("variant") or ",".join(f"{a:.2f}" for a in row["alpha"])
        mc = row["mcIoU"]
        print(f"{label:>16}  mcIoU {100 * mc:6.2f}" if mc is not None and not math.isnan(mc) else f"{label:>16}  -")
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=2))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lacoste", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic stereo video dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clips", type=int, default=16)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--start", type=int, default=0, help="index of the first clip")
    p.add_argument("--length", type=int, default=8, help="frames per clip")
    p.add_argument("--noise", type=float, default=0.0, help="pixel noise standard deviation")
    p.add_argument("--mono", action="store_true", help="render left views and depth only")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the frame step and set classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("stereo", "pseudo", "mono"), default="stereo")
    p.add_argument("--steps", type=int)
    p.add_argument("--lacls", help="checkpoint holding a trained location-agnostic classifier")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-lacls", help="train the location-agnostic classifier on ground-truth crops")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_lacls)

    p = sub.add_parser("infer", help="sliding-window inference over every frame")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lacls", help="separate location-agnostic classifier checkpoint")
    p.add_argument("--frame-only", action="store_true", help="decode each frame alone with learned queries")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predicted semantic maps against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4, help="used when the dataset does not record its scene")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="ensemble-weight or component ablations")
    p.add_argument("--sweep", choices=("alpha", "components"), required=True)
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--lacls")
    p.add_argument("--train-clips", type=int, default=200)
    p.add_argument("--val-clips", type=int, default=50)
    p.add_argument("--steps", type=int)
    p.add_argument("--variants", help="comma-separated subset of the component variants")
    p.add_argument("--cache", help="directory for cached benchmark results")
    p.add_argument("--out", help="write the rows as JSON")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (LacosteError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
