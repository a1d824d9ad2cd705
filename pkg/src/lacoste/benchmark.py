"""Fixed synthetic benchmark and the component ablations run on it.

Each variant trains on the same seed-pinned split and is evaluated on the
same validation clips. Results are cached as JSON (keyed by a hash of the
benchmark settings) so repeated acceptance runs only pay for training once.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import Config, SceneConfig, replace
from .lacls import train_lacls_offline
from .metrics import evaluate
from .pipeline import Lacoste, MemoryBank, frame_step, infer_clip
from .qbs import GroundTruthSet, PredictionSet, hungarian_match
from .synthdata import StereoClip, generate_dataset

log = logging.getLogger(__name__)

VARIANTS = ("baseline", "dfp", "full", "pseudo", "noalign")


@dataclass
class BenchmarkConfig:
    scene: SceneConfig = field(default_factory=lambda: SceneConfig(noise_std=0.06))
    train_clips: int = 200
    val_clips: int = 50
    steps: int = 2400
    num_queries: int = 10
    lr: float = 1e-3
    lacls_epochs: int = 4
    seed: int = 0

    def base_config(self) -> Config:
        cfg = Config()
        return replace(
            cfg,
            model__num_classes=self.scene.num_classes, model__num_queries=self.num_queries,
            train__steps=self.steps, train__lr=self.lr, train__seed=self.seed, train__log_every=0,
            pseudo_stereo__d_min=1.0, pseudo_stereo__d_max=3.0,
            lacls__epochs=self.lacls_epochs,
        )

    def key(self) -> str:
        blob = json.dumps({"bench": asdict(self), "version": __version__}, sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def variant_config(bench: BenchmarkConfig, name: str) -> tuple[Config, str]:
    """Training config and stereo mode for one ablation variant."""
    cfg = bench.base_config()
    if name == "baseline":
        return replace(cfg, model__use_dfp=False, train__use_stscls=False), "mono"
    if name == "dfp":
        return replace(cfg, train__use_stscls=False), "stereo"
    if name == "full":
        return cfg, "stereo"
    if name == "pseudo":
        return cfg, "pseudo"
    if name == "noalign":
        return replace(cfg, train__query_alignment=False, train__use_ida=False,
                       infer__query_alignment=False), "stereo"
    raise ValueError(f"unknown variant {name!r}")


def split(bench: BenchmarkConfig):
    train = generate_dataset(bench.scene, bench.train_clips)
    val = generate_dataset(bench.scene, bench.val_clips, start=bench.train_clips)
    return train, val


# ---------------------------------------------------------------------------
# evaluation


def _gt_semantic(clip: StereoClip, t: int):
    return clip.semantic(t)


def _foreground_argmax(p):
    return int(np.argmax(p[:-1])) + 1


def evaluate_system(system: Lacoste, clips, frame_only: bool) -> dict:
    """Semantic metrics over every validation frame plus per-query accuracies."""
    system.eval()
    num_classes = system.cfg.model.num_classes
    preds, gts = [], []
    correct = {"frame": 0, "tracklet": 0, "agnostic": 0, "ensemble": 0}
    matched = 0
    for clip in clips:
        bank = MemoryBank(system.cfg.infer.memory_capacity)
        for t in range(clip.length):
            fp = infer_clip(system, clip, t, bank, frame_only)
            preds.append(fp.semantic)
            gts.append(_gt_semantic(clip, t))
            gt = GroundTruthSet.from_records(clip.ground_truth(t), clip.masks.shape[1:])
            if len(gt) == 0:
                continue
            ps = PredictionSet(torch.from_numpy(np.log(fp.p_frame + 1e-12)), torch.from_numpy(fp.embeddings),
                               torch.from_numpy(fp.mask_logits))
            m = hungarian_match(ps, gt, system.cfg.model)
            for q, g in zip(m.query_indices, m.gt_indices):
                cls = int(gt.classes[g])
                matched += 1
                for name, p in (("frame", fp.p_frame), ("tracklet", fp.p_tracklet),
                                ("agnostic", fp.p_agnostic), ("ensemble", fp.probs)):
                    correct[name] += _foreground_argmax(p[q]) == cls
    out = evaluate(preds, gts, num_classes)
    out["accuracy"] = {k: 100.0 * v / max(matched, 1) for k, v in correct.items()}
    out["matched_queries"] = matched
    return out


@torch.no_grad()
def identity_consistency(system: Lacoste, clips, align: bool) -> dict:
    """Fraction of frame transitions where every persisting identity keeps its query index."""
    system.eval()
    consistent = total = kept = persisting = 0
    for clip in clips:
        outs = frame_step(system, clip, list(range(clip.length)), align)
        owner = []
        for t, out in enumerate(outs):
            gt = GroundTruthSet.from_records(clip.ground_truth(t), clip.masks.shape[1:])
            if len(gt) == 0:
                owner.append({})
                continue
            m = hungarian_match(out.prediction(0), gt, system.cfg.model)
            owner.append({int(gt.identities[g]): int(q) for q, g in zip(m.query_indices, m.gt_indices)})
        for a, b in zip(owner[:-1], owner[1:]):
            common = set(a) & set(b)
            if not common:
                continue
            same = sum(a[i] == b[i] for i in common)
            total += 1
            consistent += same == len(common)
            kept += same
            persisting += len(common)
    return {"frame_fraction": consistent / max(total, 1), "instance_fraction": kept / max(persisting, 1),
            "transitions": total}


# ---------------------------------------------------------------------------
# runner


def train_variant(bench: BenchmarkConfig, name: str, train_clips, lacls_model=None):
    from .pipeline import train

    cfg, mode = variant_config(bench, name)
    t0 = time.perf_counter()
    state = train(train_clips, cfg, mode)
    seconds = time.perf_counter() - t0
    system = Lacoste(cfg, state.qbs, state.stscls, lacls_model, mode)
    return system, state.history, seconds


def run_variant(bench: BenchmarkConfig, name: str, train_clips, val_clips, lacls_model=None) -> tuple[dict, Lacoste]:
    system, history, seconds = train_variant(bench, name, train_clips, lacls_model)
    frame_only = name in ("baseline", "dfp")
    if not frame_only and system.lacls is None:
        system.cfg = replace(system.cfg, ensemble__alpha_a=0.0)
    t0 = time.perf_counter()
    result = evaluate_system(system, val_clips, frame_only)
    result["identity"] = identity_consistency(system, val_clips, align=system.cfg.infer.query_alignment)
    result["train_seconds"] = seconds
    result["eval_seconds"] = time.perf_counter() - t0
    result["final_losses"] = history[-1] if history else {}
    log.info("%s: mcIoU %.2f", name, 100 * result["mcIoU"])
    return result, system


def _clean(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return _clean(obj.item())
    return obj


def run_benchmark(bench: BenchmarkConfig | None = None, variants=VARIANTS, cache_dir=None,
                  checkpoint_dir=None) -> dict:
    """Train and evaluate the requested variants; returns ``{variant: result}``.

    With ``cache_dir`` set, finished variants are read back instead of
    retrained. With ``checkpoint_dir`` set, the full system is saved there.
    """
    bench = bench or BenchmarkConfig()
    cache = None
    results: dict = {}
    if cache_dir is not None:
        cache = Path(cache_dir) / f"benchmark-{bench.key()}.json"
        if cache.exists():
            results = json.loads(cache.read_text())
    todo = [v for v in variants if v not in results]
    if todo:
        torch.set_num_threads(1)
        train_clips, val_clips = split(bench)
        lacls_model = None
        if any(v in ("full", "pseudo", "noalign") for v in todo):
            cfg = bench.base_config()
            t0 = time.perf_counter()
            lacls_model, _ = train_lacls_offline(train_clips, cfg.lacls, cfg.model.num_classes, seed=bench.seed)
            results["lacls_seconds"] = time.perf_counter() - t0
        for name in todo:
            result, system = run_variant(bench, name, train_clips, val_clips, lacls_model)
            if name == "full":
                result["frame_only_equal"] = _frame_only_bitwise(system, val_clips[:3])
                if checkpoint_dir is not None:
                    from .pipeline import save_system

                    save_system(checkpoint_dir, system)
            results[name] = _clean(result)
            if cache is not None:
                cache.parent.mkdir(parents=True, exist_ok=True)
                cache.write_text(json.dumps(results, indent=1))
    return results


@torch.no_grad()
def _frame_only_bitwise(system: Lacoste, clips) -> bool:
    """With weights (1, 0, 0) the ensemble output must equal the frame step bit for bit."""
    saved = system.cfg
    system.cfg = replace(saved, ensemble__alpha_b=1.0, ensemble__alpha_s=0.0, ensemble__alpha_a=0.0)
    try:
        for clip in clips:
            for t in range(clip.length):
                fp = infer_clip(system, clip, t)
                if not np.array_equal(fp.probs, fp.p_frame):
                    return False
        return True
    finally:
        system.cfg = saved


def alpha_sweep(system: Lacoste, clips, grid=None) -> list[dict]:
    """mcIoU and ensemble accuracy for each ensemble weighting in ``grid``."""
    grid = grid or [(1, 0, 0), (0, 1, 0), (0, 0, 1), (0.5, 0.5, 0), (0.5, 0, 0.5), (0, 0.5, 0.5),
                    (1 / 3, 1 / 3, 1 / 3)]
    saved = system.cfg
    rows = []
    try:
        for a_b, a_s, a_a in grid:
            system.cfg = replace(saved, ensemble__alpha_b=float(a_b), ensemble__alpha_s=float(a_s),
                                 ensemble__alpha_a=float(a_a))
            r = evaluate_system(system, clips, frame_only=False)
            rows.append(_clean({"alpha": [a_b, a_s, a_a], "mcIoU": r["mcIoU"], "Ch_IoU": r["Ch_IoU"],
                                "accuracy": r["accuracy"]["ensemble"]}))
    finally:
        system.cfg = saved
    return rows
