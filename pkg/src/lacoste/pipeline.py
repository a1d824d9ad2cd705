"""Three-step inference, joint training, memory bank, and semantic merging.

Inference for a frame ``t*`` runs the frame step over a clip of ``T``
timestamps (seeding each timestamp's decoder with the previous left-view
embeddings), then the tracklet step (one tracklet per query index over all
views and timestamps) and the location-agnostic step (patch classification of
the ``t*`` masks), and finally averages the three class distributions with
the ensemble weights. Masks always come from the frame step unchanged.
"""

from __future__ import annotations

import json
import logging
import math
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import Config, EnsembleConfig
from .errors import ConfigurationError, DataError
from .io import has_component, load_component, save_component
from .geometry import (
    DepthField,
    DisparityField,
    disparity_from_depth,
    downsample_disparity,
    right_disparity_from_left,
    sharpen_disparity,
    synth_right_view,
)
from .lacls import PatchClassifier, crop_and_mask
from .qbs import FrameOutput, GroundTruthSet, QBSModel, split_views, loss_deep_supervision
from .stscls import (
    IdentityPool,
    SetClassifier,
    generate_tracklets,
    identity_targets,
    label_pseudo_ids,
    loss_stscls,
    pad_tracklets,
    pairwise_similarity,
)
from .synthdata import StereoClip

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# memory bank


class MemoryBank:
    """Thread-safe LRU cache of per-frame intermediate results."""

    def __init__(self, capacity: int = 64):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._store: OrderedDict = OrderedDict()
        self._lock = threading.Lock()
        self._key_locks: dict = {}
        self.computes = 0
        self.hits = 0

    def __len__(self):
        return len(self._store)

    def __contains__(self, key):
        return key in self._store

    def get_or_compute(self, key, compute):
        with self._lock:
            if key in self._store:
                self._store.move_to_end(key)
                self.hits += 1
                return self._store[key]
            key_lock = self._key_locks.setdefault(key, threading.Lock())
        with key_lock:
            with self._lock:
                if key in self._store:
                    self._store.move_to_end(key)
                    self.hits += 1
                    return self._store[key]
            value = compute()
            with self._lock:
                self.computes += 1
                self._store[key] = value
                self._store.move_to_end(key)
                while len(self._store) > self.capacity:
                    self._store.popitem(last=False)
                self._key_locks.pop(key, None)
            return value

    def clear(self):
        with self._lock:
            self._store.clear()


def memory_get_or_compute(bank: MemoryBank, key, compute):
    return bank.get_or_compute(key, compute)


# ---------------------------------------------------------------------------
# stereo inputs


@dataclass
class StereoInputs:
    left: np.ndarray  # (3, H, W)
    right: np.ndarray  # (3, H, W)
    disp_left: np.ndarray  # (h, w) feature-resolution disparity
    disp_right: np.ndarray
    right_valid: np.ndarray | None  # (h, w) bool or None when all valid


def _feature_disparity(disp: DisparityField, stride: int):
    return downsample_disparity(disp.data, disp.valid, stride)[0].astype(np.float32)


def _block_valid(valid: np.ndarray, stride: int):
    h, w = valid.shape
    return valid.reshape(h // stride, stride, w // stride, stride).all(axis=(1, 3))


def stereo_inputs(clip: StereoClip, t: int, cfg: Config, mode: str, d_s: float | None = None) -> StereoInputs:
    """Right view and feature-level disparities for frame ``t``.

    ``mode="stereo"`` uses the rendered right view and the exact disparity
    ``baseline_focal / Z``; ``mode="pseudo"`` synthesizes the right view from
    the left view and depth with scale ``d_s`` (average scale when ``None``).
    """
    stride = cfg.model.stride
    if mode == "stereo":
        if clip.right is None:
            raise DataError(f"{clip.name} has no right views; use pseudo stereo")
        if clip.baseline_focal <= 0:
            raise DataError(f"{clip.name}: unknown baseline x focal product")
        disp = DisparityField(clip.baseline_focal / clip.depth[t])
        right = clip.right[t]
        right_valid = None
    elif mode == "pseudo":
        ps = cfg.pseudo_stereo
        d_s = ps.d_mean if d_s is None else d_s
        depth = DepthField(clip.depth[t])
        donor = clip.left[t - 1] if t > 0 else clip.left[min(t + 1, clip.length - 1)]
        right, covered = synth_right_view(clip.left[t], depth, d_s, donor, ps)
        right = right.astype(np.float32)
        disp, _ = sharpen_disparity(disparity_from_depth(depth, d_s), ps)
        right_valid = _block_valid(covered, stride) if ps.fill_mode == "blank_with_mask" else None
    else:
        raise ValueError(f"unknown stereo mode {mode!r}")
    disp_r = right_disparity_from_left(disp)
    return StereoInputs(clip.left[t], right, _feature_disparity(disp, stride),
                        _feature_disparity(disp_r, stride), right_valid)


# ---------------------------------------------------------------------------
# inference


@dataclass
class FinalPrediction:
    probs: np.ndarray  # (N, C+1) ensemble p^f
    p_frame: np.ndarray  # (N, C+1)
    p_tracklet: np.ndarray  # (N, C+1)
    p_agnostic: np.ndarray  # (N, C+1)
    mask_logits: np.ndarray  # (N, H, W) frame-step mask logits
    embeddings: np.ndarray  # (N, D) frame-step left embeddings at t*
    semantic: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    @property
    def masks(self) -> np.ndarray:
        return self.mask_logits > 0.0  # sigmoid > 0.5


@dataclass
class Lacoste:
    """Trained components plus the configuration they run under."""

    cfg: Config
    qbs: QBSModel
    stscls: SetClassifier | None = None
    lacls: PatchClassifier | None = None
    stereo_mode: str = "stereo"  # "stereo", "pseudo" or "mono"

    def eval(self):
        for m in (self.qbs, self.stscls, self.lacls):
            if m is not None:
                m.eval()
        return self


def ensemble(p_b, p_s, p_a, cfg: EnsembleConfig):
    return cfg.alpha_b * p_b + cfg.alpha_s * p_s + cfg.alpha_a * p_a


def _window(t_star: int, length: int, clip_len: int, center: int | None):
    """Frame indices of the clip around ``t_star`` (edge-replicated), and t*'s position in it."""
    c = (clip_len // 2) if center is None else center - 1
    idx = [min(max(t_star - c + k, 0), length - 1) for k in range(clip_len)]
    return idx, c


@torch.no_grad()
def _frame_features(system: Lacoste, clip: StereoClip, t: int):
    """Encoder (+ DFP) features for frame ``t``: tensor (2, D, h, w) for stereo, (1, D, h, w) mono."""
    model = system.qbs
    left = torch.from_numpy(clip.left[t])[None]
    if system.stereo_mode == "mono":
        return model.encode_image(left)
    si = stereo_inputs(clip, t, system.cfg, system.stereo_mode)
    right = torch.from_numpy(si.right)[None]
    feats = model.encode_image(torch.cat([left, right]))
    f_l, f_r = feats[:1], feats[1:]
    if model.cfg.use_dfp:
        rv = None if si.right_valid is None else torch.from_numpy(si.right_valid)[None]
        f_l, f_r = model.fuse_stereo(f_l, f_r, torch.from_numpy(si.disp_left)[None],
                                     torch.from_numpy(si.disp_right)[None], None, rv)
    return torch.cat([f_l, f_r])


@torch.no_grad()
def frame_step(system: Lacoste, clip: StereoClip, frames, align: bool, bank: MemoryBank | None = None,
               only_last: bool = False):
    """Decode every timestamp in ``frames``; returns list of FrameOutput (views stacked on batch)."""
    model = system.qbs
    h, w = clip.left.shape[-2:]
    outputs = []
    q = None
    for k, t in enumerate(frames):
        if only_last and k < len(frames) - 1 and not align:
            outputs.append(None)
            continue
        key = (clip.name, int(t), "features", system.stereo_mode)
        if bank is not None:
            feats = bank.get_or_compute(key, lambda t=t: _frame_features(system, clip, t))
        else:
            feats = _frame_features(system, clip, t)
        views = feats.shape[0]
        queries = model.initial_queries(views) if q is None else q.expand(views, -1, -1)
        out = model.decode(feats, queries, (h, w))
        outputs.append(out)
        if align:
            q = out.embeddings[-1][:1]
    return outputs


@torch.no_grad()
def infer_clip(system: Lacoste, clip: StereoClip, t_star: int, bank: MemoryBank | None = None,
               frame_only: bool = False) -> FinalPrediction:
    """Segment left frame ``t_star`` (0-based) of ``clip``."""
    cfg = system.cfg
    ens = cfg.ensemble
    if not frame_only:
        if ens.alpha_s > 0 and system.stscls is None:
            raise ConfigurationError("ensemble uses the tracklet step but no set classifier is loaded")
        if ens.alpha_a > 0 and system.lacls is None:
            raise ConfigurationError("ensemble uses the location-agnostic step but no patch classifier is loaded")
    if frame_only:
        frames, pos = [t_star], 0
        align = False
    else:
        frames, pos = _window(t_star, clip.length, cfg.infer.clip_length, cfg.infer.center)
        align = cfg.infer.query_alignment
    outs = frame_step(system, clip, frames, align, bank)
    cur = outs[pos]
    logits_b = cur.logits[-1][0]
    p_b = logits_b.softmax(-1)
    mask_logits = cur.mask_logits[-1][0]
    c1 = p_b.shape[1]
    p_s = p_b.clone()
    p_a = torch.full_like(p_b, 1.0 / c1)
    extras = {}
    if not frame_only and ens.alpha_s > 0:
        p_s = tracklet_step(system, outs, p_b)
    if not frame_only and ens.alpha_a > 0:
        p_a, valid_idx = agnostic_step(system, clip.left[t_star], p_b, mask_logits)
        extras["valid_queries"] = valid_idx
    p_f = ensemble(p_b, p_s, p_a, ens) if not frame_only else p_b
    pred = FinalPrediction(
        probs=p_f.numpy(), p_frame=p_b.numpy(), p_tracklet=p_s.numpy(), p_agnostic=p_a.numpy(),
        mask_logits=mask_logits.numpy(), embeddings=cur.embeddings[-1][0].numpy(), extras=extras)
    pred.semantic = semantic_merge(pred, cfg.infer.top_k)
    return pred


def tracklet_step(system: Lacoste, outs: list[FrameOutput], p_b):
    """Classify the per-query tracklets ``{e_n^L(t), e_n^R(t)}`` over the clip."""
    emb = torch.stack([o.embeddings[-1] for o in outs], dim=0)  # (T, V, N, D)
    logits = torch.stack([o.logits[-1] for o in outs], dim=0)  # (T, V, N, C+1)
    t, v, n, d = emb.shape
    items = emb.permute(2, 0, 1, 3).reshape(n, t * v, d)
    no_obj = logits.argmax(-1) == logits.shape[-1] - 1
    non_object = no_obj.permute(2, 0, 1).reshape(n, t * v)
    exclude = non_object if system.cfg.stscls.mask_non_objects else None
    _, set_logits, _ = system.stscls(items, exclude)
    p_s = set_logits.softmax(-1)
    all_empty = non_object.all(dim=1)
    return torch.where(all_empty[:, None], p_b, p_s)


def agnostic_step(system: Lacoste, image: np.ndarray, p_b, mask_logits):
    """Patch-classify every non-empty, non-``no object`` query mask; uniform elsewhere."""
    c1 = p_b.shape[1]
    p_a = torch.full_like(p_b, 1.0 / c1)
    is_obj = p_b.argmax(-1) != c1 - 1
    masks = (mask_logits > 0).numpy()
    idx, patches = [], []
    for q in torch.nonzero(is_obj).flatten().tolist():
        if not masks[q].any():
            continue
        idx.append(q)
        patches.append(crop_and_mask(image, masks[q], system.cfg.lacls.patch))
    if patches:
        _, logits = system.lacls(torch.from_numpy(np.stack(patches)))
        p_a[idx] = logits.softmax(-1).to(p_a.dtype)
    return p_a, idx


def semantic_merge(pred: FinalPrediction, k: int = 5, threshold: float = 0.5) -> np.ndarray:
    """Paint the top-``k`` confident object queries into a class label map."""
    if k < 1:
        raise ValueError("k must be >= 1")
    probs = pred.probs
    c1 = probs.shape[1]
    labels = probs.argmax(1)
    conf = probs.max(1)
    keep = np.nonzero(labels != c1 - 1)[0]
    keep = keep[np.argsort(-conf[keep], kind="stable")][:k]
    logit_thr = math.log(threshold / (1 - threshold))
    out = np.zeros(pred.mask_logits.shape[1:], dtype=np.int64)
    for q in keep[::-1]:  # ascending confidence; later (more confident) overwrite
        out[pred.mask_logits[q] > logit_thr] = labels[q] + 1
    return out


@torch.no_grad()
def infer_sequence(system: Lacoste, clip: StereoClip, bank: MemoryBank | None = None, frame_only: bool = False):
    """Sliding-window inference over every frame of ``clip``."""
    system.eval()
    return [infer_clip(system, clip, t, bank, frame_only) for t in range(clip.length)]


# ---------------------------------------------------------------------------
# training


def _gt(clip: StereoClip, t: int) -> GroundTruthSet:
    if clip.masks is None or not clip.instances and clip.masks[t].any():
        raise DataError(f"{clip.name}: frame {t} has no ground truth")
    return GroundTruthSet.from_records(clip.ground_truth(t), clip.masks.shape[1:])


class TrainState:
    """Models, optimizer and schedule for joint frame-step + set-classifier training."""

    def __init__(self, cfg: Config, stereo_mode: str = "stereo", seed: int | None = None):
        self.cfg = cfg
        self.stereo_mode = stereo_mode
        seed = cfg.train.seed if seed is None else seed
        torch.manual_seed(seed)
        self.qbs = QBSModel(cfg.model)
        self.stscls = SetClassifier(cfg.stscls, cfg.model.embed_dim, cfg.model.num_classes) \
            if cfg.train.use_stscls else None
        params = list(self.qbs.parameters()) + (list(self.stscls.parameters()) if self.stscls else [])
        self.params = params
        self.opt = torch.optim.AdamW(params, lr=cfg.train.lr, weight_decay=cfg.train.weight_decay)
        total = max(cfg.train.steps, 1)
        power = cfg.train.poly_power
        self.sched = torch.optim.lr_scheduler.LambdaLR(self.opt, lambda s: max(0.0, 1 - s / total) ** power)
        self.rng = np.random.default_rng(seed)
        self.step_count = 0
        self._cache: dict = {}

    def system(self) -> Lacoste:
        return Lacoste(self.cfg, self.qbs, self.stscls, None, self.stereo_mode).eval()

    def _inputs(self, clip, t):
        if self.stereo_mode == "pseudo":
            ps = self.cfg.pseudo_stereo
            return stereo_inputs(clip, t, self.cfg, "pseudo", float(self.rng.uniform(ps.d_min, ps.d_max)))
        key = (clip.name, t)
        if key not in self._cache:
            self._cache[key] = stereo_inputs(clip, t, self.cfg, "stereo")
        return self._cache[key]


def sample_batch(clips, batch_size: int, max_dt: int, rng: np.random.Generator):
    """(clip, t, t + dt) triples; t + dt is clamped to the clip (edge replication)."""
    out = []
    for _ in range(batch_size):
        clip = clips[int(rng.integers(len(clips)))]
        t = int(rng.integers(max(clip.length - 1, 1)))
        dt = int(rng.integers(1, max_dt + 1))
        out.append((clip, t, min(t + dt, clip.length - 1)))
    return out


def _batch_features(state: TrainState, items):
    """Encoder (+ DFP) features for (clip, t) items: (n, D, h, w) mono, else ``(f_left, f_right)``."""
    model = state.qbs
    if state.stereo_mode == "mono":
        return model.encode_image(torch.from_numpy(np.stack([c.left[t] for c, t in items])))
    inputs = [state._inputs(c, t) for c, t in items]
    left = torch.from_numpy(np.stack([s.left for s in inputs]))
    right = torch.from_numpy(np.stack([s.right for s in inputs]))
    feats = model.encode_image(torch.cat([left, right]))
    n = len(items)
    f_l, f_r = feats[:n], feats[n:]
    if model.cfg.use_dfp:
        rv = None
        if any(s.right_valid is not None for s in inputs):
            rv = torch.from_numpy(np.stack([
                s.right_valid if s.right_valid is not None else np.ones(s.disp_left.shape, bool) for s in inputs]))
        dl = torch.from_numpy(np.stack([s.disp_left for s in inputs]))
        dr = torch.from_numpy(np.stack([s.disp_right for s in inputs]))
        f_l, f_r = model.fuse_stereo(f_l, f_r, dl, dr, None, rv)
    return f_l, f_r


@torch.no_grad()
def _rollout_queries(state: TrainState, batch, hops: int):
    """Aligned queries for frame t after ``hops`` gradient-free alignment steps over t - hops .. t - 1.

    Inference chains alignment across a whole clip while a training pair only
    sees one hop; the rollout exposes the decoder to multi-hop query inputs.
    """
    model = state.qbs
    b = len(batch)
    q = model.initial_queries(b)
    for k in range(hops, 0, -1):
        items = [(c, max(t - k, 0)) for c, t, _ in batch]
        if state.stereo_mode == "mono":
            q = model.decoder(_batch_features(state, items), q)[-1]
        else:
            # only the left view feeds the next hop, and queries never attend across the batch
            f_l, _ = _batch_features(state, items)
            q = model.decoder(f_l, q)[-1]
    return q


def _carry_identities(match, gt, gt_next) -> dict:
    """``{gt_next index: query}`` for identities matched at t that persist into the next frame."""
    owner = {int(gt.identities[g]): int(q) for g, q in zip(match.gt_indices, match.query_indices)}
    return {g: owner[int(k)] for g, k in enumerate(gt_next.identities) if int(k) in owner}


def train_step(state: TrainState, batch) -> dict:
    """One optimizer step of the combined frame-step + set-classifier loss."""
    cfg = state.cfg
    model = state.qbs
    model.train()
    if state.stscls is not None:
        state.stscls.train()
    b = len(batch)
    n = cfg.model.num_queries
    gts_t = [_gt(c, t) for c, t, _ in batch]
    gts_2 = [_gt(c, t2) for c, _, t2 in batch]
    size = batch[0][0].left.shape[-2:]
    if any(len(g) == 0 for g in gts_t):
        log.debug("batch contains frames without instances")

    aligned = cfg.train.query_alignment and state.stscls is not None
    q1 = model.initial_queries(b)
    if aligned and cfg.train.align_rollout > 0:
        q1 = _rollout_queries(state, batch, int(state.rng.integers(cfg.train.align_rollout + 1)))
    items = [(c, t) for c, t, _ in batch] + [(c, t2) for c, _, t2 in batch]
    if state.stereo_mode == "mono":
        feats = _batch_features(state, items)
        out1 = model.decode(feats[:b], q1, size)
        q2 = out1.embeddings[-1] if aligned else model.initial_queries(b)
        out2 = model.decode(feats[b:], q2, size)
        views = {("L", 0): out1, ("L", 1): out2}
    else:
        f_l, f_r = _batch_features(state, items)
        o1 = model.decode(torch.cat([f_l[:b], f_r[:b]]), torch.cat([q1, q1]), size)
        q2 = o1.embeddings[-1][:b] if aligned else model.initial_queries(b)
        o2 = model.decode(torch.cat([f_l[b:], f_r[b:]]), torch.cat([q2, q2]), size)
        l1, r1 = split_views(o1, b)
        l2, r2 = split_views(o2, b)
        views = {("L", 0): l1, ("R", 0): r1, ("L", 1): l2, ("R", 1): r2}

    # frame-step loss on the annotated left frames
    l_base = 0.0
    matches_t, matches_2 = [], []
    for i in range(b):
        loss1, m1 = loss_deep_supervision(views[("L", 0)].prediction(i), gts_t[i], cfg.model)
        fixed = _carry_identities(m1, gts_t[i], gts_2[i]) if aligned else None
        loss2, m2 = loss_deep_supervision(views[("L", 1)].prediction(i), gts_2[i], cfg.model, fixed=fixed)
        l_base = l_base + loss1 + loss2
        matches_t.append(m1)
        matches_2.append(m2)
    l_base = l_base / (2 * b)

    losses = {"baseline": l_base.item()}
    total = l_base
    if state.stscls is not None:
        l_st, parts = _stscls_loss(state, views, gts_t, gts_2, matches_t, matches_2, n)
        total = total + l_st
        losses.update(parts)
    state.opt.zero_grad()
    total.backward()
    if cfg.train.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(state.params, cfg.train.grad_clip)
    state.opt.step()
    state.sched.step()
    state.step_count += 1
    losses["total"] = total.item()
    return losses


def _stscls_loss(state: TrainState, views, gts_t, gts_2, matches_t, matches_2, n):
    cfg = state.cfg
    c1 = cfg.model.num_classes + 1
    pools: list[IdentityPool] = []
    ida_emb, ida_ids = [], []
    view_keys = sorted(views)
    for i, (gt, gt2, m1, m2) in enumerate(zip(gts_t, gts_2, matches_t, matches_2)):
        # identity matching on the current left frame (final layer)
        order = np.argsort(m1.query_indices)
        valid_q = m1.query_indices[order]
        classes = gt.classes[m1.gt_indices[order]]
        # temporal items carry the class their query is matched to at t + dt, else no object
        temporal = {int(q): int(gt2.classes[g]) for q, g in zip(m2.query_indices, m2.gt_indices)}
        for q, cls in zip(valid_q.tolist(), classes.tolist()):
            pid = label_pseudo_ids(i + 1, q + 1, n)
            embs, labels, sources = [], [], []
            for key in view_keys:
                out = views[key]
                view, when = key
                if when == 0:
                    lab = cls
                else:
                    lab = temporal.get(q, c1)
                for layer, e in enumerate(out.embeddings):
                    embs.append(e[i, q])
                    labels.append(lab)
                    sources.append((view, when, layer))
                ida_emb.append(out.embeddings[-1][i, q])
                ida_ids.append(pid)
            pools.append(IdentityPool(pid, int(cls), torch.stack(embs), np.asarray(labels), sources))
    zero = sum(p.sum() for p in state.stscls.parameters()) * 0.0
    if not pools:
        return zero, {"sc": 0.0, "lc": 0.0, "ida": 0.0}
    seed = int(state.rng.integers(2**31))
    tracklets = generate_tracklets(pools, cfg.sampler, seed)
    if tracklets:
        items, _, item_labels, labels, valid = pad_tracklets(tracklets)
        _, set_logits, item_logits = state.stscls(items, ~valid)
    else:
        set_logits = item_logits = torch.zeros(0)
        labels = item_labels = valid = torch.zeros(0, dtype=torch.long)
    sim = target = None
    if cfg.train.use_ida and len(ida_emb) > 1:
        sim = pairwise_similarity(torch.stack(ida_emb), cfg.stscls.temperature)
        target = identity_targets(ida_ids)
    total, l_sc, l_lc, l_ida = loss_stscls(set_logits, item_logits, labels, item_labels, sim, target,
                                           item_valid=valid, ida_reduction="mean")
    return total + zero, {"sc": l_sc.item(), "lc": l_lc.item(), "ida": l_ida.item()}


def train(clips, cfg: Config, stereo_mode: str = "stereo", steps: int | None = None, callback=None):
    """Train the frame-step model (and set classifier when enabled); returns the TrainState."""
    if not clips:
        raise DataError("empty training set")
    state = TrainState(cfg, stereo_mode)
    steps = cfg.train.steps if steps is None else steps
    history = []
    for s in range(steps):
        batch = sample_batch(clips, cfg.train.batch_size, cfg.sampler.max_dt, state.rng)
        losses = train_step(state, batch)
        history.append(losses)
        if cfg.train.log_every and (s + 1) % cfg.train.log_every == 0:
            log.info("step %d %s", s + 1, {k: round(v, 4) for k, v in losses.items()})
        if callback is not None:
            callback(s, losses)
    state.history = history
    return state


# ---------------------------------------------------------------------------
# checkpoints


def save_system(root, system: Lacoste) -> Path:
    """Write config.json plus one checkpoint component per loaded model."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    meta = {"config": system.cfg.to_dict(), "stereo_mode": system.stereo_mode}
    (root / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    save_component(root, "qbs", system.qbs, system.cfg.model.__dict__ | {"stereo_mode": system.stereo_mode})
    if system.stscls is not None:
        save_component(root, "stscls", system.stscls, system.cfg.stscls.__dict__)
    if system.lacls is not None:
        save_lacls(root, system.lacls, system.cfg)
    return root


def save_lacls(root, model: PatchClassifier, cfg: Config) -> Path:
    return save_component(root, "lacls", model, {"num_classes": cfg.model.num_classes, **_plain(cfg.lacls)})


def _plain(dc) -> dict:
    from dataclasses import asdict

    return asdict(dc)


def load_system(root, cfg: Config | None = None, lacls_root=None) -> Lacoste:
    """Rebuild a system from ``root``; missing optional components load as ``None``."""
    root = Path(root)
    meta_path = root / "config.json"
    if not meta_path.exists() and cfg is None:
        raise ConfigurationError(f"no config.json under {root}")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    cfg = cfg or Config.from_dict(meta["config"])
    mode = meta.get("stereo_mode", "stereo")
    qbs = QBSModel(cfg.model)
    load_component(root, "qbs", qbs)
    stscls = None
    if has_component(root, "stscls"):
        stscls = SetClassifier(cfg.stscls, cfg.model.embed_dim, cfg.model.num_classes)
        load_component(root, "stscls", stscls)
    lacls = None
    for base in (lacls_root, root):
        if base is not None and has_component(base, "lacls"):
            lacls = PatchClassifier(cfg.lacls, cfg.model.num_classes)
            load_component(base, "lacls", lacls)
            break
    return Lacoste(cfg, qbs, stscls, lacls, mode).eval()


def dump_tracklets(path, tracklets) -> Path:
    """Write tracklets as JSON lines plus a ``.npy`` side file of stacked embeddings."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    offset = 0
    rows = []
    with path.open("w") as fh:
        for tr in tracklets:
            fh.write(json.dumps(tr.to_record(offset)) + "\n")
            rows.append(tr.embeddings.detach().cpu().numpy())
            offset += len(tr)
    emb = np.concatenate(rows) if rows else np.zeros((0, 0), np.float32)
    np.save(path.with_suffix(".npy"), emb.astype(np.float32))
    return path
