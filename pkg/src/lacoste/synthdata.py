"""Deterministic synthetic stereo video with exact geometry.

Each clip shows a textured background plane and a few textured shapes at
constant depth drifting inside horizontal lanes. Left and right views are
rendered from the same scene description, so the true disparity of every
surface is exactly ``baseline_focal / Z``. Classes differ only by texture
(pattern and tint), never by shape or position.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import SceneConfig
from .errors import DataError
from .io import read_pfm, read_rgb_png, read_u16_png, write_pfm, write_rgb_png, write_u16_png

# per-class tint (RGB) and stripe orientation (radians); palettes are close on purpose
_CLASS_TINTS = np.array([
    [0.78, 0.78, 0.80],
    [0.74, 0.80, 0.78],
    [0.80, 0.76, 0.74],
    [0.76, 0.76, 0.84],
    [0.80, 0.80, 0.72],
    [0.72, 0.78, 0.82],
    [0.82, 0.74, 0.80],
    [0.74, 0.74, 0.74],
])
_PATTERN_PERIOD = 6.0
_PATTERN_CONTRAST = 0.16


@dataclass
class ObjectTrack:
    identity: int
    cls: int  # 1..C
    depth: float
    kind: str  # "ellipse" or "polygon"
    axes: tuple  # ellipse semi-axes (a, b) or polygon radii
    angle: float
    centers: np.ndarray  # (T, 2) x, y in left-view pixels


@dataclass
class StereoClip:
    name: str
    left: np.ndarray  # (T, 3, H, W) float32 in [0, 1]
    right: np.ndarray | None  # (T, 3, H, W) or None for monocular clips
    depth: np.ndarray  # (T, H, W) float32, left view
    masks: np.ndarray  # (T, H, W) uint16 instance ids, 0 = background
    instances: dict  # instance id -> {"class": c, "identity": k}
    baseline_focal: float = 0.0
    tracks: list = field(default_factory=list, repr=False)

    @property
    def length(self) -> int:
        return self.left.shape[0]

    @property
    def is_stereo(self) -> bool:
        return self.right is not None

    def semantic(self, t: int) -> np.ndarray:
        """Class label map of frame ``t`` (0 = background)."""
        lut = np.zeros(int(self.masks.max(initial=0)) + 1, dtype=np.int64)
        for iid, rec in self.instances.items():
            if int(iid) < lut.size:
                lut[int(iid)] = rec["class"]
        return lut[self.masks[t]]

    def ground_truth(self, t: int):
        """List of ``(class, binary mask, identity)`` records for frame ``t``."""
        out = []
        for iid in np.unique(self.masks[t]):
            if iid == 0:
                continue
            rec = self.instances[int(iid)]
            out.append((rec["class"], self.masks[t] == iid, rec["identity"]))
        return out

    def true_disparity(self, t: int) -> np.ndarray:
        return self.baseline_focal / self.depth[t]


# ---------------------------------------------------------------------------
# rendering


def class_texture(cls: int, u: np.ndarray, v: np.ndarray, phase: float = 0.0) -> np.ndarray:
    """RGB texture of class ``cls`` at object-local coordinates; returns (3, ...)."""
    k = (cls - 1) % 4
    w = 2 * np.pi / _PATTERN_PERIOD
    if k == 0:
        s = np.sin(w * v + phase)
    elif k == 1:
        s = np.sin(w * u + phase)
    elif k == 2:
        s = np.sin(w * u + phase) * np.sin(w * v)
    else:
        s = np.sin(w * (u + v) / np.sqrt(2) + phase)
    tint = _CLASS_TINTS[(cls - 1) % len(_CLASS_TINTS)]
    return tint.reshape((3,) + (1,) * s.ndim) + _PATTERN_CONTRAST * s[None]


def _background(x: np.ndarray, y: np.ndarray, params: np.ndarray) -> np.ndarray:
    base = np.array([0.62, 0.30, 0.28]).reshape(3, 1, 1)
    f1, f2, p1, p2 = params
    s = 0.5 * np.sin(f1 * x + p1) * np.cos(f2 * y + p2) + 0.5 * np.sin(0.5 * f2 * (x + y) + p2)
    return base + 0.08 * s[None] * np.array([1.0, 0.6, 0.6]).reshape(3, 1, 1)


def _inside(track: ObjectTrack, xx, yy, cx, cy) -> np.ndarray:
    dx, dy = xx - cx, yy - cy
    ca, sa = np.cos(track.angle), np.sin(track.angle)
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    if track.kind == "ellipse":
        a, b = track.axes
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    radii = np.asarray(track.axes)
    n = radii.size
    theta = np.mod(np.arctan2(v, u), 2 * np.pi) / (2 * np.pi) * n
    i0 = np.floor(theta).astype(int) % n
    frac = theta - np.floor(theta)
    # straight edges between polygon vertices in polar form
    r0, r1 = radii[i0], radii[(i0 + 1) % n]
    ang = 2 * np.pi / n
    phi = frac * ang
    denom = r1 * np.sin(phi) + r0 * np.sin(ang - phi)
    r_edge = r0 * r1 * np.sin(ang) / np.maximum(denom, 1e-9)
    return np.hypot(u, v) <= r_edge


def render_view(cfg: SceneConfig, tracks, bg_params, t: int, view: str):
    """Render one view at frame ``t``; returns (rgb, instance ids, depth)."""
    h, w = cfg.image_size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    bf = cfg.baseline_focal
    shift_bg = bf / cfg.background_depth if view == "right" else 0.0
    # a right pixel x shows the scene point at left x + d
    img = _background(xx + shift_bg, yy, bg_params)
    ids = np.zeros((h, w), dtype=np.uint16)
    depth = np.full((h, w), cfg.background_depth, dtype=np.float64)
    for k, tr in sorted(enumerate(tracks), key=lambda kv: -kv[1].depth):
        cx, cy = tr.centers[t]
        if view == "right":
            cx = cx - bf / tr.depth
        inside = _inside(tr, xx, yy, cx, cy)
        if not inside.any():
            continue
        tex = class_texture(tr.cls, xx - cx, yy - cy, phase=tr.angle)
        img = np.where(inside[None], tex, img)
        ids[inside] = k + 1
        depth[inside] = tr.depth
    return img, ids, depth


def _make_tracks(cfg: SceneConfig, rng: np.random.Generator, clip_index: int):
    h, w = cfg.image_size
    lo, hi = cfg.objects_per_clip
    n = int(rng.integers(lo, hi + 1))
    probs = np.asarray(cfg.class_frequencies, dtype=np.float64)
    probs = probs / probs.sum()
    lane_h = h / n
    lane_order = rng.permutation(n)
    tracks = []
    for k in range(n):
        cls = int(rng.choice(cfg.num_classes, p=probs)) + 1
        z = float(rng.uniform(*cfg.depth_range))
        if cfg.integer_disparity:
            z = cfg.baseline_focal / max(1.0, np.round(cfg.baseline_focal / z))
        r = float(rng.uniform(*cfg.radius_range))
        r = min(r, 0.5 * lane_h + 2.0)
        if rng.random() < 0.5:
            kind, axes = "ellipse", (r, r * float(rng.uniform(0.6, 1.0)))
        else:
            kind, axes = "polygon", tuple(r * rng.uniform(0.75, 1.0, size=int(rng.integers(5, 8))))
        angle = float(rng.uniform(0, np.pi))
        lane = lane_order[k]
        y_lo, y_hi = lane * lane_h + 0.5 * lane_h - 2, lane * lane_h + 0.5 * lane_h + 2
        x_lo, x_hi = r + 1, w - r - 1
        pos = np.array([rng.uniform(x_lo, x_hi), rng.uniform(y_lo, y_hi)])
        speed = rng.uniform(0.3, 1.0) * cfg.velocity_cap
        heading = rng.uniform(0, 2 * np.pi)
        vel = speed * np.array([np.cos(heading), 0.3 * np.sin(heading)])
        centers = np.zeros((cfg.clip_length, 2))
        for t in range(cfg.clip_length):
            centers[t] = pos
            pos = pos + vel
            for i, (a, b) in enumerate(((x_lo, x_hi), (y_lo, y_hi))):
                if pos[i] < a or pos[i] > b:
                    vel[i] = -vel[i]
                    pos[i] = np.clip(pos[i], a, b)
        tracks.append(ObjectTrack(clip_index * 1000 + k + 1, cls, z, kind, axes, angle, centers))
    return tracks


def generate_clip(cfg: SceneConfig, clip_index: int) -> StereoClip:
    """Render clip ``clip_index``; bitwise deterministic per ``(cfg.seed, clip_index)``."""
    rng = np.random.default_rng([cfg.seed, clip_index])
    tracks = _make_tracks(cfg, rng, clip_index)
    bg = np.array([rng.uniform(0.15, 0.3), rng.uniform(0.15, 0.3), rng.uniform(0, 6.3), rng.uniform(0, 6.3)])
    noise_rng = np.random.default_rng([cfg.seed, clip_index, 1])
    T = cfg.clip_length
    h, w = cfg.image_size
    left = np.zeros((T, 3, h, w), np.float32)
    right = np.zeros((T, 3, h, w), np.float32) if cfg.stereo else None
    depth = np.zeros((T, h, w), np.float32)
    masks = np.zeros((T, h, w), np.uint16)
    for t in range(T):
        gain = 1.0 + 0.05 * noise_rng.standard_normal()
        img, ids, z = render_view(cfg, tracks, bg, t, "left")
        left[t] = _finish(img * gain, cfg.noise_std, noise_rng)
        masks[t] = ids
        depth[t] = z
        if cfg.stereo:
            img_r, _, _ = render_view(cfg, tracks, bg, t, "right")
            right[t] = _finish(img_r * gain, cfg.noise_std, noise_rng)
    instances = {k + 1: {"class": tr.cls, "identity": tr.identity} for k, tr in enumerate(tracks)}
    return StereoClip(f"seq_{clip_index:04d}", left, right, depth, masks, instances,
                      baseline_focal=cfg.baseline_focal, tracks=tracks)


def _finish(img, noise_std, rng):
    if noise_std > 0:
        img = img + noise_std * rng.standard_normal(img.shape)
    # quantize as the 8-bit files will
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def generate_dataset(cfg: SceneConfig, num_clips: int, start: int = 0) -> list[StereoClip]:
    return [generate_clip(cfg, start + i) for i in range(num_clips)]


# ---------------------------------------------------------------------------
# disk layout


def serialize_dataset(clips, root, scene: SceneConfig | None = None) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    meta = {"sequences": [c.name for c in clips]}
    if scene is not None:
        from dataclasses import asdict
        meta["scene"] = asdict(scene)
    if clips:
        meta["baseline_focal"] = clips[0].baseline_focal
    (root / "dataset.json").write_text(json.dumps(meta, indent=2))
    for clip in clips:
        seq = root / clip.name
        for sub in ("frames", "masks", "depth"):
            (seq / sub).mkdir(parents=True, exist_ok=True)
        for t in range(clip.length):
            write_rgb_png(seq / "frames" / f"left_{t:06d}.png", clip.left[t])
            if clip.right is not None:
                write_rgb_png(seq / "frames" / f"right_{t:06d}.png", clip.right[t])
            write_u16_png(seq / "masks" / f"{t:06d}.png", clip.masks[t])
            write_pfm(seq / "depth" / f"{t:06d}.pfm", clip.depth[t])
        inst = {str(k): v for k, v in clip.instances.items()}
        (seq / "instances.json").write_text(json.dumps(inst, indent=2, sort_keys=True))
    return root


def load_sequence(seq_dir) -> StereoClip:
    seq = Path(seq_dir)
    inst_path = seq / "instances.json"
    if not inst_path.exists():
        raise DataError(f"missing instances file: {inst_path}")
    try:
        instances = {int(k): v for k, v in json.loads(inst_path.read_text()).items()}
    except (ValueError, AttributeError) as exc:
        raise DataError(f"malformed instances file: {inst_path}") from exc
    lefts = sorted((seq / "frames").glob("left_*.png"))
    if not lefts:
        raise DataError(f"no left frames found under {seq / 'frames'}")
    left, right, depth, masks = [], [], [], []
    stereo = True
    for lp in lefts:
        idx = lp.stem.split("_", 1)[1]
        left.append(read_rgb_png(lp))
        rp = seq / "frames" / f"right_{idx}.png"
        if rp.exists():
            right.append(read_rgb_png(rp))
        else:
            stereo = False
        mp = seq / "masks" / f"{idx}.png"
        dp = seq / "depth" / f"{idx}.pfm"
        for p in (mp, dp):
            if not p.exists():
                raise DataError(f"missing file: {p}")
        masks.append(read_u16_png(mp))
        depth.append(read_pfm(dp))
    bf = 0.0
    meta = seq.parent / "dataset.json"
    if meta.exists():
        bf = float(json.loads(meta.read_text()).get("baseline_focal", 0.0))
    return StereoClip(
        seq.name,
        np.stack(left),
        np.stack(right) if stereo and right else None,
        np.stack(depth),
        np.stack(masks),
        instances,
        baseline_focal=bf,
    )


def load_dataset(root) -> list[StereoClip]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    meta = root / "dataset.json"
    if meta.exists():
        names = json.loads(meta.read_text())["sequences"]
        seqs = [root / n for n in names]
    else:
        seqs = sorted(p for p in root.iterdir() if p.is_dir())
    return [load_sequence(s) for s in seqs]
