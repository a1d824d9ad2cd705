"""Image-plane geometry for stereo feature propagation and pseudo-stereo views.

Convention: a left pixel ``(x, y)`` with disparity ``d`` corresponds to the
right pixel ``(x - d, y)``. All arrays are channel-first.

The differentiable pieces (``warp_tensor``, ``cosine_weight_tensor``,
``fuse_tensor``) operate on batched torch tensors and are what the
segmentation model calls; the ``FeatureMap``-level functions wrap them for
single maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

from .config import PseudoStereoConfig
from .errors import ArgumentError, DataError

EPS = 1e-8


@dataclass
class FeatureMap:
    data: np.ndarray  # (C, H, W)
    valid: np.ndarray | None = None  # (H, W) bool

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim == 2:
            self.data = self.data[None]
        if self.data.ndim != 3 or self.data.shape[0] < 1:
            raise ArgumentError(f"feature map must be C x H x W, got {self.data.shape}")
        if self.valid is None:
            self.valid = np.ones(self.data.shape[1:], dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.data.shape[1:]:
            raise ArgumentError("valid mask must match feature height x width")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class DisparityField:
    data: np.ndarray  # (H, W), pixels
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.valid is None:
            self.valid = np.ones(self.data.shape, dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.data.shape:
            raise ArgumentError("disparity valid mask shape mismatch")
        if np.any(self.data[self.valid] < 0):
            raise DataError("disparity must be nonnegative on valid pixels")


@dataclass
class DepthField:
    data: np.ndarray  # (H, W), scene units
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.valid is None:
            self.valid = np.ones(self.data.shape, dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)

    @property
    def z_max(self) -> float:
        return float(self.data[self.valid].max())


@dataclass
class StereoDisparity:
    """Disparity referenced to each view of a rectified pair."""

    left: DisparityField
    right: DisparityField


# ---------------------------------------------------------------------------
# torch core


def warp_tensor(src, disp, src_valid=None, sign: float = 1.0):
    """Bilinear horizontal backward warp.

    Samples ``src`` at ``(x - sign * disp, y)``. ``src`` is (B, C, H, W),
    ``disp`` is (B, H, W). Returns the warped tensor (zero where invalid) and a
    (B, H, W) bool validity mask. A target is invalid when any pixel carrying
    nonzero interpolation weight lies outside ``src`` or is invalid there.
    """
    if src.dim() != 4 or disp.dim() != 3 or src.shape[0] != disp.shape[0] or src.shape[2:] != disp.shape[1:]:
        raise ArgumentError(f"shape mismatch: source {tuple(src.shape)} vs disparity {tuple(disp.shape)}")
    b, c, h, w = src.shape
    disp = disp.to(src.dtype)
    xs = torch.arange(w, dtype=src.dtype, device=src.device).view(1, 1, w) - sign * disp
    x0 = torch.floor(xs)
    frac = xs - x0
    x0 = x0.long()
    x1 = x0 + 1
    has_right = frac > 0
    valid = (x0 >= 0) & (x0 <= w - 1) & (~has_right | (x1 <= w - 1))
    i0 = x0.clamp(0, w - 1)
    i1 = x1.clamp(0, w - 1)
    if src_valid is not None:
        sv = src_valid.bool()
        valid &= torch.gather(sv, 2, i0) & (~has_right | torch.gather(sv, 2, i1))
    g0 = torch.gather(src, 3, i0.unsqueeze(1).expand(b, c, h, w))
    g1 = torch.gather(src, 3, i1.unsqueeze(1).expand(b, c, h, w))
    f = frac.unsqueeze(1)
    out = g0 * (1 - f) + g1 * f
    out = out * valid.unsqueeze(1).to(src.dtype)
    return out, valid


def cosine_weight_tensor(a, b, b_valid=None, eps: float = EPS):
    """Pixel-wise cosine similarity over channels; (B, C, H, W) -> (B, H, W)."""
    if a.shape != b.shape:
        raise ArgumentError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    na = a.norm(dim=1)
    nb = b.norm(dim=1)
    w = (a * b).sum(1) / (na * nb + eps)
    keep = (na >= eps) & (nb >= eps)
    if b_valid is not None:
        keep = keep & b_valid.bool()
    return torch.where(keep, w, torch.zeros_like(w))


def fuse_tensor(left, warped, weight, warped_valid=None):
    """``left + weight * warped``; identity on ``left`` where ``warped`` is invalid."""
    if left.shape != warped.shape or weight.shape != (left.shape[0],) + tuple(left.shape[2:]):
        raise ArgumentError("fuse_dfp shape mismatch")
    w = weight
    if warped_valid is not None:
        w = torch.where(warped_valid.bool(), w, torch.zeros_like(w))
        warped = warped * warped_valid.unsqueeze(1).to(warped.dtype)
    return left + w.unsqueeze(1) * warped


def dfp_tensor(left, right, disp_left, right_valid=None, sign: float = 1.0):
    """Warp ``right`` into the ``left`` frame and fuse with cosine weights."""
    warped, valid = warp_tensor(right, disp_left, right_valid, sign=sign)
    weight = cosine_weight_tensor(left, warped, valid)
    return fuse_tensor(left, warped, weight, valid), weight, valid


# ---------------------------------------------------------------------------
# FeatureMap-level operations


def backward_warp(source: FeatureMap, disparity: DisparityField, sign: float = 1.0) -> FeatureMap:
    """Sample ``source`` at ``(x - d(x, y), y)`` with bilinear interpolation."""
    if source.data.shape[1:] != disparity.data.shape:
        raise ArgumentError(f"source {source.data.shape[1:]} and disparity {disparity.data.shape} differ")
    src = torch.from_numpy(np.ascontiguousarray(source.data, dtype=np.float64))[None]
    disp = torch.from_numpy(np.where(disparity.valid, disparity.data, 0.0))[None]
    out, valid = warp_tensor(src, disp, torch.from_numpy(source.valid)[None], sign=sign)
    valid = valid[0].numpy() & disparity.valid
    data = out[0].numpy() * valid
    return FeatureMap(data.astype(source.data.dtype, copy=False), valid)


def cosine_fusion_weight(a: FeatureMap, b: FeatureMap) -> np.ndarray:
    if a.data.shape != b.data.shape:
        raise ArgumentError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")
    ta = torch.from_numpy(np.asarray(a.data, dtype=np.float64))[None]
    tb = torch.from_numpy(np.asarray(b.data, dtype=np.float64))[None]
    return cosine_weight_tensor(ta, tb, torch.from_numpy(b.valid)[None])[0].numpy()


def fuse_dfp(left: FeatureMap, warped: FeatureMap, weight: np.ndarray) -> FeatureMap:
    weight = np.asarray(weight, dtype=np.float64)
    if left.data.shape != warped.data.shape or weight.shape != left.data.shape[1:]:
        raise ArgumentError("fuse_dfp shape mismatch")
    w = np.where(warped.valid, weight, 0.0)
    data = left.data + w[None] * np.where(warped.valid[None], warped.data, 0.0)
    return FeatureMap(data.astype(left.data.dtype, copy=False), left.valid.copy())


def disparity_from_depth(depth: DepthField, d_s: float) -> DisparityField:
    """Scaled inverse depth: ``d_s * z_max / Z``."""
    if d_s < 0:
        raise ArgumentError("scale factor must be nonnegative")
    if np.any(depth.data[depth.valid] <= 0):
        raise DataError("depth must be positive on valid pixels")
    z = np.where(depth.valid, depth.data, 1.0)
    disp = np.where(depth.valid, d_s * depth.z_max / z, 0.0)
    return DisparityField(disp, depth.valid.copy())


def sobel_magnitude(field: np.ndarray) -> np.ndarray:
    """Gradient magnitude in units of field-per-pixel (Sobel normalized by 8)."""
    f = np.asarray(field, dtype=np.float64)
    gx = ndimage.sobel(f, axis=1, mode="nearest") / 8.0
    gy = ndimage.sobel(f, axis=0, mode="nearest") / 8.0
    return np.hypot(gx, gy)


def sharpen_disparity(disparity: DisparityField, cfg: PseudoStereoConfig):
    """Drop flying pixels (strong disparity gradients) from the valid set."""
    filled = np.where(disparity.valid, disparity.data, 0.0)
    if np.isinf(cfg.sobel_threshold):
        flying = np.zeros_like(disparity.valid)
    else:
        flying = (sobel_magnitude(filled) > cfg.sobel_threshold) & disparity.valid
    return DisparityField(disparity.data.copy(), disparity.valid & ~flying), flying


def forward_warp(image: FeatureMap, disparity: DisparityField):
    """Splat each valid source pixel to ``(round(x - d), y)``.

    Collisions keep the larger disparity (nearer surface); equal disparities
    keep the rightmost source pixel. Returns the warped map and its coverage.
    """
    if image.data.shape[1:] != disparity.data.shape:
        raise ArgumentError("image and disparity shapes differ")
    c, h, w = image.data.shape
    src_ok = image.valid & disparity.valid
    ys, xs = np.nonzero(src_ok)
    d = disparity.data[ys, xs]
    xt = np.floor(xs - d + 0.5).astype(np.int64)
    inside = (xt >= 0) & (xt < w)
    ys, xs, xt, d = ys[inside], xs[inside], xt[inside], d[inside]
    # sort ascending by (target, disparity, source x); last of each target wins
    order = np.lexsort((xs, d, ys * w + xt))
    tgt = (ys * w + xt)[order]
    last = np.r_[tgt[1:] != tgt[:-1], True] if tgt.size else np.zeros(0, bool)
    sel = order[last]
    out = np.zeros_like(image.data)
    valid = np.zeros((h, w), dtype=bool)
    out[:, ys[sel], xt[sel]] = image.data[:, ys[sel], xs[sel]]
    valid[ys[sel], xt[sel]] = True
    return FeatureMap(out, valid), valid


def fill_holes(image: FeatureMap, valid: np.ndarray, donor: FeatureMap | None = None,
               mode: str = "temporal_donor") -> FeatureMap:
    valid = np.asarray(valid, dtype=bool)
    holes = ~valid
    if mode == "temporal_donor":
        if donor is None:
            raise ArgumentError("temporal_donor fill needs a donor image")
        if donor.data.shape != image.data.shape:
            raise ArgumentError("donor shape must match image")
        data = np.where(holes[None], donor.data, image.data)
        return FeatureMap(data, valid | donor.valid)
    if mode == "blank_with_mask":
        data = np.where(holes[None], 0, image.data).astype(image.data.dtype)
        return FeatureMap(data, valid.copy())
    raise ArgumentError(f"unknown fill mode {mode!r}")


def synth_right_view(left, depth: DepthField, d_s: float, donor=None,
                     cfg: PseudoStereoConfig | None = None):
    """Pseudo right view from a left image and depth.

    Returns the filled right image (same layout as ``left``) and the mask of
    pixels that received a forward-warped sample.
    """
    cfg = cfg or PseudoStereoConfig()
    left_map = left if isinstance(left, FeatureMap) else FeatureMap(left)
    donor_map = None
    if donor is not None:
        donor_map = donor if isinstance(donor, FeatureMap) else FeatureMap(donor)
    disp = disparity_from_depth(depth, d_s)
    disp, _ = sharpen_disparity(disp, cfg)
    warped, covered = forward_warp(left_map, disp)
    filled = fill_holes(warped, covered, donor_map, cfg.fill_mode)
    return filled.data, covered


def right_disparity_from_left(disp_left: DisparityField) -> DisparityField:
    """Re-reference a left disparity map to the right view.

    Forward-warps the disparity map by itself; disoccluded holes take the
    smaller (farther) of the nearest valid neighbours along the row.
    """
    warped, covered = forward_warp(FeatureMap(disp_left.data[None]), disp_left)
    d = warped.data[0].copy()
    h, w = d.shape
    big = np.inf
    left_fill = np.full((h, w), big)
    right_fill = np.full((h, w), big)
    # nearest valid value scanning from the left / right
    idx = np.where(covered, np.arange(w)[None], -1)
    idx = np.maximum.accumulate(idx, axis=1)
    rows = np.arange(h)[:, None]
    has = idx >= 0
    left_fill[has] = d[np.broadcast_to(rows, (h, w))[has], idx[has]]
    ridx = np.where(covered, np.arange(w)[None], w)
    ridx = np.minimum.accumulate(ridx[:, ::-1], axis=1)[:, ::-1]
    hasr = ridx < w
    right_fill[hasr] = d[np.broadcast_to(rows, (h, w))[hasr], ridx[hasr]]
    fill = np.minimum(left_fill, right_fill)
    valid = covered | np.isfinite(fill)
    out = np.where(covered, d, np.where(np.isfinite(fill), fill, 0.0))
    return DisparityField(out, valid)


def downsample_disparity(disp: np.ndarray, valid: np.ndarray, stride: int):
    """Average-pool a full-resolution disparity to feature resolution (pixels / stride)."""
    h, w = disp.shape
    if h % stride or w % stride:
        raise ArgumentError("disparity size must be divisible by the stride")
    blocks = np.where(valid, disp, 0.0).reshape(h // stride, stride, w // stride, stride)
    vb = valid.reshape(h // stride, stride, w // stride, stride)
    count = vb.sum(axis=(1, 3))
    mean = blocks.sum(axis=(1, 3)) / np.maximum(count, 1)
    return mean / stride, count == stride * stride
