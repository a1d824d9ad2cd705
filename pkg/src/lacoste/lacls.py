"""Location-agnostic classifier over cropped, background-masked instance patches."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .config import LAClsConfig, PatchSpec
from .errors import DataError, EmptySegmentError
from .nn import EncoderLayer


def crop_box(mask: np.ndarray, expansion: float):
    """Square box around the mask, expanded and clipped: (y0, y1, x0, x1), end-exclusive."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise EmptySegmentError("cannot crop an empty mask")
    h, w = mask.shape
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    side = max(y1 - y0, x1 - x0) * expansion
    cy, cx = 0.5 * (y0 + y1), 0.5 * (x0 + x1)
    half = 0.5 * side
    by0, bx0 = math.floor(cy - half), math.floor(cx - half)
    n = math.ceil(side)
    return max(0, by0), min(h, by0 + n), max(0, bx0), min(w, bx0 + n)


def crop_and_mask(image: np.ndarray, mask: np.ndarray, spec: PatchSpec | None = None) -> np.ndarray:
    """Masked crop of ``image`` (3, H, W) resized to ``spec.size`` squared."""
    spec = spec or PatchSpec()
    mask = np.asarray(mask, dtype=bool)
    y0, y1, x0, x1 = crop_box(mask, spec.expansion)
    img = np.asarray(image, dtype=np.float32)
    if spec.fill == "zeros":
        fill = np.zeros((img.shape[0], 1, 1), np.float32)
    else:
        fill = img[:, mask].mean(axis=1).reshape(-1, 1, 1).astype(np.float32)
    masked = np.where(mask[None], img, fill)[:, y0:y1, x0:x1]
    t = torch.from_numpy(np.ascontiguousarray(masked))[None]
    out = F.interpolate(t, size=(spec.size, spec.size), mode="bilinear", align_corners=False)
    return out[0].numpy()


class PatchClassifier(nn.Module):
    """Conv patch embedding, class token, and a few self-attention layers."""

    def __init__(self, cfg: LAClsConfig, num_classes: int):
        super().__init__()
        e = cfg.embed_dim
        s = cfg.patch.size
        self.stem = nn.Conv2d(3, 32, 4, stride=4)
        self.embed = nn.Conv2d(32, e, 2, stride=2)
        tokens = (s // 8) ** 2
        self.pos = nn.Parameter(torch.randn(tokens, e) * 0.02)
        self.cls_token = nn.Parameter(torch.randn(e) * 0.02)
        self.layers = nn.ModuleList(EncoderLayer(e, cfg.num_heads, 2 * e) for _ in range(cfg.num_layers))
        self.norm = nn.LayerNorm(e)
        self.head = nn.Linear(e, num_classes + 1)

    def forward(self, patches):
        """(B, 3, S, S) -> (embedding (B, E), logits (B, C+1))."""
        x = self.embed(F.gelu(self.stem(patches)))
        x = x.flatten(2).transpose(1, 2) + self.pos
        x = torch.cat([self.cls_token.expand(x.shape[0], 1, -1), x], dim=1)
        for layer in self.layers:
            x = layer(x)
        z = self.norm(x[:, 0])
        return z, self.head(z)


@torch.no_grad()
def classify_patch(model: PatchClassifier, patch) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(e_a, p_a)`` for one (3, S, S) patch."""
    p = torch.as_tensor(np.asarray(patch), dtype=next(model.parameters()).dtype)
    e, logits = model(p[None])
    return e[0], logits[0].softmax(-1)


def loss_lacls(logits, classes):
    """Summed CE against 1-based class labels."""
    target = torch.as_tensor(classes, dtype=torch.long) - 1
    return F.cross_entropy(logits, target, reduction="sum")


def gt_patches(clips, spec: PatchSpec):
    """(patches, classes) for every ground-truth instance of every left frame."""
    patches, classes = [], []
    for clip in clips:
        for t in range(clip.length):
            for cls, mask, _ in clip.ground_truth(t):
                patches.append(crop_and_mask(clip.left[t], mask, spec))
                classes.append(cls)
    if not patches:
        raise DataError("no ground-truth instances to train on")
    return np.stack(patches), np.asarray(classes)


def fit_patches(model: PatchClassifier, patches, classes, cfg: LAClsConfig, seed: int = 0, epochs=None):
    """Minimize mean CE over (patch, class) pairs; deterministic for a fixed seed."""
    if len(patches) == 0:
        raise DataError("empty training set")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    x = torch.as_tensor(patches, dtype=torch.float32)
    y = torch.as_tensor(classes, dtype=torch.long)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    epochs = cfg.epochs if epochs is None else epochs
    steps = epochs * math.ceil(len(x) / cfg.batch_size)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: (1 - s / max(steps, 1)) ** 0.9)
    model.train()
    history = []
    for _ in range(epochs):
        order = torch.randperm(len(x), generator=gen)
        total = 0.0
        for i in range(0, len(x), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            _, logits = model(x[idx])
            loss = loss_lacls(logits, y[idx]) / len(idx)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(idx)
        history.append(total / len(x))
    model.eval()
    return history


def train_lacls_offline(clips, cfg: LAClsConfig, num_classes: int, seed: int = 0, epochs=None):
    """Train a fresh classifier on ground-truth crops; returns ``(model, loss history)``."""
    if not clips:
        raise DataError("empty dataset")
    patches, classes = gt_patches(clips, cfg.patch)
    torch.manual_seed(seed)
    model = PatchClassifier(cfg, num_classes)
    history = fit_patches(model, patches, classes, cfg, seed=seed, epochs=epochs)
    return model, history
