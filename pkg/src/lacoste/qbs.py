"""Query-based segmentation with disparity-guided stereo feature propagation.

The model follows the mask-classification recipe: a convolutional encoder and
pixel decoder produce stride-4 per-pixel features, a transformer decoder turns
``N`` queries into object embeddings, and two heads map each embedding to a
class distribution over ``C + 1`` labels (last = no object) and to mask logits
via a dot product with the pixel features.

Class labels are 1-based in the public API (``1..C``, with ``C + 1`` for no
object) and 0-based inside tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import permutations

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from torch import nn
from torch.nn import functional as F

from .config import ModelConfig
from .errors import ArgumentError, DataError, ProviderError
from .geometry import dfp_tensor
from .nn import FeedForward, MultiHeadAttention, sine_position_encoding

# ---------------------------------------------------------------------------
# data records


@dataclass
class PredictionSet:
    """Per-frame outputs for ``N`` queries.

    ``layer_*`` entries hold the deep-supervision outputs of every decoder
    layer; the last one equals the final ``logits``/``embeddings``/``mask_logits``.
    """

    logits: torch.Tensor  # (N, C+1)
    embeddings: torch.Tensor  # (N, D)
    mask_logits: torch.Tensor  # (N, H, W)
    layer_embeddings: list = field(default_factory=list)
    layer_logits: list = field(default_factory=list)
    layer_mask_logits: list = field(default_factory=list)

    @property
    def probs(self) -> torch.Tensor:
        return self.logits.softmax(-1)

    @property
    def num_queries(self) -> int:
        return self.logits.shape[0]

    def layer(self, idx: int) -> "PredictionSet":
        return PredictionSet(self.layer_logits[idx], self.layer_embeddings[idx], self.layer_mask_logits[idx])


@dataclass
class GroundTruthSet:
    classes: np.ndarray  # (K,) labels in 1..C
    masks: np.ndarray  # (K, H, W) bool
    identities: np.ndarray  # (K,)

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        self.masks = np.asarray(self.masks, dtype=bool)
        self.identities = np.asarray(self.identities, dtype=np.int64).reshape(-1)
        if self.masks.ndim == 2 and self.classes.size == 1:
            self.masks = self.masks[None]
        if len(self.classes) == 0:
            self.masks = self.masks.reshape((0,) + self.masks.shape[-2:])

    def __len__(self):
        return len(self.classes)

    @classmethod
    def from_records(cls, records, shape=None):
        if not records:
            if shape is None:
                raise ArgumentError("empty record list needs a mask shape")
            return cls(np.zeros(0, int), np.zeros((0,) + tuple(shape), bool), np.zeros(0, int))
        classes, masks, ids = zip(*records)
        return cls(np.array(classes), np.stack(masks), np.array(ids))

    def permute(self, order) -> "GroundTruthSet":
        order = np.asarray(order)
        return GroundTruthSet(self.classes[order], self.masks[order], self.identities[order])


@dataclass
class MatchResult:
    gt_indices: np.ndarray  # (K,)
    query_indices: np.ndarray  # (K,)
    cost: float

    def as_dict(self) -> dict:
        return {int(g): int(q) for g, q in zip(self.gt_indices, self.query_indices)}


# ---------------------------------------------------------------------------
# network


def _conv(cin, cout, stride):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, padding_mode="replicate")


class PixelEncoder(nn.Module):
    """Strided conv backbone plus a one-step FPN-style pixel decoder (stride 4 output)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c0, c1, c2 = cfg.encoder_channels
        d = cfg.embed_dim
        self.stem = _conv(3, c0, 2)
        self.stage1 = _conv(c0, c1, 2)
        self.stage1b = _conv(c1, c1, 1)
        self.stage2 = _conv(c1, c2, 2)
        self.stage2b = _conv(c2, c2, 1)
        self.lateral = nn.Conv2d(c1, d, 1)
        self.top = nn.Conv2d(c2, d, 1)
        self.fuse = _conv(d, d, 1)
        self.out = nn.Conv2d(d, d, 1)

    def forward(self, x):
        if x.shape[-1] % 8 or x.shape[-2] % 8:
            raise ArgumentError(f"image size {tuple(x.shape[-2:])} must be divisible by 8")
        x = F.gelu(self.stem(x))
        s4 = F.gelu(self.stage1(x))
        s4 = s4 + F.gelu(self.stage1b(s4))
        s8 = F.gelu(self.stage2(s4))
        s8 = s8 + F.gelu(self.stage2b(s8))
        up = F.interpolate(self.top(s8), scale_factor=2, mode="bilinear", align_corners=False)
        f = F.gelu(self.fuse(self.lateral(s4) + up))
        return self.out(f)


class DecoderLayer(nn.Module):
    """Cross-attention to pixels, self-attention among queries, feed-forward (post-norm)."""

    def __init__(self, dim, heads, hidden):
        super().__init__()
        self.cross = MultiHeadAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, hidden)
        self.norm3 = nn.LayerNorm(dim)

    def forward(self, q, memory, pos, memory_mask=None):
        q = self.norm1(q + self.cross(q, memory + pos, memory, memory_mask))
        q = self.norm2(q + self.self_attn(q, q, q))
        return self.norm3(q + self.ffn(q))


class TransformerDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.dim = cfg.embed_dim
        self.layers = nn.ModuleList(
            DecoderLayer(cfg.embed_dim, cfg.num_heads, cfg.ffn_dim) for _ in range(cfg.decoder_layers))

    def forward(self, features, queries, memory_mask=None):
        """``features`` (B, D, h, w), ``queries`` (B, N, D) -> list of L (B, N, D)."""
        b, d, h, w = features.shape
        if queries.dim() != 3 or queries.shape[-1] != d or queries.shape[0] != b:
            raise ArgumentError(f"queries {tuple(queries.shape)} incompatible with features {tuple(features.shape)}")
        memory = features.flatten(2).transpose(1, 2)
        pos = sine_position_encoding(d, h, w, features.dtype).to(features.device)[None]
        out = []
        q = queries
        for layer in self.layers:
            q = layer(q, memory, pos, memory_mask)
            out.append(q)
        return out


class PredictionHeads(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.cls = nn.Linear(d, cfg.num_classes + 1)
        self.mask_hidden = nn.Linear(d, d)
        self.mask_proj = nn.Linear(d, d, bias=False)
        self.mask_bias = nn.Parameter(torch.zeros(()))

    def forward(self, emb, features, out_size=None):
        """``emb`` (B, N, D), ``features`` (B, D, h, w) -> logits (B, N, C+1), masks (B, N, H, W)."""
        logits = self.cls(emb)
        m = self.mask_proj(F.gelu(self.mask_hidden(emb)))
        masks = torch.einsum("bnd,bdhw->bnhw", m, features) + self.mask_bias
        if out_size is not None and tuple(out_size) != tuple(masks.shape[-2:]):
            masks = F.interpolate(masks, size=tuple(out_size), mode="bilinear", align_corners=False)
        return logits, masks


@dataclass
class FrameOutput:
    """Batched decoder outputs for a set of frames; lists are per decoder layer."""

    features: torch.Tensor  # (B, D, h, w) fused features used by the decoder
    embeddings: list  # L x (B, N, D)
    logits: list  # L x (B, N, C+1)
    mask_logits: list  # L x (B, N, H, W)

    def prediction(self, b: int) -> PredictionSet:
        return PredictionSet(
            self.logits[-1][b], self.embeddings[-1][b], self.mask_logits[-1][b],
            [e[b] for e in self.embeddings], [lg[b] for lg in self.logits], [m[b] for m in self.mask_logits])


class QBSModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = PixelEncoder(cfg)
        self.decoder = TransformerDecoder(cfg)
        self.heads = PredictionHeads(cfg)
        self.queries = nn.Parameter(torch.randn(cfg.num_queries, cfg.embed_dim))

    # -- pieces -----------------------------------------------------------
    def encode_image(self, images):
        return self.encoder(images)

    def initial_queries(self, batch: int):
        return self.queries[None].expand(batch, -1, -1)

    def fuse_stereo(self, f_left, f_right, disp_left, disp_right, valid_left=None, valid_right=None):
        """DFP in both directions; disparities are in feature pixels."""
        fused_l, _, _ = dfp_tensor(f_left, f_right, disp_left, valid_right, sign=1.0)
        fused_r, _, _ = dfp_tensor(f_right, f_left, disp_right, valid_left, sign=-1.0)
        return fused_l, fused_r

    def decode(self, features, queries, out_size, memory_mask=None) -> FrameOutput:
        layers = self.decoder(features, queries, memory_mask)
        logits, masks = [], []
        for emb in layers:
            lg, mk = self.heads(emb, features, out_size)
            logits.append(lg)
            masks.append(mk)
        return FrameOutput(features, layers, logits, masks)

    # -- full passes ------------------------------------------------------
    def forward_mono(self, images, queries=None) -> FrameOutput:
        feats = self.encode_image(images)
        q = self.initial_queries(images.shape[0]) if queries is None else queries
        return self.decode(feats, q, images.shape[-2:])

    def forward_stereo(self, left, right, disp_left, disp_right, queries=None,
                       valid_left=None, valid_right=None, features=None):
        """BDFP pass on a batch of rectified pairs.

        ``disp_*`` are (B, h, w) disparities at feature resolution. Returns
        ``(left_output, right_output)``; both views are decoded with the same
        initial queries.
        """
        if features is None:
            b = left.shape[0]
            feats = self.encode_image(torch.cat([left, right]))
            f_l, f_r = feats[:b], feats[b:]
        else:
            f_l, f_r = features
        if self.cfg.use_dfp:
            f_l, f_r = self.fuse_stereo(f_l, f_r, disp_left, disp_right, valid_left, valid_right)
        b = f_l.shape[0]
        q = self.initial_queries(b) if queries is None else queries
        out = self.decode(torch.cat([f_l, f_r]), torch.cat([q, q]), left.shape[-2:])
        return split_views(out, b)


def split_views(out: FrameOutput, b: int):
    def part(sl):
        return FrameOutput(out.features[sl], [e[sl] for e in out.embeddings],
                           [x[sl] for x in out.logits], [m[sl] for m in out.mask_logits])
    return part(slice(0, b)), part(slice(b, None))


def forward_bdfp(model: QBSModel, left, right, initial_queries, disparity_provider):
    """Single-pair BDFP pass using a disparity provider.

    ``left``/``right`` are (3, H, W) tensors; ``disparity_provider(left, right)``
    returns ``(disp_left, disp_right)`` full-resolution pixel disparities as
    arrays or tensors. Returns ``(PredictionSet_left, PredictionSet_right)``.
    """
    try:
        disp_l, disp_r = disparity_provider(left, right)
    except Exception as exc:  # noqa: BLE001 - surfaced as provider failure
        raise ProviderError(f"disparity provider failed: {exc}") from exc
    stride = model.cfg.stride
    dl = _feature_disparity(disp_l, stride, left.dtype)
    dr = _feature_disparity(disp_r, stride, left.dtype)
    q = None if initial_queries is None else torch.as_tensor(initial_queries, dtype=left.dtype)[None]
    out_l, out_r = model.forward_stereo(left[None], right[None], dl, dr, q)
    return out_l.prediction(0), out_r.prediction(0)


def _feature_disparity(disp, stride, dtype):
    d = torch.as_tensor(np.asarray(disp), dtype=dtype)
    if d.dim() == 2:
        d = d[None]
    return F.avg_pool2d(d[:, None], stride)[:, 0] / stride


# ---------------------------------------------------------------------------
# matching


def solve_assignment(cost, tie_break: bool = True) -> MatchResult:
    """Minimum-cost injective assignment of rows (ground truth) to columns (queries).

    With ``tie_break`` the returned optimum is the lexicographically smallest
    in query indices taken in ground-truth order.
    """
    cost = np.asarray(cost, dtype=np.float64)
    k, n = cost.shape
    if k > n:
        raise DataError(f"{k} ground-truth instances exceed {n} queries")
    if k == 0:
        return MatchResult(np.zeros(0, int), np.zeros(0, int), 0.0)
    rows, cols = linear_sum_assignment(cost)
    best = float(cost[rows, cols].sum())
    if tie_break:
        rows, cols = np.arange(k), _lexicographic_optimum(cost, best)
    return MatchResult(rows, cols, float(cost[rows, cols].sum()))


def _lexicographic_optimum(cost, best):
    """Fix rows in order, each to the lowest column that still admits an optimum."""
    k, n = cost.shape
    tol = 1e-9 * max(1.0, abs(best))
    fixed: list[int] = []
    prefix = 0.0
    for r in range(k):
        for q in range(n):
            if q in fixed:
                continue
            if prefix + cost[r, q] + _tail_cost(cost, r + 1, fixed + [q]) <= best + tol:
                fixed.append(q)
                prefix += cost[r, q]
                break
    return np.asarray(fixed)


def _tail_cost(cost, start, used):
    k, n = cost.shape
    if start >= k:
        return 0.0
    free = [q for q in range(n) if q not in used]
    sub = cost[start:][:, free]
    rr, cc = linear_sum_assignment(sub)
    return float(sub[rr, cc].sum())


def brute_force_assignment(cost):
    """Exhaustive minimum over all injections; returns (cost, columns)."""
    cost = np.asarray(cost, dtype=np.float64)
    k, n = cost.shape
    best, arg = np.inf, None
    for perm in permutations(range(n), k):
        c = cost[np.arange(k), list(perm)].sum()
        if c < best - 1e-12:
            best, arg = c, perm
    return float(best), np.asarray(arg if arg is not None else (), dtype=int)


def _flat_masks(gt_masks, like):
    return torch.as_tensor(np.asarray(gt_masks), dtype=like.dtype, device=like.device).flatten(1)


def pairwise_mask_costs(mask_logits, gt_masks):
    """Mean-pixel BCE and Dice loss for every (query, instance) pair; (N, K) each."""
    x = mask_logits.flatten(1)
    y = _flat_masks(gt_masks, x)
    hw = x.shape[1]
    bce = (F.softplus(x).sum(1, keepdim=True) - x @ y.T) / hw
    p = x.sigmoid()
    dice = 1 - 2 * (p @ y.T) / (p.sum(1, keepdim=True) + y.sum(1)[None]).clamp_min(1e-12)
    return bce, dice


def match_cost(pred: PredictionSet, gt: GroundTruthSet, cfg: ModelConfig) -> np.ndarray:
    """(K, N) matching cost: class (1 - p) plus weighted mask BCE and Dice."""
    with torch.no_grad():
        probs = pred.logits.softmax(-1)
        cls_idx = torch.as_tensor(gt.classes - 1, dtype=torch.long)
        c_cls = 1 - probs[:, cls_idx]
        bce, dice = pairwise_mask_costs(pred.mask_logits, gt.masks)
        total = cfg.lambda_cls * c_cls + cfg.lambda_bce * bce + cfg.lambda_dice * dice
    return total.T.double().cpu().numpy()


def hungarian_match(pred: PredictionSet, gt: GroundTruthSet, cfg: ModelConfig,
                    tie_break: bool = True) -> MatchResult:
    if len(gt) > pred.num_queries:
        raise DataError(f"{len(gt)} ground-truth instances exceed {pred.num_queries} queries")
    if len(gt) == 0:
        return MatchResult(np.zeros(0, int), np.zeros(0, int), 0.0)
    return solve_assignment(match_cost(pred, gt, cfg), tie_break=tie_break)


def carried_match(pred: PredictionSet, gt: GroundTruthSet, cfg: ModelConfig, fixed: dict,
                  tie_break: bool = True) -> MatchResult:
    """Hungarian match with some ``{gt index: query index}`` pairs pinned in advance.

    The remaining instances are assigned over the remaining queries.
    """
    if not fixed:
        return hungarian_match(pred, gt, cfg, tie_break=tie_break)
    if len(gt) > pred.num_queries:
        raise DataError(f"{len(gt)} ground-truth instances exceed {pred.num_queries} queries")
    if len(set(fixed.values())) != len(fixed):
        raise ArgumentError("pinned pairs must use distinct queries")
    cost = match_cost(pred, gt, cfg)
    rows = [g for g in range(len(gt)) if g not in fixed]
    cols = [q for q in range(pred.num_queries) if q not in set(fixed.values())]
    pairs = dict(fixed)
    if rows:
        sub = solve_assignment(cost[np.ix_(rows, cols)], tie_break=tie_break)
        pairs.update({rows[r]: cols[c] for r, c in zip(sub.gt_indices, sub.query_indices)})
    g = np.asarray(sorted(pairs), dtype=int)
    q = np.asarray([pairs[i] for i in g], dtype=int)
    return MatchResult(g, q, float(cost[g, q].sum()))


# ---------------------------------------------------------------------------
# losses


def dice_loss(mask_logits, targets):
    """Soft Dice loss per pair; ``mask_logits``/``targets`` (K, H, W) -> (K,)."""
    p = mask_logits.flatten(1).sigmoid()
    y = targets.flatten(1).to(p.dtype)
    return 1 - 2 * (p * y).sum(1) / (p.sum(1) + y.sum(1)).clamp_min(1e-12)


def loss_baseline(pred: PredictionSet, gt: GroundTruthSet, match: MatchResult, cfg: ModelConfig):
    """Classification CE over all queries plus mask BCE/Dice over matched pairs.

    Returns ``(total, {"cls", "bce", "dice"})`` for a single decoder layer.
    """
    n, c1 = pred.logits.shape
    target = torch.full((n,), c1 - 1, dtype=torch.long, device=pred.logits.device)
    weight = torch.ones(c1, dtype=pred.logits.dtype, device=pred.logits.device)
    weight[-1] = cfg.no_object_weight
    q = torch.as_tensor(match.query_indices, dtype=torch.long)
    if len(q):
        target[q] = torch.as_tensor(gt.classes[match.gt_indices] - 1, dtype=torch.long)
    l_cls = (F.cross_entropy(pred.logits, target, reduction="none") * weight[target]).sum()
    if len(q):
        m = pred.mask_logits[q]
        y = torch.as_tensor(gt.masks[match.gt_indices], dtype=m.dtype, device=m.device)
        l_bce = F.binary_cross_entropy_with_logits(m, y, reduction="none").flatten(1).mean(1).sum()
        l_dice = dice_loss(m, y).sum()
    else:
        l_bce = l_dice = pred.logits.sum() * 0
    total = cfg.lambda_bce * l_bce + cfg.lambda_dice * l_dice + cfg.lambda_cls * l_cls
    return total, {"cls": l_cls, "bce": l_bce, "dice": l_dice}


def loss_deep_supervision(pred: PredictionSet, gt: GroundTruthSet, cfg: ModelConfig, tie_break: bool = False,
                          fixed: dict | None = None):
    """Average of per-layer losses, each with its own Hungarian match.

    ``fixed`` pins ``{gt index: query index}`` pairs in every layer's match.
    Returns ``(total, final_layer_match)``.
    """
    layers = len(pred.layer_logits) or 1
    total = 0
    match = None
    for i in range(layers):
        p = pred.layer(i) if pred.layer_logits else pred
        match = carried_match(p, gt, cfg, fixed or {}, tie_break=tie_break)
        loss, _ = loss_baseline(p, gt, match, cfg)
        total = total + loss
    return total / layers, match
