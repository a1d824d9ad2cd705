"""Tracklets of object queries and the stereo-temporal set classifier.

A tracklet is a small set of object-query embeddings gathered across views,
timestamps and decoder layers. The set classifier prepends a learned set
token, runs self-attention without positional encoding, and reads a tracklet
class distribution off the set token plus one distribution per item.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .config import ModelConfig, SetClassifierConfig, TrackletSamplerConfig
from .errors import ArgumentError, DataError
from .nn import EncoderLayer
from .qbs import GroundTruthSet, PredictionSet, hungarian_match


@dataclass
class Tracklet:
    embeddings: torch.Tensor  # (M, D)
    item_labels: np.ndarray  # (M,) labels in 1..C+1
    label: int  # tracklet label in 1..C+1
    identities: np.ndarray  # (M,) pseudo identity ids
    sources: list = field(default_factory=list)  # (view, timestamp, layer) per item
    non_object: np.ndarray | None = None  # (M,) bool, items excluded when masking

    def __post_init__(self):
        self.item_labels = np.asarray(self.item_labels, dtype=np.int64).reshape(-1)
        self.identities = np.asarray(self.identities, dtype=np.int64).reshape(-1)
        if self.non_object is None:
            self.non_object = np.zeros(len(self.item_labels), dtype=bool)

    def __len__(self):
        return int(self.embeddings.shape[0])

    def to_record(self, offset: int) -> dict:
        """JSON-lines record; embeddings live in a side file at ``offset`` rows."""
        return {
            "sources": [list(map(_jsonable, s)) for s in self.sources],
            "identities": self.identities.tolist(),
            "item_labels": self.item_labels.tolist(),
            "label": int(self.label),
            "embedding_offset": int(offset),
            "length": len(self),
        }


def _jsonable(x):
    return x.item() if hasattr(x, "item") else x


# ---------------------------------------------------------------------------
# query alignment and pseudo identities


def align_queries(prev_left_embeddings, learned_queries, num_queries: int | None = None):
    """Initial queries for the next frame: the previous left-view embeddings, or ``learned_queries`` at t = 1."""
    if prev_left_embeddings is None:
        return learned_queries
    n = num_queries if num_queries is not None else learned_queries.shape[-2]
    if prev_left_embeddings.shape[-2] != n:
        raise ArgumentError(f"expected {n} embeddings, got {prev_left_embeddings.shape[-2]}")
    return prev_left_embeddings


def label_pseudo_ids(i: int, n: int, num_queries: int) -> int:
    """Pseudo identity ``(i - 1) * N + n`` for batch item ``i`` and query ``n`` (both 1-based)."""
    if i < 1 or not 1 <= n <= num_queries:
        raise ArgumentError(f"out of range: i={i}, n={n}, N={num_queries}")
    return (i - 1) * num_queries + n


def identity_match_filter(pred: PredictionSet, gt: GroundTruthSet, cfg: ModelConfig):
    """Query indices matched to ground truth (ascending) and their class labels."""
    if len(gt) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    match = hungarian_match(pred, gt, cfg)
    order = np.argsort(match.query_indices)
    return match.query_indices[order].astype(np.int64), gt.classes[match.gt_indices[order]].astype(np.int64)


# ---------------------------------------------------------------------------
# augmented tracklet sampling


@dataclass
class IdentityPool:
    """All embeddings of one pseudo identity available for sampling."""

    identity: int
    category: int
    embeddings: torch.Tensor  # (P, D)
    item_labels: np.ndarray  # (P,)
    sources: list


def inverse_frequency_weights(counts: dict) -> dict:
    """Sampling weight per category proportional to ``1 / count``, normalized."""
    inv = {c: 1.0 / n for c, n in counts.items() if n > 0}
    total = sum(inv.values())
    return {c: v / total for c, v in inv.items()}


def sample_anchor_categories(counts: dict, num: int, rng: np.random.Generator) -> np.ndarray:
    weights = inverse_frequency_weights(counts)
    cats = sorted(weights)
    return rng.choice(cats, size=num, p=[weights[c] for c in cats])


def generate_tracklets(pools: list[IdentityPool], cfg: TrackletSamplerConfig, seed) -> list[Tracklet]:
    """Sample ``cfg.num_tracklets`` mixed, multi-length tracklets.

    Every tracklet has an anchor identity whose category is the tracklet
    label; up to ``floor(M * mix_cap)`` items come from other identities.
    Anchor categories are drawn with probability inversely proportional to
    their identity count in ``pools``.
    """
    if not pools or cfg.num_tracklets <= 0:
        return []
    rng = np.random.default_rng(seed)
    counts: dict[int, int] = {}
    for p in pools:
        counts[p.category] = counts.get(p.category, 0) + 1
    by_cat: dict[int, list[int]] = {}
    for idx, p in enumerate(pools):
        by_cat.setdefault(p.category, []).append(idx)
    cats = sample_anchor_categories(counts, cfg.num_tracklets, rng)
    out = []
    for cat in cats:
        members = by_cat[int(cat)]
        a = members[int(rng.integers(len(members)))]
        anchor = pools[a]
        m = int(rng.choice(cfg.lengths))
        others = [j for j in range(len(pools)) if j != a]
        n_mix = int(rng.integers(0, int(np.floor(m * cfg.mix_cap)) + 1)) if others else 0
        n_anchor = m - n_mix
        size = anchor.embeddings.shape[0]
        picks = rng.choice(size, size=n_anchor, replace=size < n_anchor)
        rows = [(a, int(k)) for k in picks]
        for _ in range(n_mix):
            j = others[int(rng.integers(len(others)))]
            rows.append((j, int(rng.integers(pools[j].embeddings.shape[0]))))
        rows = [rows[k] for k in rng.permutation(len(rows))]
        out.append(Tracklet(
            embeddings=torch.stack([pools[j].embeddings[k] for j, k in rows]),
            item_labels=np.array([pools[j].item_labels[k] for j, k in rows]),
            label=int(anchor.category),
            identities=np.array([pools[j].identity for j, _ in rows]),
            sources=[pools[j].sources[k] for j, k in rows],
        ))
    return out


# ---------------------------------------------------------------------------
# set classifier


class SetClassifier(nn.Module):
    def __init__(self, cfg: SetClassifierConfig, embed_dim: int, num_classes: int):
        super().__init__()
        t = cfg.token_dim
        self.cfg = cfg
        self.proj = nn.Sequential(nn.Linear(embed_dim, t), nn.GELU(), nn.Linear(t, t))
        self.set_token = nn.Parameter(torch.randn(t) * 0.02)
        self.layers = nn.ModuleList(EncoderLayer(t, cfg.num_heads, 2 * t) for _ in range(cfg.num_layers))
        self.norm = nn.LayerNorm(t)
        self.set_head = nn.Linear(t, num_classes + 1)
        self.item_head = nn.Linear(t, num_classes + 1)

    def forward(self, items, exclude=None):
        """``items`` (B, M, D); ``exclude`` (B, M) bool marks items hidden from attention.

        Returns ``(set_embedding (B, T), set_logits (B, C+1), item_logits (B, M, C+1))``.
        """
        if items.dim() != 3 or items.shape[1] < 1:
            raise ArgumentError("a tracklet needs at least one item")
        b = items.shape[0]
        x = torch.cat([self.set_token.expand(b, 1, -1), self.proj(items)], dim=1)
        mask = None
        if exclude is not None:
            mask = torch.cat([torch.zeros(b, 1, dtype=torch.bool, device=items.device), exclude.bool()], dim=1)
        for layer in self.layers:
            x = layer(x, mask)
        z = self.norm(x)
        return z[:, 0], self.set_head(z[:, 0]), self.item_head(z[:, 1:])


def pad_tracklets(tracklets: list[Tracklet], mask_non_objects: bool = False):
    """Stack variable-length tracklets; returns (items, exclude, item_labels, labels, valid)."""
    m = max(len(t) for t in tracklets)
    d = tracklets[0].embeddings.shape[-1]
    ref = tracklets[0].embeddings
    items = ref.new_zeros((len(tracklets), m, d))
    exclude = torch.ones(len(tracklets), m, dtype=torch.bool)
    item_labels = torch.zeros(len(tracklets), m, dtype=torch.long)
    labels = torch.tensor([t.label for t in tracklets], dtype=torch.long)
    for i, t in enumerate(tracklets):
        k = len(t)
        items[i, :k] = t.embeddings
        exclude[i, :k] = torch.as_tensor(t.non_object) if mask_non_objects else False
        item_labels[i, :k] = torch.as_tensor(t.item_labels)
    valid = torch.zeros(len(tracklets), m, dtype=torch.bool)
    for i, t in enumerate(tracklets):
        valid[i, :len(t)] = True
    return items, exclude, item_labels, labels, valid


@torch.no_grad()
def set_classify(tracklet: Tracklet, model: SetClassifier, mask_non_objects: bool | None = None):
    """Return ``(e_s, p_s, p_items)`` for one tracklet."""
    if len(tracklet) == 0:
        raise ArgumentError("empty tracklet")
    use_mask = model.cfg.mask_non_objects if mask_non_objects is None else mask_non_objects
    exclude = torch.as_tensor(tracklet.non_object)[None] if use_mask else None
    e, set_logits, item_logits = model(tracklet.embeddings[None], exclude)
    return e[0], set_logits[0].softmax(-1), item_logits[0].softmax(-1)


# ---------------------------------------------------------------------------
# losses


def pairwise_similarity(embeddings, temperature: float):
    """Logistic of cosine similarity over ``temperature``; exactly symmetric (K, K)."""
    norms = embeddings.norm(dim=-1, keepdim=True)
    if torch.any(norms <= 0):
        raise DataError("zero-norm embedding in similarity")
    e = embeddings / norms
    g = e @ e.T
    s = torch.sigmoid(0.5 * (g + g.T) / temperature)
    # mirror the upper triangle: vectorized kernels may round equal inputs differently
    upper = torch.triu(s)
    return upper + torch.triu(s, 1).T


def identity_targets(identities) -> torch.Tensor:
    ids = torch.as_tensor(np.asarray(identities))
    return (ids[:, None] == ids[None, :]).to(torch.float64)


def loss_stscls(set_logits, item_logits, labels, item_labels, sim, target, item_valid=None,
                ida_reduction: str = "sum"):
    """Set CE + summed item CE (averaged over tracklets) + identity-alignment BCE.

    Labels are 1-based (``C + 1`` = no object). ``ida_reduction="sum"`` sums
    the BCE over all K x K pairs; ``"mean"`` averages it.
    Returns ``(total, L_sc, L_lc, L_ida)``.
    """
    labels = torch.as_tensor(labels, dtype=torch.long) - 1
    item_labels = torch.as_tensor(item_labels, dtype=torch.long) - 1
    if set_logits.numel():
        zero = set_logits.sum() * 0
    elif sim is not None:
        zero = sim.sum() * 0
    else:
        zero = torch.zeros((), dtype=set_logits.dtype)
    if set_logits.numel():
        l_sc = F.cross_entropy(set_logits, labels, reduction="mean")
        ce = F.cross_entropy(item_logits.flatten(0, 1), item_labels.flatten().clamp_min(0), reduction="none")
        ce = ce.view(item_labels.shape)
        if item_valid is not None:
            ce = ce * item_valid.to(ce.dtype)
        l_lc = ce.sum(1).mean()
    else:
        l_sc = l_lc = zero
    if sim is not None and sim.numel():
        target = torch.as_tensor(target, dtype=sim.dtype)
        bce = F.binary_cross_entropy(sim, target, reduction="none")
        l_ida = bce.sum() if ida_reduction == "sum" else bce.mean()
    else:
        l_ida = zero
    return l_sc + l_lc + l_ida, l_sc, l_lc, l_ida
