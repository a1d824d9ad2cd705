"""Shared test utilities: a central finite-difference gradient checker and tiny configs."""

from __future__ import annotations

import numpy as np
import torch

from lacoste.config import ModelConfig, SetClassifierConfig

STEP = 1e-4
TOL = 1e-3

# criterion number -> "PASS ..." / "FAIL ..." line, filled by the acceptance suite
ACCEPTANCE: dict = {}


def fd_check(fn, tensors, step=STEP, max_coords=40, rng=None):
    """Compare autograd against central differences on float64 leaf tensors.

    ``fn()`` must return a scalar computed from ``tensors``. At most
    ``max_coords`` randomly chosen coordinates per tensor are probed. Returns
    the relative error ``|g_a - g_n| / max(|g_a|, |g_n|, tiny)`` over all probed
    coordinates.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        assert t.dtype == torch.float64 and t.requires_grad
        t.grad = None
    out = fn()
    out.backward()
    analytic, numeric = [], []
    with torch.no_grad():
        for t in tensors:
            flat = t.view(-1)
            n = flat.numel()
            idx = rng.choice(n, size=min(n, max_coords), replace=False)
            g = t.grad.reshape(-1)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + step
                up = fn().item()
                flat[i] = orig - step
                down = fn().item()
                flat[i] = orig
                numeric.append((up - down) / (2 * step))
                analytic.append(g[i].item())
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale)


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(num_queries=5, num_classes=3, embed_dim=16, decoder_layers=2, num_heads=2, ffn_dim=24,
                encoder_channels=(8, 12, 16))
    base.update(kw)
    return ModelConfig(**base)


def tiny_set_config(**kw) -> SetClassifierConfig:
    base = dict(num_layers=2, num_heads=2, token_dim=16)
    base.update(kw)
    return SetClassifierConfig(**base)
