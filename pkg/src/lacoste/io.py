"""File formats: PFM float maps, PNG images/masks, and parameter checkpoints."""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ConfigurationError, DataError

# ---------------------------------------------------------------------------
# PFM


def write_pfm(path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype="<f4")
    if data.ndim == 2:
        header = b"Pf\n"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF\n"
    else:
        raise ValueError(f"PFM holds H x W or H x W x 3 arrays, got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise DataError(f"{path}: not a PFM file")
        dims = re.match(rb"^(\d+)\s+(\d+)\s*$", fh.readline())
        if dims is None:
            raise DataError(f"{path}: malformed PFM dimensions")
        w, h = int(dims.group(1)), int(dims.group(2))
        scale = float(fh.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if kind == b"PF" else 1
        raw = np.frombuffer(fh.read(), dtype=dtype)
    if raw.size != w * h * channels:
        raise DataError(f"{path}: PFM payload size mismatch")
    shape = (h, w, 3) if channels == 3 else (h, w)
    return raw.reshape(shape)[::-1].astype(np.float32)


# ---------------------------------------------------------------------------
# PNG


def write_rgb_png(path, image: np.ndarray) -> None:
    """Write a (3, H, W) float image in [0, 1] as 8-bit RGB."""
    arr = np.clip(np.round(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def read_rgb_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def write_u16_png(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 65535:
        raise ValueError("16-bit PNG values must lie in [0, 65535]")
    Image.fromarray(labels.astype(np.uint16)).save(path)


def read_u16_png(path) -> np.ndarray:
    return np.asarray(Image.open(path)).astype(np.uint16)


def write_mask_png(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8), mode="L").save(path)


def read_mask_png(path) -> np.ndarray:
    return np.asarray(Image.open(path)) > 127


# ---------------------------------------------------------------------------
# checkpoints


def save_component(root, component: str, module: torch.nn.Module, config: dict | None = None) -> Path:
    """Write ``module``'s state as ``root/component/{manifest.json, *.bin}``."""
    out = Path(root) / component
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, tensor in module.state_dict().items():
        fname = name.replace(".", "__") + ".bin"
        arr = tensor.detach().cpu().numpy().astype("<f4")
        (out / fname).write_bytes(np.ascontiguousarray(arr).tobytes())
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "file": fname})
    manifest = {"component": component, "config": config or {}, "params": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def read_manifest(root, component: str) -> dict:
    path = Path(root) / component / "manifest.json"
    if not path.exists():
        raise ConfigurationError(f"checkpoint component {component!r} missing: {path}")
    return json.loads(path.read_text())


def load_component(root, component: str, module: torch.nn.Module) -> dict:
    """Load parameters into ``module`` in place; returns the manifest."""
    manifest = read_manifest(root, component)
    base = Path(root) / component
    state = {}
    ref = module.state_dict()
    for entry in manifest["params"]:
        raw = np.frombuffer((base / entry["file"]).read_bytes(), dtype="<f4").reshape(entry["shape"])
        target = ref.get(entry["name"])
        dtype = target.dtype if target is not None else torch.float32
        state[entry["name"]] = torch.from_numpy(raw.copy()).to(dtype)
    module.load_state_dict(state)
    return manifest


def has_component(root, component: str) -> bool:
    return (Path(root) / component / "manifest.json").exists()
