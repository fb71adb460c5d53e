"""Grad-CAM heatmaps at a pooling layer's input, and binary PGM I/O."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, FormatError
from .nn import Module
from .tensor import Tensor


def heatmap_layers(net: Module) -> dict[str, Module]:
    """Valid layer ids: pooling sites for backbones, every named submodule otherwise."""
    if hasattr(net, "pool_sites"):
        return dict(net.pool_sites())
    return {name: m for name, m in net.named_modules() if name}


def gradcam_heatmap(net: Module, image: np.ndarray, class_id: int, layer_id: str) -> np.ndarray:
    """[H, W] map in [0, 1] for ``class_id`` at the input of layer ``layer_id``.

    Channel weights are the spatial mean of d(logit)/d(activation); the map is
    ReLU(sum_c w_c * A_c), bilinearly resized to the image size and min-max
    normalised.  A constant map normalises to all zeros.
    """
    layers = heatmap_layers(net)
    if layer_id not in layers:
        raise ConfigError(f"unknown layer id {layer_id!r}; valid ids: {', '.join(layers)}")
    target = layers[layer_id]
    img = np.asarray(image, dtype=T.default_dtype())
    if img.ndim == 3:
        img = img[None]
    captured: list[Tensor] = []

    def grab(mod, args, out):
        if mod is target and not captured:
            captured.append(args[0])

    was = net.training
    net.eval()
    remove = nn.add_module_hook(grab)
    try:
        x = Tensor(img, requires_grad=True)
        logits = net(x)
        if not 0 <= class_id < logits.shape[-1]:
            raise ConfigError(f"class id {class_id} outside [0, {logits.shape[-1]})")
        act = captured[0]
        act.retain_grad()
        score = T.getitem(logits, (0, class_id))
        score.backward()
        grad = act.grad if act.grad is not None else np.zeros(act.shape)
    finally:
        remove()
        net.train(was)
    a = act.data[0].astype(np.float64)
    weights = grad[0].astype(np.float64).mean(axis=(1, 2))
    cam = np.maximum(np.einsum("c,chw->hw", weights, a), 0.0)
    H, W = img.shape[2:]
    if cam.shape != (H, W):
        cam = T.bilinear_matrix(cam.shape[0], H) @ cam @ T.bilinear_matrix(cam.shape[1], W).T
    return normalize_minmax(cam)


def normalize_minmax(m: np.ndarray) -> np.ndarray:
    lo, hi = float(m.min()), float(m.max())
    if hi - lo <= 0:
        return np.zeros_like(m, dtype=np.float64)
    return (m - lo) / (hi - lo)


def to_gray8(heat: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(heat, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_pgm(gray: np.ndarray) -> bytes:
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise FormatError(f"PGM needs a 2-D uint8 image, got {gray.dtype} {gray.shape}")
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + gray.tobytes()


def write_pgm(path, heat: np.ndarray) -> None:
    """Write a [0,1] float map (or uint8 image) as binary PGM, maxval 255."""
    gray = heat if np.asarray(heat).dtype == np.uint8 else to_gray8(heat)
    Path(path).write_bytes(encode_pgm(gray))


def decode_pgm(raw: bytes) -> np.ndarray:
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header", offset=pos)
        fields.append(raw[start:pos])
    if fields[0] != b"P5":
        raise FormatError(f"not a binary PGM (magic {fields[0]!r})", offset=0)
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise FormatError(f"bad PGM header field: {exc}", offset=pos) from None
    if maxval != 255:
        raise FormatError(f"unsupported PGM maxval {maxval}", offset=pos)
    pos += 1  # single whitespace byte after maxval
    if len(raw) < pos + w * h:
        raise FormatError(f"truncated PGM raster ({len(raw) - pos} of {w * h} bytes)", offset=len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).copy()


def read_pgm(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())
