"""Gradient-weighted class activation maps and heatmap overlay rendering.

The map comes from the last convolutional feature layer: a backward pass
from the pre-sigmoid positive-class logit yields per-channel gradients,
their spatial means weight the channels, and the ReLU-clamped weighted sum
is normalized by its max (an all-zero raw map stays all-zero: no evidence,
no highlight). The backward target is the logit rather than the sigmoid
output so confident predictions do not vanish through a saturated sigmoid.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import tensor as T
from .datapipe import ImageBuffer, bilinear_resize_array
from .model import ModelGraph, forward
from .tensor import Tensor


@dataclass
class Heatmap:
    grid: np.ndarray  # [h, w] float in [0,1] at conv-feature resolution
    upsampled: np.ndarray  # [H, W] float in [0,1] at input resolution


def cam_from_features(feat: np.ndarray, dfeat: np.ndarray) -> np.ndarray:
    """Weight channels by spatially-pooled gradients, ReLU, max-normalize.

    An all-zero (or all-negative) raw map stays all-zero rather than being
    rescaled: no positive evidence means no highlight.
    """
    if feat.shape != dfeat.shape or feat.ndim != 3:
        raise ValueError(f"features and gradients must both be [K,h,w], got "
                         f"{feat.shape} and {dfeat.shape}")
    weights = dfeat.mean(axis=(1, 2))  # [K]
    raw = np.maximum((weights[:, None, None] * feat).sum(axis=0), 0.0)
    peak = raw.max()
    return raw / peak if peak > 0 else np.zeros_like(raw)


def grad_cam(model: ModelGraph, image: Tensor) -> Heatmap:
    """Class activation map for a single [C,H,W] image in eval mode."""
    if tuple(image.shape) != tuple(model.input_shape):
        raise ValueError(f"image shape {tuple(image.shape)} does not match "
                         f"model input {tuple(model.input_shape)}")
    target = model.conv_feature_layer
    if not any(spec.name == target for spec in model.layers):
        raise ValueError(f"conv feature layer {target!r} not present in model")

    batch = Tensor(image.data[None])
    with T.Tape() as tape:
        _, captured = forward(model, batch, mode="eval", capture={target})
        features = captured[target]
        logit = captured["logit"]
        score = T.reduce_sum(logit)  # single sample, single unit
    if features.data.ndim != 4:
        raise ValueError(f"feature layer {target!r} produced a "
                         f"{features.data.ndim}-D activation, expected 4-D")
    grads = T.backward(tape, score)
    dfeat = grads.wrt(features)[0]  # [K, h, w]
    feat = features.data[0]
    grid = cam_from_features(feat, dfeat)

    in_h, in_w = model.input_shape[1], model.input_shape[2]
    upsampled = bilinear_resize_array(grid.astype(np.float64), in_h, in_w)
    upsampled = np.clip(upsampled, 0.0, 1.0)
    return Heatmap(grid=grid.astype(np.float32),
                   upsampled=upsampled.astype(np.float32))


# ---------------------------------------------------------------------------
# Colormap + overlay


def colormap(values: np.ndarray) -> np.ndarray:
    """Piecewise-linear blue->green->red map over [0,1], exact at endpoints."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    rgb = np.zeros(v.shape + (3,), dtype=np.float64)
    low = v <= 0.5
    t = np.where(low, v / 0.5, (v - 0.5) / 0.5)
    rgb[..., 0] = np.where(low, 0.0, t * 255.0)
    rgb[..., 1] = np.where(low, t * 255.0, (1.0 - t) * 255.0)
    rgb[..., 2] = np.where(low, (1.0 - t) * 255.0, 0.0)
    return rgb


def render_overlay(image: ImageBuffer, heatmap: Heatmap,
                   blend: float = 0.4) -> ImageBuffer:
    """Blend the colormapped heatmap onto the (gray->RGB) input image."""
    if not 0.0 <= blend <= 1.0:
        raise ValueError(f"blend must be in [0, 1], got {blend}")
    h_map = heatmap.upsampled
    if h_map.shape != (image.height, image.width):
        raise ValueError(f"heatmap {h_map.shape} does not match image "
                         f"{(image.height, image.width)}")
    px = image.pixels
    if image.channels == 1:
        px = np.repeat(px, 3, axis=2)
    base = px.astype(np.float64)
    colored = colormap(h_map)
    out = (1.0 - blend) * base + blend * colored
    return ImageBuffer(np.clip(np.rint(out), 0, 255).astype(np.uint8))


# ---------------------------------------------------------------------------
# Serialization


def overlay_to_png(overlay: ImageBuffer) -> bytes:
    img = Image.fromarray(overlay.pixels, mode="RGB")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def heatmap_to_csv(heatmap: Heatmap) -> str:
    lines = []
    for row in heatmap.grid:
        lines.append(",".join(f"{v:.6f}" for v in row))
    return "\n".join(lines) + "\n"
