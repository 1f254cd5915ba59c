"""Layer primitives: convolution, pooling, dense, activations, dropout, batchnorm.

All layers are pure functions over tensors, built on the tensor module's
recording machinery so every forward is differentiable. Convolution uses
the cross-correlation convention (no kernel flip) with zero padding;
max-pool breaks ties toward the first element in row-major window order so
gradients are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import Tensor, record_op

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

LAYER_KINDS = (
    "conv2d", "maxpool2d", "global_avg_pool", "dense", "relu", "sigmoid",
    "dropout", "batchnorm", "residual_block", "flatten",
)


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer; parameters live in the model."""

    kind: str
    name: str
    hyper: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        _validate_hyper(self.kind, self.hyper)

    def to_json(self) -> dict:
        return {"kind": self.kind, "name": self.name, "hyper": dict(self.hyper)}

    @staticmethod
    def from_json(obj: dict) -> "LayerSpec":
        return LayerSpec(kind=obj["kind"], name=obj["name"],
                         hyper=dict(obj.get("hyper", {})))


def _validate_hyper(kind: str, hyper: dict) -> None:
    def positive(key):
        if hyper.get(key, 1) < 1:
            raise ValueError(f"{kind}: {key} must be >= 1, got {hyper.get(key)}")

    if kind == "conv2d":
        for key in ("in_channels", "out_channels", "kernel", "stride"):
            positive(key)
        if hyper.get("padding", 0) < 0:
            raise ValueError("conv2d: padding must be >= 0")
    elif kind == "maxpool2d":
        positive("window")
        positive("stride")
    elif kind == "dense":
        positive("in_features")
        positive("units")
    elif kind == "dropout":
        p = hyper.get("p", 0.5)
        if not 0 <= p < 1:
            raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    elif kind == "batchnorm":
        positive("channels")
    elif kind == "residual_block":
        for key in ("in_channels", "out_channels", "stride"):
            positive(key)


# ---------------------------------------------------------------------------
# Convolution


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Extract sliding windows: returns (cols [N*Ho*Wo, C*kh*kw], Ho, Wo, padded shape)."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ValueError(
            f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # [N, C, Ho, Wo, kh, kw]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo, (n, c, hp, wp)


def _col2im(dcols: np.ndarray, padded_shape, kh, kw, stride, padding, ho, wo):
    """Scatter-add column gradients back onto the (unpadded) input."""
    n, c, hp, wp = padded_shape
    dx = np.zeros(padded_shape, dtype=dcols.dtype)
    d = dcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d[:, :, i, j]
    if padding:
        dx = dx[:, :, padding:hp - padding, padding:wp - padding]
    return dx


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate [N,C,H,W] with [F,C,kh,kw] kernels plus a length-F bias."""
    if x.data.ndim != 4:
        raise ValueError(f"conv2d input must be 4-D, got {x.shape}")
    if kernel.data.ndim != 4:
        raise ValueError(f"conv2d kernel must be 4-D, got {kernel.shape}")
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if ck != c:
        raise ValueError(f"conv2d channel mismatch: input {c}, kernel {ck}")
    if bias.shape != (f,):
        raise ValueError(f"conv2d bias must have shape ({f},), got {bias.shape}")

    cols, ho, wo, padded_shape = _im2col(x.data, kh, kw, stride, padding)
    wmat = kernel.data.reshape(f, c * kh * kw)
    out = cols @ wmat.T + bias.data
    out_data = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    out_data = np.ascontiguousarray(out_data)

    def backward_fn(g):
        gcols = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        dbias = gcols.sum(axis=0)
        dkernel = (gcols.T @ cols).reshape(kernel.shape)
        dcols = gcols @ wmat
        dx = _col2im(dcols, padded_shape, kh, kw, stride, padding, ho, wo)
        return dx, dkernel, dbias

    return record_op(out_data, (x, kernel, bias), backward_fn)


# ---------------------------------------------------------------------------
# Pooling


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Per-window max; gradient routes to the first max in row-major order."""
    if x.data.ndim != 4:
        raise ValueError(f"maxpool2d input must be 4-D, got {x.shape}")
    n, c, h, w = x.shape
    if h < window or w < window:
        raise ValueError(f"input {h}x{w} smaller than pooling window {window}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    views = np.lib.stride_tricks.sliding_window_view(x.data, (window, window),
                                                     axis=(2, 3))
    views = views[:, :, ::stride, ::stride]  # [N,C,Ho,Wo,win,win]
    flat = views.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)  # first max in row-major window order
    out_data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out_data = np.ascontiguousarray(out_data)

    def backward_fn(g):
        dx = np.zeros_like(x.data)
        oy, ox = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
        rows = oy * stride + arg // window  # [N,C,Ho,Wo]
        colz = ox * stride + arg % window
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(dx, (np.broadcast_to(ni, arg.shape),
                       np.broadcast_to(ci, arg.shape), rows, colz), g)
        return (dx,)

    return record_op(out_data, (x,), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Collapse [N,C,H,W] to [N,C] by per-channel spatial mean."""
    if x.data.ndim != 4:
        raise ValueError(f"global_avg_pool input must be 4-D, got {x.shape}")
    n, c, h, w = x.shape
    out_data = x.data.mean(axis=(2, 3))
    scale = 1.0 / (h * w)

    def backward_fn(g):
        return (np.broadcast_to((g * scale)[:, :, None, None], x.shape).astype(g.dtype),)

    return record_op(out_data, (x,), backward_fn)


# ---------------------------------------------------------------------------
# Dense and activations


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-row affine map: x[N,d] @ weight[d,u] + bias[u]."""
    if x.data.ndim != 2:
        raise ValueError(f"dense input must be 2-D, got {x.shape}")
    d, u = weight.shape
    if x.shape[1] != d:
        raise ValueError(f"dense: input width {x.shape[1]} != weight rows {d}")
    if bias.shape != (u,):
        raise ValueError(f"dense: bias must have shape ({u},), got {bias.shape}")
    xd, wd = x.data, weight.data
    out_data = xd @ wd + bias.data

    def backward_fn(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return record_op(out_data, (x, weight, bias), backward_fn)


def relu(x: Tensor) -> Tensor:
    mask = (x.data > 0).astype(x.data.dtype)
    return record_op(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic; output stays strictly inside (0, 1)."""
    xd = x.data
    out_data = np.empty_like(xd)
    pos = xd >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def backward_fn(g):
        return (g * out_data * (1.0 - out_data),)

    return record_op(out_data, (x,), backward_fn)


# ---------------------------------------------------------------------------
# Dropout


def dropout(x: Tensor, p: float, mode: str,
            rng: Optional[np.random.Generator] = None,
            mask: Optional[np.ndarray] = None) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Eval mode is the identity. A precomputed mask may be passed for
    deterministic gradient checks.
    """
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ValueError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or p == 0.0:
        return x
    if mask is None:
        if rng is None:
            raise ValueError("train-mode dropout needs an rng or explicit mask")
        mask = (rng.random(x.shape) >= p)
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.data.dtype)
    keep = mask.astype(x.data.dtype) * scale
    return record_op(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# Batch normalization


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor,
              running_mean: np.ndarray, running_var: np.ndarray,
              mode: str, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
    """Per-channel normalization of [N,C,H,W].

    Train mode normalizes by batch statistics and returns updated running
    stats (the caller owns buffer storage); eval mode uses the running
    stats unchanged. Returns (output, new_running_mean, new_running_var).
    """
    if x.data.ndim != 4:
        raise ValueError(f"batchnorm input must be 4-D, got {x.shape}")
    n, c, h, w = x.shape
    if mode == "train" and n < 2:
        raise ValueError("batchnorm train mode needs batch size >= 2")
    xd = x.data
    gd, bd = gamma.data, beta.data

    if mode == "train":
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        new_mean = momentum * running_mean + (1 - momentum) * mean
        new_var = momentum * running_var + (1 - momentum) * var
    elif mode == "eval":
        mean, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    else:
        raise ValueError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out_data = gd[None, :, None, None] * xhat + bd[None, :, None, None]
    m = n * h * w

    def backward_fn(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gd[None, :, None, None]
        if mode == "eval":
            dx = dxhat * inv_std[None, :, None, None]
            return dx, dgamma, dbeta
        sum_dxhat = dxhat.sum(axis=(0, 2, 3))
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3))
        dx = (inv_std[None, :, None, None] / m) * (
            m * dxhat
            - sum_dxhat[None, :, None, None]
            - xhat * sum_dxhat_xhat[None, :, None, None])
        return dx.astype(g.dtype), dgamma, dbeta

    out = record_op(out_data.astype(xd.dtype), (x, gamma, beta), backward_fn)
    return out, new_mean.astype(xd.dtype), new_var.astype(xd.dtype)


# ---------------------------------------------------------------------------
# Residual block


def residual_block(x: Tensor, params: dict, name: str, stride: int = 1,
                   use_bn: bool = False, mode: str = "eval"):
    """relu(F(x) + skip(x)) with F = conv -> (bn) -> relu -> conv -> (bn).

    ``params`` maps ``{name}.conv1.weight`` etc. to tensors; the skip path
    gets a 1x1 projection conv (``{name}.proj``) when channel counts differ
    or stride > 1. Returns (output, buffer_updates) where buffer_updates
    carries new batchnorm running stats for the caller to store.
    """
    updates: dict = {}

    def bn(sub: str, t: Tensor) -> Tensor:
        key = f"{name}.{sub}"
        out, new_mean, new_var = batchnorm(
            t, params[f"{key}.gamma"], params[f"{key}.beta"],
            params[f"{key}.running_mean"].data,
            params[f"{key}.running_var"].data, mode)
        if mode == "train":
            updates[f"{key}.running_mean"] = new_mean
            updates[f"{key}.running_var"] = new_var
        return out

    y = conv2d(x, params[f"{name}.conv1.weight"], params[f"{name}.conv1.bias"],
               stride=stride, padding=1)
    if use_bn:
        y = bn("bn1", y)
    y = relu(y)
    y = conv2d(y, params[f"{name}.conv2.weight"], params[f"{name}.conv2.bias"],
               stride=1, padding=1)
    if use_bn:
        y = bn("bn2", y)

    if f"{name}.proj.weight" in params:
        skip = conv2d(x, params[f"{name}.proj.weight"],
                      params[f"{name}.proj.bias"], stride=stride, padding=0)
        if use_bn:
            skip = bn("proj_bn", skip)
    else:
        skip = x
    if y.shape != skip.shape:
        raise ValueError(f"residual block {name}: branch shape {y.shape} "
                         f"incompatible with skip {skip.shape}")
    from .tensor import add as tensor_add
    return relu(tensor_add(y, skip)), updates


# ---------------------------------------------------------------------------
# Weight initialization (Kaiming-uniform fan-in for ReLU layers,
# Xavier-uniform for the sigmoid output layer, zero biases)


def kaiming_uniform(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def xavier_uniform(shape, fan_in: int, fan_out: int,
                   rng: np.random.Generator) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)
