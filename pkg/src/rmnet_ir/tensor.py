"""Reference forward kernels for every layer kind.

All tensors are numpy arrays in N x C x H x W layout. Kernels compute in the
dtype of the activation they receive (float32 by default, float64 in
verification mode) and never mutate their arguments.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when tensor or parameter shapes are inconsistent."""


def tensor4(data, dtype=np.float32) -> np.ndarray:
    """Validate and return `data` as a rank-4 N x C x H x W array."""
    arr = np.asarray(data, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected rank-4 tensor, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeError(f"all dimensions must be >= 1, got {arr.shape}")
    return arr


def _param(v) -> np.ndarray:
    # Builders store float32; passes may keep float64 so verification mode sees exact algebra.
    arr = np.asarray(v)
    return np.ascontiguousarray(arr if arr.dtype == np.float64 else arr.astype(np.float32))


def _vec(v) -> np.ndarray:
    return _param(v).reshape(-1)


@dataclass(frozen=True, eq=False)
class ConvParams:
    weight: np.ndarray  # (out_ch, in_ch // groups, k, k)
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        w = _param(self.weight)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ShapeError(f"conv weight must be (o, i/g, k, k), got {w.shape}")
        if w.shape[2] % 2 != 1:
            raise ShapeError(f"kernel size must be odd, got {w.shape[2]}")
        if self.groups < 1 or w.shape[0] % self.groups:
            raise ShapeError(f"out_ch {w.shape[0]} not divisible by groups {self.groups}")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError("stride must be >= 1 and padding >= 0")
        object.__setattr__(self, "weight", w)
        if self.bias is not None:
            b = _vec(self.bias)
            if b.shape[0] != w.shape[0]:
                raise ShapeError(f"bias length {b.shape[0]} != out_ch {w.shape[0]}")
            object.__setattr__(self, "bias", b)

    @property
    def out_ch(self) -> int:
        return self.weight.shape[0]

    @property
    def in_ch(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    def bias_or_zeros(self) -> np.ndarray:
        return self.bias if self.bias is not None else np.zeros(self.out_ch, np.float32)


@dataclass(frozen=True, eq=False)
class BNParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        vals = [_vec(getattr(self, f)) for f in ("gamma", "beta", "running_mean", "running_var")]
        if len({v.shape[0] for v in vals}) != 1:
            raise ShapeError("BN vectors must share one length")
        if np.any(vals[3] < 0):
            raise ValueError("running_var must be non-negative")
        if not self.eps >= 0:
            raise ValueError("eps must be non-negative")
        for f, v in zip(("gamma", "beta", "running_mean", "running_var"), vals):
            object.__setattr__(self, f, v)
        object.__setattr__(self, "eps", float(self.eps))

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def affine(self, dtype=np.float64):
        """Per-channel (scale, shift) such that bn(x) == scale * x + shift."""
        scale = self.gamma.astype(dtype) / np.sqrt(self.running_var.astype(dtype) + dtype(self.eps))
        shift = self.beta.astype(dtype) - scale * self.running_mean.astype(dtype)
        return scale, shift


RELU = "ReLU"
PRELU = "PReLU"


@dataclass(frozen=True, eq=False)
class ActParams:
    kind: str = RELU
    slopes: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in (RELU, PRELU):
            raise ValueError(f"unknown activation kind {self.kind!r}")
        if self.kind == PRELU:
            if self.slopes is None:
                raise ValueError("PReLU needs per-channel slopes")
            object.__setattr__(self, "slopes", _vec(self.slopes))
        elif self.slopes is not None:
            raise ValueError("ReLU takes no slopes")


@dataclass(frozen=True, eq=False)
class DenseParams:
    weight: np.ndarray  # (out_features, in_features)
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        w = _param(self.weight)
        if w.ndim != 2:
            raise ShapeError(f"dense weight must be 2-D, got {w.shape}")
        object.__setattr__(self, "weight", w)
        if self.bias is not None:
            b = _vec(self.bias)
            if b.shape[0] != w.shape[0]:
                raise ShapeError("dense bias length mismatch")
            object.__setattr__(self, "bias", b)


def conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _sequential_matmul(w: np.ndarray, cols: np.ndarray) -> np.ndarray:
    # w: (g, o, K), cols: (n, g, K, L). Terms are summed strictly in K order, so
    # removing a term that is exactly zero leaves every output bit unchanged.
    out = np.zeros((cols.shape[0], w.shape[0], w.shape[1], cols.shape[3]), dtype=cols.dtype)
    for k in range(w.shape[2]):
        out += w[None, :, :, k, None] * cols[:, :, None, k, :]
    return out


def conv2d(x: np.ndarray, p: ConvParams, sequential: bool = False) -> np.ndarray:
    """Grouped 2-D cross-correlation with zero padding.

    ``sequential`` trades BLAS speed for a fixed left-to-right accumulation
    order over (input channel, ky, kx).
    """
    n, c, h, w = x.shape
    if c != p.in_ch:
        raise ShapeError(f"conv expects {p.in_ch} input channels, got {c}")
    k, s, pad, g = p.k, p.stride, p.padding, p.groups
    oh, ow = conv_out_size(h, k, s, pad), conv_out_size(w, k, s, pad)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv output would be empty for input {h}x{w}")
    dt = x.dtype
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    if k == 1:
        win = x[:, :, : (oh - 1) * s + 1 : s, : (ow - 1) * s + 1 : s]
        cols = win.reshape(n, g, c // g, oh * ow)
    else:
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :oh, :ow]
        # (n, c, oh, ow, k, k) -> (n, g, cg*k*k, oh*ow)
        cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, g, (c // g) * k * k, oh * ow)
    wm = p.weight.astype(dt, copy=False).reshape(g, p.out_ch // g, -1)
    prod = _sequential_matmul(wm, cols) if sequential else np.matmul(wm[None], cols)
    out = prod.reshape(n, p.out_ch, oh, ow)
    if p.bias is not None:
        out = out + p.bias.astype(dt, copy=False)[None, :, None, None]
    return out


def batchnorm_infer(x: np.ndarray, p: BNParams) -> np.ndarray:
    if x.shape[1] != p.channels:
        raise ShapeError(f"BN has {p.channels} channels, input has {x.shape[1]}")
    dt = x.dtype
    scale = p.gamma.astype(dt) / np.sqrt(p.running_var.astype(dt) + dt.type(p.eps))
    return (x - p.running_mean.astype(dt)[None, :, None, None]) * scale[None, :, None, None] + p.beta.astype(
        dt
    )[None, :, None, None]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, x.dtype.type(0))


def prelu(x: np.ndarray, slopes) -> np.ndarray:
    slopes = np.asarray(slopes)
    if slopes.shape != (x.shape[1],):
        raise ShapeError(f"PReLU slopes length {slopes.shape} != channels {x.shape[1]}")
    return np.where(x >= 0, x, x * slopes.astype(x.dtype)[None, :, None, None])


def activation(x: np.ndarray, p: ActParams) -> np.ndarray:
    return relu(x) if p.kind == RELU else prelu(x, p.slopes)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch {a.shape} vs {b.shape}")
    return a + b


def concat_channels(*xs: np.ndarray) -> np.ndarray:
    if len(xs) < 2:
        raise ShapeError("concat needs at least two inputs")
    ref = xs[0].shape
    for t in xs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"concat shape mismatch {ref} vs {t.shape}")
    return np.concatenate(xs, axis=1)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3), keepdims=True)


def dense(x: np.ndarray, p: DenseParams, sequential: bool = False) -> np.ndarray:
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != p.weight.shape[1]:
        raise ShapeError(f"dense expects {p.weight.shape[1]} features, got {flat.shape[1]}")
    dt = x.dtype
    w = p.weight.astype(dt)
    if sequential:
        out = _sequential_matmul(w[None], flat.T[None, None])[0, 0].T
    else:
        out = flat @ w.T
    if p.bias is not None:
        out = out + p.bias.astype(dt)
    return out.reshape(out.shape[0], out.shape[1], 1, 1)
