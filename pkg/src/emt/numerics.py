"""Deterministic numerical kernel for the SR backbones.

Tensors are plain ``numpy`` arrays shaped ``(N, C, H, W)``.  Storage is
float32; every reduction (convolution sums, resampling, loss, PSNR) is
accumulated in float64 and cast back to the input dtype.  Passing float64
inputs keeps the whole computation in float64, which is what the
finite-difference checks in the test-suite rely on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Tuple, Union

import numpy as np

__all__ = [
    "ShapeError",
    "AdamState",
    "as_tensor",
    "conv2d_forward",
    "conv2d_backward",
    "activation_forward",
    "activation_backward",
    "pixel_shuffle",
    "pixel_shuffle_backward",
    "bicubic_resize",
    "bicubic_weights",
    "cubic_kernel",
    "l1_loss",
    "adam_step",
    "psnr",
    "PSNR_CAP_DB",
]

PSNR_CAP_DB = 100.0

Scale = Union[int, float, Fraction]


class ShapeError(ValueError):
    """Raised when tensor shapes do not agree."""


def _store_dtype(*arrays: np.ndarray) -> np.dtype:
    dt = np.result_type(*arrays)
    return np.dtype(np.float64) if dt == np.float64 else np.dtype(np.float32)


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Validate a 4-D ``(N, C, H, W)`` array; floats other than f64 become f32."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (N, C, H, W), got shape {x.shape}")
    if x.dtype != np.float64 and x.dtype != np.float32:
        x = x.astype(np.float32)
    return x


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _check_conv(x: np.ndarray, weight: np.ndarray, bias) -> None:
    if weight.ndim != 4:
        raise ShapeError(f"weights must be (C_out, C_in, kH, kW), got shape {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"input channels {x.shape[1]} != kernel C_in {weight.shape[1]} "
            f"(input {x.shape}, weights {weight.shape})"
        )
    if bias is not None and np.shape(bias) != (weight.shape[0],):
        raise ShapeError(f"bias shape {np.shape(bias)} != (C_out={weight.shape[0]},)")


def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Patch matrix ``(C*kH*kW, N*Ho*Wo)`` of an already padded float64 input."""
    n, c, hp, wp = xp.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + ho, j:j + wo]
    return cols.reshape(c * kh * kw, n * ho * wo)


def conv2d_forward(x, weight, bias, padding: int) -> np.ndarray:
    """Zero-padded 2-D cross-correlation, stride 1.

    Parameters
    ----------
    x : array, shape (N, C_in, H, W)
    weight : array, shape (C_out, C_in, kH, kW)
    bias : array, shape (C_out,)
    padding : int
        Zero padding on each spatial side.  ``(k - 1) // 2`` preserves size
        for odd kernels.

    Returns
    -------
    out : array, shape (N, C_out, H + 2p - kH + 1, W + 2p - kW + 1)
    """
    x = as_tensor(x, "input")
    weight = np.asarray(weight)
    _check_conv(x, weight, bias)
    co, _, kh, kw = weight.shape
    n, _, h, w = x.shape
    p = padding
    ho, wo = h + 2 * p - kh + 1, w + 2 * p - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {x.shape[2:]}")
    out_dtype = _store_dtype(x, weight)
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (p, p), (p, p)))
    out = weight.reshape(co, -1).astype(np.float64) @ _im2col(xp, kh, kw)
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)[:, None]
    out = out.reshape(co, n, ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out, dtype=out_dtype)


def conv2d_backward(x, weight, grad_output, padding: int):
    """Gradients of :func:`conv2d_forward`.

    Returns ``(grad_input, grad_weights, grad_bias)``.
    """
    x = as_tensor(x, "input")
    weight = np.asarray(weight)
    g = as_tensor(grad_output, "grad_output")
    _check_conv(x, weight, None)
    co, ci, kh, kw = weight.shape
    n, _, h, w = x.shape
    p = padding
    expected = (n, co, h + 2 * p - kh + 1, w + 2 * p - kw + 1)
    if g.shape != expected:
        raise ShapeError(f"grad_output shape {g.shape} != forward output shape {expected}")
    out_dtype = _store_dtype(x, weight, g)
    g64 = g.astype(np.float64)
    gmat = g64.transpose(1, 0, 2, 3).reshape(co, -1)

    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (p, p), (p, p)))
    grad_w = (gmat @ _im2col(xp, kh, kw).T).reshape(weight.shape)
    grad_b = gmat.sum(axis=1)

    # full correlation of grad_output with the flipped, transposed kernel
    gp = np.pad(g64, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    wflip = weight.astype(np.float64)[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(ci, -1)
    hp, wp = h + 2 * p, w + 2 * p
    gxp = (wflip @ _im2col(gp, kh, kw)).reshape(ci, n, hp, wp).transpose(1, 0, 2, 3)
    grad_x = gxp[:, :, p:p + h, p:p + w]
    return (
        np.ascontiguousarray(grad_x, dtype=out_dtype),
        grad_w.astype(out_dtype, copy=False),
        grad_b.astype(out_dtype, copy=False),
    )


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def activation_forward(kind: str, x) -> np.ndarray:
    x = np.asarray(x)
    dt = _store_dtype(x)
    if kind == "relu":
        return np.maximum(x, 0).astype(dt, copy=False)
    if kind == "tanh":
        return np.tanh(x.astype(np.float64)).astype(dt, copy=False)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(kind: str, x, grad) -> np.ndarray:
    """Multiply ``grad`` by the activation derivative at the forward input ``x``."""
    x = np.asarray(x)
    grad = np.asarray(grad)
    if x.shape != grad.shape:
        raise ShapeError(f"grad shape {grad.shape} != input shape {x.shape}")
    dt = _store_dtype(x, grad)
    if kind == "relu":
        return np.where(x > 0, grad, 0).astype(dt, copy=False)
    if kind == "tanh":
        t = np.tanh(x.astype(np.float64))
        return (grad.astype(np.float64) * (1.0 - t * t)).astype(dt, copy=False)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# pixel shuffle
# ---------------------------------------------------------------------------

def pixel_shuffle(x, r: int) -> np.ndarray:
    """Depth-to-space: ``out[n, c, y*r+i, x*r+j] = in[n, c*r*r + i*r + j, y, x]``."""
    x = as_tensor(x, "input")
    n, c, h, w = x.shape
    if r < 1 or c % (r * r):
        raise ShapeError(f"channels {c} not divisible by r^2 = {r * r}")
    co = c // (r * r)
    return np.ascontiguousarray(
        x.reshape(n, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, co, h * r, w * r)
    )


def pixel_shuffle_backward(grad, r: int) -> np.ndarray:
    """Inverse permutation of :func:`pixel_shuffle` (space-to-depth)."""
    grad = as_tensor(grad, "grad")
    n, c, hr, wr = grad.shape
    if hr % r or wr % r:
        raise ShapeError(f"spatial size {hr}x{wr} not divisible by r = {r}")
    h, w = hr // r, wr // r
    return np.ascontiguousarray(
        grad.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)
    )


# ---------------------------------------------------------------------------
# bicubic resampling
# ---------------------------------------------------------------------------

def cubic_kernel(t, a: float = -0.5):
    """Keys cubic convolution kernel; ``a = -0.5`` is Catmull-Rom."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def _as_fraction(scale: Scale) -> Fraction:
    if isinstance(scale, Fraction):
        return scale
    if isinstance(scale, int):
        return Fraction(scale)
    return Fraction(scale).limit_denominator(1000)


def bicubic_weights(n_in: int, scale: Scale) -> np.ndarray:
    """Dense ``(n_out, n_in)`` resampling matrix for one axis.

    Pixel-centre alignment (``src = (dst + 0.5) / scale - 0.5``), four taps,
    out-of-range taps clamped to the edge.
    """
    s = _as_fraction(scale)
    if s <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    n_out = math.floor(n_in * s)
    if n_out < 1:
        raise ShapeError(f"resize of size {n_in} by {scale} gives an empty output")
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        src = float((Fraction(2 * i + 1, 2)) / s - Fraction(1, 2))
        x0 = math.floor(src)
        t = src - x0
        taps = cubic_kernel(np.array([1 + t, t, 1 - t, 2 - t]))
        for k, wgt in zip(range(x0 - 1, x0 + 3), taps):
            mat[i, min(max(k, 0), n_in - 1)] += wgt
    return mat


def bicubic_resize(x, scale: Scale) -> np.ndarray:
    """Resize ``(N, C, H, W)`` by ``scale`` to ``(floor(H*scale), floor(W*scale))``."""
    x = as_tensor(x, "input")
    dt = _store_dtype(x)
    wy = bicubic_weights(x.shape[2], scale)
    wx = bicubic_weights(x.shape[3], scale)
    out = np.einsum("yh,nchw,xw->ncyx", wy, x.astype(np.float64), wx, optimize=True)
    return np.ascontiguousarray(out).astype(dt, copy=False)


# ---------------------------------------------------------------------------
# loss, optimizer, metric
# ---------------------------------------------------------------------------

def l1_loss(pred, target) -> Tuple[float, np.ndarray]:
    """Mean absolute error and its (sub)gradient, ``sign(0) = 0``."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} != target shape {target.shape}")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    loss = float(np.mean(np.abs(diff)))
    grad = (np.sign(diff) / diff.size).astype(_store_dtype(pred), copy=False)
    return loss, grad


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, size: int, lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        z = np.zeros(size, dtype=np.float64)
        return cls(z, z.copy(), 0, lr, beta1, beta2, eps)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam step; returns ``(new_params, new_state)``."""
    params = np.asarray(params)
    grads = np.asarray(grads)
    if not (params.shape == grads.shape == state.m.shape == state.v.shape):
        raise ShapeError(
            f"length mismatch: params {params.shape}, grads {grads.shape}, "
            f"state {state.m.shape}"
        )
    g = grads.astype(np.float64)
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * g
    v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    step = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new = (params.astype(np.float64) - step).astype(params.dtype, copy=False)
    return new, replace(state, m=m, v=v, t=t)


def psnr(a, b, max_value: float = 1.0) -> float:
    """PSNR in dB; :data:`PSNR_CAP_DB` when the inputs are identical."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if max_value <= 0:
        raise ValueError("max_value must be positive")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(max_value * max_value / mse))
