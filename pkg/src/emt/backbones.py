"""Efficient SR backbones over a flat parameter vector.

Three fixed feed-forward graphs are registered:

``espcn``
    conv5x5(64) - tanh - conv3x3(32) - tanh - conv3x3(3 r^2) - pixel shuffle
``srcnn``
    bicubic x r - conv9x9(64) - relu - conv5x5(32) - relu - conv5x5(3)
``edsr1``
    conv3x3(64) - [conv3x3(64) - relu - conv3x3(64)] + skip - conv3x3(3 r^2) - pixel shuffle

Parameters are flattened layer by layer as ``weight (C_out, C_in, kH, kW)``
followed by that layer's bias, so coordinate ``i`` names the same scalar
for every model of a given ``(arch, scale)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import numerics as nx
from .numerics import ShapeError

IMG_CHANNELS = 3
ARCH_IDS = ("espcn", "srcnn", "edsr1")
SCALES = (2, 3, 4)
PROVENANCE = ("random", "pretrained", "meta", "adapted")


@dataclass(frozen=True)
class ConvLayer:
    name: str
    c_in: int
    c_out: int
    k: int

    @property
    def weight_size(self) -> int:
        return self.c_out * self.c_in * self.k * self.k

    @property
    def size(self) -> int:
        return self.weight_size + self.c_out


@dataclass(frozen=True)
class ArchSpec:
    arch_id: str
    scale: int
    layers: Tuple[ConvLayer, ...]
    activation: str
    upsampler: str  # "pixel_shuffle" or "bicubic_pre"

    @property
    def param_count(self) -> int:
        return sum(layer.size for layer in self.layers)

    def offsets(self) -> List[Tuple[int, int, int]]:
        """``(weight_start, bias_start, end)`` per layer in the flat vector."""
        out, pos = [], 0
        for layer in self.layers:
            out.append((pos, pos + layer.weight_size, pos + layer.size))
            pos += layer.size
        return out


@lru_cache(maxsize=None)
def get_arch(arch_id: str, scale: int) -> ArchSpec:
    if arch_id not in ARCH_IDS or scale not in SCALES:
        raise ValueError(
            f"unsupported architecture/scale pair ({arch_id!r}, {scale!r}); "
            f"arch in {ARCH_IDS}, scale in {SCALES}"
        )
    c, r2 = IMG_CHANNELS, scale * scale
    if arch_id == "espcn":
        layers = (ConvLayer("conv1", c, 64, 5), ConvLayer("conv2", 64, 32, 3),
                  ConvLayer("conv3", 32, c * r2, 3))
        return ArchSpec(arch_id, scale, layers, "tanh", "pixel_shuffle")
    if arch_id == "srcnn":
        layers = (ConvLayer("conv1", c, 64, 9), ConvLayer("conv2", 64, 32, 5),
                  ConvLayer("conv3", 32, c, 5))
        return ArchSpec(arch_id, scale, layers, "relu", "bicubic_pre")
    layers = (ConvLayer("head", c, 64, 3), ConvLayer("body1", 64, 64, 3),
              ConvLayer("body2", 64, 64, 3), ConvLayer("tail", 64, c * r2, 3))
    return ArchSpec(arch_id, scale, layers, "relu", "pixel_shuffle")


@dataclass(frozen=True)
class ModelParams:
    arch: ArchSpec
    theta: np.ndarray
    provenance: str = "random"
    chunk: int = 0  # chunk index for provenance "adapted"

    def __post_init__(self):
        if self.theta.ndim != 1 or self.theta.size != self.arch.param_count:
            raise ShapeError(
                f"theta length {self.theta.size} != parameter count {self.arch.param_count} "
                f"for {self.arch.arch_id} x{self.arch.scale}"
            )

    @property
    def P(self) -> int:
        return self.arch.param_count

    def with_theta(self, theta: np.ndarray, provenance: Optional[str] = None,
                   chunk: Optional[int] = None) -> "ModelParams":
        return ModelParams(self.arch, theta,
                           self.provenance if provenance is None else provenance,
                           self.chunk if chunk is None else chunk)

    def tagged(self, provenance: str, chunk: int = 0) -> "ModelParams":
        return ModelParams(self.arch, self.theta, provenance, chunk)


def unflatten(arch: ArchSpec, theta: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Per-layer ``(weight, bias)`` views into ``theta``."""
    out = []
    for layer, (w0, b0, end) in zip(arch.layers, arch.offsets()):
        w = theta[w0:b0].reshape(layer.c_out, layer.c_in, layer.k, layer.k)
        out.append((w, theta[b0:end]))
    return out


def flatten(arch: ArchSpec, layers) -> np.ndarray:
    parts = []
    for spec, (w, b) in zip(arch.layers, layers):
        parts.append(np.asarray(w).reshape(-1))
        parts.append(np.asarray(b).reshape(-1))
    theta = np.concatenate(parts)
    if theta.size != arch.param_count:
        raise ShapeError(f"flattened size {theta.size} != {arch.param_count}")
    return theta


def build_model(arch_id: str, scale: int, seed: int) -> ModelParams:
    """He-uniform weights (bound ``sqrt(6 / fan_in)``), zero biases."""
    arch = get_arch(arch_id, scale)
    rng = np.random.default_rng(seed)
    theta = np.zeros(arch.param_count, dtype=np.float32)
    for layer, (w0, b0, _) in zip(arch.layers, arch.offsets()):
        bound = np.sqrt(6.0 / (layer.c_in * layer.k * layer.k))
        theta[w0:b0] = rng.uniform(-bound, bound, layer.weight_size).astype(np.float32)
    return ModelParams(arch, theta, "random")


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _conv(x, wb):
    w, b = wb
    return nx.conv2d_forward(x, w, b, (w.shape[2] - 1) // 2)


def _forward_cache(model: ModelParams, lr_image) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    arch = model.arch
    x = nx.as_tensor(lr_image, "lr_image")
    if x.shape[1] != IMG_CHANNELS:
        raise ShapeError(f"lr_image has {x.shape[1]} channels, {arch.arch_id} expects {IMG_CHANNELS}")
    if model.theta.dtype == np.float64 and x.dtype != np.float64:
        x = x.astype(np.float64)
    L = unflatten(arch, model.theta)
    act = arch.activation
    cache: Dict[str, np.ndarray] = {}
    if arch.arch_id == "espcn":
        cache["in1"] = x
        cache["z1"] = z1 = _conv(x, L[0])
        cache["in2"] = a1 = nx.activation_forward(act, z1)
        cache["z2"] = z2 = _conv(a1, L[1])
        cache["in3"] = a2 = nx.activation_forward(act, z2)
        out = nx.pixel_shuffle(_conv(a2, L[2]), arch.scale)
    elif arch.arch_id == "srcnn":
        cache["in1"] = up = nx.bicubic_resize(x, arch.scale)
        cache["z1"] = z1 = _conv(up, L[0])
        cache["in2"] = a1 = nx.activation_forward(act, z1)
        cache["z2"] = z2 = _conv(a1, L[1])
        cache["in3"] = a2 = nx.activation_forward(act, z2)
        out = _conv(a2, L[2])
    else:
        cache["in1"] = x
        cache["in2"] = h = _conv(x, L[0])
        cache["z2"] = z2 = _conv(h, L[1])
        cache["in3"] = a2 = nx.activation_forward(act, z2)
        body = _conv(a2, L[2])
        cache["in4"] = s = (h.astype(np.float64) + body).astype(h.dtype, copy=False)
        out = nx.pixel_shuffle(_conv(s, L[3]), arch.scale)
    return out, cache


def forward(model: ModelParams, lr_image) -> np.ndarray:
    """Super-resolve ``lr_image`` ``(N, 3, H, W)`` to ``(N, 3, H*r, W*r)``."""
    return _forward_cache(model, lr_image)[0]


def preactivations(model: ModelParams, lr_image) -> List[np.ndarray]:
    """Inputs of every activation in the graph (for kink detection in checks)."""
    _, cache = _forward_cache(model, lr_image)
    return [cache[k] for k in ("z1", "z2") if k in cache]


def backward(model: ModelParams, lr_image, grad_sr) -> np.ndarray:
    """Gradient of ``<grad_sr, forward(model, lr_image)>`` w.r.t. ``theta``."""
    out, cache = _forward_cache(model, lr_image)
    return _backward_cached(model, out, cache, grad_sr)


def _backward_cached(model: ModelParams, out, cache, grad_sr) -> np.ndarray:
    arch = model.arch
    g = nx.as_tensor(grad_sr, "grad_sr")
    if g.shape != out.shape:
        raise ShapeError(f"grad_sr shape {g.shape} != forward output shape {out.shape}")
    if out.dtype == np.float64:
        g = g.astype(np.float64)
    L = unflatten(arch, model.theta)
    grads: List[Tuple[np.ndarray, np.ndarray]] = [None] * len(L)  # type: ignore[list-item]
    act = arch.activation

    def conv_back(inp, idx, gout):
        w = L[idx][0]
        gi, gw, gb = nx.conv2d_backward(inp, w, gout, (w.shape[2] - 1) // 2)
        grads[idx] = (gw, gb)
        return gi

    if arch.arch_id == "espcn":
        g = nx.pixel_shuffle_backward(g, arch.scale)
        g = conv_back(cache["in3"], 2, g)
        g = nx.activation_backward(act, cache["z2"], g)
        g = conv_back(cache["in2"], 1, g)
        g = nx.activation_backward(act, cache["z1"], g)
        conv_back(cache["in1"], 0, g)
    elif arch.arch_id == "srcnn":
        g = conv_back(cache["in3"], 2, g)
        g = nx.activation_backward(act, cache["z2"], g)
        g = conv_back(cache["in2"], 1, g)
        g = nx.activation_backward(act, cache["z1"], g)
        conv_back(cache["in1"], 0, g)
    else:
        g = nx.pixel_shuffle_backward(g, arch.scale)
        gs = conv_back(cache["in4"], 3, g)
        g = conv_back(cache["in3"], 2, gs)
        g = nx.activation_backward(act, cache["z2"], g)
        g = conv_back(cache["in2"], 1, g)
        gh = (gs.astype(np.float64) + g).astype(gs.dtype, copy=False)
        conv_back(cache["in1"], 0, gh)
    return flatten(arch, grads).astype(model.theta.dtype, copy=False)


def loss_and_grad(model: ModelParams, lr_batch, hr_batch) -> Tuple[float, np.ndarray]:
    """Mean L1 loss of ``forward(lr_batch)`` against ``hr_batch`` and its gradient."""
    sr, cache = _forward_cache(model, lr_batch)
    loss, g = nx.l1_loss(sr, hr_batch)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss}")
    return loss, _backward_cached(model, sr, cache, g)


def predict(model: ModelParams, lr_images, batch: int = 32) -> np.ndarray:
    """Batched :func:`forward` for large stacks of LR images."""
    lr_images = nx.as_tensor(lr_images, "lr_images")
    parts = [forward(model, lr_images[i:i + batch]) for i in range(0, lr_images.shape[0], batch)]
    return np.concatenate(parts, axis=0)
