"""Challenging patch sampling on I-frames.

For every I-frame of a chunk the previous chunk's model super-resolves the
LR I-frame, a PSNR map is computed over a non-overlapping grid of
``patch``-sized cells, and the lowest-PSNR ``r%`` cells are kept.  Those
cell positions are reused unchanged for every frame up to the next I-frame
(clipped to the chunk), and aligned LR/HR patches are cut at them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import backbones as bb
from .numerics import PSNR_CAP_DB, ShapeError, psnr
from .video import ChunkManifest, FrameStore

Cell = Tuple[int, int]


def fraction_count(percent: float, total: int) -> int:
    """``max(1, round(percent/100 * total))`` with halves rounded up."""
    exact = Fraction(percent).limit_denominator(10 ** 6) * total / 100
    return max(1, math.floor(exact + Fraction(1, 2)))


@dataclass(frozen=True)
class PairSet:
    """Aligned training patches: ``lr`` ``(K, 3, p/s, p/s)``, ``hr`` ``(K, 3, p, p)``."""

    lr: np.ndarray
    hr: np.ndarray

    def __post_init__(self):
        if self.lr.shape[0] != self.hr.shape[0]:
            raise ShapeError(f"{self.lr.shape[0]} LR patches vs {self.hr.shape[0]} HR patches")

    def __len__(self) -> int:
        return int(self.hr.shape[0])

    def subset(self, idx) -> "PairSet":
        return PairSet(self.lr[idx], self.hr[idx])

    @staticmethod
    def concat(sets: Sequence["PairSet"]) -> "PairSet":
        return PairSet(np.concatenate([s.lr for s in sets]), np.concatenate([s.hr for s in sets]))


@dataclass(frozen=True)
class SamplerConfig:
    r: float = 20.0
    patch_size: int = 144
    psnr_cap: float = PSNR_CAP_DB

    def __post_init__(self):
        if not 0 < self.r <= 100:
            raise ValueError(f"r must be in (0, 100], got {self.r}")


@dataclass(frozen=True)
class PsnrMap:
    frame_id: int
    patch_size: int
    values: np.ndarray  # (rows, cols) dB

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class PatchPositions:
    iframe_id: int
    cells: Tuple[Cell, ...]
    r: float
    patch_size: int


def sr_iframe(prev_model: bb.ModelParams, iframe_lr: np.ndarray) -> np.ndarray:
    return bb.forward(prev_model, iframe_lr)


def psnr_map(sr: np.ndarray, hr: np.ndarray, patch_size: int, frame_id: int = 0,
             cap: float = PSNR_CAP_DB) -> PsnrMap:
    """Per-cell PSNR on the origin-anchored grid; partial border cells are dropped."""
    sr = np.asarray(sr)
    hr = np.asarray(hr)
    if sr.shape != hr.shape:
        raise ShapeError(f"SR shape {sr.shape} != HR shape {hr.shape}")
    h, w = hr.shape[-2:]
    if patch_size > min(h, w) or patch_size < 1:
        raise ShapeError(f"patch size {patch_size} does not fit a {h}x{w} frame")
    rows, cols = h // patch_size, w // patch_size
    p = patch_size
    d = (sr.astype(np.float64) - hr.astype(np.float64))[..., :rows * p, :cols * p] ** 2
    lead = d.shape[:-2]
    d = d.reshape(*lead, rows, p, cols, p)
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead) + 3)
    mse = d.mean(axis=axes)
    with np.errstate(divide="ignore"):
        vals = np.where(mse > 0, 10.0 * np.log10(1.0 / np.where(mse > 0, mse, 1.0)), cap)
    return PsnrMap(frame_id, patch_size, np.minimum(vals, cap))


def select_positions(pmap: PsnrMap, r: float) -> PatchPositions:
    """Lowest-PSNR ``r%`` cells; ties go to the smaller ``(row, col)``."""
    n = pmap.rows * pmap.cols
    k = fraction_count(r, n)
    order = np.argsort(pmap.values.reshape(-1), kind="stable")[:k]
    cells = tuple(sorted((int(i) // pmap.cols, int(i) % pmap.cols) for i in order))
    return PatchPositions(pmap.frame_id, cells, r, pmap.patch_size)


def propagate_positions(positions: PatchPositions, frame_range: Sequence[int]) -> Dict[int, List[Cell]]:
    """Pixel top-left corners of every selected cell, for each frame in the range."""
    p = positions.patch_size
    coords = [(r * p, c * p) for r, c in positions.cells]
    return {int(f): list(coords) for f in frame_range}


def crop_pairs(hr: np.ndarray, lr: np.ndarray, coords: Sequence[Cell], patch: int,
               scale: int) -> PairSet:
    """Cut aligned patches from one HR frame ``(1,3,H,W)`` and its LR frame."""
    if patch % scale:
        raise ShapeError(f"patch size {patch} is not a multiple of scale {scale}")
    q = patch // scale
    H, W = hr.shape[-2:]
    lr_out, hr_out = [], []
    for y, x in coords:
        if y % scale or x % scale:
            raise ValueError(f"patch corner ({y}, {x}) is not aligned to scale {scale}")
        if y < 0 or x < 0 or y + patch > H or x + patch > W:
            raise ValueError(f"patch at ({y}, {x}) size {patch} is outside the {H}x{W} frame")
        hr_out.append(hr[0, :, y:y + patch, x:x + patch])
        lr_out.append(lr[0, :, y // scale:y // scale + q, x // scale:x // scale + q])
    if not hr_out:
        c = hr.shape[1]
        return PairSet(np.zeros((0, c, q, q), lr.dtype), np.zeros((0, c, patch, patch), hr.dtype))
    return PairSet(np.stack(lr_out), np.stack(hr_out))


def extract_pairs(store: FrameStore, per_frame: Dict[int, List[Cell]], patch: int) -> PairSet:
    """Training pairs for every ``(frame, corner)`` in frame order."""
    scale = store.manifest.scale
    sets = [crop_pairs(store.hr(f), store.lr(f), per_frame[f], patch, scale)
            for f in sorted(per_frame)]
    return PairSet.concat(sets)


def grid_cells(hr_size: Tuple[int, int], patch: int) -> List[Cell]:
    rows, cols = hr_size[0] // patch, hr_size[1] // patch
    return [(r, c) for r in range(rows) for c in range(cols)]


def iframe_ranges(manifest: ChunkManifest, chunk: int) -> List[Tuple[int, range]]:
    """``(iframe, frames)`` anchors covering the chunk.

    Frames before the chunk's first I-frame are attached to that I-frame;
    ranges never cross the chunk end.  Empty when the chunk has no I-frame.
    """
    s, e = manifest.chunks[chunk]
    ks = manifest.iframes_in(chunk)
    out = []
    for i, k in enumerate(ks):
        start = s if i == 0 else k
        end = ks[i + 1] if i + 1 < len(ks) else e
        out.append((k, range(start, end)))
    return out


class ChallengingPatchSampler:
    """Chunk -> training pairs, evaluating the previous model on I-frames only.

    ``forward_count`` counts model evaluations; ``maps`` keeps the last
    chunk's PSNR maps for reporting.  A chunk without any I-frame falls back
    to all grid cells of all its frames.
    """

    def __init__(self, manifest: ChunkManifest, store: FrameStore, config: SamplerConfig):
        self.manifest = manifest
        self.store = store
        self.config = config
        self.forward_count = 0
        self.maps: List[PsnrMap] = []
        self.candidates = 0
        self.fallback_chunks: List[int] = []

    def __call__(self, chunk: int, prev_model: bb.ModelParams) -> PairSet:
        p = self.config.patch_size
        cells = grid_cells(self.manifest.hr_size, p)
        s, e = self.manifest.chunks[chunk]
        self.candidates = len(cells) * (e - s)
        anchors = iframe_ranges(self.manifest, chunk)
        self.maps = []
        if not anchors:
            self.fallback_chunks.append(chunk)
            return all_patch_pairs(self.store, range(s, e), p)
        per_frame: Dict[int, List[Cell]] = {}
        for k, frames in anchors:
            sr = sr_iframe(prev_model, self.store.lr(k))
            self.forward_count += 1
            pmap = psnr_map(sr, self.store.hr(k), p, frame_id=k, cap=self.config.psnr_cap)
            self.maps.append(pmap)
            per_frame.update(propagate_positions(select_positions(pmap, self.config.r), frames))
        return extract_pairs(self.store, per_frame, p)


class AllPatchSampler:
    """Chunk -> every grid cell of every frame (the no-CPS ablation)."""

    def __init__(self, manifest: ChunkManifest, store: FrameStore, config: SamplerConfig):
        self.manifest = manifest
        self.store = store
        self.config = config
        self.forward_count = 0
        self.maps: List[PsnrMap] = []
        self.candidates = 0
        self.fallback_chunks: List[int] = []

    def __call__(self, chunk: int, prev_model: Optional[bb.ModelParams] = None) -> PairSet:
        s, e = self.manifest.chunks[chunk]
        pairs = all_patch_pairs(self.store, range(s, e), self.config.patch_size)
        self.candidates = len(pairs)
        return pairs


def all_patch_pairs(store: FrameStore, frames: Sequence[int], patch: int) -> PairSet:
    p = patch
    coords = [(r * p, c * p) for r, c in grid_cells(store.manifest.hr_size, p)]
    return extract_pairs(store, {int(f): coords for f in frames}, p)
