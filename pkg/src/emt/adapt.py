"""Gradient masking and sequential partial adaptation over video chunks.

The first chunk adapts the root (meta-learned) model on ``p1%`` of its
parameters; every later chunk adapts the previous chunk's model on
``p2%``.  Each mask is chosen by a short full-parameter Adam probe: the
coordinates that moved the most are the ones fine-tuned and shipped.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import backbones as bb
from .codec import SparseDelta, encode_delta
from .numerics import AdamState, adam_step, psnr
from .sampler import PairSet, fraction_count

log = logging.getLogger(__name__)

Sampler = Callable[[int, bb.ModelParams], PairSet]


class AdaptError(RuntimeError):
    pass


@dataclass(frozen=True)
class GradientMask:
    indices: np.ndarray  # int64, ascending, unique
    P: int
    p: float

    def __len__(self) -> int:
        return int(self.indices.size)

    def boolean(self) -> np.ndarray:
        out = np.zeros(self.P, dtype=bool)
        out[self.indices] = True
        return out


@dataclass(frozen=True)
class AdaptConfig:
    p1: float = 20.0
    p2: float = 1.0
    probe_steps: int = 10
    epochs: float = 0.1
    lr: float = 1e-4
    batch_size: int = 16
    patch_size: int = 144
    seed: int = 0
    steps: Optional[int] = None  # fixed step budget, overrides ``epochs``

    def __post_init__(self):
        if not (0 < self.p1 <= 100 and 0 < self.p2 <= 100):
            raise ValueError(f"p1, p2 must be in (0, 100], got {self.p1}, {self.p2}")
        if self.probe_steps < 1:
            raise ValueError("probe_steps must be >= 1")
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if self.steps is not None and self.steps < 0:
            raise ValueError("steps must be >= 0")


def epochs_to_steps(epochs: float, pairs_per_epoch: int, batch_size: int) -> int:
    per_epoch = math.ceil(pairs_per_epoch / batch_size)
    return max(1, math.floor(epochs * per_epoch + 0.5))


def top_fraction(scores: np.ndarray, p: float) -> GradientMask:
    """Mask of the ``p%`` largest scores; equal scores prefer the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    k = fraction_count(p, scores.size)
    order = np.argsort(-scores, kind="stable")[:k]
    return GradientMask(np.sort(order).astype(np.int64), scores.size, p)


class _Batches:
    """Shuffled mini-batches, reshuffled at every epoch boundary."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.bs, self.rng = n, batch_size, rng
        self._queue: List[np.ndarray] = []

    def next(self) -> np.ndarray:
        if not self._queue:
            perm = self.rng.permutation(self.n)
            self._queue = [perm[i:i + self.bs] for i in range(0, self.n, self.bs)]
        return self._queue.pop(0)


def _train(model: bb.ModelParams, pairs: PairSet, steps: int, lr: float, batch_size: int,
           rng: np.random.Generator, mask: Optional[np.ndarray] = None,
           context: str = "") -> bb.ModelParams:
    theta = model.theta
    state = AdamState.fresh(theta.size, lr=lr)
    batches = _Batches(len(pairs), batch_size, rng)
    for step in range(steps):
        idx = batches.next()
        try:
            _, g = bb.loss_and_grad(model.with_theta(theta), pairs.lr[idx], pairs.hr[idx])
        except FloatingPointError as exc:
            raise AdaptError(f"{context}step {step}: {exc}") from exc
        if mask is not None:
            g = np.where(mask, g, 0).astype(g.dtype, copy=False)
        theta, state = adam_step(theta, g, state)
    return model.with_theta(theta)


def _rng(seed: int, chunk: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, chunk, stream])


def probe_and_mask(reference: bb.ModelParams, pairs: PairSet, config: AdaptConfig,
                   p: float, chunk: int = 0) -> GradientMask:
    """Run ``probe_steps`` unmasked Adam steps on a copy and keep the ``p%`` most-moved weights."""
    if len(pairs) == 0:
        raise AdaptError(f"chunk {chunk}: no training pairs to probe with")
    probe = _train(reference, pairs, config.probe_steps, config.lr, config.batch_size,
                   _rng(config.seed, chunk, 0), context=f"chunk {chunk} probe ")
    moved = np.abs(probe.theta.astype(np.float64) - reference.theta.astype(np.float64))
    return top_fraction(moved, p)


def finetune_steps(config: AdaptConfig, n_pairs: int) -> int:
    if config.steps is not None:
        return config.steps
    return epochs_to_steps(config.epochs, n_pairs, config.batch_size)


def masked_finetune(reference: bb.ModelParams, mask: Optional[GradientMask], pairs: PairSet,
                    config: AdaptConfig, chunk: int = 0):
    """Adam fine-tuning with gradients outside ``mask`` zeroed.

    ``mask=None`` trains every coordinate.  Returns ``(adapted, delta)``.
    """
    if mask is not None and mask.P != reference.P:
        raise AdaptError(f"mask built for P={mask.P}, model has P={reference.P}")
    if len(pairs) == 0:
        raise AdaptError(f"chunk {chunk}: no training pairs")
    steps = finetune_steps(config, len(pairs))
    adapted = _train(reference, pairs, steps, config.lr, config.batch_size,
                     _rng(config.seed, chunk, 1),
                     mask=None if mask is None else mask.boolean(),
                     context=f"chunk {chunk} ")
    adapted = adapted.tagged("adapted", chunk)
    delta = encode_delta(reference, adapted, None if mask is None else mask.indices, chunk_id=chunk)
    return adapted, delta


def train_psnr(model: bb.ModelParams, pairs: PairSet, batch: int = 64) -> float:
    """PSNR of the model over a fixed patch set (one MSE over all patches)."""
    sr = bb.predict(model, pairs.lr, batch)
    return psnr(sr, pairs.hr, 1.0)


@dataclass
class ChunkRecord:
    chunk_id: int
    mask_size: int
    steps: int
    pairs: int
    ref_train_psnr_db: float
    final_train_psnr_db: float
    elapsed_ms: int


@dataclass
class EmtResult:
    models: List[bb.ModelParams] = field(default_factory=list)
    deltas: List[SparseDelta] = field(default_factory=list)
    masks: List[GradientMask] = field(default_factory=list)
    records: List[ChunkRecord] = field(default_factory=list)

    @property
    def private_params(self) -> int:
        return sum(len(m) for m in self.masks)


def emt_run(root: bb.ModelParams, chunks: Sequence[int], config: AdaptConfig,
            sampler: Sampler, timing: bool = True) -> EmtResult:
    """Adapt ``root`` to each chunk in order, chaining every result into the next."""
    if not chunks:
        raise AdaptError("no chunks to adapt")
    result = EmtResult()
    model = root
    for pos, chunk in enumerate(chunks):
        t0 = time.perf_counter()
        p = config.p1 if pos == 0 else config.p2
        try:
            pairs = sampler(chunk, model)
            mask = probe_and_mask(model, pairs, config, p, chunk)
            adapted, delta = masked_finetune(model, mask, pairs, config, chunk)
        except Exception as exc:
            raise AdaptError(f"chunk {chunk}: {exc}") from exc
        rec = ChunkRecord(
            chunk_id=chunk, mask_size=len(mask), steps=finetune_steps(config, len(pairs)),
            pairs=len(pairs), ref_train_psnr_db=train_psnr(model, pairs),
            final_train_psnr_db=train_psnr(adapted, pairs),
            elapsed_ms=int(round((time.perf_counter() - t0) * 1000)) if timing else 0,
        )
        if rec.final_train_psnr_db < rec.ref_train_psnr_db:
            log.warning("chunk %d: train PSNR fell from %.3f to %.3f dB", chunk,
                        rec.ref_train_psnr_db, rec.final_train_psnr_db)
        log.info("chunk %d: mask %d, %d steps, %.3f -> %.3f dB", chunk, rec.mask_size,
                 rec.steps, rec.ref_train_psnr_db, rec.final_train_psnr_db)
        result.models.append(adapted)
        result.deltas.append(delta)
        result.masks.append(mask)
        result.records.append(rec)
        model = adapted
    return result
