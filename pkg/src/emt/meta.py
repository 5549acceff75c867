"""Meta-learned initialization over a dataset of video-chunk tasks.

First-order MAML: each sampled task copies the shared model, takes
``inner_steps`` plain gradient steps on its batch, and contributes the loss
gradient at its adapted parameters.  The shared model then moves against
the sum of those task gradients.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import backbones as bb
from .numerics import AdamState, adam_step, bicubic_resize
from .sampler import PairSet
from .video import list_frames, load_frame_stack

log = logging.getLogger(__name__)


class MetaError(RuntimeError):
    pass


@dataclass
class MetaTask:
    """One chunk of the meta-dataset: HR frames and their bicubic LR frames."""

    task_id: str
    hr: np.ndarray  # (F, 3, H, W)
    scale: int
    lr: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        if self.hr.ndim != 4 or self.hr.shape[0] < 1:
            raise MetaError(f"task {self.task_id}: need at least one (3, H, W) frame")
        h, w = self.hr.shape[2:]
        if h % self.scale or w % self.scale:
            raise MetaError(f"task {self.task_id}: frame {h}x{w} not divisible by scale {self.scale}")
        if self.lr is None:
            self.lr = bicubic_resize(self.hr, Fraction(1, self.scale))

    @property
    def frame_count(self) -> int:
        return int(self.hr.shape[0])


@dataclass(frozen=True)
class MetaConfig:
    inner_lr: float = 0.5e-5
    outer_lr: float = 1e-3
    inner_steps: int = 2
    tasks_per_iter: int = 15
    frames_per_task: int = 50
    patch_size: int = 144
    batch_size_per_task: int = 16
    outer_iters: int = 1000
    seed: int = 0
    outer_optimizer: str = "sgd"  # or "adam"

    def __post_init__(self):
        if self.inner_lr < 0 or self.outer_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if self.inner_steps < 0 or self.tasks_per_iter < 1 or self.outer_iters < 0:
            raise ValueError("inner_steps >= 0, tasks_per_iter >= 1, outer_iters >= 0 required")
        if self.outer_optimizer not in ("sgd", "adam"):
            raise ValueError(f"outer_optimizer must be 'sgd' or 'adam', got {self.outer_optimizer!r}")

    @property
    def meta_batch(self) -> int:
        return self.batch_size_per_task * self.tasks_per_iter


def sample_task_batch(task: MetaTask, config: MetaConfig, rng: np.random.Generator) -> PairSet:
    """Random aligned patches; HR corners are multiples of the scale."""
    p, s = config.patch_size, task.scale
    if p % s:
        raise MetaError(f"patch size {p} is not a multiple of scale {s}")
    F, _, H, W = task.hr.shape
    if H < p or W < p:
        raise MetaError(f"task {task.task_id}: frames {H}x{W} smaller than patch {p} (frame 0)")
    q = p // s
    ny, nx = (H - p) // s + 1, (W - p) // s + 1
    n = config.batch_size_per_task
    frames = rng.integers(0, F, n)
    ys = rng.integers(0, ny, n) * s
    xs = rng.integers(0, nx, n) * s
    hr = np.stack([task.hr[f, :, y:y + p, x:x + p] for f, y, x in zip(frames, ys, xs)])
    lr = np.stack([task.lr[f, :, y // s:y // s + q, x // s:x // s + q] for f, y, x in zip(frames, ys, xs)])
    return PairSet(lr, hr)


def inner_update(model: bb.ModelParams, batch: PairSet, alpha: float, steps: int) -> bb.ModelParams:
    """``steps`` plain gradient-descent steps on ``batch``; ``model`` is not modified."""
    theta = model.theta
    for step in range(steps):
        loss, g = bb.loss_and_grad(model.with_theta(theta), batch.lr, batch.hr)
        theta = (theta.astype(np.float64) - alpha * g.astype(np.float64)).astype(theta.dtype)
    return model.with_theta(theta if steps else theta.copy())


def outer_update(model: bb.ModelParams, task_gradients: Sequence[np.ndarray], beta: float) -> bb.ModelParams:
    """Plain step against the task-ordered sum of meta-gradients."""
    total = _sum_gradients(model.P, task_gradients)
    theta = (model.theta.astype(np.float64) - beta * total).astype(model.theta.dtype)
    return model.with_theta(theta)


def _sum_gradients(P: int, grads: Sequence[np.ndarray]) -> np.ndarray:
    total = np.zeros(P, dtype=np.float64)
    for i, g in enumerate(grads):
        if np.shape(g) != (P,):
            raise MetaError(f"task gradient {i} has shape {np.shape(g)}, expected ({P},)")
        total += np.asarray(g, dtype=np.float64)
    return total


def task_meta_gradient(model: bb.ModelParams, batch: PairSet, config: MetaConfig) -> Tuple[float, np.ndarray]:
    """Loss and first-order meta-gradient of one task at its adapted parameters."""
    adapted = inner_update(model, batch, config.inner_lr, config.inner_steps)
    return bb.loss_and_grad(adapted, batch.lr, batch.hr)


@dataclass
class MetaLogEntry:
    iteration: int
    meta_loss: float
    elapsed_ms: int


def meta_train(init: bb.ModelParams, tasks: Sequence[MetaTask], config: MetaConfig,
               callback: Optional[Callable[[MetaLogEntry], None]] = None,
               timing: bool = True) -> Tuple[bb.ModelParams, List[MetaLogEntry]]:
    """Run ``outer_iters`` meta-iterations; returns the meta model and its loss log."""
    if len(tasks) < config.tasks_per_iter:
        raise MetaError(f"{len(tasks)} tasks available, tasks_per_iter={config.tasks_per_iter}")
    rng = np.random.default_rng(config.seed)
    model = init
    adam = AdamState.fresh(init.P, lr=config.outer_lr) if config.outer_optimizer == "adam" else None
    history: List[MetaLogEntry] = []
    t0 = time.perf_counter()
    for it in range(config.outer_iters):
        chosen = np.sort(rng.choice(len(tasks), config.tasks_per_iter, replace=False))
        losses, grads = [], []
        for ti in chosen:
            task = tasks[int(ti)]
            batch = sample_task_batch(task, config, rng)
            try:
                loss, g = task_meta_gradient(model, batch, config)
            except FloatingPointError as exc:
                raise MetaError(f"iteration {it}, task {task.task_id}: inner loop diverged ({exc})") from exc
            losses.append(loss)
            grads.append(g)
        if adam is None:
            model = outer_update(model, grads, config.outer_lr)
        else:
            theta, adam = adam_step(model.theta, _sum_gradients(model.P, grads), adam)
            model = model.with_theta(theta)
        entry = MetaLogEntry(it, float(np.mean(losses)),
                             int(round((time.perf_counter() - t0) * 1000)) if timing else 0)
        history.append(entry)
        if callback is not None:
            callback(entry)
    if config.outer_iters == 0:
        return init, history
    return model.tagged("meta"), history


def pretrain(init: bb.ModelParams, images: np.ndarray, steps: int, lr: float = 1e-3,
             patch_size: int = 144, batch_size: int = 16, seed: int = 0,
             callback: Optional[Callable[[int, float], None]] = None) -> bb.ModelParams:
    """Supervised Adam training on an image stack treated as a single task."""
    task = MetaTask("pretrain", images, init.arch.scale)
    cfg = MetaConfig(patch_size=patch_size, batch_size_per_task=batch_size, tasks_per_iter=1, seed=seed)
    rng = np.random.default_rng(seed)
    theta = init.theta
    state = AdamState.fresh(init.P, lr=lr)
    for step in range(steps):
        batch = sample_task_batch(task, cfg, rng)
        loss, g = bb.loss_and_grad(init.with_theta(theta), batch.lr, batch.hr)
        theta, state = adam_step(theta, g, state)
        if callback is not None:
            callback(step, loss)
    return init.with_theta(theta, provenance="pretrained")


def load_tasks(meta_dir: Union[str, Path], scale: int, frames_per_task: Optional[int] = None) -> List[MetaTask]:
    """Every sub-directory of ``meta_dir`` holding frames becomes one task."""
    meta_dir = Path(meta_dir)
    if not meta_dir.is_dir():
        raise MetaError(f"meta-dataset directory {meta_dir} does not exist")
    tasks = []
    for sub in sorted(p for p in meta_dir.iterdir() if p.is_dir()):
        try:
            list_frames(sub)
        except ValueError:
            continue
        tasks.append(MetaTask(sub.name, load_frame_stack(sub, scale, frames_per_task), scale))
    if not tasks:
        raise MetaError(f"no task directories with frames under {meta_dir}")
    return tasks


def format_log(history: Sequence[MetaLogEntry]) -> str:
    return "".join(f"{e.iteration}, {e.meta_loss:.8f}, {e.elapsed_ms}\n" for e in history)
