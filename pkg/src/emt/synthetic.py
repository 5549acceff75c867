"""Procedural desk-scale data: textured videos, a chunk-task meta-set and an image set.

Videos are sums of sharpened, coloured gratings panning across the frame.
A few "persistent" gratings live for the whole video while the remaining
ones are redrawn at every chunk, so neighbouring chunks share content but
each chunk still brings something new.  The image set used for
pretraining has different statistics (flat-shaded discs and boxes on
smooth gradients) so it plays the role of a generic natural-image corpus.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
from PIL import Image, ImageDraw

from .video import write_iframe_file, write_image


@dataclass(frozen=True)
class Grating:
    wave: np.ndarray  # (2,) cycles per pixel along (y, x)
    phase: float
    color: np.ndarray  # (3,)
    sharpness: float


def _random_grating(rng: np.random.Generator) -> Grating:
    freq = rng.uniform(0.03, 0.2)
    angle = rng.uniform(0, np.pi)
    return Grating(
        wave=freq * np.array([np.sin(angle), np.cos(angle)]),
        phase=rng.uniform(0, 2 * np.pi),
        color=rng.uniform(-1, 1, 3),
        sharpness=rng.uniform(0.5, 4.0),
    )


def render(gratings: Sequence[Grating], size: int, shift: np.ndarray) -> np.ndarray:
    """Render gratings translated by ``shift`` (pixels, (y, x)) as ``(3, size, size)``."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((3, size, size))
    norm = 0.0
    for g in gratings:
        arg = 2 * np.pi * (g.wave[0] * (yy - shift[0]) + g.wave[1] * (xx - shift[1])) + g.phase
        v = np.tanh(g.sharpness * np.sin(arg)) / np.tanh(g.sharpness)
        img += g.color[:, None, None] * v
        norm += np.abs(g.color)
    img = 0.5 + 0.5 * img / np.maximum(norm, 1e-9)[:, None, None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def video_frames(seed: int, n_frames: int, chunk_frames: int, size: int = 96,
                 persistent: int = 3, per_chunk: int = 3, speed: float = 0.7) -> np.ndarray:
    """``(T, 3, size, size)`` float32 frames with chunk-wise changing content."""
    rng = np.random.default_rng(seed)
    base = [_random_grating(rng) for _ in range(persistent)]
    velocity = rng.uniform(-speed, speed, 2)
    frames = []
    chunk_set: List[Grating] = []
    for t in range(n_frames):
        if t % chunk_frames == 0:
            chunk_set = [_random_grating(rng) for _ in range(per_chunk)]
        frames.append(render(base + chunk_set, size, velocity * t))
    return np.stack(frames)


def image_set(seed: int, count: int, size: int = 96) -> np.ndarray:
    """``(count, 3, size, size)`` images of flat shapes over smooth gradients."""
    rng = np.random.default_rng(seed)
    out = []
    yy, xx = np.mgrid[0:size, 0:size] / size
    for _ in range(count):
        c0, c1 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
        a = rng.uniform(0, 2 * np.pi)
        ramp = np.cos(a) * xx + np.sin(a) * yy
        ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
        bg = (c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp)
        im = Image.fromarray((bg.transpose(1, 2, 0) * 255).astype(np.uint8), "RGB")
        draw = ImageDraw.Draw(im)
        for _ in range(int(rng.integers(6, 14))):
            x0, y0 = rng.uniform(-0.2, 1.0, 2) * size
            w, h = rng.uniform(0.05, 0.4, 2) * size
            fill = tuple(int(v) for v in rng.integers(0, 256, 3))
            box = [x0, y0, x0 + w, y0 + h]
            if rng.random() < 0.5:
                draw.ellipse(box, fill=fill)
            else:
                draw.rectangle(box, fill=fill)
        out.append(np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0)
    return np.stack(out)


def quantize(frames: np.ndarray) -> np.ndarray:
    """Round to 8-bit levels, matching what a PNG round-trip stores."""
    return (np.floor(np.clip(frames, 0, 1) * 255.0 + 0.5) / 255.0).astype(np.float32)


def write_frames(out_dir: Union[str, Path], frames: np.ndarray, suffix: str = ".png") -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, f in enumerate(frames):
        p = out_dir / f"frame_{i:05d}{suffix}"
        write_image(p, f)
        paths.append(p)
    return paths


def write_video(out_dir: Union[str, Path], seed: int, n_frames: int, chunk_frames: int,
                size: int = 96, iframe_interval: Optional[int] = None, suffix: str = ".png") -> Path:
    """Write a synthetic video as frames plus an ``iframes.txt`` sidecar next to them."""
    out_dir = Path(out_dir)
    frames = video_frames(seed, n_frames, chunk_frames, size)
    write_frames(out_dir / "frames", frames, suffix)
    interval = iframe_interval or chunk_frames
    write_iframe_file(out_dir / "iframes.txt", range(0, n_frames, interval))
    return out_dir / "frames"


def write_metaset(out_dir: Union[str, Path], seed: int, tasks: int, frames_per_task: int,
                  size: int = 96) -> Path:
    """One sub-directory of frames per task; each task is one chunk of its own video."""
    out_dir = Path(out_dir)
    for t in range(tasks):
        frames = video_frames(seed * 1000 + t, frames_per_task, frames_per_task, size)
        write_frames(out_dir / f"task_{t:03d}", frames)
    return out_dir


def write_image_set(out_dir: Union[str, Path], seed: int, count: int, size: int = 96) -> Path:
    write_frames(out_dir, image_set(seed, count, size))
    return Path(out_dir)
