"""Frame-directory ingestion, chunking, I-frame indexing and LR generation.

Videos are directories of lossless frames (PNG or binary PPM) whose file
names sort into temporal order.  I-frame indices come from a sidecar file
with one integer per line; without one they are synthesized every
``DEFAULT_IFRAME_INTERVAL`` frames.  Frame 0 is always an I-frame.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from .numerics import bicubic_resize

DEFAULT_IFRAME_INTERVAL = 48
FRAME_SUFFIXES = (".png", ".ppm")
MANIFEST_HEADER = "# emt-manifest v1"


class DatasetError(ValueError):
    """Problem with a frame directory, sidecar or manifest."""


# ---------------------------------------------------------------------------
# image io
# ---------------------------------------------------------------------------

def read_image(path: Union[str, Path]) -> np.ndarray:
    """Load an RGB frame as float32 ``(3, H, W)`` in ``[0, 1]``."""
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DatasetError(f"cannot decode frame {path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1) / np.float32(255.0))


def to_uint8(img: np.ndarray) -> np.ndarray:
    """``(3, H, W)`` float in [0, 1] to ``(H, W, 3)`` uint8 (round half up)."""
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(img * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)


def write_image(path: Union[str, Path], img: np.ndarray) -> None:
    path = Path(path)
    fmt = "PPM" if path.suffix.lower() == ".ppm" else "PNG"
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format=fmt)


def crop_to_multiple(img: np.ndarray, scale: int) -> np.ndarray:
    """Centre-crop ``(..., H, W)`` so both dims are divisible by ``scale``."""
    h, w = img.shape[-2:]
    ch, cw = h - h % scale, w - w % scale
    top, left = (h - ch) // 2, (w - cw) // 2
    return img[..., top:top + ch, left:left + cw]


def list_frames(frame_dir: Union[str, Path]) -> List[str]:
    frame_dir = Path(frame_dir)
    if not frame_dir.is_dir():
        raise DatasetError(f"frame directory {frame_dir} does not exist")
    names = sorted(p.name for p in frame_dir.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)
    if not names:
        raise DatasetError(f"no PNG/PPM frames in {frame_dir}")
    return names


def read_iframe_file(path: Union[str, Path]) -> List[int]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            out.append(int(line))
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: not an integer: {line!r}") from None
    return out


def write_iframe_file(path: Union[str, Path], iframes: Sequence[int]) -> None:
    Path(path).write_text("".join(f"{k}\n" for k in iframes))


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

Range = Tuple[int, int]


@dataclass(frozen=True)
class ChunkManifest:
    frame_dir: str
    frames: Tuple[str, ...]
    fps: float
    scale: int
    hr_size: Tuple[int, int]
    iframes: Tuple[int, ...]
    chunks: Tuple[Range, ...] = ()
    groups: Tuple[Range, ...] = ()  # ranges of chunk ids

    @property
    def T(self) -> int:
        return len(self.frames)

    @property
    def lr_size(self) -> Tuple[int, int]:
        return self.hr_size[0] // self.scale, self.hr_size[1] // self.scale

    def chunk_of(self, frame: int) -> int:
        for j, (s, e) in enumerate(self.chunks):
            if s <= frame < e:
                return j
        raise DatasetError(f"frame {frame} is not covered by any chunk")

    @property
    def iframe_chunks(self) -> Tuple[int, ...]:
        return tuple(self.chunk_of(k) for k in self.iframes)

    def iframes_in(self, chunk: int) -> List[int]:
        s, e = self.chunks[chunk]
        return [k for k in self.iframes if s <= k < e]

    def group_chunks(self) -> List[List[int]]:
        groups = self.groups or ((0, len(self.chunks)),)
        return [list(range(a, b)) for a, b in groups]

    def frame_path(self, frame: int) -> Path:
        return Path(self.frame_dir) / self.frames[frame]


def _validate_iframes(iframes: Sequence[int], T: int) -> List[int]:
    ks = list(iframes)
    if any(b <= a for a, b in zip(ks, ks[1:])):
        raise DatasetError(f"I-frame indices must be strictly ascending, got {ks[:10]}...")
    if ks and (ks[0] < 0 or ks[-1] >= T):
        raise DatasetError(f"I-frame index out of range [0, {T}): {ks[0]}..{ks[-1]}")
    if not ks or ks[0] != 0:
        ks = [0] + ks
    return ks


def ingest(frame_dir: Union[str, Path], fps: float, scale: int,
           iframe_source: Optional[Union[str, Path]] = None,
           iframe_interval: int = DEFAULT_IFRAME_INTERVAL) -> ChunkManifest:
    """Scan ``frame_dir`` and build an (un-chunked) manifest.

    Every frame is decoded once to validate it; all frames must share one
    size.  HR dimensions are the centre-cropped multiples of ``scale``.
    """
    if fps <= 0:
        raise DatasetError(f"fps must be positive, got {fps}")
    frame_dir = Path(frame_dir)
    names = list_frames(frame_dir)
    size = None
    for name in names:
        h, w = read_image(frame_dir / name).shape[1:]
        if size is None:
            size = (h, w)
        elif (h, w) != size:
            raise DatasetError(f"frame {name} is {h}x{w}, expected {size[0]}x{size[1]}")
    hr = (size[0] - size[0] % scale, size[1] - size[1] % scale)
    if min(hr) < 1:
        raise DatasetError(f"frames of size {size} are smaller than scale {scale}")
    T = len(names)
    if iframe_source is not None:
        iframes = _validate_iframes(read_iframe_file(iframe_source), T)
    else:
        iframes = list(range(0, T, iframe_interval))
    return ChunkManifest(str(frame_dir.resolve()), tuple(names), float(fps), int(scale),
                         hr, tuple(iframes))


def chunk_ranges(T: int, chunk_frames: int) -> List[Range]:
    return [(s, min(s + chunk_frames, T)) for s in range(0, T, chunk_frames)]


def chunkify(manifest: ChunkManifest, chunk_seconds: float) -> ChunkManifest:
    """Uniform chunks of ``round(chunk_seconds * fps)`` frames; the last keeps the remainder."""
    if chunk_seconds <= 0:
        raise DatasetError(f"chunk_seconds must be positive, got {chunk_seconds}")
    n = max(1, int(math.floor(chunk_seconds * manifest.fps + 0.5)))
    return replace(manifest, chunks=tuple(chunk_ranges(manifest.T, n)), groups=())


def group_long_video(manifest: ChunkManifest, iframes_per_group: int) -> ChunkManifest:
    """Split the chunk sequence into groups holding at most ``iframes_per_group`` I-frames.

    A group starts at the chunk containing its first I-frame.  When two
    group starts land in the same chunk they merge, so a group can exceed
    the I-frame budget only if a single chunk does.
    """
    if iframes_per_group < 1:
        raise DatasetError("iframes_per_group must be >= 1")
    if not manifest.chunks:
        raise DatasetError("manifest must be chunked before grouping")
    starts = sorted({manifest.chunk_of(k) for k in manifest.iframes[::iframes_per_group]} | {0})
    bounds = starts + [len(manifest.chunks)]
    groups = tuple((a, b) for a, b in zip(bounds, bounds[1:]))
    return replace(manifest, groups=groups)


def write_manifest(path: Union[str, Path], manifest: ChunkManifest,
                   base: Optional[Union[str, Path]] = None) -> None:
    """Write ``manifest`` as text.

    The frame directory is stored relative to ``base``, which defaults to the
    directory of ``path``; pass the final directory when writing into a
    staging area that is moved afterwards.
    """
    path = Path(path)
    base = Path(base) if base is not None else path.parent
    frame_dir = os.path.relpath(manifest.frame_dir, base.resolve())
    lines = [
        MANIFEST_HEADER,
        f"frame_dir = {Path(frame_dir).as_posix()}",
        f"fps = {manifest.fps!r}",
        f"scale = {manifest.scale}",
        f"hr_size = {manifest.hr_size[0]}x{manifest.hr_size[1]}",
        f"frames = {manifest.T}",
        "iframes = " + " ".join(map(str, manifest.iframes)),
        "chunks = " + " ".join(f"{a}:{b}" for a, b in manifest.chunks),
        "groups = " + " ".join(f"{a}:{b}" for a, b in manifest.groups),
        "[frames]",
    ]
    lines += [f"{i} {name}" for i, name in enumerate(manifest.frames)]
    Path(path).write_text("\n".join(lines) + "\n")


def _ranges(text: str) -> Tuple[Range, ...]:
    return tuple(tuple(int(v) for v in item.split(":")) for item in text.split())  # type: ignore[misc]


def read_manifest(path: Union[str, Path]) -> ChunkManifest:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != MANIFEST_HEADER:
        raise DatasetError(f"{path} is not an emt manifest")
    kv: Dict[str, str] = {}
    frames: List[str] = []
    in_frames = False
    for line in text[1:]:
        if not line.strip():
            continue
        if line.strip() == "[frames]":
            in_frames = True
            continue
        if in_frames:
            idx, name = line.split(" ", 1)
            if int(idx) != len(frames):
                raise DatasetError(f"{path}: frame table out of order at index {idx}")
            frames.append(name)
        else:
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
    try:
        h, w = (int(v) for v in kv["hr_size"].split("x"))
        manifest = ChunkManifest(
            frame_dir=str((Path(path).resolve().parent / kv["frame_dir"]).resolve()), frames=tuple(frames), fps=float(kv["fps"]),
            scale=int(kv["scale"]), hr_size=(h, w),
            iframes=tuple(int(v) for v in kv["iframes"].split()),
            chunks=_ranges(kv.get("chunks", "")), groups=_ranges(kv.get("groups", "")),
        )
    except KeyError as exc:
        raise DatasetError(f"{path}: missing key {exc}") from None
    if int(kv["frames"]) != manifest.T:
        raise DatasetError(f"{path}: frame count {kv['frames']} != table length {manifest.T}")
    return manifest


# ---------------------------------------------------------------------------
# frame pairs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FramePair:
    frame_id: int
    hr: np.ndarray  # (1, 3, H, W)
    lr: np.ndarray  # (1, 3, H/s, W/s)


def make_lr_frame(hr: np.ndarray, scale: int) -> np.ndarray:
    """Bicubic ``x1/scale`` downsample of a ``(N, 3, H, W)`` HR tensor."""
    return bicubic_resize(hr, Fraction(1, scale))


@dataclass
class FrameStore:
    """Lazy, cached HR/LR frame access for one manifest."""

    manifest: ChunkManifest
    _hr: Dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    _lr: Dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def hr(self, frame: int) -> np.ndarray:
        if frame not in self._hr:
            img = crop_to_multiple(read_image(self.manifest.frame_path(frame)), self.manifest.scale)
            if img.shape[1:] != self.manifest.hr_size:
                raise DatasetError(f"frame {frame} has size {img.shape[1:]}, manifest says {self.manifest.hr_size}")
            self._hr[frame] = np.ascontiguousarray(img[None])
        return self._hr[frame]

    def lr(self, frame: int) -> np.ndarray:
        if frame not in self._lr:
            self._lr[frame] = make_lr_frame(self.hr(frame), self.manifest.scale)
        return self._lr[frame]

    def pair(self, frame: int) -> FramePair:
        return FramePair(frame, self.hr(frame), self.lr(frame))

    def pairs(self, frames: Sequence[int]) -> Iterator[FramePair]:
        for f in frames:
            yield self.pair(f)


def make_lr(manifest: ChunkManifest) -> FrameStore:
    if manifest.scale not in (2, 3, 4):
        raise DatasetError(f"scale must be 2, 3 or 4, got {manifest.scale}")
    return FrameStore(manifest)


def load_frame_stack(frame_dir: Union[str, Path], scale: int,
                     limit: Optional[int] = None) -> np.ndarray:
    """All frames of a directory as an HR stack ``(F, 3, H, W)`` cropped to ``scale``."""
    names = list_frames(frame_dir)[:limit]
    imgs = [crop_to_multiple(read_image(Path(frame_dir) / n), scale) for n in names]
    shapes = {im.shape for im in imgs}
    if len(shapes) != 1:
        raise DatasetError(f"frames in {frame_dir} have differing sizes {sorted(shapes)}")
    return np.stack(imgs)
