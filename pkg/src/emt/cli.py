"""Command-line entry point: ``emt <subcommand> ...``.

Subcommands
-----------
synth       write the procedural desk-scale dataset (video, meta-set, images)
ingest      scan a frame directory into a chunked manifest
pretrain    supervised pretraining on an image directory
meta-train  meta-learned initialization over a directory of chunk tasks
adapt       gradient-masked sequential adaptation, one ``.srd`` per chunk
apply       client-side reconstruction and super-resolution of every frame
evaluate    per-chunk / overall PSNR tables

Every subcommand stages its outputs and only moves them into place once it
has finished, so a failing run leaves nothing half-written behind.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np

from . import adapt as ad
from . import backbones as bb
from . import codec
from . import meta
from . import sampler as sp
from . import synthetic as syn
from . import video as vd
from .numerics import PSNR_CAP_DB, psnr

log = logging.getLogger("emt")

OUTPUT_ENV = "EMT_OUTPUT_DIR"

PRESETS: Dict[str, Dict[str, float]] = {
    "S": {"epochs": 0.1, "p1": 20.0, "p2": 1.0},
    "M": {"epochs": 3.0, "p1": 20.0, "p2": 1.0},
    "L": {"epochs": 3.0, "p1": 100.0, "p2": 1.0},
}


class CliError(RuntimeError):
    pass


@dataclass
class RunConfig:
    subcommand: str
    arch_id: str = "espcn"
    scale: int = 2
    preset: str = "S"
    seed: int = 0
    paths: Dict[str, str] = field(default_factory=dict)
    adapt: Optional[ad.AdaptConfig] = None
    sampler: Optional[sp.SamplerConfig] = None
    meta: Optional[meta.MetaConfig] = None


def expand_preset(preset: str, epochs: Optional[float] = None, p1: Optional[float] = None,
                  p2: Optional[float] = None) -> Dict[str, float]:
    """Preset values with explicit flags taking precedence."""
    if preset == "custom":
        base = dict(PRESETS["S"])
    elif preset in PRESETS:
        base = dict(PRESETS[preset])
    else:
        raise CliError(f"unknown preset {preset!r}; choose S, M, L or custom")
    for key, value in (("epochs", epochs), ("p1", p1), ("p2", p2)):
        if value is not None:
            base[key] = value
    return base


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def default_out(value: Optional[str], name: str) -> Path:
    if value:
        return Path(value)
    return Path(os.environ.get(OUTPUT_ENV, "emt_out")) / name


@contextlib.contextmanager
def staged(target_dir: Path) -> Iterator[Path]:
    """Yield a scratch directory whose files move into ``target_dir`` on success."""
    target_dir = Path(target_dir)
    target_dir.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".emt-stage-", dir=target_dir))
    try:
        yield stage
        for src in sorted(stage.rglob("*")):
            if src.is_file():
                dst = target_dir / src.relative_to(stage)
                dst.parent.mkdir(parents=True, exist_ok=True)
                os.replace(src, dst)
    finally:
        shutil.rmtree(stage, ignore_errors=True)


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def fmt_db(x: float) -> str:
    return f"{x:.4f}"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = default_out(args.out, f"synth_{args.kind}")
    with staged(out) as stage:
        if args.kind == "video":
            syn.write_video(stage, args.seed, args.frames, args.chunk_frames, args.size,
                            args.iframe_interval, suffix=f".{args.format}")
        elif args.kind == "metaset":
            syn.write_metaset(stage, args.seed, args.tasks, args.frames, args.size)
        else:
            syn.write_image_set(stage, args.seed, args.frames, args.size)
    print(f"wrote {args.kind} to {out}")
    return 0


def cmd_ingest(args) -> int:
    manifest = vd.ingest(args.frames, args.fps, args.scale, args.iframes, args.iframe_interval)
    manifest = vd.chunkify(manifest, args.chunk_seconds)
    if args.iframes_per_group:
        manifest = vd.group_long_video(manifest, args.iframes_per_group)
    out = default_out(args.output, "manifest.txt")
    with staged(out.parent) as stage:
        vd.write_manifest(stage / out.name, manifest, base=out.parent)
    print(f"{manifest.T} frames, {len(manifest.chunks)} chunks, {len(manifest.iframes)} I-frames -> {out}")
    return 0


def _init_model(path: Optional[str], arch: str, scale: int, seed: int) -> bb.ModelParams:
    if path:
        model = codec.read_model(path)
        if (model.arch.arch_id, model.arch.scale) != (arch, scale):
            log.info("using architecture %s x%d from %s", model.arch.arch_id, model.arch.scale, path)
        return model
    return bb.build_model(arch, scale, seed)


def cmd_pretrain(args) -> int:
    model = _init_model(args.init, args.arch, args.scale, args.seed)
    images = vd.load_frame_stack(args.images, model.arch.scale)
    losses: List[str] = []

    def cb(step, loss):
        losses.append(f"{step}, {loss:.8f}\n")
        if step % 50 == 0:
            log.info("pretrain step %d loss %.5f", step, loss)

    model = meta.pretrain(model, images, args.steps, args.lr, args.patch_size,
                          args.batch_size, args.seed, cb)
    out = default_out(args.output, "pretrained.srm")
    with staged(out.parent) as stage:
        codec.write_model(stage / out.name, model)
        (stage / (out.stem + ".log")).write_text("".join(losses))
    print(f"pretrained {model.arch.arch_id} x{model.arch.scale} (P={model.P}) -> {out}")
    return 0


def cmd_meta_train(args) -> int:
    from . import plotting

    init = _init_model(args.init, args.arch, args.scale, args.seed)
    cfg = meta.MetaConfig(
        inner_lr=args.inner_lr, outer_lr=args.outer_lr, inner_steps=args.inner_steps,
        tasks_per_iter=args.n_tasks, frames_per_task=args.frames_per_task,
        patch_size=args.patch_size, batch_size_per_task=args.batch_per_task,
        outer_iters=args.outer_iters, seed=args.seed, outer_optimizer=args.outer_optimizer,
    )
    tasks = meta.load_tasks(args.tasks, init.arch.scale, cfg.frames_per_task)
    if len(tasks) < cfg.tasks_per_iter:
        raise CliError(f"{args.tasks} holds {len(tasks)} tasks but --n-tasks is {cfg.tasks_per_iter}; "
                       "add task directories or lower --n-tasks")

    def cb(entry):
        if entry.iteration % 10 == 0:
            log.info("iter %d meta loss %.5f", entry.iteration, entry.meta_loss)

    model, history = meta.meta_train(init, tasks, cfg, cb, timing=not args.no_timing)
    out = default_out(args.output, "meta.srm")
    with staged(out.parent) as stage:
        codec.write_model(stage / out.name, model)
        (stage / (out.stem + ".log")).write_text(meta.format_log(history))
        if history and not args.no_figures:
            plotting.meta_loss_figure(stage / (out.stem + "_loss.png"),
                                      [e.iteration for e in history], [e.meta_loss for e in history])
    print(f"meta-trained over {len(tasks)} tasks, {cfg.outer_iters} iterations -> {out}")
    return 0


def build_adapt_config(args, preset: Dict[str, float]) -> ad.AdaptConfig:
    return ad.AdaptConfig(
        p1=preset["p1"], p2=preset["p2"], probe_steps=args.probe_steps, epochs=preset["epochs"],
        lr=args.lr, batch_size=args.batch_size, patch_size=args.patch_size, seed=args.seed,
        steps=args.steps,
    )


def cmd_adapt(args) -> int:
    from . import plotting

    manifest = vd.read_manifest(args.manifest)
    if args.chunk_seconds:
        manifest = vd.chunkify(manifest, args.chunk_seconds)
    if args.iframes_per_group:
        manifest = vd.group_long_video(manifest, args.iframes_per_group)
    root_path = args.meta if args.init == "meta" else args.pretrained
    if not root_path:
        raise CliError(f"--init {args.init} needs --{args.init} MODEL.srm")
    root = codec.read_model(root_path)
    if root.arch.scale != manifest.scale:
        raise CliError(f"model scale x{root.arch.scale} != manifest scale x{manifest.scale}")
    preset = expand_preset(args.preset, args.epochs, args.p1, args.p2)
    cfg = build_adapt_config(args, preset)
    scfg = sp.SamplerConfig(r=args.r, patch_size=args.patch_size)
    store = vd.make_lr(manifest)
    sampler_cls = sp.AllPatchSampler if args.no_cps else sp.ChallengingPatchSampler
    sampler = sampler_cls(manifest, store, scfg)
    groups = manifest.group_chunks()
    if args.chunks is not None:
        keep = set(range(args.chunks))
        groups = [[c for c in g if c in keep] for g in groups]
        groups = [g for g in groups if g]

    maps: Dict[int, List[sp.PsnrMap]] = {}

    def recording_sampler(chunk, model):
        pairs = sampler(chunk, model)
        maps[chunk] = list(sampler.maps)
        return pairs

    results: List[ad.EmtResult] = []
    for gi, chunk_ids in enumerate(groups):
        log.info("group %d: chunks %s..%s", gi, chunk_ids[0], chunk_ids[-1])
        results.append(ad.emt_run(root, chunk_ids, cfg, recording_sampler, timing=not args.no_timing))

    records = [r for res in results for r in res.records]
    deltas = [d for res in results for d in res.deltas]
    models = [m for res in results for m in res.models]
    private = sum(res.private_params for res in results)
    storage = codec.storage_report(deltas, root.P)
    out = default_out(args.out, "adapt")
    with staged(out) as stage:
        for d in deltas:
            codec.write_delta(stage / codec.delta_filename(d.chunk_id), d)
        write_csv(stage / "adapt_report.csv",
                  ["chunk_id", "mask_size", "steps", "final_train_psnr_db", "elapsed_ms"],
                  [[r.chunk_id, r.mask_size, r.steps, fmt_db(r.final_train_psnr_db), r.elapsed_ms]
                   for r in records])
        (stage / "storage_report.txt").write_text(
            f"P = {root.P}\n"
            f"private_params = {private}\n"
            f"delta_entries = {storage.entries}\n"
            f"storage = {private / root.P:.2f}P\n"
            f"delta_bytes = {storage.delta_bytes}\n"
            f"shared_model_bytes = {storage.model_bytes}\n"
        )
        (stage / "hashes.txt").write_text(
            f"root {codec.model_hash(root):016x}\n"
            + "".join(f"{c} {h}\n" for c, h in codec.chain_hashes(models))
        )
        vd.write_manifest(stage / "manifest.txt", manifest, base=out)
        write_json(stage / "summary.json", {
            "arch": root.arch.arch_id, "scale": root.arch.scale, "init": args.init,
            "preset": args.preset, "config": asdict(cfg), "sampler": asdict(scfg),
            "cps": not args.no_cps, "chunks": len(records), "groups": [list(g) for g in groups],
            "P": root.P, "private_params": private, "storage": f"{private / root.P:.2f}P",
            "storage_fraction": private / root.P, "delta_entries": storage.entries,
            "delta_bytes": storage.delta_bytes, "forward_passes": sampler.forward_count,
            "fallback_chunks": sampler.fallback_chunks,
            "self_fit_violations": [r.chunk_id for r in records
                                    if r.final_train_psnr_db < r.ref_train_psnr_db],
            "ref_train_psnr_db": [round(r.ref_train_psnr_db, 4) for r in records],
            "final_train_psnr_db": [round(r.final_train_psnr_db, 4) for r in records],
        })
        if not args.no_figures:
            plotting.adapt_figure(stage / "adapt_psnr.png", [r.chunk_id for r in records],
                                  [r.ref_train_psnr_db for r in records],
                                  [r.final_train_psnr_db for r in records])
        if args.dump_maps:
            mdir = stage / "psnr_maps"
            mdir.mkdir()
            for chunk, cmaps in sorted(maps.items()):
                for pm in cmaps:
                    sel = sp.select_positions(pm, args.r).cells
                    name = f"chunk{chunk:04d}_iframe{pm.frame_id:05d}"
                    np.savetxt(mdir / f"{name}.csv", pm.values, delimiter=",", fmt="%.4f")
                    if not args.no_figures:
                        plotting.psnr_map_figure(mdir / f"{name}.png", pm.values, sel,
                                                 title=f"chunk {chunk}, I-frame {pm.frame_id}")
    print(f"adapted {len(records)} chunks; private parameters {private / root.P:.2f}P -> {out}")
    return 0


def reconstruct_models(manifest: vd.ChunkManifest, root: bb.ModelParams,
                       deltas: Sequence[codec.SparseDelta]) -> Dict[int, bb.ModelParams]:
    """Chunk id -> model; each group's chain starts again from ``root``.

    Chunks without a delta are served by ``root``.
    """
    by_chunk = {d.chunk_id: d for d in deltas}
    unknown = set(by_chunk) - set(range(len(manifest.chunks)))
    if unknown:
        raise CliError(f"deltas for chunks {sorted(unknown)} are not in the manifest")
    models: Dict[int, bb.ModelParams] = {}
    for group in manifest.group_chunks():
        current = root
        for chunk in group:
            d = by_chunk.get(chunk)
            if d is None:
                models[chunk] = root
                continue
            try:
                current = codec.apply_delta(current, d)
            except codec.ChainError as exc:
                raise CliError(f"broken delta chain at chunk {chunk}: {exc}") from exc
            models[chunk] = current
    return models


def cmd_apply(args) -> int:
    manifest = vd.read_manifest(args.manifest)
    root = codec.read_model(args.model)
    deltas = codec.read_delta_dir(args.deltas) if args.deltas else []
    models = reconstruct_models(manifest, root, deltas)
    store = vd.make_lr(manifest)
    out = default_out(args.out, "sr")
    lr_names = vd.list_frames(args.lr_dir) if args.lr_dir else None
    if lr_names is not None and len(lr_names) != manifest.T:
        raise CliError(f"{args.lr_dir} has {len(lr_names)} frames, manifest has {manifest.T}")
    with staged(out) as stage:
        fdir = stage / "frames"
        fdir.mkdir()
        for j, (s, e) in enumerate(manifest.chunks):
            model = models[j]
            for f in range(s, e):
                if lr_names is not None:
                    lr = vd.read_image(Path(args.lr_dir) / lr_names[f])[None]
                else:
                    lr = store.lr(f)
                sr = bb.forward(model, lr)[0]
                vd.write_image(fdir / f"frame_{f:05d}.{args.format}", sr)
        (stage / "apply_hashes.txt").write_text(
            f"root {codec.model_hash(root):016x}\n"
            + "".join(f"{j} {codec.model_hash(models[j]):016x}\n"
                      for j in sorted(models) if models[j] is not root)
        )
    print(f"super-resolved {manifest.T} frames with {len(deltas)} deltas -> {out}")
    return 0


def evaluate_frames(manifest: vd.ChunkManifest, sr_dir: Path):
    names = vd.list_frames(sr_dir)
    if len(names) != manifest.T:
        raise CliError(f"{sr_dir} has {len(names)} SR frames but the manifest has {manifest.T}")
    store = vd.make_lr(manifest)
    per_frame = []
    for f, name in enumerate(names):
        sr = vd.read_image(sr_dir / name)
        hr = store.hr(f)[0]
        if sr.shape != hr.shape:
            raise CliError(f"SR frame {name} is {sr.shape[1:]}, HR is {hr.shape[1:]}")
        per_frame.append(psnr(sr, hr, 1.0))
    return per_frame


def cmd_evaluate(args) -> int:
    from . import plotting

    manifest = vd.read_manifest(args.manifest)
    sr_dir = Path(args.sr)
    if (sr_dir / "frames").is_dir():
        sr_dir = sr_dir / "frames"
    per_frame = evaluate_frames(manifest, sr_dir)
    rows, chunk_psnr = [], []
    for j, (s, e) in enumerate(manifest.chunks):
        v = float(np.mean(per_frame[s:e]))
        chunk_psnr.append(v)
        rows.append([j, e - s, fmt_db(v)])
    overall = float(np.mean(per_frame))
    rows.append(["overall", manifest.T, fmt_db(overall)])
    out = default_out(args.out, "eval")
    with staged(out) as stage:
        write_csv(stage / "evaluate.csv", ["chunk", "frames", "psnr_db"], rows)
        write_csv(stage / "frame_psnr.csv", ["frame", "chunk", "psnr_db"],
                  [[f, manifest.chunk_of(f), fmt_db(v)] for f, v in enumerate(per_frame)])
        write_json(stage / "summary.json", {
            "overall_psnr_db": overall, "chunk_psnr_db": chunk_psnr,
            "frames": manifest.T, "chunks": len(manifest.chunks),
            "capped_frames": int(sum(v >= PSNR_CAP_DB for v in per_frame)),
            "metric": "RGB PSNR in [0, 1], mean of per-frame PSNR",
        })
        if not args.no_figures:
            plotting.chunk_psnr_figure(stage / "psnr_per_chunk.png", list(range(len(chunk_psnr))),
                                       chunk_psnr, overall)
    print(f"overall PSNR {overall:.3f} dB over {manifest.T} frames -> {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, model: bool = True) -> None:
    if model:
        p.add_argument("--arch", default="espcn", choices=bb.ARCH_IDS)
        p.add_argument("--scale", type=int, default=2, choices=bb.SCALES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-timing", action="store_true",
                   help="write 0 for elapsed times so reports are byte-reproducible")
    p.add_argument("--no-figures", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emt", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--threads", type=int, default=1,
                        help="BLAS threads (default 1, bit-deterministic)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write procedural desk-scale data")
    p.add_argument("kind", choices=("video", "metaset", "images"))
    p.add_argument("--out")
    p.add_argument("--frames", type=int, default=90, help="frames (video), frames per task, or image count")
    p.add_argument("--chunk-frames", type=int, default=10)
    p.add_argument("--iframe-interval", type=int)
    p.add_argument("--tasks", type=int, default=15)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--format", choices=("png", "ppm"), default="png")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="build a chunk manifest from a frame directory")
    p.add_argument("frames")
    p.add_argument("--fps", type=float, required=True)
    p.add_argument("--scale", type=int, default=2, choices=bb.SCALES)
    p.add_argument("--iframes", help="sidecar file with one I-frame index per line")
    p.add_argument("--iframe-interval", type=int, default=vd.DEFAULT_IFRAME_INTERVAL)
    p.add_argument("--chunk-seconds", type=float, default=5.0)
    p.add_argument("--iframes-per-group", type=int)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("pretrain", help="supervised pretraining on an image directory")
    _common(p)
    p.add_argument("--images", required=True)
    p.add_argument("--init", help="start from this model file instead of a random init")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patch-size", type=int, default=144)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("meta-train", help="meta-learned initialization")
    _common(p)
    p.add_argument("--tasks", required=True, help="directory with one sub-directory of frames per task")
    p.add_argument("--init", help="pretrained model file (random init when omitted)")
    p.add_argument("--n-tasks", type=int, default=15, help="tasks sampled per outer iteration")
    p.add_argument("--frames-per-task", type=int, default=50)
    p.add_argument("--patch-size", type=int, default=144)
    p.add_argument("--batch-per-task", type=int, default=16)
    p.add_argument("--inner-lr", type=float, default=0.5e-5)
    p.add_argument("--outer-lr", type=float, default=1e-3)
    p.add_argument("--inner-steps", type=int, default=2)
    p.add_argument("--outer-iters", type=int, default=1000)
    p.add_argument("--outer-optimizer", choices=("sgd", "adam"), default="sgd")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("adapt", help="sequential gradient-masked adaptation over chunks")
    _common(p, model=False)
    p.add_argument("--manifest", required=True)
    p.add_argument("--meta", help="meta-learned model file")
    p.add_argument("--pretrained", help="pretrained model file (for --init pretrained)")
    p.add_argument("--init", choices=("meta", "pretrained"), default="meta")
    p.add_argument("--preset", choices=("S", "M", "L", "custom"), default="S")
    p.add_argument("--p1", type=float)
    p.add_argument("--p2", type=float)
    p.add_argument("--epochs", type=float)
    p.add_argument("--steps", type=int, help="fixed fine-tuning steps per chunk (overrides epochs)")
    p.add_argument("--r", type=float, default=20.0)
    p.add_argument("--probe-steps", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--patch-size", type=int, default=144)
    p.add_argument("--no-cps", action="store_true", help="train on all grid patches instead")
    p.add_argument("--chunks", type=int, help="adapt only the first N chunks")
    p.add_argument("--chunk-seconds", type=float, help="re-chunk the manifest before adapting")
    p.add_argument("--iframes-per-group", type=int)
    p.add_argument("--dump-maps", action="store_true", help="write I-frame PSNR maps")
    p.add_argument("--out")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("apply", help="reconstruct chunk models and super-resolve the video")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True, help="root model the deltas were trained from")
    p.add_argument("--deltas", help="directory of .srd files (omit for an empty chain)")
    p.add_argument("--lr-dir", help="LR frames to super-resolve (default: bicubic of the manifest frames)")
    p.add_argument("--format", choices=("png", "ppm"), default="png")
    p.add_argument("--out")
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("evaluate", help="PSNR tables of SR frames against HR frames")
    p.add_argument("--manifest", required=True)
    p.add_argument("--sr", required=True, help="directory of SR frames (or an apply output dir)")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        limits = contextlib.nullcontext()
    else:
        limits = threadpool_limits(limits=args.threads)
    try:
        with limits:
            return args.func(args)
    except (CliError, vd.DatasetError, codec.CodecError, meta.MetaError, ad.AdaptError,
            ValueError, OSError) as exc:
        print(f"emt {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
