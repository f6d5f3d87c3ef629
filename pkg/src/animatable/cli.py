"""Command-line entry point: ``animatable <command> [options]``."""
from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch


class CommandError(Exception):
    pass


def _ckpt_path(path) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "final.bin"
    if not p.exists():
        raise CommandError(f"{p}: checkpoint not found")
    return p


def _load(path):
    from .train import load_model

    model, meta = load_model(_ckpt_path(path))
    model.eval()
    return model, meta


@contextmanager
def _atomic_file(path):
    """Yield a temporary path that replaces ``path`` only on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=path.suffix)
    os.close(fd)
    try:
        yield Path(tmp)
        Path(tmp).replace(path)
    finally:
        if Path(tmp).exists():
            Path(tmp).unlink()


@contextmanager
def _fresh_dir(path):
    """Remove the directory on failure if this command created it."""
    path = Path(path)
    created = not path.exists()
    try:
        yield path
    except BaseException:
        if created and path.exists():
            shutil.rmtree(path, ignore_errors=True)
        raise


def _save_mesh(mesh, path):
    path = Path(path)
    with _atomic_file(path) as tmp:
        if path.suffix.lower() == ".ply":
            mesh.save_ply(tmp)
        elif path.suffix.lower() == ".obj":
            mesh.save_obj(tmp)
        else:
            raise CommandError(f"{path}: mesh output must end in .obj or .ply")


def _skin_colors(model, mesh, video: int):
    """Per-vertex colours from the dominant skinning slot."""
    from .warp import skin_forward
    from .mesh import frame_spec

    if mesh.is_empty:
        return None
    spec = frame_spec(model, video, 0)
    with torch.no_grad():
        x = torch.as_tensor(mesh.vertices, dtype=torch.float32)
        _, w = skin_forward(x, spec, model, return_weights=True)
    k = w.shape[-1]
    palette = np.stack([np.array([np.sin(a), np.sin(a + 2.1), np.sin(a + 4.2)]) * 0.4 + 0.5
                        for a in np.linspace(0, 2 * np.pi, k, endpoint=False)])
    return w.double().numpy() @ palette


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    from .synth import SynthSpec, generate_synthetic

    spec = SynthSpec.load(args.spec) if args.spec else SynthSpec()
    if args.corruption is not None:
        spec.corruption = args.corruption
        spec.__post_init__()
    if args.seed is not None:
        spec.seed = args.seed
    with _fresh_dir(args.out):
        manifest = generate_synthetic(spec, args.out)
    print(f"wrote {len(manifest.videos)} videos to {args.out}")


def cmd_train(args):
    from .dataset import load_dataset
    from .train import TrainConfig, train

    base = TrainConfig.desk() if args.desk else TrainConfig()
    config = TrainConfig.load(args.config, base) if args.config else base
    if args.iterations is not None:
        config.total_iterations = args.iterations
    if args.seed is not None:
        config.seed = args.seed
    dataset = load_dataset(args.data)
    with _fresh_dir(args.out):
        train(dataset, config, args.out)
    print(f"checkpoint written to {Path(args.out) / 'final.bin'}")


def cmd_extract(args):
    from .mesh import extract_canonical, reconstruct_frame

    model, _ = _load(args.ckpt)
    if args.frame is None:
        mesh = extract_canonical(model, model.codes.beta[_video(model, args.video)].detach(),
                                 args.resolution)
    else:
        mesh = reconstruct_frame(model, _video(model, args.video), args.frame, args.resolution)
    if args.skin_colors:
        mesh.colors = _skin_colors(model, mesh, args.video)
    _save_mesh(mesh, args.out)
    print(f"{len(mesh.vertices)} vertices, {len(mesh.faces)} faces -> {args.out}")


def cmd_animate(args):
    from .mesh import extract_canonical, reconstruct_frame

    model, _ = _load(args.ckpt)
    v = _video(model, args.video)
    canonical = extract_canonical(model, model.codes.beta[v].detach(), args.resolution)
    n = model.codes.frame_counts[v]
    with _fresh_dir(args.out) as out:
        out.mkdir(parents=True, exist_ok=True)
        for t in range(n):
            reconstruct_frame(model, v, t, canonical=canonical).save_obj(out / f"{t:05d}.obj")
    print(f"{n} meshes -> {args.out}")


def cmd_transfer(args):
    from .mesh import motion_transfer

    model, _ = _load(args.ckpt)
    _video(model, args.source)
    _video(model, args.target)
    if not 0 <= args.frame < model.codes.frame_counts[args.source]:
        raise CommandError(f"frame {args.frame} outside source video")
    mesh = motion_transfer(model, args.source, args.target, args.frame, args.resolution)
    _save_mesh(mesh, args.out)
    print(f"transferred frame {args.frame} of video {args.source} onto video {args.target} -> {args.out}")


def cmd_eval(args):
    from .dataset import load_dataset
    from .evaluate import evaluate_video, write_metrics_csv

    model, _ = _load(args.ckpt)
    dataset = load_dataset(args.data)
    v = _video(model, args.video)
    frames = None
    if args.frames:
        frames = [int(f) for f in args.frames.split(",")]
    rows = evaluate_video(model, dataset, v, frames, args.resolution, align_scale=not args.no_align)
    if args.out:
        with _atomic_file(args.out) as tmp:
            write_metrics_csv(tmp, rows)
    else:
        write_metrics_csv(sys.stdout, rows)


def cmd_render(args):
    from .dataset import load_dataset
    from .render import ModelScene, SamplingConfig, render_image, write_png

    model, _ = _load(args.ckpt)
    dataset = load_dataset(args.data)
    v = _video(model, args.video)
    if not 0 <= args.frame < model.codes.frame_counts[v]:
        raise CommandError(f"frame {args.frame} outside video {v}")
    beta_table = None
    if args.beta_from is not None:
        src = _video(model, args.beta_from)
        beta_table = model.codes.beta.detach().clone()
        beta_table[v] = beta_table[src]
    scene = ModelScene(model, beta_table, object_radius=args.object_radius)
    sampling = SamplingConfig(object_radius=args.object_radius, object_samples=args.samples,
                              background_samples=16)
    img = render_image(scene, dataset.videos[v].cameras[args.frame], v, args.frame, sampling,
                       mode=args.mode)
    data = img["rgb"] if args.channel == "rgb" else img["silhouette"]
    with _atomic_file(args.out) as tmp:
        write_png(tmp, data)
    print(f"rendered video {v} frame {args.frame} -> {args.out}")


def _video(model, v: int) -> int:
    if not 0 <= v < model.codes.num_videos:
        raise CommandError(f"unknown video id {v}")
    return v


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="animatable", description="Category-level articulated "
                                "shape reconstruction from multiple videos.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic multi-video dataset")
    s.add_argument("--spec", help="generator config (key = value lines); defaults when omitted")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--corruption", type=float, help="override the mask corruption rate in [0, 1]")
    s.add_argument("--seed", type=int, help="override the generator seed")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="optimise a category model on a dataset")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--config", help="training config (key = value lines)")
    s.add_argument("--out", required=True, help="output directory for checkpoints and losses.csv")
    s.add_argument("--desk", action="store_true", help="start from the scaled-down desk defaults")
    s.add_argument("--iterations", type=int, help="override total_iterations")
    s.add_argument("--seed", type=int, help="override the training seed")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("extract", help="extract the canonical (or a posed) mesh of a video")
    s.add_argument("--ckpt", required=True, help="checkpoint file or training output directory")
    s.add_argument("--video", type=int, default=0, help="video id")
    s.add_argument("--frame", type=int, help="pose the mesh at this frame (canonical when omitted)")
    s.add_argument("--resolution", type=int, default=64, help="marching cubes grid resolution")
    s.add_argument("--skin-colors", action="store_true", help="colour vertices by skinning weights")
    s.add_argument("--out", required=True, help="output mesh (.obj or .ply)")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("animate", help="write the posed mesh of every frame of a video")
    s.add_argument("--ckpt", required=True, help="checkpoint file or training output directory")
    s.add_argument("--video", type=int, default=0, help="video id")
    s.add_argument("--resolution", type=int, default=64, help="marching cubes grid resolution")
    s.add_argument("--out", required=True, help="output directory of OBJ files")
    s.set_defaults(func=cmd_animate)

    s = sub.add_parser("transfer", help="pose one video's shape with another video's motion")
    s.add_argument("--ckpt", required=True, help="checkpoint file or training output directory")
    s.add_argument("--source", type=int, required=True, help="video supplying the articulation")
    s.add_argument("--target", type=int, required=True, help="video supplying the morphology")
    s.add_argument("--frame", type=int, required=True, help="source frame index")
    s.add_argument("--resolution", type=int, default=64, help="marching cubes grid resolution")
    s.add_argument("--out", required=True, help="output mesh (.obj or .ply)")
    s.set_defaults(func=cmd_transfer)

    s = sub.add_parser("eval", help="Chamfer / F-score against ground-truth meshes (CSV)")
    s.add_argument("--ckpt", required=True, help="checkpoint file or training output directory")
    s.add_argument("--data", required=True, help="dataset directory with gt_mesh/")
    s.add_argument("--video", type=int, default=0, help="video id")
    s.add_argument("--frames", help="comma-separated frame list (all frames when omitted)")
    s.add_argument("--resolution", type=int, default=64, help="marching cubes grid resolution")
    s.add_argument("--no-align", action="store_true", help="skip median-depth scale alignment")
    s.add_argument("--out", help="CSV path (stdout when omitted)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("render", help="render one frame to PNG")
    s.add_argument("--ckpt", required=True, help="checkpoint file or training output directory")
    s.add_argument("--data", required=True, help="dataset directory (for cameras)")
    s.add_argument("--video", type=int, default=0, help="video id")
    s.add_argument("--frame", type=int, default=0, help="frame index")
    s.add_argument("--mode", choices=("composite", "object-only", "background-only"),
                   default="composite", help="which densities to composite")
    s.add_argument("--channel", choices=("rgb", "silhouette"), default="rgb", help="image to write")
    s.add_argument("--beta-from", type=int, help="render with this video's morphology code")
    s.add_argument("--samples", type=int, default=128, help="object samples per ray")
    s.add_argument("--object-radius", type=float, default=1.2, help="object bounding sphere radius")
    s.add_argument("--out", required=True, help="output PNG")
    s.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 130
    except Exception as e:  # noqa: BLE001 - every failure becomes a one-line diagnostic
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1
    return 0


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
