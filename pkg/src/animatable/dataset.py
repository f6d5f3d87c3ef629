"""On-disk dataset layout, the text manifest and loading into tensors.

Layout under a dataset root::

    manifest.txt
    skeleton.txt
    <video>/rgb/<frame:05d>.png       8-bit RGB
    <video>/mask/<frame:05d>.png      8-bit grey, object = 255
    <video>/flow/<frame:05d>.flo      float map, 2 channels (pixels, to the flow target frame)
    <video>/feat/<frame:05d>.feat     float map, 16 channels
    <video>/gt_mask/<frame:05d>.png   clean silhouettes (synthetic data only)
    <video>/gt_mesh/<frame:05d>.obj   ground-truth posed surface (synthetic data only)
    <video>/angles.txt                ground-truth joint angles (synthetic data only)

The flow target of frame ``t`` is ``t + 1``, or ``t - 1`` for the last frame.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .render import Camera, read_float_map, read_png
from .rigid import SE3
from .skeleton import SkeletonTopology

MANIFEST_VERSION = 1
CHANNELS = ("rgb", "mask", "flow", "feat")
EXTENSIONS = {"rgb": "png", "mask": "png", "flow": "flo", "feat": "feat", "gt_mask": "png",
              "gt_mesh": "obj"}


class DatasetError(ValueError):
    pass


def flow_target(t: int, num_frames: int) -> int:
    if num_frames < 2:
        return t
    return t + 1 if t + 1 < num_frames else t - 1


def frame_path(root, video: str, channel: str, t: int) -> Path:
    return Path(root) / video / channel / f"{t:05d}.{EXTENSIONS[channel]}"


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split()]


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


@dataclass
class VideoEntry:
    name: str
    instance: int
    num_frames: int
    intrinsics: tuple[float, float, float, float]  # fx, fy, cx, cy
    extrinsics: list[list[float]]  # per frame, 12 row-major values of [R | t], world -> camera
    root_poses: list[list[float]]  # per frame, 12 values, object -> world initialisation

    def camera(self, t: int, width: int, height: int) -> Camera:
        fx, fy, cx, cy = self.intrinsics
        M = torch.tensor(self.extrinsics[t], dtype=torch.float64).reshape(3, 4)
        return Camera(fx, fy, cx, cy, width, height, SE3(M[:, :3], M[:, 3]))

    def root_matrices(self) -> torch.Tensor:
        M = torch.tensor(self.root_poses, dtype=torch.float64).reshape(-1, 3, 4)
        bottom = torch.tensor([0.0, 0.0, 0.0, 1.0], dtype=torch.float64).expand(len(M), 1, 4)
        return torch.cat((M, bottom), 1)


@dataclass
class DatasetManifest:
    width: int
    height: int
    videos: list[VideoEntry] = field(default_factory=list)
    skeleton: str = "skeleton.txt"
    extra: dict = field(default_factory=dict)  # free-form generator metadata

    @property
    def frame_counts(self) -> list[int]:
        return [v.num_frames for v in self.videos]

    def dumps(self) -> str:
        lines = [
            f"version = {MANIFEST_VERSION}",
            f"skeleton = {self.skeleton}",
            f"width = {self.width}",
            f"height = {self.height}",
            f"num_videos = {len(self.videos)}",
        ]
        for k in sorted(self.extra):
            lines.append(f"meta.{k} = {self.extra[k]}")
        for i, v in enumerate(self.videos):
            p = f"video.{i}"
            lines += [
                f"{p}.name = {v.name}",
                f"{p}.instance = {v.instance}",
                f"{p}.frames = {v.num_frames}",
                f"{p}.intrinsics = {_fmt(v.intrinsics)}",
            ]
            for t in range(v.num_frames):
                lines.append(f"{p}.extrinsic.{t:05d} = {_fmt(v.extrinsics[t])}")
            for t in range(v.num_frames):
                lines.append(f"{p}.root.{t:05d} = {_fmt(v.root_poses[t])}")
        return "\n".join(lines) + "\n"

    def save(self, root) -> Path:
        path = Path(root) / "manifest.txt"
        path.write_text(self.dumps())
        return path

    @classmethod
    def loads(cls, text: str) -> "DatasetManifest":
        kv = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DatasetError(f"manifest line {lineno}: expected 'key = value'")
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
        try:
            if int(kv["version"]) != MANIFEST_VERSION:
                raise DatasetError(f"unsupported manifest version {kv['version']}")
            out = cls(int(kv["width"]), int(kv["height"]), [], kv.get("skeleton", "skeleton.txt"))
            out.extra = {k[5:]: v for k, v in kv.items() if k.startswith("meta.")}
            for i in range(int(kv["num_videos"])):
                p = f"video.{i}"
                n = int(kv[f"{p}.frames"])
                out.videos.append(VideoEntry(
                    kv[f"{p}.name"], int(kv[f"{p}.instance"]), n,
                    tuple(_floats(kv[f"{p}.intrinsics"])),
                    [_floats(kv[f"{p}.extrinsic.{t:05d}"]) for t in range(n)],
                    [_floats(kv[f"{p}.root.{t:05d}"]) for t in range(n)],
                ))
        except KeyError as e:
            raise DatasetError(f"manifest is missing key {e.args[0]}") from None
        return out

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        path = Path(root) / "manifest.txt"
        if not path.exists():
            raise DatasetError(f"{path}: no manifest")
        return cls.loads(path.read_text())


@dataclass
class VideoData:
    entry: VideoEntry
    rgb: torch.Tensor  # (N, H, W, 3)
    mask: torch.Tensor  # (N, H, W)
    flow: torch.Tensor  # (N, H, W, 2)
    feat: torch.Tensor  # (N, H, W, 16)
    cameras: list[Camera]


@dataclass
class Dataset:
    root: Path
    manifest: DatasetManifest
    topology: SkeletonTopology
    videos: list[VideoData]

    @property
    def frame_counts(self) -> list[int]:
        return self.manifest.frame_counts

    def init_root_poses(self) -> torch.Tensor:
        return torch.cat([v.entry.root_matrices() for v in self.videos], 0)

    def gt_mesh_path(self, video: int, t: int) -> Path:
        return frame_path(self.root, self.videos[video].entry.name, "gt_mesh", t)

    def gt_mask(self, video: int, t: int) -> np.ndarray:
        path = frame_path(self.root, self.videos[video].entry.name, "gt_mask", t)
        if not path.exists():
            raise DatasetError(f"{path}: no ground-truth mask")
        return read_png(path) > 0.5


def _check_shape(path, arr, shape):
    if arr.shape != shape:
        raise DatasetError(f"{path}: expected shape {shape}, got {arr.shape}")


def load_dataset(root) -> Dataset:
    """Read and validate every channel; raises :class:`DatasetError` naming the
    offending file."""
    root = Path(root)
    manifest = DatasetManifest.load(root)
    skel = root / manifest.skeleton
    if not skel.exists():
        raise DatasetError(f"{skel}: skeleton file missing")
    topology = SkeletonTopology.load(skel)
    H, W = manifest.height, manifest.width
    videos = []
    for entry in manifest.videos:
        chans = {c: [] for c in CHANNELS}
        for t in range(entry.num_frames):
            for c in CHANNELS:
                path = frame_path(root, entry.name, c, t)
                if not path.exists():
                    raise DatasetError(f"{path}: missing")
                if c in ("rgb", "mask"):
                    arr = read_png(path)
                else:
                    arr = read_float_map(path)
                expect = {"rgb": (H, W, 3), "mask": (H, W), "flow": (H, W, 2), "feat": (H, W, 16)}[c]
                _check_shape(path, arr, expect)
                chans[c].append(arr)
        stack = {c: torch.from_numpy(np.stack(chans[c])) for c in CHANNELS}
        cams = [entry.camera(t, W, H) for t in range(entry.num_frames)]
        videos.append(VideoData(entry, stack["rgb"], stack["mask"], stack["flow"], stack["feat"], cams))
    return Dataset(root, manifest, topology, videos)
