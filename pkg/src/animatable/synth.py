"""Procedural articulated creatures rendered into the dataset layout.

Each creature is a union of capsules hung on a six-joint skeleton. Instances differ
by per-joint bone-length multipliers; videos differ by camera orbit, motion phase
and background tint. Ground-truth canonical coordinates (used for the feature
channel) are defined per primitive by undoing its articulation and stretch.
"""
from __future__ import annotations

import logging
import shutil
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .dataset import DatasetManifest, VideoEntry, flow_target, frame_path
from .fields import FEAT_DIM, positional_embed
from .mesh import marching_cubes
from .render import (FEAT_MAGIC, FLOW_MAGIC, Camera, SamplingConfig, read_png, render_image,
                     sdf_to_density, write_float_map, write_png)
from .rigid import SE3, axis_angle_to_matrix
from .skeleton import SkeletonTopology, joint_frames

log = logging.getLogger(__name__)

CREATURE = SkeletonTopology(
    [-1, 0, 1, 0, 1, 3],
    ["root", "shoulder", "head", "hip", "front_foot", "rear_foot"],
    [[0.0, 0.0, 0.0], [0.35, 0.0, 0.0], [0.6, 0.2, 0.0], [-0.35, 0.0, 0.0],
     [0.35, -0.45, 0.0], [-0.35, -0.45, 0.0]],
)

# (joint a, joint b, radius, joint whose frame carries the primitive)
PRIMITIVES = (
    (0, 1, 0.14, 0),
    (0, 3, 0.14, 0),
    (1, 2, 0.06, 1),
    (2, 2, 0.12, 2),
    (1, 4, 0.06, 1),
    (3, 5, 0.06, 3),
)

BACKGROUND_RADIUS = 3.0
BACKGROUND_DENSITY = 50.0


@dataclass
class SynthSpec:
    instances: int = 2
    videos_per_instance: int = 2
    frames: int = 48
    width: int = 64
    height: int = 64
    focal: float = 68.6
    multipliers: list[list[float]] = field(default_factory=list)  # per instance, per joint
    amplitude: float = 0.5  # radians of the swing joints
    cycles: float = 1.5  # motion periods per video
    orbit_radius: float = 2.3
    orbit_elevation: float = 0.35
    orbit_sweep: float = 2.0  # radians of azimuth covered by one video
    corruption: float = 0.0
    seed: int = 0
    gt_samples: int = 128
    gt_sharpness: float = 0.01
    mesh_resolution: int = 64

    def __post_init__(self):
        if not self.multipliers:
            base = [[1.0] * 6, [1.0, 1.25, 1.3, 1.2, 1.35, 1.35]]
            self.multipliers = [base[i % 2] for i in range(self.instances)]
        if len(self.multipliers) != self.instances:
            raise ValueError("need one multiplier row per instance")
        for row in self.multipliers:
            if len(row) != CREATURE.num_joints or min(row) <= 0:
                raise ValueError("bone multipliers must be positive, one per joint")
        if not 0.0 <= self.corruption <= 1.0:
            raise ValueError("corruption rate must lie in [0, 1]")
        if self.instances < 1 or self.videos_per_instance < 1 or self.frames < 1:
            raise ValueError("instance, video and frame counts must be positive")

    @classmethod
    def from_text(cls, text: str) -> "SynthSpec":
        """``key = value`` lines; ``multipliers.<i> = m0 m1 ...`` per instance."""
        kw, mult = {}, {}
        types = {f.name: f.type for f in fields(cls)}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            k, v = (s.strip() for s in line.split("=", 1))
            if k.startswith("multipliers."):
                mult[int(k.split(".", 1)[1])] = [float(x) for x in v.split()]
            elif k in types and k != "multipliers":
                kw[k] = int(v) if types[k] == "int" else float(v)
            else:
                raise ValueError(f"line {lineno}: unknown key {k!r}")
        if mult:
            kw["multipliers"] = [mult[i] for i in sorted(mult)]
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "SynthSpec":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name == "multipliers":
                lines += [f"multipliers.{i} = {' '.join(repr(float(m)) for m in row)}"
                          for i, row in enumerate(self.multipliers)]
            else:
                lines.append(f"{f.name} = {getattr(self, f.name)!r}")
        return "\n".join(lines) + "\n"


def instance_joints(multipliers) -> torch.Tensor:
    """Scale each bone offset of the template by its joint's multiplier."""
    rest = CREATURE.rest_tensor()
    out = rest.clone()
    for j in CREATURE.order:
        p = CREATURE.parent[j]
        if p >= 0:
            out[j] = out[p] + multipliers[j] * (rest[j] - rest[p])
    return out


def motion_angles(spec: SynthSpec, phase: float) -> torch.Tensor:
    """(frames, B, 3) axis-angle curves; the shoulder and hip swing about z."""
    t = torch.arange(spec.frames, dtype=torch.float64) / max(spec.frames - 1, 1)
    w = 2 * np.pi * spec.cycles * t + phase
    Q = torch.zeros(spec.frames, CREATURE.num_joints, 3, dtype=torch.float64)
    Q[:, 1, 2] = spec.amplitude * torch.sin(w)
    Q[:, 3, 2] = -spec.amplitude * torch.sin(w)
    Q[:, 2, 2] = 0.3 * spec.amplitude * torch.sin(w + 0.7)
    return Q


def look_at(eye: torch.Tensor, target=None) -> SE3:
    """World -> camera with x right, y down, z toward ``target`` (world y is up)."""
    target = torch.zeros(3, dtype=eye.dtype) if target is None else target
    f = target - eye
    f = f / f.norm()
    up = torch.tensor([0.0, 1.0, 0.0], dtype=eye.dtype)
    right = torch.linalg.cross(f, up)
    right = right / right.norm()
    down = torch.linalg.cross(f, right)
    R = torch.stack((right, down, f), 0)
    return SE3(R, -(R @ eye))


def orbit_camera(spec: SynthSpec, azimuth: float) -> Camera:
    el = spec.orbit_elevation
    r = spec.orbit_radius
    eye = torch.tensor([r * np.cos(el) * np.sin(azimuth), r * np.sin(el), r * np.cos(el) * np.cos(azimuth)],
                       dtype=torch.float64)
    return Camera(spec.focal, spec.focal, spec.width / 2, spec.height / 2, spec.width, spec.height,
                  look_at(eye))


def _feature_projection(seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed + 7919)
    return torch.randn(3 * 5 + 1, FEAT_DIM, generator=gen, dtype=torch.float64)


class SyntheticScene:
    """Ground-truth creature and background implementing the renderer's scene protocol."""

    def __init__(self, joints: list[torch.Tensor], angles: list[torch.Tensor], colors, tints,
                 sharpness: float = 0.01, seed: int = 0):
        self.joints = joints  # per video (B, 3) instance rest joints
        self.angles = angles  # per video (N, B, 3)
        self.colors = torch.as_tensor(np.asarray(colors), dtype=torch.float64)
        self.tints = torch.as_tensor(np.asarray(tints), dtype=torch.float64)
        self.sharpness = sharpness
        self.template = CREATURE.rest_tensor()
        self.projection = _feature_projection(seed)

    def primitive_transforms(self, video: int, t: int) -> SE3:
        """Rest-instance -> posed transform of each primitive (P,)."""
        J = self.joints[video]
        frames = joint_frames(CREATURE, J, self.angles[video][t])
        G = frames.compose(SE3.from_translation(-J))
        idx = [p[3] for p in PRIMITIVES]
        return SE3(G.rotation[idx], G.translation[idx])

    def primitive_sdf(self, x: torch.Tensor, video: int, t: int) -> torch.Tensor:
        """(..., P) signed distances to every posed primitive."""
        G = self.primitive_transforms(video, t)
        J = self.joints[video]
        a = G.apply(J[[p[0] for p in PRIMITIVES]])
        b = G.apply(J[[p[1] for p in PRIMITIVES]])
        r = torch.tensor([p[2] for p in PRIMITIVES], dtype=x.dtype)
        ab = b - a
        ab2 = torch.clamp((ab * ab).sum(-1), min=1e-12)
        # |x - a - s ab|^2 expanded into (N, 3) @ (3, P) products; no (N, P, 3) temporaries
        xa = x @ a.T
        xab = x @ ab.T - (a * ab).sum(-1)
        s = torch.clamp(xab / ab2, 0.0, 1.0)
        q = (x * x).sum(-1, keepdim=True) - 2 * xa + (a * a).sum(-1) - 2 * s * xab + s * s * ab2
        return torch.sqrt(torch.clamp(q, min=0.0)) - r

    def sdf(self, x: torch.Tensor, video: int, t: int) -> torch.Tensor:
        return self.primitive_sdf(x, video, t).min(-1).values

    def canonical_coords(self, x: torch.Tensor, video: int, t: int, k: torch.Tensor) -> torch.Tensor:
        G = self.primitive_transforms(video, t)
        rest = SE3(G.rotation[k], G.translation[k]).inverse().apply(x)
        anchor = torch.tensor([p[3] for p in PRIMITIVES])[k]
        return rest - (self.joints[video][anchor] - self.template[anchor])

    def features(self, x_can: torch.Tensor) -> torch.Tensor:
        h = torch.cat((positional_embed(x_can, 2), torch.ones_like(x_can[..., :1])), -1)
        f = h @ self.projection
        return f / f.norm(dim=-1, keepdim=True)

    def object_colour(self, x_can: torch.Tensor, video: int) -> torch.Tensor:
        base = self.colors[video]
        pattern = 0.15 * torch.sin(4.0 * x_can)
        return torch.clamp(base + pattern, 0.0, 1.0)

    def _object_one(self, x, video, t, t_next, need_flow):
        d_all = self.primitive_sdf(x, video, t)
        d, k = d_all.min(-1)
        x_can = self.canonical_coords(x, video, t, k)
        out = {
            "sigma": sdf_to_density(d, self.sharpness),
            "rgb": self.object_colour(x_can, video),
            "feat": self.features(x_can),
        }
        if need_flow:
            G0 = self.primitive_transforms(video, t)
            G1 = self.primitive_transforms(video, t_next)
            rest = SE3(G0.rotation[k], G0.translation[k]).inverse().apply(x)
            out["x_next"] = SE3(G1.rotation[k], G1.translation[k]).apply(rest)
        return out

    def object_samples(self, x_world, rays, need_flow: bool):
        R, S, _ = x_world.shape
        keys = torch.stack((rays.video, rays.frame, rays.frame_next), -1)
        uniq = torch.unique(keys, dim=0)
        out = None
        # the creature lies well inside the unit ball; skip samples beyond it
        inside = x_world.norm(dim=-1) < 1.0
        out = {
            "sigma": torch.zeros(R, S, dtype=x_world.dtype),
            "rgb": torch.zeros(R, S, 3, dtype=x_world.dtype),
            "feat": torch.zeros(R, S, FEAT_DIM, dtype=x_world.dtype),
            "x_next": x_world.clone(),
        }
        for v, t, tn in uniq.tolist():
            sel = (keys == torch.tensor([v, t, tn])).all(-1)[:, None] & inside
            part = self._object_one(x_world[sel], v, t, tn, need_flow)
            for k, val in part.items():
                out[k][sel] = val
        return out

    def background_samples(self, x_world, dirs, rays):
        r = x_world.norm(dim=-1)
        sigma = torch.where(r > BACKGROUND_RADIUS, torch.full_like(r, BACKGROUND_DENSITY),
                            torch.zeros_like(r))
        u = x_world / torch.clamp(r, min=1e-9)[..., None]
        az = torch.atan2(u[..., 0], u[..., 2])
        el = torch.asin(torch.clamp(u[..., 1], -1.0, 1.0))
        pattern = 0.5 + 0.5 * torch.sin(3.0 * az) * torch.sin(3.0 * el + 0.5)
        tint = self.tints[rays.video][:, None, :]
        rgb = tint * (0.35 + 0.45 * pattern[..., None])
        return sigma, rgb


def _corrupt(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Erode the silhouette and punch a disk-shaped hole into it."""
    out = ndimage.binary_erosion(mask, iterations=2)
    ys, xs = np.nonzero(mask)
    if len(ys):
        i = rng.integers(len(ys))
        radius = max(3, int(0.08 * max(mask.shape)))
        yy, xx = np.mgrid[: mask.shape[0], : mask.shape[1]]
        out &= (yy - ys[i]) ** 2 + (xx - xs[i]) ** 2 > radius**2
    if np.array_equal(out, mask):
        out = mask.copy()
        out[ys[0], xs[0]] = False
    return out


def _corrupted_set(rate: float, n: int, rng: np.random.Generator) -> set[int]:
    n_bad = int(round(rate * n))
    return set(rng.choice(n, size=n_bad, replace=False).tolist()) if n_bad else set()


def build_scene(spec: SynthSpec):
    """Scene, cameras and manifest entries for every video, without touching disk."""
    rng = np.random.default_rng(spec.seed)
    joints, angles, colors, tints, cameras, entries = [], [], [], [], [], []
    inst_colors = rng.uniform(0.55, 0.95, size=(spec.instances, 3))
    for i in range(spec.instances):
        J = instance_joints(spec.multipliers[i])
        for k in range(spec.videos_per_instance):
            vid = len(joints)
            phase = float(rng.uniform(0, 2 * np.pi))
            az0 = float(rng.uniform(0, 2 * np.pi))
            joints.append(J)
            angles.append(motion_angles(spec, phase))
            colors.append(inst_colors[i])
            tints.append(rng.uniform(0.3, 0.7, size=3))
            cams = [orbit_camera(spec, az0 + spec.orbit_sweep * t / max(spec.frames - 1, 1))
                    for t in range(spec.frames)]
            cameras.append(cams)
            ext = [torch.cat((c.extrinsic.rotation, c.extrinsic.translation[:, None]), 1).reshape(-1).tolist()
                   for c in cams]
            identity = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]
            entries.append(VideoEntry(f"{vid:04d}", i, spec.frames,
                                      (spec.focal, spec.focal, spec.width / 2, spec.height / 2),
                                      ext, [list(identity) for _ in range(spec.frames)]))
    scene = SyntheticScene(joints, angles, colors, tints, spec.gt_sharpness, spec.seed)
    manifest = DatasetManifest(spec.width, spec.height, entries)
    manifest.extra = {"generator": "synthetic", "seed": str(spec.seed),
                      "corruption": repr(float(spec.corruption))}
    return scene, cameras, manifest


def generate_synthetic(spec: SynthSpec, out_dir) -> DatasetManifest:
    out_dir = Path(out_dir)
    fresh = not out_dir.exists()
    try:
        return _generate(spec, out_dir)
    except Exception:
        if fresh and out_dir.exists():
            shutil.rmtree(out_dir, ignore_errors=True)
        raise


def _generate(spec: SynthSpec, out_dir: Path) -> DatasetManifest:
    out_dir.mkdir(parents=True, exist_ok=True)
    scene, cameras, manifest = build_scene(spec)
    CREATURE.save(out_dir / manifest.skeleton)
    (out_dir / "synth.cfg").write_text(spec.to_text())
    sampling = SamplingConfig(object_radius=1.0, far=6.0, object_samples=spec.gt_samples,
                              background_samples=32)
    corrupt_rng = np.random.default_rng(spec.seed + 1)
    for vid, entry in enumerate(manifest.videos):
        for c in ("rgb", "mask", "flow", "feat", "gt_mask", "gt_mesh"):
            (out_dir / entry.name / c).mkdir(parents=True, exist_ok=True)
        n = entry.num_frames
        bad = _corrupted_set(spec.corruption, n, corrupt_rng)
        for t in range(n):
            tn = flow_target(t, n)
            img = render_image(scene, cameras[vid][t], vid, t, sampling, cameras[vid][tn], tn,
                               need_flow=True)
            clean = img["silhouette"] > 0.5
            mask = _corrupt(clean, corrupt_rng) if t in bad else clean
            write_png(frame_path(out_dir, entry.name, "rgb", t), img["rgb"])
            write_png(frame_path(out_dir, entry.name, "mask", t), mask.astype(np.float64))
            write_png(frame_path(out_dir, entry.name, "gt_mask", t), clean.astype(np.float64))
            write_float_map(frame_path(out_dir, entry.name, "flow", t), img["flow"], FLOW_MAGIC)
            write_float_map(frame_path(out_dir, entry.name, "feat", t), img["feature"], FEAT_MAGIC)
            mesh = marching_cubes(lambda x: scene.sdf(x, vid, t), spec.mesh_resolution, 1.2)
            mesh.save_obj(frame_path(out_dir, entry.name, "gt_mesh", t))
        Q = scene.angles[vid].reshape(n, -1)
        (out_dir / entry.name / "angles.txt").write_text(
            "".join(f"{t:05d} " + " ".join(repr(float(q)) for q in Q[t].tolist()) + "\n" for t in range(n))
        )
        log.info("video %s written", entry.name)
    manifest.save(out_dir)
    return manifest


def read_angles(path) -> torch.Tensor:
    rows = [line.split()[1:] for line in Path(path).read_text().splitlines() if line.strip()]
    return torch.tensor([[float(v) for v in r] for r in rows], dtype=torch.float64).reshape(
        len(rows), -1, 3)


def derive_corrupted(clean_dir, out_dir, corruption: float) -> DatasetManifest:
    """Copy of a clean synthetic dataset with corrupted masks, without re-rendering.

    Only the mask channel, manifest and synth.cfg change with the corruption rate, and a
    clean generation never draws from the corruption stream, so replaying that stream over
    the stored clean silhouettes yields the bytes a fresh generation would write.
    """
    clean_dir, out_dir = Path(clean_dir), Path(out_dir)
    spec = SynthSpec.load(clean_dir / "synth.cfg")
    if spec.corruption != 0.0:
        raise ValueError(f"{clean_dir} is not a clean dataset (corruption {spec.corruption})")
    spec.corruption = float(corruption)
    spec.__post_init__()
    if out_dir.exists():
        raise FileExistsError(f"{out_dir} already exists")
    try:
        shutil.copytree(clean_dir, out_dir)
        _, _, manifest = build_scene(spec)
        (out_dir / "synth.cfg").write_text(spec.to_text())
        corrupt_rng = np.random.default_rng(spec.seed + 1)
        for entry in manifest.videos:
            bad = _corrupted_set(spec.corruption, entry.num_frames, corrupt_rng)
            for t in range(entry.num_frames):
                clean = read_png(frame_path(out_dir, entry.name, "gt_mask", t)) > 0.5
                mask = _corrupt(clean, corrupt_rng) if t in bad else clean
                write_png(frame_path(out_dir, entry.name, "mask", t), mask.astype(np.float64))
        manifest.save(out_dir)
    except Exception:
        shutil.rmtree(out_dir, ignore_errors=True)
        raise
    return manifest
