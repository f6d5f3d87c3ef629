"""Pinhole cameras, ray sampling and composite object + background volume rendering.

A *scene* is any object exposing

``object_samples(x_world, rays, need_flow) -> dict(sigma, rgb, feat, x_next)``
    object density/colour/feature at world points (R, S, 3) for each ray's frame,
    plus the world position of the same material point at the ray's flow target
    frame (``x_next``, only when ``need_flow``).

``background_samples(x_world, dirs, rays) -> (sigma, rgb)``

Both the learned model (:class:`ModelScene`) and the synthetic ground truth
implement this protocol so they share one renderer.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .fields import FEAT_DIM
from .rigid import SE3
from .skinning import NumericError
from .warp import WarpSpec, warp_backward, warp_forward


class CameraError(ValueError):
    pass


@dataclass
class Camera:
    """Pinhole camera; ``extrinsic`` maps world to camera (x right, y down, z forward)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: SE3

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise CameraError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise CameraError("principal point outside the image")

    @property
    def center(self) -> torch.Tensor:
        return self.extrinsic.inverse().translation

    def pixel_rays(self, pixels: torch.Tensor):
        """World-space origins and unit directions through pixel centres ``(u, v)``."""
        dtype = self.extrinsic.rotation.dtype
        uv = pixels.to(dtype) + 0.5
        d_cam = torch.stack(((uv[..., 0] - self.cx) / self.fx, (uv[..., 1] - self.cy) / self.fy,
                             torch.ones_like(uv[..., 0])), dim=-1)
        R_wc = self.extrinsic.rotation.transpose(-1, -2)
        d = (R_wc @ d_cam[..., None])[..., 0]
        d = d / d.norm(dim=-1, keepdim=True)
        o = self.center.expand(d.shape)
        return o, d

    def project(self, x_world: torch.Tensor) -> torch.Tensor:
        return project(x_world, self.extrinsic.rotation, self.extrinsic.translation,
                       torch.tensor([self.fx, self.fy, self.cx, self.cy], dtype=x_world.dtype))


def project(x_world, R, t, K):
    """Project world points with per-ray extrinsics ``R`` (..., 3, 3), ``t`` (..., 3)
    and intrinsics ``K = (fx, fy, cx, cy)``; returns continuous pixel coordinates
    (pixel centres sit at integer + 0.5)."""
    xc = (R @ x_world[..., None])[..., 0] + t
    z = torch.clamp(xc[..., 2:3], min=1e-6)
    return torch.cat((K[..., 0:1] * xc[..., 0:1] / z + K[..., 2:3],
                      K[..., 1:2] * xc[..., 1:2] / z + K[..., 3:4]), dim=-1)


@dataclass
class RayBatch:
    """Rays plus the bookkeeping needed for flow rendering. Per-ray tensors have
    leading shape (R,)."""

    origins: torch.Tensor
    dirs: torch.Tensor
    pixels: torch.Tensor  # integer (u, v)
    video: torch.Tensor
    frame: torch.Tensor
    frame_next: torch.Tensor
    K: torch.Tensor  # (R, 4) intrinsics
    R_next: torch.Tensor  # (R, 3, 3) world->camera at frame_next
    t_next: torch.Tensor  # (R, 3)

    def __len__(self):
        return self.origins.shape[0]

    def subset(self, idx) -> "RayBatch":
        return RayBatch(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


def make_rays(camera: Camera, pixels: torch.Tensor, video: int, frame: int,
              camera_next: Camera | None = None, frame_next: int | None = None, dtype=None) -> RayBatch:
    o, d = camera.pixel_rays(pixels)
    dtype = dtype or o.dtype
    o, d = o.to(dtype), d.to(dtype)
    n = o.shape[0]
    nxt = camera_next or camera
    K = torch.tensor([camera.fx, camera.fy, camera.cx, camera.cy], dtype=dtype).expand(n, 4)
    return RayBatch(
        o, d, pixels.long(),
        torch.full((n,), video, dtype=torch.long),
        torch.full((n,), frame, dtype=torch.long),
        torch.full((n,), frame if frame_next is None else frame_next, dtype=torch.long),
        K, nxt.extrinsic.rotation.to(dtype).expand(n, 3, 3), nxt.extrinsic.translation.to(dtype).expand(n, 3),
    )


def cat_rays(batches: list[RayBatch]) -> RayBatch:
    return RayBatch(*(torch.cat([getattr(b, f) for b in batches], 0) for f in RayBatch.__dataclass_fields__))


# ---------------------------------------------------------------------------
# sampling and density


@dataclass
class SamplingConfig:
    object_radius: float = 1.0
    far: float = 6.0
    object_samples: int = 64
    background_samples: int = 16
    near_min: float = 0.05


def stratified_depths(near, far, n, generator=None, jitter=True):
    """One sample per equal-width bin of [near, far]; returns (depths, bin widths)."""
    u = torch.arange(n, dtype=near.dtype)
    if jitter:
        u = u + torch.rand(near.shape + (n,), generator=generator, dtype=near.dtype)
    else:
        u = u + 0.5
    width = (far - near)[..., None] / n
    return near[..., None] + u * width, width.expand(near.shape + (n,))


def sample_along_rays(rays: RayBatch, cfg: SamplingConfig, generator=None, jitter=True):
    """Two stratified segments: a dense one through the object bounding sphere and a
    sparser one out to the far plane."""
    tc = -(rays.origins * rays.dirs).sum(-1)
    near = torch.clamp(tc - cfg.object_radius, min=cfg.near_min)
    mid = torch.maximum(tc + cfg.object_radius, near + 1e-3)
    far = torch.maximum(torch.full_like(mid, cfg.far), mid + 1e-3)
    z1, w1 = stratified_depths(near, mid, cfg.object_samples, generator, jitter)
    parts, widths = [z1], [w1]
    if cfg.background_samples > 0:
        z2, w2 = stratified_depths(mid, far, cfg.background_samples, generator, jitter)
        parts.append(z2)
        widths.append(w2)
    return torch.cat(parts, -1), torch.cat(widths, -1)


def laplace_cdf(y: torch.Tensor) -> torch.Tensor:
    e = 0.5 * torch.exp(-y.abs())
    return torch.where(y <= 0, e, 1.0 - e)


def sdf_to_density(d: torch.Tensor, sharpness) -> torch.Tensor:
    """``(1/s) * LaplaceCDF(-d/s)``: tends to 1/s inside and 0 outside."""
    s = torch.as_tensor(sharpness, dtype=d.dtype)
    if bool((s <= 0).any()):
        raise ValueError("sharpness must be positive")
    return laplace_cdf(-d / s) / s


# ---------------------------------------------------------------------------
# compositing


@dataclass
class RenderSample:
    depths: torch.Tensor
    weights: torch.Tensor
    object_sigma: torch.Tensor
    background_sigma: torch.Tensor
    rgb: torch.Tensor
    silhouette: torch.Tensor
    background_mass: torch.Tensor
    escaped: torch.Tensor
    flow: torch.Tensor | None = None
    feature: torch.Tensor | None = None
    extras: dict = field(default_factory=dict)


MODES = ("composite", "object-only", "background-only")


def composite(depths, widths, sigma_o, sigma_b, rgb_o, rgb_b, feat=None, flow_o=None,
              flow_b=None) -> RenderSample:
    """Sum densities per sample, mix attributes density-proportionally and
    alpha-composite front to back."""
    sigma = sigma_o + sigma_b
    frac_o = sigma_o / torch.clamp(sigma, min=1e-10)
    alpha = 1.0 - torch.exp(-sigma * widths)
    trans = torch.cumprod(torch.cat((torch.ones_like(alpha[..., :1]), 1.0 - alpha + 1e-10), -1), -1)
    weights = alpha * trans[..., :-1]
    w_o = weights * frac_o
    w_b = weights - w_o
    rgb = (w_o[..., None] * rgb_o).sum(-2) + (w_b[..., None] * rgb_b).sum(-2)
    out = RenderSample(
        depths, weights, sigma_o, sigma_b, rgb,
        w_o.sum(-1), w_b.sum(-1), 1.0 - weights.sum(-1),
    )
    if feat is not None:
        out.feature = (w_o[..., None] * feat).sum(-2)
    if flow_o is not None:
        out.flow = (w_o[..., None] * flow_o).sum(-2) + (w_b[..., None] * flow_b).sum(-2)
    return out


def render_rays(scene, rays: RayBatch, sampling: SamplingConfig, mode: str = "composite",
                need_flow: bool = True, generator=None, jitter=True) -> RenderSample:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    depths, widths = sample_along_rays(rays, sampling, generator, jitter)
    x = rays.origins[:, None, :] + depths[..., None] * rays.dirs[:, None, :]
    R, S = depths.shape
    dtype = depths.dtype
    pix = rays.pixels.to(dtype) + 0.5
    same = rays.frame_next == rays.frame
    need_flow = need_flow and not bool(same.all())

    if mode == "background-only":
        obj = {"sigma": torch.zeros(R, S, dtype=dtype), "rgb": torch.zeros(R, S, 3, dtype=dtype),
               "feat": torch.zeros(R, S, FEAT_DIM, dtype=dtype), "x_next": x}
    else:
        obj = scene.object_samples(x, rays, need_flow)
    if mode == "object-only":
        sig_b, rgb_b = torch.zeros(R, S, dtype=dtype), torch.zeros(R, S, 3, dtype=dtype)
    else:
        sig_b, rgb_b = scene.background_samples(x, rays.dirs[:, None, :].expand_as(x), rays)

    for name, val in (("object density", obj["sigma"]), ("object colour", obj["rgb"]),
                      ("background density", sig_b)):
        bad = ~torch.isfinite(val)
        if bool(bad.any()):
            ray_id = int(bad.reshape(R, -1).any(-1).nonzero()[0, 0])
            raise NumericError(f"non-finite {name} on ray {ray_id}")

    flow_o = flow_b = None
    if need_flow:
        K = rays.K[:, None, :]
        Rn, tn = rays.R_next[:, None], rays.t_next[:, None]
        flow_o = project(obj["x_next"], Rn, tn, K) - pix[:, None, :]
        flow_b = project(x, Rn, tn, K) - pix[:, None, :]
    out = composite(depths, widths, obj["sigma"], sig_b, obj["rgb"], rgb_b, obj.get("feat"),
                    flow_o, flow_b)
    if out.flow is None:
        out.flow = torch.zeros(R, 2, dtype=dtype)
    else:
        out.flow = torch.where(same[:, None], torch.zeros_like(out.flow), out.flow)
    out.extras = {k: v for k, v in obj.items() if k not in ("sigma", "rgb", "feat", "x_next")}
    return out


def render_flow(scene, camera_t: Camera, camera_next: Camera, pixels, video, t, t_next,
                sampling: SamplingConfig, **kw) -> torch.Tensor:
    rays = make_rays(camera_t, pixels, video, t, camera_next, t_next)
    return render_rays(scene, rays, sampling, need_flow=True, **kw).flow


def render_image(scene, camera: Camera, video: int, frame: int, sampling: SamplingConfig,
                 camera_next: Camera | None = None, frame_next: int | None = None,
                 mode="composite", chunk: int = 2048, need_flow: bool = False) -> dict:
    """Render every pixel of one frame (no jitter, no autograd)."""
    H, W = camera.height, camera.width
    vv, uu = torch.meshgrid(torch.arange(H), torch.arange(W), indexing="ij")
    pixels = torch.stack((uu.reshape(-1), vv.reshape(-1)), -1)
    keys = ("rgb", "silhouette", "flow", "feature")
    acc = {k: [] for k in keys}
    with torch.no_grad():
        for s in range(0, pixels.shape[0], chunk):
            rays = make_rays(camera, pixels[s : s + chunk], video, frame, camera_next, frame_next,
                             getattr(scene, "dtype", None))
            out = render_rays(scene, rays, sampling, mode, need_flow=need_flow, jitter=False)
            for k in keys:
                v = getattr(out, k)
                if v is None:
                    v = torch.zeros(len(rays), FEAT_DIM, dtype=out.rgb.dtype)
                acc[k].append(v)
    result = {}
    for k in keys:
        v = torch.cat(acc[k], 0)
        result[k] = v.reshape(H, W, *v.shape[1:]).numpy()
    return result


# ---------------------------------------------------------------------------
# the learned model as a scene


class ModelScene:
    """Adapter exposing a :class:`~animatable.model.CategoryModel` to the renderer.

    ``beta_table`` optionally replaces the per-video morphology codes (used by
    code swapping and motion transfer).
    """

    def __init__(self, model, beta_table: torch.Tensor | None = None, use_deform: bool = True,
                 posed_space_weights: bool = True, object_radius: float = 1.0):
        self.model = model
        self.object_radius = object_radius
        self.beta_table = beta_table
        self.use_deform = use_deform
        self.posed_space_weights = posed_space_weights

    @property
    def dtype(self):
        return self.model.codes.beta.dtype

    def codes(self, video, frame):
        c = self.model.frame_codes(video, frame)
        if self.beta_table is not None:
            c["beta"] = self.beta_table[video]
        return {k: v[:, None, :] for k, v in c.items()}

    def object_samples(self, x_world, rays: RayBatch, need_flow: bool):
        m = self.model
        c = self.codes(rays.video, rays.frame)
        root = m.root_pose(rays.video, rays.frame)
        root = SE3(root.rotation[:, None], root.translation[:, None])
        x_obj = root.inverse().apply(x_world)
        rig = m.rig_for(rays.video, rays.frame, self.beta_table).map(lambda t: t[:, None])
        spec = WarpSpec(c["beta"], c["theta"], c["omega_d"], "backward", rig)
        x_can = warp_backward(x_obj, spec, m, self.use_deform, self.posed_space_weights)
        d, rgb = m.object_field(x_can, c["beta"], c["omega_a"])
        sigma = sdf_to_density(d, m.sharpness)
        sigma = torch.where(x_obj.norm(dim=-1) > self.object_radius, torch.zeros_like(sigma), sigma)
        out = {"sigma": sigma, "rgb": rgb, "feat": m.feature_field(x_can), "x_canonical": x_can,
               "sdf": d}
        if need_flow:
            cn = self.codes(rays.video, rays.frame_next)
            rig_n = m.rig_for(rays.video, rays.frame_next, self.beta_table).map(lambda t: t[:, None])
            fspec = WarpSpec(c["beta"], cn["theta"], cn["omega_d"], "forward", rig_n)
            x_nobj = warp_forward(x_can, fspec, m, self.use_deform)
            root_n = m.root_pose(rays.video, rays.frame_next)
            root_n = SE3(root_n.rotation[:, None], root_n.translation[:, None])
            out["x_next"] = root_n.apply(x_nobj)
        return out

    def background_samples(self, x_world, dirs, rays: RayBatch):
        gamma = self.model.codes.gamma[rays.video][:, None, :]
        return self.model.background(x_world, dirs, gamma)


# ---------------------------------------------------------------------------
# image / float-map io


FLOW_MAGIC = struct.pack("<f", 202021.25)
FEAT_MAGIC = b"FEAT"


def write_png(path, image: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float32) / 255.0


def write_float_map(path, data: np.ndarray, magic: bytes = FLOW_MAGIC) -> None:
    """12-byte header (4-byte magic, uint32 width, uint32 height) then row-major
    little-endian float32 values, channels interleaved."""
    data = np.asarray(data, dtype="<f4")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<II", w, h))
        f.write(np.ascontiguousarray(data).tobytes())


def read_float_map(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    w, h = struct.unpack("<II", raw[4:12])
    vals = np.frombuffer(raw, dtype="<f4", offset=12)
    if vals.size % (w * h):
        raise ValueError(f"{path}: payload does not match {w}x{h} header")
    return vals.reshape(h, w, vals.size // (w * h)).astype(np.float32)
