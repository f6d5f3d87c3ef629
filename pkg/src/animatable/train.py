"""Optimisation driver: AdamW, morphology-code swapping, background pretraining,
joint optimisation and the binary checkpoint container."""
from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .dataset import Dataset, flow_target
from .losses import (LossLog, LossReport, LossWeights, cycle_term, default_epsilon, eikonal_loss,
                     entropic_ot,
                     loss_schedule, reconstruction_losses, sinkhorn_divergence,
                     soft_deformation_penalty)
from .mesh import extract_canonical, sample_surface
from .model import CategoryModel, ModelConfig
from .render import ModelScene, RayBatch, SamplingConfig, render_rays
from .skeleton import SkeletonTopology
from .warp import WarpSpec

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    total_iterations: int = 36000
    rays_per_batch: int = 16384
    lr: float = 5e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    code_lr_scale: float = 10.0
    root_lr_scale: float = 0.1
    swap_start: float = 1.0
    swap_end: float = 0.05
    swap_knee: float = 0.8
    seed: int = 0
    frames_per_video: int = 2
    object_samples: int = 64
    background_samples: int = 16
    object_radius: float = 1.2
    far: float = 6.0
    background_iterations: int = 1000
    eikonal_points: int = 1024
    eikonal_bound: float = 1.2
    cycle_points: int = 1024
    soft_points: int = 512
    sinkhorn_every: int = 500
    sinkhorn_resolution: int = 64
    sinkhorn_points: int = 512
    checkpoint_every: int = 5000
    sphere_radius: float = 1.0
    sphere_steps: int = 200
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        for name in ("rays_per_batch", "lr", "frames_per_video", "object_samples", "far",
                     "object_radius", "sinkhorn_every", "checkpoint_every"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("total_iterations", "background_iterations", "weight_decay", "sphere_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not (0 <= self.swap_end <= self.swap_start <= 1):
            raise ValueError("swap endpoints must satisfy 0 <= end <= start <= 1")
        if not 0 < self.swap_knee <= 1:
            raise ValueError("swap_knee must lie in (0, 1]")

    @classmethod
    def desk(cls) -> "TrainConfig":
        """Scaled-down settings for the bundled 64x64 synthetic dataset on one CPU core."""
        return cls(
            total_iterations=2000, rays_per_batch=384, lr=2e-3, frames_per_video=2,
            object_samples=24, background_samples=8, background_iterations=150,
            eikonal_points=256, cycle_points=256, soft_points=128, sinkhorn_every=500,
            sinkhorn_resolution=48, sinkhorn_points=256, checkpoint_every=1000,
            sphere_radius=0.5, sphere_steps=200,
            model=ModelConfig(sdf_width=64, sdf_depth=3, color_width=32, width=32, depth=2,
                              xyz_freqs=6, feature_freqs=4, bg_freqs=4, dir_freqs=2,
                              skin_freqs=2, deform_freqs=2),
        )

    # -- key/value text ---------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("model", "weights"):
                prefix = "model" if f.name == "model" else "weight"
                lines += [f"{prefix}.{k} = {val!r}" for k, val in asdict(v).items()]
            else:
                lines.append(f"{f.name} = {v!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        """Parse ``key = value`` lines over ``base`` (defaults when omitted).
        ``model.<field>`` and ``weight.<field>`` address the nested sections."""
        base = base or cls()
        top = {f.name: getattr(base, f.name) for f in fields(cls)}
        model = asdict(base.model)
        weights = asdict(base.weights)
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            k, v = (s.strip() for s in line.split("=", 1))
            if k.startswith("model."):
                target, key = model, k[6:]
            elif k.startswith("weight."):
                target, key = weights, k[7:]
            else:
                target, key = top, k
            if key not in target or key in ("model", "weights"):
                raise ValueError(f"line {lineno}: unknown key {k!r}")
            target[key] = _coerce(target[key], v, k)
        top["model"] = ModelConfig(**model)
        top["weights"] = LossWeights(**weights)
        return cls(**top)

    @classmethod
    def load(cls, path, base=None) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(), base)


def _coerce(current, text: str, key: str):
    try:
        if isinstance(current, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError
            return text.lower() == "true"
        if isinstance(current, int):
            return int(text)
        return float(text)
    except ValueError:
        raise ValueError(f"{key}: cannot parse {text!r}") from None


# ---------------------------------------------------------------------------
# optimiser


def adamw_step(params, grads, state: dict, lr: float, wd: float, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8) -> bool:
    """One decoupled-weight-decay Adam update, in place. ``state`` holds ``step``
    and the moment lists. A non-finite gradient skips the whole step (returns False)."""
    for g in grads:
        if g is not None and not bool(torch.isfinite(g).all()):
            log.warning("non-finite gradient; optimiser step skipped")
            state["skipped"] = state.get("skipped", 0) + 1
            return False
    if "m" not in state:
        state["step"] = 0
        state["m"] = [torch.zeros_like(p) for p in params]
        state["v"] = [torch.zeros_like(p) for p in params]
    state["step"] += 1
    k = state["step"]
    bc1 = 1.0 - beta1**k
    bc2 = 1.0 - beta2**k
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state["m"], state["v"]):
            if g is None:
                continue
            p.mul_(1.0 - lr * wd)
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
    return True


class AdamW(torch.optim.Optimizer):
    """Parameter-group front end over :func:`adamw_step`; a non-finite gradient in
    any group skips the step for every group."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
        super().__init__(params, dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay))
        self.skipped = 0

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
                    log.warning("non-finite gradient; optimiser step skipped")
                    self.skipped += 1
                    return loss
        for group in self.param_groups:
            params = group["params"]
            if all(p.grad is None for p in params):
                continue
            st = self.state.setdefault("group%d" % self.param_groups.index(group), {})
            b1, b2 = group["betas"]
            adamw_step(params, [p.grad for p in params], st, group["lr"], group["weight_decay"],
                       b1, b2, group["eps"])
        return loss

    def moments(self):
        """(name, tensor) pairs for checkpointing."""
        out = []
        for i in range(len(self.param_groups)):
            st = self.state.get("group%d" % i)
            if not st or "m" not in st:
                continue
            out.append((f"optim.{i}.step", torch.tensor(st["step"], dtype=torch.int64)))
            for j, (m, v) in enumerate(zip(st["m"], st["v"])):
                out.append((f"optim.{i}.m.{j}", m))
                out.append((f"optim.{i}.v.{j}", v))
        return out


def parameter_groups(model: CategoryModel, config: TrainConfig) -> list[dict]:
    codes, root, rest = [], [], []
    for name, p in model.named_parameters():
        if name == "codes.root_delta":
            root.append(p)
        elif name.startswith("codes."):
            codes.append(p)
        else:
            rest.append(p)
    return [
        {"params": rest, "lr": config.lr},
        {"params": codes, "lr": config.lr * config.code_lr_scale},
        {"params": root, "lr": config.lr * config.root_lr_scale},
    ]


# ---------------------------------------------------------------------------
# morphology-code swapping


def swap_probability(iteration: int, total: int, start: float = 1.0, end: float = 0.05,
                     knee: float = 0.8) -> float:
    """Linear decay from ``start`` at iteration 0 to ``end`` at ``knee * total``, flat after."""
    stop = knee * total
    if stop <= 0 or iteration >= stop:
        return end
    return start + (end - start) * iteration / stop


@dataclass
class SwapState:
    rng: np.random.Generator
    probability: float = 1.0

    @classmethod
    def seeded(cls, seed: int, probability: float = 1.0) -> "SwapState":
        return cls(np.random.default_rng(seed), probability)


def maybe_swap_codes(videos, num_videos: int, state: SwapState) -> torch.Tensor:
    """Index map ``perm`` such that video ``v`` renders with ``beta[perm[v]]``. With
    probability ``state.probability`` the codes of a random pair of batch videos
    are exchanged."""
    perm = torch.arange(num_videos)
    present = sorted(set(int(v) for v in torch.as_tensor(videos).reshape(-1).tolist()))
    fire = state.rng.random() < state.probability
    if not fire:
        return perm
    if len(present) < 2:
        log.debug("code swap skipped: batch holds a single video")
        return perm
    i, j = state.rng.choice(len(present), size=2, replace=False)
    a, b = present[int(i)], present[int(j)]
    perm[a], perm[b] = b, a
    return perm


# ---------------------------------------------------------------------------
# data plumbing


class RayBank:
    """Every pixel ray of every frame, precomputed, plus the observations."""

    def __init__(self, dataset: Dataset, dtype=torch.float32):
        self.dataset = dataset
        self.H, self.W = dataset.manifest.height, dataset.manifest.width
        vv, uu = torch.meshgrid(torch.arange(self.H), torch.arange(self.W), indexing="ij")
        self.pixels = torch.stack((uu.reshape(-1), vv.reshape(-1)), -1)
        self.origins, self.dirs, self.K, self.R_next, self.t_next, self.next = [], [], [], [], [], []
        for vd in dataset.videos:
            n = vd.entry.num_frames
            o_list, d_list, K_list, R_list, t_list, nx = [], [], [], [], [], []
            for t in range(n):
                cam = vd.cameras[t]
                o, d = cam.pixel_rays(self.pixels)
                tn = flow_target(t, n)
                cn = vd.cameras[tn]
                o_list.append(o[0].to(dtype))
                d_list.append(d.to(dtype))
                K_list.append(torch.tensor([cam.fx, cam.fy, cam.cx, cam.cy], dtype=dtype))
                R_list.append(cn.extrinsic.rotation.to(dtype))
                t_list.append(cn.extrinsic.translation.to(dtype))
                nx.append(tn)
            self.origins.append(torch.stack(o_list))
            self.dirs.append(torch.stack(d_list))
            self.K.append(torch.stack(K_list))
            self.R_next.append(torch.stack(R_list))
            self.t_next.append(torch.stack(t_list))
            self.next.append(torch.tensor(nx))
        self.diagonal = math.hypot(self.H, self.W)

    def gather(self, video: int, frame: int, idx: torch.Tensor):
        """Rays and observations for flat pixel indices of one frame."""
        vd = self.dataset.videos[video]
        n = len(idx)
        dtype = self.dirs[video].dtype
        rays = RayBatch(
            self.origins[video][frame].expand(n, 3), self.dirs[video][frame, idx], self.pixels[idx],
            torch.full((n,), video), torch.full((n,), frame),
            torch.full((n,), int(self.next[video][frame])),
            self.K[video][frame].expand(n, 4), self.R_next[video][frame].expand(n, 3, 3),
            self.t_next[video][frame].expand(n, 3),
        )
        obs = {
            "rgb": vd.rgb[frame].reshape(-1, 3)[idx].to(dtype),
            "mask": vd.mask[frame].reshape(-1)[idx].to(dtype),
            "flow": vd.flow[frame].reshape(-1, 2)[idx].to(dtype),
            "feat": vd.feat[frame].reshape(-1, 16)[idx].to(dtype),
        }
        return rays, obs

    def sample(self, gen: torch.Generator, rays_total: int, frames_per_video: int,
               background_only: bool = False):
        batches, observations = [], []
        V = len(self.dataset.videos)
        per = max(1, rays_total // (V * frames_per_video))
        for v in range(V):
            n = self.dataset.videos[v].entry.num_frames
            frames = torch.randint(0, n, (frames_per_video,), generator=gen)
            for t in frames.tolist():
                if background_only:
                    pool = (self.dataset.videos[v].mask[t].reshape(-1) < 0.5).nonzero()[:, 0]
                    if len(pool) == 0:
                        continue
                    idx = pool[torch.randint(0, len(pool), (per,), generator=gen)]
                else:
                    idx = torch.randint(0, self.H * self.W, (per,), generator=gen)
                r, o = self.gather(v, t, idx)
                batches.append(r)
                observations.append(o)
        rays = RayBatch(*(torch.cat([getattr(b, f) for b in batches], 0)
                          for f in RayBatch.__dataclass_fields__))
        obs = {k: torch.cat([o[k] for o in observations], 0) for k in observations[0]}
        return rays, obs


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"ANIMCKPT"
CKPT_VERSION = 1
_DTYPES = {torch.float32: 1, torch.float64: 2, torch.int64: 3, torch.bool: 4, torch.int32: 5}
_DTYPES_INV = {v: k for k, v in _DTYPES.items()}


def write_checkpoint(path, tensors: list[tuple[str, torch.Tensor]], meta: dict) -> None:
    """Container: magic, uint32 version, uint32 JSON length, JSON metadata,
    uint32 tensor count, then per tensor: uint16 name length, name, uint8 dtype,
    uint8 rank, uint32 dims, little-endian payload."""
    buf = io.BytesIO()
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors:
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise TypeError(f"{name}: unsupported dtype {t.dtype}")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", _DTYPES[t.dtype], t.dim()))
        buf.write(struct.pack(f"<{t.dim()}I", *t.shape))
        arr = t.numpy()
        buf.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, n_meta = struct.unpack_from("<II", raw, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    meta = json.loads(raw[pos : pos + n_meta].decode("utf-8"))
    pos += n_meta
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + ln].decode("utf-8")
        pos += ln
        code, ndim = struct.unpack_from("<BB", raw, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        dtype = _DTYPES_INV[code]
        itemsize = torch.empty((), dtype=dtype).element_size()
        nbytes = int(np.prod(shape, dtype=np.int64)) * itemsize
        np_dtype = torch.empty((), dtype=dtype).numpy().dtype.newbyteorder("<")
        arr = np.frombuffer(raw, dtype=np_dtype, count=nbytes // itemsize, offset=pos).reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
        pos += nbytes
    return tensors, meta


def save_model(path, model: CategoryModel, extra_meta: dict | None = None, optimizer=None) -> None:
    state = model.state_dict()
    tensors = [(k, state[k]) for k in sorted(state)]
    if optimizer is not None:
        tensors += optimizer.moments()
    meta = {
        "format": "animatable-checkpoint",
        "model_config": model.config.to_dict(),
        "skeleton": model.topology.dumps(),
        "frame_counts": list(model.codes.frame_counts),
    }
    meta.update(extra_meta or {})
    write_checkpoint(path, tensors, meta)


def load_model(path) -> tuple[CategoryModel, dict]:
    tensors, meta = read_checkpoint(path)
    topology = SkeletonTopology.loads(meta["skeleton"])
    model = CategoryModel(topology, meta["frame_counts"], ModelConfig.from_dict(meta["model_config"]))
    state = {k: v for k, v in tensors.items() if not k.startswith("optim.")}
    # load_state_dict copies into existing parameters, so match their dtype first
    model.to(state["codes.beta"].dtype)
    model.load_state_dict(state)
    return model, meta


# ---------------------------------------------------------------------------
# training


def initialize_model(dataset: Dataset, config: TrainConfig) -> CategoryModel:
    torch.manual_seed(config.seed)
    model = CategoryModel(dataset.topology, dataset.frame_counts, config.model, seed=config.seed,
                          init_root_poses=dataset.init_root_poses().float())
    if config.sphere_steps:
        model.fit_sphere(radius=config.sphere_radius, steps=config.sphere_steps, seed=config.seed,
                         bound=config.eikonal_bound)
    return model


def _sampling(config: TrainConfig) -> SamplingConfig:
    return SamplingConfig(object_radius=config.object_radius, far=config.far,
                          object_samples=config.object_samples,
                          background_samples=config.background_samples)


def _rendered_dict(out) -> dict:
    return {"rgb": out.rgb, "silhouette": out.silhouette, "flow": out.flow, "feature": out.feature}


def validate_dataset(dataset: Dataset) -> None:
    for vd in dataset.videos:
        for name in ("rgb", "mask", "flow", "feat"):
            t = getattr(vd, name)
            if not bool(torch.isfinite(t).all()):
                raise ValueError(f"video {vd.entry.name}: non-finite values in {name}")
        if len(vd.cameras) != vd.entry.num_frames:
            raise ValueError(f"video {vd.entry.name}: camera count mismatch")
    if dataset.topology.num_joints < 1:
        raise ValueError("empty skeleton")


class SurfaceProxy:
    """Canonical surface samples per video, refreshed from marching cubes."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.points: list[torch.Tensor | None] = []
        self.eps: list[float] = []
        self.self_cost: list[torch.Tensor | None] = []
        self.warm: list[dict] = []

    def refresh(self, model: CategoryModel, seed: int) -> None:
        rng = np.random.default_rng(seed)
        self.points, self.eps, self.self_cost = [], [], []
        self.warm = [{} for _ in range(model.codes.num_videos)]
        for v in range(model.codes.num_videos):
            mesh = extract_canonical(model, model.codes.beta[v].detach(), self.config.sinkhorn_resolution,
                                     self.config.eikonal_bound)
            if mesh.is_empty:
                self.points.append(None)
                self.eps.append(0.0)
                self.self_cost.append(None)
                continue
            pts = torch.as_tensor(sample_surface(mesh, self.config.sinkhorn_points, rng),
                                  dtype=next(model.parameters()).dtype)
            eps = default_epsilon(pts)
            self.points.append(pts)
            self.eps.append(eps)
            self.self_cost.append(entropic_ot(pts, pts, eps))


def _regularisers(model, config, gen, proxy, out_extras, rays, report: LossReport, weights: dict):
    V = model.codes.num_videos
    dtype = next(model.parameters()).dtype
    if weights["eikonal"] > 0 and config.eikonal_points:
        pts = (torch.rand(config.eikonal_points, 3, generator=gen, dtype=dtype) * 2 - 1) * config.eikonal_bound
        vid = torch.randint(0, V, (config.eikonal_points,), generator=gen)
        beta = model.codes.beta[vid]
        report.update(eikonal=eikonal_loss(pts, lambda x: model.object_field.sdf(x, beta)))
    if weights["soft"] > 0 and config.soft_points:
        n = config.soft_points
        pts = (torch.rand(n, 3, generator=gen, dtype=dtype) * 2 - 1)
        va, vb, vc = (torch.randint(0, V, (n,), generator=gen) for _ in range(3))
        counts = torch.tensor(model.codes.frame_counts)
        tb = (torch.rand(n, generator=gen) * counts[vb]).long()
        tc = (torch.rand(n, generator=gen) * counts[vc]).long()
        spec = WarpSpec(model.codes.beta[va], model.codes.frame_codes(vb, tb)["theta"],
                        model.codes.frame_codes(vc, tc)["omega_d"])
        report.update(soft=soft_deformation_penalty(pts, spec, model, config.weights.squared_soft))
    if weights["cycle"] > 0 and config.cycle_points and "x_canonical" in out_extras:
        xc = out_extras["x_canonical"].detach()
        R, S, _ = xc.shape
        flat = torch.randint(0, R * S, (config.cycle_points,), generator=gen)
        ray = flat // S
        pts = xc.reshape(-1, 3)[flat]
        c = model.frame_codes(rays.video[ray], rays.frame[ray])
        spec = WarpSpec(c["beta"], c["theta"], c["omega_d"], rig=model.rig_for(rays.video[ray], rays.frame[ray]))
        report.update(cycle=cycle_term(pts, spec, model))
    if weights["sinkhorn"] > 0 and proxy.points:
        total = None
        for v in range(V):
            surf = proxy.points[v]
            if surf is None:
                continue
            joints = model.instance_joints(model.codes.beta[v])
            s = sinkhorn_divergence(surf, joints, proxy.eps[v], self_a=proxy.self_cost[v],
                                    warm=proxy.warm[v])
            total = s if total is None else total + s
        if total is not None:
            report.update(sinkhorn=torch.clamp(total / V, min=0.0))


def train(dataset: Dataset, config: TrainConfig, out_dir=None, model: CategoryModel | None = None,
          progress=None) -> CategoryModel:
    """Background pretraining followed by joint optimisation. Writes
    ``losses.csv``, periodic ``ckpt_<iter>.bin`` and ``final.bin`` under ``out_dir``."""
    validate_dataset(dataset)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "train.cfg").write_text(config.to_text())
    if model is None:
        model = initialize_model(dataset, config)
    total = config.total_iterations
    if total == 0:
        if out_dir is not None:
            save_model(out_dir / "final.bin", model, {"iteration": 0})
        return model

    gen = torch.Generator().manual_seed(config.seed)
    swap = SwapState.seeded(config.seed + 17, config.swap_start)
    bank = RayBank(dataset)
    sampling = _sampling(config)
    loss_log = LossLog(out_dir / "losses.csv") if out_dir is not None else None

    try:
        # stage 1: background only, on pixels outside the observed masks
        if config.background_iterations:
            bg_params = list(model.background.parameters()) + [model.codes.gamma]
            bg_opt = AdamW([{"params": bg_params}], lr=config.lr, weight_decay=config.weight_decay,
                           betas=(config.beta1, config.beta2), eps=config.adam_eps)
            for it in range(config.background_iterations):
                rays, obs = bank.sample(gen, config.rays_per_batch, config.frames_per_video,
                                        background_only=True)
                out = render_rays(ModelScene(model, object_radius=config.object_radius), rays, sampling,
                                  mode="background-only", generator=gen)
                rep = reconstruction_losses({"rgb": out.rgb, "flow": out.flow},
                                            {"rgb": obs["rgb"], "flow": obs["flow"]}, bank.diagonal)
                bg_opt.zero_grad(set_to_none=True)
                rep.total().backward()
                bg_opt.step()

        # stage 2: everything
        opt = AdamW(parameter_groups(model, config), lr=config.lr, weight_decay=config.weight_decay,
                    betas=(config.beta1, config.beta2), eps=config.adam_eps)
        proxy = SurfaceProxy(config)
        for it in range(total):
            weights = loss_schedule(it, total, config.weights)
            if weights["sinkhorn"] > 0 and it % config.sinkhorn_every == 0:
                proxy.refresh(model, config.seed + it)
            swap.probability = swap_probability(it, total, config.swap_start, config.swap_end,
                                                config.swap_knee)
            rays, obs = bank.sample(gen, config.rays_per_batch, config.frames_per_video)
            perm = maybe_swap_codes(rays.video, model.codes.num_videos, swap)
            scene = ModelScene(model, beta_table=model.codes.beta[perm], object_radius=config.object_radius)
            out = render_rays(scene, rays, sampling, generator=gen)
            report = reconstruction_losses(_rendered_dict(out), obs, bank.diagonal)
            report.weights = weights
            _regularisers(model, config, gen, proxy, out.extras, rays, report, weights)
            loss = report.total()
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            report.check()
            if loss_log is not None:
                loss_log.write(it, report)
            if progress is not None:
                progress(it, report)
            if out_dir is not None and (it + 1) % config.checkpoint_every == 0 and it + 1 < total:
                save_model(out_dir / f"ckpt_{it + 1:06d}.bin", model, {"iteration": it + 1}, opt)
        if out_dir is not None:
            save_model(out_dir / "final.bin", model, {"iteration": total}, opt)
    finally:
        if loss_log is not None:
            loss_log.close()
    return model
