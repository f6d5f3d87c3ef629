"""The category model: every learnable field plus the per-video code table."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .fields import (AngleNet, BackgroundField, CodeTable, FeatureField, JointNet, ObjectField,
                     SkinDeltaNet)
from .rigid import SE3, axis_angle_to_matrix, quat_conj, se3_to_dq
from .skeleton import SkeletonTopology, gaussian_bones, joint_frames, slot_transforms
from .skinning import GaussianBones
from .warp import DeformationStack


@dataclass
class ModelConfig:
    sdf_width: int = 128
    sdf_depth: int = 5
    color_width: int = 64
    width: int = 64
    depth: int = 3
    xyz_freqs: int = 10
    time_freqs: int = 6
    feature_freqs: int = 6
    bg_freqs: int = 6
    dir_freqs: int = 4
    skin_freqs: int = 4
    deform_freqs: int = 4
    coupling_blocks: int = 2
    init_bone_scale: float = 0.15
    init_sharpness: float = 0.05
    code_init_std: float = 0.1

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Rig:
    """Skeleton state for one set of codes (bone slot axis last in batch shape)."""

    canonical_joints: torch.Tensor
    instance_joints: torch.Tensor
    angles: torch.Tensor
    slot_transforms: SE3  # canonical -> posed, stretch fused with articulation
    canonical_bones: GaussianBones
    posed_bones: GaussianBones
    forward_dq: torch.Tensor
    backward_dq: torch.Tensor

    def map(self, fn) -> "Rig":
        """Apply ``fn`` to every code-dependent tensor; the canonical fields are shared."""
        return Rig(
            self.canonical_joints, fn(self.instance_joints), fn(self.angles),
            SE3(fn(self.slot_transforms.rotation), fn(self.slot_transforms.translation)),
            self.canonical_bones,
            GaussianBones(fn(self.posed_bones.center), fn(self.posed_bones.orientation),
                          fn(self.posed_bones.scale)),
            fn(self.forward_dq), fn(self.backward_dq),
        )


class CategoryModel(nn.Module):
    def __init__(self, topology: SkeletonTopology, frame_counts: list[int],
                 config: ModelConfig | None = None, seed: int = 0,
                 init_root_poses: torch.Tensor | None = None):
        super().__init__()
        config = config or ModelConfig()
        self.config = config
        self.topology = topology
        torch.manual_seed(seed)
        gen = torch.Generator().manual_seed(seed)
        B = topology.num_joints
        self.codes = CodeTable(frame_counts, config.time_freqs, config.code_init_std, gen)
        self.object_field = ObjectField(config.sdf_width, config.sdf_depth, config.xyz_freqs,
                                        config.color_width)
        self.feature_field = FeatureField(config.width, config.depth, config.feature_freqs)
        self.background = BackgroundField(config.width, config.depth, config.bg_freqs,
                                          config.dir_freqs)
        self.joint_net = JointNet(topology.rest_tensor(torch.float32), config.width, config.depth)
        self.angle_net = AngleNet(B, config.width, config.depth)
        self.skin_delta_net = SkinDeltaNet(topology.num_bones, config.width, config.depth,
                                           config.skin_freqs)
        self.deform = DeformationStack(config.coupling_blocks, config.width, config.depth,
                                       config.deform_freqs)
        self.bone_log_scales = nn.Parameter(
            torch.full((topology.num_bones, 3), float(torch.log(torch.tensor(config.init_bone_scale))))
        )
        self.log_sharpness = nn.Parameter(torch.tensor(float(torch.log(torch.tensor(config.init_sharpness)))))
        total = sum(frame_counts)
        if init_root_poses is None:
            init_root_poses = torch.eye(4).expand(total, 4, 4).clone()
        self.register_buffer("init_root_poses", init_root_poses.float().clone())

    # -- skeleton ---------------------------------------------------------

    @property
    def canonical_joints(self) -> torch.Tensor:
        return self.joint_net.template

    def instance_joints(self, beta):
        return self.joint_net(beta)

    def angles(self, theta):
        return self.angle_net(theta)

    def rig(self, beta, theta, angles: torch.Tensor | None = None) -> Rig:
        J_c = self.canonical_joints
        J_i = self.instance_joints(beta)
        Q = self.angles(theta) if angles is None else angles
        frames = joint_frames(self.topology, J_i, Q)
        fused = frames.compose(SE3.from_translation(-J_c.expand(frames.translation.shape)))
        slots = slot_transforms(self.topology, fused)
        canon = gaussian_bones(self.topology, J_c, self.bone_log_scales)
        posed = canon.transformed(slots)
        fdq = se3_to_dq(slots, validate=False).tensor()
        bdq = torch.cat((quat_conj(fdq[..., :4]), quat_conj(fdq[..., 4:])), dim=-1)
        return Rig(J_c, J_i, Q, slots, canon, posed, fdq, bdq)

    def rig_for(self, video, frame, beta_table: torch.Tensor | None = None) -> Rig:
        """Rig per item of ``video``/``frame`` (N,), evaluated once per distinct pair.

        ``beta_table`` replaces the per-video morphology codes when given.
        """
        video, frame = torch.as_tensor(video).reshape(-1), torch.as_tensor(frame).reshape(-1)
        key = video * (max(self.codes.frame_counts) + 1) + frame
        uniq, inv = torch.unique(key, return_inverse=True)
        first = torch.full((len(uniq),), len(key), dtype=torch.long).scatter_reduce(
            0, inv, torch.arange(len(key)), reduce="amin")
        uv, uf = video[first], frame[first]
        c = self.frame_codes(uv, uf)
        beta = c["beta"] if beta_table is None else beta_table[uv]
        return self.rig(beta, c["theta"]).map(lambda t: t[inv])

    def skin_delta(self, x, beta, theta):
        return self.skin_delta_net(x, beta, theta)

    # -- fields -----------------------------------------------------------

    @property
    def sharpness(self):
        return torch.exp(self.log_sharpness)

    def root_pose(self, video, t) -> SE3:
        """Object -> world transform of a frame: learned correction ∘ initial pose."""
        g = self.codes.global_frame(video, t)
        delta = self.codes.root_delta[g]
        init = SE3.from_matrix(self.init_root_poses[g].to(delta.dtype))
        corr = SE3(axis_angle_to_matrix(delta[..., :3]), delta[..., 3:])
        return corr.compose(init)

    def frame_codes(self, video, t):
        return self.codes.frame_codes(video, t)

    @torch.no_grad()
    def fit_sphere(self, radius: float = 1.0, steps: int = 200, lr: float = 1e-2,
                   num_points: int = 2048, bound: float = 1.5, seed: int = 0,
                   eikonal_weight: float = 0.1):
        """Pretrain the signed distance head to an analytic sphere for every video code."""
        gen = torch.Generator().manual_seed(seed)
        self.object_field.geometric_init(radius)
        params = list(self.object_field.trunk.parameters())
        opt = torch.optim.Adam(params, lr=lr)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(steps, 1))
        dtype = params[0].dtype
        loss = torch.zeros(())
        with torch.enable_grad():
            for _ in range(steps):
                x = (torch.rand(num_points, 3, generator=gen, dtype=dtype) * 2 - 1) * bound
                x.requires_grad_(True)
                v = torch.randint(0, self.codes.num_videos, (num_points,), generator=gen)
                d = self.object_field.sdf(x, self.codes.beta[v].detach())
                (g,) = torch.autograd.grad(d.sum(), x, create_graph=True)
                loss = ((d - (x.norm(dim=-1) - radius)) ** 2).mean()
                loss = loss + eikonal_weight * ((g.norm(dim=-1) - 1.0) ** 2).mean()
                opt.zero_grad()
                loss.backward()
                opt.step()
                sched.step()
        return float(loss.detach())
