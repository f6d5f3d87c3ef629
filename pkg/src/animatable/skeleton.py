"""Kinematic tree: topology files, forward kinematics, stretch transforms and
Gaussian bone placement."""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import torch

from .rigid import SE3, axis_angle_to_matrix

ROOT = -1


class TopologyError(ValueError):
    pass


class DegenerateBoneError(ValueError):
    pass


@dataclass
class SkeletonTopology:
    """Fixed tree over ``B`` joints. ``parent[j] == -1`` marks the root.

    ``rest_joints`` is an optional template joint layout (B x 3) used to
    initialise the canonical skeleton.
    """

    parent: list[int]
    names: list[str] = field(default_factory=list)
    rest_joints: list[list[float]] | None = None

    def __post_init__(self):
        if not self.names:
            self.names = [f"joint{j}" for j in range(len(self.parent))]
        self.order = _topological_order(self.parent)

    @property
    def num_joints(self) -> int:
        return len(self.parent)

    @property
    def num_bones(self) -> int:
        # one bone per joint plus the extra root slot
        return len(self.parent) + 1

    @property
    def root(self) -> int:
        return self.parent.index(ROOT)

    def children(self, j: int) -> list[int]:
        return [c for c, p in enumerate(self.parent) if p == j]

    def rest_tensor(self, dtype=torch.float64) -> torch.Tensor:
        if self.rest_joints is None:
            raise TopologyError("topology carries no rest joint locations")
        return torch.tensor(self.rest_joints, dtype=dtype)

    # -- file io ----------------------------------------------------------

    def dumps(self) -> str:
        lines = []
        for j, (p, name) in enumerate(zip(self.parent, self.names)):
            line = f"{j} {p} {name}"
            if self.rest_joints is not None:
                line += " " + " ".join(repr(float(v)) for v in self.rest_joints[j])
            lines.append(line)
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "SkeletonTopology":
        rows = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) not in (3, 6):
                raise TopologyError(f"line {lineno}: expected 'index parent name [x y z]'")
            rows.append(parts)
        rows.sort(key=lambda r: int(r[0]))
        if [int(r[0]) for r in rows] != list(range(len(rows))):
            raise TopologyError("joint indices must be 0..B-1 without gaps")
        parent = [int(r[1]) for r in rows]
        names = [r[2] for r in rows]
        rest = None
        if all(len(r) == 6 for r in rows):
            rest = [[float(v) for v in r[3:]] for r in rows]
        return cls(parent, names, rest)

    @classmethod
    def load(cls, path) -> "SkeletonTopology":
        return cls.loads(Path(path).read_text())


def _topological_order(parent: list[int]) -> list[int]:
    B = len(parent)
    roots = [j for j, p in enumerate(parent) if p == ROOT]
    if len(roots) != 1:
        raise TopologyError(f"expected exactly one root, found {len(roots)}")
    for j, p in enumerate(parent):
        if p != ROOT and not 0 <= p < B:
            raise TopologyError(f"joint {j} has out-of-range parent {p}")
    order, frontier = [], [roots[0]]
    while frontier:
        j = frontier.pop(0)
        order.append(j)
        frontier.extend(c for c, p in enumerate(parent) if p == j)
    if len(order) != B:
        raise TopologyError("topology contains a cycle or disconnected joints")
    return order


def preset(name: str) -> SkeletonTopology:
    """Bundled category skeletons: ``quadruped`` (B=25) and ``human`` (B=18)."""
    text = resources.files("animatable.data").joinpath(f"{name}.skel").read_text()
    return SkeletonTopology.loads(text)


# ---------------------------------------------------------------------------
# kinematics


def _check_dims(topology: SkeletonTopology, *arrays: torch.Tensor) -> None:
    for a in arrays:
        if a.shape[-2:] != (topology.num_joints, 3):
            raise ValueError(
                f"expected (..., {topology.num_joints}, 3) joint array, got {tuple(a.shape)}"
            )


def joint_frames(topology: SkeletonTopology, joints: torch.Tensor, angles: torch.Tensor) -> SE3:
    """World frame of every joint: parent frame ∘ translate(offset) ∘ rotate(Q_j)."""
    _check_dims(topology, joints, angles)
    batch = torch.broadcast_shapes(joints.shape[:-2], angles.shape[:-2])
    joints = joints.expand(batch + joints.shape[-2:])
    rots = axis_angle_to_matrix(angles.expand(batch + angles.shape[-2:]))
    R = [None] * topology.num_joints
    t = [None] * topology.num_joints
    for j in topology.order:
        p = topology.parent[j]
        if p == ROOT:
            R[j] = rots[..., j, :, :]
            t[j] = joints[..., j, :]
        else:
            offset = joints[..., j, :] - joints[..., p, :]
            R[j] = R[p] @ rots[..., j, :, :]
            t[j] = t[p] + (R[p] @ offset[..., None])[..., 0]
    return SE3(torch.stack(R, dim=-3), torch.stack(t, dim=-2))


def forward_kinematics(topology: SkeletonTopology, joints: torch.Tensor, angles: torch.Tensor) -> SE3:
    """Per-joint transforms relative to the rest pose, ``G_j = FK(Q)_j ∘ FK(0)_j^-1``.

    Returned as a stacked SE3 whose batch shape ends with the joint axis.
    """
    frames = joint_frames(topology, joints, angles)
    # FK(0)_j is a pure translation to the rest joint location
    return frames.compose(SE3.from_translation(-joints.expand(frames.translation.shape)))


def posed_joints(topology: SkeletonTopology, joints: torch.Tensor, angles: torch.Tensor) -> torch.Tensor:
    return joint_frames(topology, joints, angles).translation


def stretch_transforms(
    topology: SkeletonTopology, canonical_joints: torch.Tensor, instance_joints: torch.Tensor
) -> SE3:
    """Rigid map from each canonical rest-bone frame to the instance rest-bone frame."""
    _check_dims(topology, canonical_joints, instance_joints)
    return SE3.from_translation(instance_joints - canonical_joints)


def slot_transforms(topology: SkeletonTopology, joint_transforms: SE3) -> SE3:
    """Expand per-joint transforms to the B+1 skinning slots.

    Slot ``j`` carries the segment ending at joint ``j`` and therefore moves
    with the parent's frame (the root joint's slot moves with its own frame);
    slot ``B`` is the root body slot and stays fixed to the object root.
    """
    idx = [p if p != ROOT else j for j, p in enumerate(topology.parent)]
    R = joint_transforms.rotation[..., idx, :, :]
    t = joint_transforms.translation[..., idx, :]
    eye = torch.eye(3, dtype=R.dtype, device=R.device).expand(R.shape[:-3] + (1, 3, 3))
    R = torch.cat((R, eye), dim=-3)
    t = torch.cat((t, torch.zeros_like(t[..., :1, :])), dim=-2)
    return SE3(R, t)


def _frame_from_direction(d: torch.Tensor) -> torch.Tensor:
    """Rotation whose first column is ``d``; the others complete a right-handed
    frame using the world up axis, falling back to z when nearly parallel."""
    x = d / d.norm(dim=-1, keepdim=True)
    up = torch.zeros_like(x)
    up[..., 1] = 1.0
    fallback = torch.zeros_like(x)
    fallback[..., 2] = 1.0
    parallel = (x * up).sum(-1, keepdim=True).abs() > 0.95
    up = torch.where(parallel, fallback, up)
    z = torch.cross(x, up, dim=-1)
    z = z / z.norm(dim=-1, keepdim=True)
    y = torch.cross(z, x, dim=-1)
    return torch.stack((x, y, z), dim=-1)


def gaussian_bones(topology: SkeletonTopology, joints: torch.Tensor, log_scales: torch.Tensor):
    """Place one Gaussian per skinning slot.

    Non-root slot ``j`` sits at the midpoint of its parent and ``j``, x-axis
    along the bone. The root joint slot and the extra root body slot are
    centred on the root joint. ``log_scales`` is (..., B, 3) or (..., B+1, 3);
    with B rows the root body slot reuses the root joint's scale.
    """
    from .skinning import GaussianBones

    _check_dims(topology, joints)
    B = topology.num_joints
    if log_scales.shape[-2] == B:
        log_scales = torch.cat((log_scales, log_scales[..., topology.root : topology.root + 1, :]), -2)
    if log_scales.shape[-2] != B + 1:
        raise ValueError(f"log_scales must have B or B+1 rows, got {log_scales.shape[-2]}")
    parents = [p if p != ROOT else j for j, p in enumerate(topology.parent)]
    start = joints[..., parents, :]
    end = joints
    direction = end - start
    length = direction.norm(dim=-1)
    non_root = torch.tensor([p != ROOT for p in topology.parent])
    if bool((length[..., non_root] < 1e-9).any()):
        raise DegenerateBoneError("zero-length bone")
    root = topology.root
    kids = topology.children(root)
    root_dir = (joints[..., kids[0], :] - joints[..., root, :]) if kids else None
    safe_dir = direction.clone()
    if root_dir is not None and float(root_dir.detach().norm(dim=-1).min()) > 1e-9:
        safe_dir[..., root, :] = root_dir
    else:
        safe_dir[..., root, :] = torch.tensor([1.0, 0.0, 0.0], dtype=joints.dtype)
    orient = _frame_from_direction(safe_dir)
    centers = 0.5 * (start + end)
    centers = torch.cat((centers, joints[..., root : root + 1, :]), dim=-2)
    orient = torch.cat((orient, orient[..., root : root + 1, :, :]), dim=-3)
    return GaussianBones(centers, orient, torch.exp(log_scales))
