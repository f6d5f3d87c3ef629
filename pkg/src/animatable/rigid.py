"""Quaternion, dual-quaternion and SE(3) algebra plus blend-skinning reducers.

Everything here operates on torch tensors with arbitrary leading batch
dimensions and follows the dtype of its inputs. Quaternions are stored
``(w, x, y, z)``; a dual quaternion is an ``(..., 8)`` tensor holding the
real part followed by the dual part.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

ORTHO_TOL = 1e-6


class InvalidTransformError(ValueError):
    pass


class DegenerateBlendError(ValueError):
    pass


# ---------------------------------------------------------------------------
# quaternions


def quat_mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        (
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ),
        dim=-1,
    )


def quat_conj(q: torch.Tensor) -> torch.Tensor:
    return q * q.new_tensor([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q: torch.Tensor) -> torch.Tensor:
    return q / q.norm(dim=-1, keepdim=True)


def quat_rotate(q: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Rotate 3-vectors ``v`` by unit quaternions ``q`` (broadcasting)."""
    w = q[..., :1]
    u = q[..., 1:]
    uv = torch.cross(u.expand_as(v), v, dim=-1)
    uuv = torch.cross(u.expand_as(v), uv, dim=-1)
    return v + 2.0 * (w * uv + uuv)


def quat_to_matrix(q: torch.Tensor) -> torch.Tensor:
    q = quat_normalize(q)
    w, x, y, z = q.unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return torch.stack(rows, dim=-1).reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(R: torch.Tensor) -> torch.Tensor:
    """Shepperd's method; all four branches are evaluated and the best-conditioned
    one is selected per element, which keeps autograd well defined."""
    m00, m01, m02 = R[..., 0, 0], R[..., 0, 1], R[..., 0, 2]
    m10, m11, m12 = R[..., 1, 0], R[..., 1, 1], R[..., 1, 2]
    m20, m21, m22 = R[..., 2, 0], R[..., 2, 1], R[..., 2, 2]
    trace = m00 + m11 + m22
    diag = torch.stack((trace, m00, m11, m22), dim=-1)
    choice = diag.argmax(dim=-1, keepdim=True)

    def _safe_sqrt(x):
        return torch.sqrt(torch.clamp(x, min=1e-12))

    s0 = 2.0 * _safe_sqrt(1.0 + trace)
    q0 = torch.stack((0.25 * s0, (m21 - m12) / s0, (m02 - m20) / s0, (m10 - m01) / s0), -1)
    s1 = 2.0 * _safe_sqrt(1.0 + m00 - m11 - m22)
    q1 = torch.stack(((m21 - m12) / s1, 0.25 * s1, (m01 + m10) / s1, (m02 + m20) / s1), -1)
    s2 = 2.0 * _safe_sqrt(1.0 + m11 - m00 - m22)
    q2 = torch.stack(((m02 - m20) / s2, (m01 + m10) / s2, 0.25 * s2, (m12 + m21) / s2), -1)
    s3 = 2.0 * _safe_sqrt(1.0 + m22 - m00 - m11)
    q3 = torch.stack(((m10 - m01) / s3, (m02 + m20) / s3, (m12 + m21) / s3, 0.25 * s3), -1)
    cands = torch.stack((q0, q1, q2, q3), dim=-2)
    q = torch.gather(cands, -2, choice[..., None].expand(choice.shape[:-1] + (1, 4))).squeeze(-2)
    # canonical hemisphere
    q = torch.where(q[..., :1] < 0, -q, q)
    return quat_normalize(q)


def axis_angle_to_matrix(v: torch.Tensor) -> torch.Tensor:
    """Rodrigues formula, smooth (and differentiable) through zero rotation."""
    theta2 = (v * v).sum(-1, keepdim=True)
    small = theta2 < 1e-8
    safe2 = torch.where(small, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(safe2)
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta)) / safe2)
    x, y, z = v.unbind(-1)
    zero = torch.zeros_like(x)
    K = torch.stack((zero, -z, y, z, zero, -x, -y, x, zero), -1).reshape(v.shape[:-1] + (3, 3))
    eye = torch.eye(3, dtype=v.dtype, device=v.device).expand(K.shape)
    return eye + a[..., None] * K + b[..., None] * (K @ K)


def matrix_to_axis_angle(R: torch.Tensor) -> torch.Tensor:
    q = matrix_to_quat(R)
    vec = q[..., 1:]
    s = vec.norm(dim=-1, keepdim=True)
    angle = 2.0 * torch.atan2(s, q[..., :1])
    scale = torch.where(s > 1e-12, angle / torch.clamp(s, min=1e-12), torch.full_like(s, 2.0))
    return vec * scale


# ---------------------------------------------------------------------------
# SE(3)


@dataclass
class SE3:
    """Rigid transform ``x -> R x + t``; ``rotation`` is (..., 3, 3), ``translation`` (..., 3)."""

    rotation: torch.Tensor
    translation: torch.Tensor

    @classmethod
    def identity(cls, batch_shape=(), dtype=torch.float64, device=None) -> "SE3":
        R = torch.eye(3, dtype=dtype, device=device).expand(tuple(batch_shape) + (3, 3)).clone()
        t = torch.zeros(tuple(batch_shape) + (3,), dtype=dtype, device=device)
        return cls(R, t)

    @classmethod
    def from_translation(cls, t: torch.Tensor) -> "SE3":
        R = torch.eye(3, dtype=t.dtype, device=t.device).expand(t.shape[:-1] + (3, 3)).clone()
        return cls(R, t)

    @classmethod
    def from_matrix(cls, M: torch.Tensor) -> "SE3":
        return cls(M[..., :3, :3], M[..., :3, 3])

    @property
    def batch_shape(self):
        return self.translation.shape[:-1]

    def matrix(self) -> torch.Tensor:
        """Homogeneous 4x4 form."""
        top = torch.cat((self.rotation, self.translation[..., None]), dim=-1)
        bottom = torch.zeros(top.shape[:-2] + (1, 4), dtype=top.dtype, device=top.device)
        bottom[..., 0, 3] = 1.0
        return torch.cat((top, bottom), dim=-2)

    def compose(self, other: "SE3") -> "SE3":
        """``self ∘ other``: apply ``other`` first."""
        R = self.rotation @ other.rotation
        t = (self.rotation @ other.translation[..., None])[..., 0] + self.translation
        return SE3(R, t)

    __matmul__ = compose

    def inverse(self) -> "SE3":
        Rt = self.rotation.transpose(-1, -2)
        return SE3(Rt, -(Rt @ self.translation[..., None])[..., 0])

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        return (self.rotation @ x[..., None])[..., 0] + self.translation

    def __getitem__(self, idx) -> "SE3":
        return SE3(self.rotation[idx], self.translation[idx])

    def to(self, *args, **kwargs) -> "SE3":
        return SE3(self.rotation.to(*args, **kwargs), self.translation.to(*args, **kwargs))

    def check(self, tol: float = ORTHO_TOL) -> None:
        R = self.rotation
        eye = torch.eye(3, dtype=R.dtype, device=R.device)
        ortho_err = (R @ R.transpose(-1, -2) - eye).abs().amax() if R.numel() else 0.0
        det = torch.linalg.det(R) if R.numel() else torch.ones(())
        if float(ortho_err) > tol or float((det - 1).abs().amax()) > tol:
            raise InvalidTransformError(
                f"rotation is not orthonormal (err={float(ortho_err):.3g}, det range "
                f"[{float(det.min()):.6f}, {float(det.max()):.6f}])"
            )
        if not torch.isfinite(self.translation).all():
            raise InvalidTransformError("non-finite translation")


def stack_se3(transforms) -> SE3:
    return SE3(
        torch.stack([t.rotation for t in transforms], dim=-3),
        torch.stack([t.translation for t in transforms], dim=-2),
    )


def unstack_se3(t: SE3) -> list[SE3]:
    return [SE3(t.rotation[..., i, :, :], t.translation[..., i, :])
            for i in range(t.translation.shape[-2])]


# ---------------------------------------------------------------------------
# dual quaternions


@dataclass
class DualQuaternion:
    real: torch.Tensor
    dual: torch.Tensor

    @classmethod
    def from_tensor(cls, dq: torch.Tensor) -> "DualQuaternion":
        return cls(dq[..., :4], dq[..., 4:])

    def tensor(self) -> torch.Tensor:
        return torch.cat((self.real, self.dual), dim=-1)

    def normalized(self) -> "DualQuaternion":
        n = self.real.norm(dim=-1, keepdim=True)
        return DualQuaternion(self.real / n, self.dual / n)

    def translation(self) -> torch.Tensor:
        return 2.0 * quat_mul(self.dual, quat_conj(self.real))[..., 1:]

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        return quat_rotate(self.real, x) + self.translation()


def se3_to_dq(t: SE3, validate: bool = True) -> DualQuaternion:
    if validate:
        t.check()
    real = matrix_to_quat(t.rotation)
    tq = torch.cat((torch.zeros_like(t.translation[..., :1]), t.translation), dim=-1)
    dual = 0.5 * quat_mul(tq, real)
    return DualQuaternion(real, dual)


def dq_to_se3(dq: DualQuaternion) -> SE3:
    dq = dq.normalized()
    return SE3(quat_to_matrix(dq.real), dq.translation())


def _check_weights(weights: torch.Tensor, n: int) -> None:
    if weights.shape[-1] != n:
        raise ValueError(f"{weights.shape[-1]} weights for {n} transforms")
    total = weights.sum(-1)
    if bool((total.abs() < 1e-12).any()):
        raise DegenerateBlendError("all-zero blend weights")


def dq_blend(weights: torch.Tensor, dqs: torch.Tensor) -> DualQuaternion:
    """Blend dual quaternions ``dqs`` (..., K, 8) with ``weights`` (..., K).

    Each input is sign-aligned with the highest-weight (pivot) real part before
    the weighted sum; the sum is then renormalised.
    """
    _check_weights(weights, dqs.shape[-2])
    dqs = dqs.expand(weights.shape + (8,))
    pivot = weights.argmax(dim=-1, keepdim=True)
    pivot_real = torch.gather(dqs[..., :4], -2, pivot[..., None].expand(pivot.shape + (4,)))
    sign = torch.where((dqs[..., :4] * pivot_real).sum(-1) < 0, -1.0, 1.0).to(dqs.dtype)
    blended = ((weights * sign)[..., None] * dqs).sum(-2)
    return DualQuaternion.from_tensor(blended).normalized()


def dqs_blend(weights: torch.Tensor, transforms) -> SE3:
    """Dual-quaternion blend of rigid transforms; output is always a valid SE3.

    ``transforms`` is either a list of SE3 or a stacked SE3 with a bone axis
    at position -1 of the batch shape.
    """
    if isinstance(transforms, (list, tuple)):
        transforms = stack_se3(transforms)
    dqs = se3_to_dq(transforms, validate=False).tensor()
    return dq_to_se3(dq_blend(weights, dqs))


def lbs_blend(weights: torch.Tensor, transforms) -> torch.Tensor:
    """Linear blend of 3x4 matrices. The rotation block is in general not orthonormal."""
    if isinstance(transforms, (list, tuple)):
        transforms = stack_se3(transforms)
    _check_weights(weights, transforms.translation.shape[-2])
    M = torch.cat((transforms.rotation, transforms.translation[..., None]), dim=-1)
    return (weights[..., None, None] * M).sum(-3)
