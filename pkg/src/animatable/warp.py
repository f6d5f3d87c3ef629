"""Canonical <-> posed warps: fused stretch + articulation blend skinning followed by
an invertible affine-coupling deformation stack."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
from torch import nn

from .fields import DEFORM_DIM, MLP, embed_dim, positional_embed
from .rigid import dq_blend
from .skinning import NumericError, skinning_weights

log = logging.getLogger(__name__)

SCALE_BOUND = 4.0


def coupling_masks(num_blocks: int) -> list[tuple[bool, bool, bool]]:
    """Alternate a single held coordinate with its complement so that two
    consecutive blocks touch every coordinate."""
    masks = []
    for i in range(num_blocks):
        axis = (i // 2) % 3
        held = [k == axis for k in range(3)]
        if i % 2 == 1:
            held = [not h for h in held]
        masks.append(tuple(held))
    return masks


class CouplingBlock(nn.Module):
    """Affine coupling ``y_T = x_T * exp(s(x_H, w)) + t(x_H, w)`` with ``x_H`` passed through."""

    def __init__(self, mask, code_dim: int = DEFORM_DIM, width: int = 64, depth: int = 3,
                 num_freqs: int = 4):
        super().__init__()
        mask = torch.as_tensor(mask, dtype=torch.bool)
        self.register_buffer("held", mask.nonzero()[:, 0], persistent=False)
        self.register_buffer("moved", (~mask).nonzero()[:, 0], persistent=False)
        self.register_buffer("perm", torch.argsort(torch.cat((self.held, self.moved))), persistent=False)
        self.num_freqs = num_freqs
        n_held, n_moved = len(self.held), len(self.moved)
        self.net = MLP(embed_dim(n_held, num_freqs) + code_dim, 2 * n_moved, width, depth,
                       zero_last=True)

    def _scale_shift(self, held, code):
        raw_s, t = self.net(positional_embed(held, self.num_freqs), code).chunk(2, dim=-1)
        if log.isEnabledFor(logging.DEBUG) and bool((raw_s.abs() > SCALE_BOUND).any()):
            log.debug("coupling scale clamped (max |s| = %.3f)", float(raw_s.abs().max()))
        s = SCALE_BOUND * torch.tanh(raw_s / SCALE_BOUND)
        return s, t

    def forward(self, x, code):
        held, moved = x[..., self.held], x[..., self.moved]
        s, t = self._scale_shift(held, code)
        y = torch.cat((held, moved * torch.exp(s) + t), dim=-1)[..., self.perm]
        return y, s.sum(-1)

    def inverse(self, y, code):
        held, moved = y[..., self.held], y[..., self.moved]
        s, t = self._scale_shift(held, code)
        x = torch.cat((held, (moved - t) * torch.exp(-s)), dim=-1)[..., self.perm]
        return x, -s.sum(-1)


class DeformationStack(nn.Module):
    """Invertible soft deformation field conditioned on a per-frame code."""

    def __init__(self, num_blocks: int = 2, width: int = 64, depth: int = 3, num_freqs: int = 4):
        super().__init__()
        self.blocks = nn.ModuleList(
            CouplingBlock(m, DEFORM_DIM, width, depth, num_freqs) for m in coupling_masks(num_blocks)
        )

    def forward(self, x, code, return_logdet=False):
        logdet = torch.zeros_like(x[..., 0])
        for block in self.blocks:
            x, ld = block(x, code)
            logdet = logdet + ld
        return (x, logdet) if return_logdet else x

    def inverse(self, y, code, return_logdet=False):
        logdet = torch.zeros_like(y[..., 0])
        for block in reversed(self.blocks):
            y, ld = block.inverse(y, code)
            logdet = logdet + ld
        return (y, logdet) if return_logdet else y


def coupling_forward(x, block: CouplingBlock, code):
    return block(x, code)[0]


def coupling_inverse(y, block: CouplingBlock, code):
    return block.inverse(y, code)[0]


@dataclass
class WarpSpec:
    """Codes selecting one instance/time. Tensors broadcast against the point batch
    with the code dimension last."""

    beta: torch.Tensor
    theta: torch.Tensor
    omega_d: torch.Tensor
    direction: str = "forward"
    rig: object = None  # precomputed model.rig(beta, theta), broadcastable like the codes

    def reversed(self) -> "WarpSpec":
        other = "backward" if self.direction == "forward" else "forward"
        return WarpSpec(self.beta, self.theta, self.omega_d, other, self.rig)

    def rig_of(self, model):
        return self.rig if self.rig is not None else model.rig(self.beta, self.theta)


def _finite(x, stage):
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite values after {stage}")
    return x


def _blend_apply(points, weights, slot_dq):
    dq = dq_blend(weights, slot_dq)
    return dq.apply(points)


def skin_forward(points, spec: WarpSpec, model, return_weights=False):
    """Fused stretch + articulation (canonical -> posed, before soft deformation)."""
    rig = spec.rig_of(model)
    delta = model.skin_delta(points, spec.beta, spec.theta)
    w = skinning_weights(points, rig.canonical_bones, delta)
    out = _blend_apply(points, w, rig.forward_dq)
    return (out, w) if return_weights else out


def skin_backward(points, spec: WarpSpec, model, posed_space_weights=True, return_weights=False):
    rig = spec.rig_of(model)
    delta = model.skin_delta(points, spec.beta, spec.theta)
    bones = rig.posed_bones if posed_space_weights else rig.canonical_bones
    w = skinning_weights(points, bones, delta)
    out = _blend_apply(points, w, rig.backward_dq)
    return (out, w) if return_weights else out


def warp_forward(x_canonical, spec: WarpSpec, model, use_deform=True):
    if spec.direction != "forward":
        raise ValueError("warp_forward needs a forward spec")
    x = _finite(skin_forward(x_canonical, spec, model), "blend skinning")
    if use_deform:
        x = _finite(model.deform(x, spec.omega_d), "soft deformation")
    return x


def warp_backward(x_posed, spec: WarpSpec, model, use_deform=True, posed_space_weights=True):
    if spec.direction != "backward":
        raise ValueError("warp_backward needs a backward spec")
    x = x_posed
    if use_deform:
        x = _finite(model.deform.inverse(x, spec.omega_d), "inverse soft deformation")
    return _finite(skin_backward(x, spec, model, posed_space_weights), "inverse blend skinning")


def cycle_loss(points, spec: WarpSpec, model, **kw) -> torch.Tensor:
    """Mean squared displacement after a canonical -> posed -> canonical round trip."""
    fwd = spec if spec.direction == "forward" else spec.reversed()
    posed = warp_forward(points, fwd, model, **{k: v for k, v in kw.items() if k == "use_deform"})
    back = warp_backward(posed, fwd.reversed(), model, **kw)
    return ((back - points) ** 2).sum(-1).mean()
