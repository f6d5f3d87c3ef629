"""Coordinate networks, embeddings and the per-video latent code table.

Reverse-mode differentiation is delegated to torch autograd: every network
parameter is an ``nn.Parameter`` whose ``.grad`` is the accumulator, and a
graph may only be backpropagated once per optimisation step.
"""
from __future__ import annotations

import math

import torch
from torch import nn
import torch.nn.functional as F

BETA_DIM = 32
THETA_DIM = 16
DEFORM_DIM = 64
APPEAR_DIM = 64
BG_DIM = 64
FEAT_DIM = 16


class NumericError(FloatingPointError):
    pass


def positional_embed(x: torch.Tensor, num_freqs: int) -> torch.Tensor:
    """``[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)]``."""
    out = [x]
    for k in range(num_freqs):
        freq = (2.0**k) * math.pi
        out.append(torch.sin(freq * x))
        out.append(torch.cos(freq * x))
    return torch.cat(out, dim=-1)


def embed_dim(k: int, num_freqs: int) -> int:
    return k * (1 + 2 * num_freqs)


class MLP(nn.Module):
    """Plain fully-connected stack with smooth activations (needed for the
    eikonal term and finite-difference checks)."""

    def __init__(self, d_in: int, d_out: int, width: int = 64, depth: int = 3,
                 zero_last: bool = False, softplus_beta: float = 10.0):
        super().__init__()
        dims = [d_in] + [width] * (depth - 1) + [d_out]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.beta = softplus_beta
        if zero_last:
            nn.init.zeros_(self.layers[-1].weight)
            nn.init.zeros_(self.layers[-1].bias)

    def forward(self, x: torch.Tensor, *codes: torch.Tensor, return_hidden: bool = False):
        """``codes`` are trailing input blocks that broadcast against ``x``; the first
        layer is applied blockwise so per-ray codes are never expanded per sample."""
        h = self._first(x, codes)
        hidden = x
        for layer in self.layers[1:]:
            hidden = F.softplus(h, beta=self.beta)
            h = layer(hidden)
        return (h, hidden) if return_hidden else h

    def _first(self, x, codes):
        first = self.layers[0]
        k = x.shape[-1]
        h = F.linear(x, first.weight[:, :k], first.bias)
        for c in codes:
            h = h + F.linear(c, first.weight[:, k : k + c.shape[-1]])
            k += c.shape[-1]
        if k != first.in_features:
            raise ValueError(f"inputs total {k} features, layer expects {first.in_features}")
        return h


class ObjectField(nn.Module):
    """Canonical signed distance and colour conditioned on morphology and appearance.

    The appearance code only reaches the colour head, so geometry cannot depend on it.
    Distance is an analytic sphere plus a learned residual.
    """

    def __init__(self, width: int = 128, depth: int = 5, num_freqs: int = 10,
                 color_width: int = 64):
        super().__init__()
        self.num_freqs = num_freqs
        self.trunk = MLP(embed_dim(3, num_freqs) + BETA_DIM, 1 + width, width, depth)
        self.color = MLP(width + APPEAR_DIM, 3, color_width, 2)
        self.register_buffer("prior_radius", torch.tensor(1.0))
        self.geometric_init(1.0)

    @torch.no_grad()
    def geometric_init(self, radius: float = 1.0) -> None:
        """Make the field exactly the sphere of ``radius``: the residual's distance
        output is zeroed and the analytic prior takes over."""
        self.prior_radius.fill_(radius)
        nn.init.zeros_(self.trunk.layers[-1].weight[0])
        self.trunk.layers[-1].bias[0] = 0.0

    def sdf(self, x, beta, return_hidden=False):
        out = self.trunk(positional_embed(x, self.num_freqs), beta)
        # smooth norm keeps second derivatives finite at the origin
        prior = torch.sqrt((x * x).sum(-1) + 1e-12) - self.prior_radius
        d = out[..., 0] + prior
        return (d, out[..., 1:]) if return_hidden else d

    def forward(self, x, beta, omega_a):
        d, h = self.sdf(x, beta, return_hidden=True)
        c = torch.sigmoid(self.color(h, omega_a))
        return d, c

    def sdf_and_gradient(self, x, beta, create_graph=True):
        with torch.enable_grad():
            if not x.requires_grad:
                x = x.requires_grad_(True)
            d = self.sdf(x, beta)
            (g,) = torch.autograd.grad(d.sum(), x, create_graph=create_graph)
        return d, g


class FeatureField(nn.Module):
    """Unit-norm canonical feature descriptor."""

    def __init__(self, width: int = 64, depth: int = 3, num_freqs: int = 6):
        super().__init__()
        self.num_freqs = num_freqs
        self.net = MLP(embed_dim(3, num_freqs), FEAT_DIM, width, depth)

    def forward(self, x):
        psi = self.net(positional_embed(x, self.num_freqs))
        return psi / torch.sqrt((psi * psi).sum(-1, keepdim=True) + 1e-12)


class BackgroundField(nn.Module):
    """Per-video background radiance field conditioned on a background code."""

    def __init__(self, width: int = 64, depth: int = 3, num_freqs: int = 6, dir_freqs: int = 4):
        super().__init__()
        self.num_freqs = num_freqs
        self.dir_freqs = dir_freqs
        self.trunk = MLP(embed_dim(3, num_freqs) + BG_DIM, 1 + width, width, depth)
        self.color = MLP(width + embed_dim(3, dir_freqs), 3, width // 2, 2)

    def forward(self, x, v, gamma):
        out = self.trunk(positional_embed(x, self.num_freqs), gamma)
        sigma = F.softplus(out[..., 0])
        venc = positional_embed(v, self.dir_freqs)
        c = torch.sigmoid(self.color(out[..., 1:], venc))
        return sigma, c


class JointNet(nn.Module):
    """Per-instance joint locations: a learnable template plus a morphology-driven offset."""

    def __init__(self, rest_joints: torch.Tensor, width: int = 64, depth: int = 3):
        super().__init__()
        self.template = nn.Parameter(rest_joints.clone().float())
        self.num_joints = rest_joints.shape[0]
        self.net = MLP(BETA_DIM, 3 * self.num_joints, width, depth, zero_last=True)

    def forward(self, beta):
        delta = self.net(beta).reshape(beta.shape[:-1] + (self.num_joints, 3))
        return self.template + delta


class AngleNet(nn.Module):
    """Articulation code to per-joint axis-angle rotations."""

    def __init__(self, num_joints: int, width: int = 64, depth: int = 3):
        super().__init__()
        self.num_joints = num_joints
        self.net = MLP(THETA_DIM, 3 * num_joints, width, depth, zero_last=True)

    def forward(self, theta):
        return self.net(theta).reshape(theta.shape[:-1] + (self.num_joints, 3))


class SkinDeltaNet(nn.Module):
    """Learned correction to the Gaussian-bone skinning logits."""

    def __init__(self, num_slots: int, width: int = 64, depth: int = 3, num_freqs: int = 4):
        super().__init__()
        self.num_freqs = num_freqs
        self.net = MLP(embed_dim(3, num_freqs) + BETA_DIM + THETA_DIM, num_slots, width, depth,
                       zero_last=True)

    def forward(self, x, beta, theta):
        return self.net(positional_embed(x, self.num_freqs), beta, theta)


class CodeTable(nn.Module):
    """Latent codes: per-video morphology/background codes and time-embedding
    matrices producing the per-frame articulation, deformation and appearance codes,
    plus per-frame root pose corrections."""

    def __init__(self, frame_counts: list[int], time_freqs: int = 6, init_std: float = 0.1,
                 generator: torch.Generator | None = None):
        super().__init__()
        V = len(frame_counts)
        self.frame_counts = list(frame_counts)
        self.time_freqs = time_freqs
        fdim = embed_dim(1, time_freqs)

        def randn(*shape, std):
            return nn.Parameter(torch.randn(*shape, generator=generator) * std)

        self.beta = randn(V, BETA_DIM, std=init_std)
        self.gamma = randn(V, BG_DIM, std=init_std)
        self.A_theta = randn(V, THETA_DIM, fdim, std=init_std)
        self.A_deform = randn(V, DEFORM_DIM, fdim, std=init_std)
        self.A_appear = randn(V, APPEAR_DIM, fdim, std=init_std)
        offsets = [0]
        for n in frame_counts:
            offsets.append(offsets[-1] + n)
        self.register_buffer("frame_offsets", torch.tensor(offsets, dtype=torch.long), persistent=False)
        # axis-angle + translation correction of the object root pose per frame
        self.root_delta = nn.Parameter(torch.zeros(offsets[-1], 6))

    @property
    def num_videos(self) -> int:
        return len(self.frame_counts)

    def _check(self, video):
        v = torch.as_tensor(video)
        if bool(((v < 0) | (v >= self.num_videos)).any()):
            raise KeyError(f"unknown video id {video}")
        return v

    def time_features(self, video, t):
        video = self._check(video)
        n = torch.as_tensor(self.frame_counts, device=video.device)[video]
        tn = torch.as_tensor(t, dtype=self.beta.dtype) / torch.clamp(n - 1, min=1).to(self.beta.dtype)
        return positional_embed(tn[..., None], self.time_freqs)

    def time_embed(self, video, t, which: str = "theta"):
        """``A_i F(t)`` for the requested code family."""
        video = self._check(video)
        A = {"theta": self.A_theta, "deform": self.A_deform, "appear": self.A_appear}[which][video]
        return (A @ self.time_features(video, t)[..., None])[..., 0]

    def frame_codes(self, video, t):
        video = self._check(video)
        feats = self.time_features(video, t)[..., None]
        return {
            "beta": self.beta[video],
            "gamma": self.gamma[video],
            "theta": (self.A_theta[video] @ feats)[..., 0],
            "omega_d": (self.A_deform[video] @ feats)[..., 0],
            "omega_a": (self.A_appear[video] @ feats)[..., 0],
        }

    def global_frame(self, video, t):
        video = self._check(video)
        return self.frame_offsets[video] + torch.as_tensor(t)
