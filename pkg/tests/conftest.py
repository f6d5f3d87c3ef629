import math

import numpy as np
import pytest
import torch
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

torch.set_num_threads(1)


def random_rotation(gen: torch.Generator, n: int = (), dtype=torch.float64) -> torch.Tensor:
    """Uniform rotations from normalised Gaussian quaternions."""
    from animatable.rigid import quat_to_matrix

    shape = (n,) if isinstance(n, int) else tuple(n)
    q = torch.randn(shape + (4,), generator=gen, dtype=dtype)
    return quat_to_matrix(q / q.norm(dim=-1, keepdim=True))


def random_se3(gen: torch.Generator, n=(), scale: float = 2.0):
    from animatable.rigid import SE3

    shape = (n,) if isinstance(n, int) else tuple(n)
    return SE3(random_rotation(gen, shape), torch.randn(shape + (3,), generator=gen,
                                                        dtype=torch.float64) * scale)


def rot_z(angle: float) -> torch.Tensor:
    c, s = math.cos(angle), math.sin(angle)
    return torch.tensor([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], dtype=torch.float64)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY = dict(sdf_width=16, sdf_depth=3, color_width=8, width=8, depth=2, xyz_freqs=2,
            time_freqs=2, feature_freqs=2, bg_freqs=2, dir_freqs=1, skin_freqs=1, deform_freqs=1)


def tiny_model(topology=None, frame_counts=(5, 4), seed=0, randomize=False):
    """Small float64 model; ``randomize`` also perturbs the zero-initialised heads."""
    from animatable.model import CategoryModel, ModelConfig
    from animatable.skeleton import SkeletonTopology

    if topology is None:
        topology = SkeletonTopology([-1, 0, 1, 0], rest_joints=[[0.0, 0, 0], [0.4, 0, 0],
                                                                [0.7, 0.2, 0], [-0.4, 0, 0]])
    model = CategoryModel(topology, list(frame_counts), ModelConfig(**TINY), seed=seed).double()
    if randomize:
        g = torch.Generator().manual_seed(seed + 99)
        with torch.no_grad():
            for name, p in model.named_parameters():
                if name.startswith(("angle_net", "joint_net", "deform", "skin_delta_net")):
                    p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.3)
    return model


def fd_relative_error(loss_fn, params, step=1e-4, floor=1e-6, max_entries=None, seed=0):
    """Largest elementwise relative gap between autograd and five-point central differences.

    Every entry is checked unless ``max_entries`` caps the count per tensor; the
    denominator is floored at ``floor`` so exactly-zero gradients compare absolutely.
    The fourth-order stencil keeps truncation error below the bound at a step large
    enough to stay clear of float64 round-off.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    worst = 0.0
    g = torch.Generator().manual_seed(seed)
    for p in params:
        grad = (torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()).reshape(-1)
        flat = p.data.view(-1)
        idx = torch.randperm(flat.numel(), generator=g)
        if max_entries is not None:
            idx = idx[:max_entries]
        for i in idx.tolist():
            orig = float(flat[i])
            values = []
            with torch.no_grad():
                for k in (2, 1, -1, -2):
                    flat[i] = orig + k * step
                    values.append(float(loss_fn()))
                flat[i] = orig
            fd = (-values[0] + 8 * values[1] - 8 * values[2] + values[3]) / (12 * step)
            a = float(grad[i])
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), floor))
    return worst


TINY_SYNTH = dict(instances=2, videos_per_instance=1, frames=3, width=16, height=16, focal=17.0,
                  gt_samples=32, mesh_resolution=24)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    from animatable.synth import SynthSpec, generate_synthetic

    root = tmp_path_factory.mktemp("synth") / "data"
    generate_synthetic(SynthSpec(**TINY_SYNTH), root)
    return root


def tiny_train_config(**overrides):
    from animatable.model import ModelConfig
    from animatable.train import TrainConfig

    cfg = TrainConfig.desk()
    base = dict(total_iterations=4, background_iterations=2, rays_per_batch=64, sphere_steps=5,
                sinkhorn_every=2, sinkhorn_resolution=16, sinkhorn_points=32, eikonal_points=32,
                cycle_points=32, soft_points=16, object_samples=8, background_samples=4,
                checkpoint_every=2, model=ModelConfig(**TINY))
    base.update(overrides)
    for k, v in base.items():
        setattr(cfg, k, v)
    return cfg
