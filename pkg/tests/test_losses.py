import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from animatable.losses import (ConvergenceWarning, LossReport, LossWeights, default_epsilon,
                               eikonal_loss, entropic_ot, loss_schedule, reconstruction_losses,
                               sinkhorn_divergence, soft_deformation_penalty)
from animatable.warp import WarpSpec

from conftest import tiny_model

F64 = torch.float64


# -- reconstruction -----------------------------------------------------------------


def test_reconstruction_worked_example():
    rendered = {"silhouette": torch.tensor([0.5, 1.0]), "rgb": torch.tensor([[1.0, 0, 0], [0, 0, 0]]),
                "flow": torch.tensor([[3.0, 4.0], [0.0, 0.0]])}
    observed = {"mask": torch.tensor([1.0, 1.0]), "rgb": torch.tensor([[0.0, 0, 0], [0, 0, 0]]),
                "flow": torch.tensor([[0.0, 0.0], [0.0, 0.0]])}
    r = reconstruction_losses(rendered, observed, image_diagonal=10.0)
    assert float(r.terms["sil"]) == pytest.approx(0.125)
    assert float(r.terms["rgb"]) == pytest.approx(0.5)
    assert float(r.terms["flow"]) == pytest.approx(0.125)  # (0.5^2) / 2 rays


def test_reconstruction_matches_per_ray_loop():
    g = torch.Generator().manual_seed(0)
    n = 17
    rendered = {"silhouette": torch.rand(n, generator=g, dtype=F64), "rgb": torch.rand(n, 3, generator=g, dtype=F64),
                "flow": torch.randn(n, 2, generator=g, dtype=F64), "feature": torch.randn(n, 16, generator=g, dtype=F64)}
    observed = {"mask": torch.rand(n, generator=g, dtype=F64), "rgb": torch.rand(n, 3, generator=g, dtype=F64),
                "flow": torch.randn(n, 2, generator=g, dtype=F64), "feat": torch.randn(n, 16, generator=g, dtype=F64)}
    diag = 7.0
    r = reconstruction_losses(rendered, observed, diag)
    sums = dict(sil=0.0, rgb=0.0, flow=0.0, feat=0.0)
    for i in range(n):
        sums["sil"] += float(rendered["silhouette"][i] - observed["mask"][i]) ** 2
        sums["rgb"] += sum(float(rendered["rgb"][i, c] - observed["rgb"][i, c]) ** 2 for c in range(3))
        sums["flow"] += sum((float(rendered["flow"][i, c] - observed["flow"][i, c]) / diag) ** 2 for c in range(2))
        sums["feat"] += sum(float(rendered["feature"][i, c] - observed["feat"][i, c]) ** 2 for c in range(16))
    for k, v in sums.items():
        assert float(r.terms[k]) == pytest.approx(v / n, rel=1e-12)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        reconstruction_losses({"rgb": torch.zeros(3, 3)}, {"rgb": torch.zeros(4, 3)}, 1.0)


def test_report_rejects_unknown_terms_and_bad_values():
    with pytest.raises(KeyError):
        LossReport().update(bogus=torch.tensor(1.0))
    with pytest.raises(FloatingPointError):
        LossReport().update(rgb=torch.tensor(float("nan"))).check()
    rep = LossReport(weights={"rgb": 2.0, "sil": 0.0}).update(rgb=torch.tensor(1.5), sil=torch.tensor(9.0))
    assert float(rep.total()) == 3.0


# -- schedule ----------------------------------------------------------------------


def test_silhouette_switches_off_at_cutoff():
    w = LossWeights(silhouette_cutoff=0.2)
    assert loss_schedule(0, 100, w)["sil"] == 1.0
    assert loss_schedule(19, 100, w)["sil"] == 1.0
    assert loss_schedule(20, 100, w)["sil"] == 0.0
    assert loss_schedule(21, 100, w)["sil"] == 0.0
    assert loss_schedule(21, 100, w)["rgb"] == 1.0


def test_schedule_rejects_out_of_range_iteration():
    with pytest.raises(ValueError):
        loss_schedule(101, 100, LossWeights())
    with pytest.raises(ValueError):
        loss_schedule(-1, 100, LossWeights())


# -- eikonal -----------------------------------------------------------------------


def test_eikonal_is_zero_for_exact_distance():
    x = torch.randn(200, 3, generator=torch.Generator().manual_seed(0), dtype=F64) + 0.1
    assert float(eikonal_loss(x, lambda p: p.norm(dim=-1) - 1.0).detach()) < 1e-24


def test_eikonal_is_one_for_doubled_distance():
    x = torch.randn(200, 3, generator=torch.Generator().manual_seed(0), dtype=F64) + 0.1
    assert float(eikonal_loss(x, lambda p: 2 * (p.norm(dim=-1) - 1.0)).detach()) == pytest.approx(1.0, abs=1e-12)


def test_eikonal_gradient_reaches_field_parameters():
    scale = torch.tensor(2.0, dtype=F64, requires_grad=True)
    x = torch.randn(50, 3, generator=torch.Generator().manual_seed(0), dtype=F64) + 0.1
    eikonal_loss(x, lambda p: scale * (p.norm(dim=-1) - 1.0)).backward()
    assert float(scale.grad) == pytest.approx(2.0, rel=1e-12)  # d/ds (s-1)^2 at s=2


# -- soft deformation --------------------------------------------------------------


class Shift(torch.nn.Module):
    def __init__(self, u):
        super().__init__()
        self.u = u

    def forward(self, x, code):
        return x + self.u


def _spec(model):
    c = model.frame_codes(torch.tensor(0), torch.tensor(1))
    return WarpSpec(c["beta"].detach(), c["theta"].detach(), c["omega_d"].detach())


def test_soft_penalty_is_zero_for_zero_initialised_stack():
    model = tiny_model()
    x = torch.randn(30, 3, dtype=F64)
    assert float(soft_deformation_penalty(x, _spec(model), model)) == 0.0


def test_soft_penalty_of_constant_translation_is_its_length():
    model = tiny_model(randomize=True)
    u = torch.tensor([0.3, -0.4, 1.2], dtype=F64)
    model.deform = Shift(u)
    x = torch.randn(30, 3, dtype=F64)
    spec = _spec(model)
    assert float(soft_deformation_penalty(x, spec, model)) == pytest.approx(1.3, rel=1e-12)
    assert float(soft_deformation_penalty(x, spec, model, squared=True)) == pytest.approx(1.69, rel=1e-12)


def test_soft_penalty_matches_explicit_difference():
    model = tiny_model(randomize=True)
    x = torch.randn(25, 3, generator=torch.Generator().manual_seed(1), dtype=F64)
    spec = _spec(model)
    from animatable.warp import skin_forward, warp_forward

    with torch.no_grad():
        oracle = np.mean([float((a - b).norm()) for a, b in zip(warp_forward(x, spec, model),
                                                                 skin_forward(x, spec, model))])
        assert float(soft_deformation_penalty(x, spec, model)) == pytest.approx(oracle, rel=1e-12)


# -- entropic transport ------------------------------------------------------------


def dense_ot(a, b, eps, iters=20000):
    """Plain kernel-scaling iterations in the primal, then the primal objective."""
    a, b = np.asarray(a), np.asarray(b)
    C = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    mu, nu = np.full(len(a), 1 / len(a)), np.full(len(b), 1 / len(b))
    K = np.exp(-C / eps)
    u, v = np.ones(len(a)), np.ones(len(b))
    for _ in range(iters):
        u = mu / (K @ v)
        v = nu / (K.T @ u)
    P = u[:, None] * K * v[None, :]
    kl = (P * np.log(P / np.outer(mu, nu))).sum() - P.sum() + 1
    return float((P * C).sum() + eps * kl)


def test_entropic_value_matches_dense_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.random((6, 3)), rng.random((4, 3))
    got = float(entropic_ot(torch.from_numpy(a), torch.from_numpy(b), 0.1, tol=1e-12, max_iter=5000))
    assert abs(got - dense_ot(a, b, 0.1)) < 1e-4


def test_divergence_of_cloud_with_itself_vanishes():
    a = torch.rand(50, 3, generator=torch.Generator().manual_seed(0), dtype=F64)
    assert abs(float(sinkhorn_divergence(a, a.clone(), 0.05, tol=1e-10, max_iter=5000))) < 1e-6


def test_divergence_is_symmetric():
    g = torch.Generator().manual_seed(1)
    a, b = torch.rand(30, 3, generator=g, dtype=F64), torch.rand(20, 3, generator=g, dtype=F64) + 0.3
    ab = float(sinkhorn_divergence(a, b, 0.05, tol=1e-12, max_iter=5000))
    ba = float(sinkhorn_divergence(b, a, 0.05, tol=1e-12, max_iter=5000))
    assert abs(ab - ba) < 1e-8 and ab > 0


@given(st.floats(0.0, 3.0), st.floats(0.01, 1.0))
def test_single_point_divergence_is_squared_distance(r, eps):
    a = torch.zeros(1, 3, dtype=F64)
    b = torch.tensor([[r, 0.0, 0.0]], dtype=F64)
    assert float(sinkhorn_divergence(a, b, eps)) == pytest.approx(r * r, abs=1e-12)


def test_point_gradients_match_central_differences():
    g = torch.Generator().manual_seed(2)
    b = torch.rand(7, 3, generator=g, dtype=F64)
    a = (torch.rand(5, 3, generator=g, dtype=F64) + 0.2).requires_grad_(True)
    eps = 0.1

    def f():
        return sinkhorn_divergence(a, b, eps, tol=1e-13, max_iter=20000)

    f().backward()
    worst = 0.0
    flat = a.data.view(-1)
    for i in range(flat.numel()):
        o = float(flat[i])
        with torch.no_grad():
            flat[i] = o + 1e-4
            up = float(f())
            flat[i] = o - 1e-4
            down = float(f())
            flat[i] = o
        fd = (up - down) / 2e-4
        an = float(a.grad.view(-1)[i])
        worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-6))
    assert worst < 1e-4


def test_non_convergence_warns_but_returns_finite():
    g = torch.Generator().manual_seed(3)
    a, b = torch.rand(20, 3, generator=g, dtype=F64), torch.rand(20, 3, generator=g, dtype=F64)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        v = entropic_ot(a, b, 1e-3, tol=1e-14, max_iter=2)
    assert math.isfinite(float(v)) and any(issubclass(w.category, ConvergenceWarning) for w in caught)


def test_invalid_inputs_rejected():
    with pytest.raises(ValueError):
        entropic_ot(torch.zeros(0, 3), torch.zeros(2, 3), 0.1)
    with pytest.raises(ValueError):
        entropic_ot(torch.zeros(1, 3), torch.zeros(2, 3), 0.0)


def test_default_epsilon_tracks_bounding_box():
    pts = torch.tensor([[0.0, 0, 0], [1.0, 2.0, 2.0]], dtype=F64)
    assert default_epsilon(pts) == pytest.approx(0.09)
