import math

import pytest
import torch
import torch.nn.functional as F

from animatable.fields import (APPEAR_DIM, BETA_DIM, BG_DIM, DEFORM_DIM, MLP, AngleNet, BackgroundField,
                               CodeTable, FeatureField, JointNet, ObjectField, SkinDeltaNet,
                               embed_dim, positional_embed)
from animatable.model import CategoryModel, ModelConfig
from animatable.warp import DeformationStack

from conftest import TINY, fd_relative_error, tiny_model

F64 = torch.float64


def test_embedding_of_zero():
    e = positional_embed(torch.zeros(3, dtype=F64), 4)
    assert e.shape == (embed_dim(3, 4),)
    sines = torch.cat([e[3 + 6 * k: 6 + 6 * k] for k in range(4)])
    cosines = torch.cat([e[6 + 6 * k: 9 + 6 * k] for k in range(4)])
    assert torch.equal(sines, torch.zeros(12, dtype=F64)) and torch.equal(cosines, torch.ones(12, dtype=F64))


def test_embedding_without_frequencies_is_passthrough():
    x = torch.randn(5, 3, dtype=F64)
    assert torch.equal(positional_embed(x, 0), x)


def test_embedding_hand_values():
    e = positional_embed(torch.tensor([0.5], dtype=F64), 2)
    assert torch.allclose(e, torch.tensor([0.5, 1.0, 0.0, 0.0, -1.0], dtype=F64), atol=1e-15)


# -- codes -----------------------------------------------------------------------


def test_zero_time_matrix_gives_zero_code():
    table = CodeTable([4, 6]).double()
    with torch.no_grad():
        table.A_theta.zero_()
    assert torch.equal(table.time_embed(1, 3), torch.zeros(16, dtype=F64))


def test_selector_matrix_returns_embedding_rows():
    table = CodeTable([4, 6], time_freqs=2).double()
    fdim = embed_dim(1, 2)
    with torch.no_grad():
        table.A_theta.zero_()
        table.A_theta[0, :fdim] = torch.eye(fdim, dtype=F64)
    feats = table.time_features(0, 2)
    assert torch.equal(table.time_embed(0, 2)[:fdim], feats)
    assert torch.allclose(feats, positional_embed(torch.tensor([2 / 3], dtype=F64), 2))


def test_adjacent_frame_codes_respect_operator_bound():
    table = CodeTable([10]).double()
    for t in range(9):
        diff = (table.time_embed(0, t + 1) - table.time_embed(0, t)).norm()
        bound = torch.linalg.matrix_norm(table.A_theta[0], 2) * (
            table.time_features(0, t + 1) - table.time_features(0, t)).norm()
        assert float(diff.detach()) <= float(bound.detach()) + 1e-12


def test_unknown_video_rejected():
    table = CodeTable([3, 3])
    with pytest.raises(KeyError):
        table.frame_codes(2, 0)
    with pytest.raises(KeyError):
        table.time_embed(torch.tensor([0, -1]), torch.tensor([0, 0]))


# -- fields ----------------------------------------------------------------------


def test_fresh_distance_field_is_negative_inside_positive_outside():
    field = ObjectField(32, 3, 4, 16).double()
    beta = torch.randn(BETA_DIM, dtype=F64)
    d = field.sdf(torch.tensor([[0.0, 0, 0], [3.0, 0, 0], [0, -2.5, 1]], dtype=F64), beta)
    assert float(d[0]) < 0 < float(d[1]) and float(d[2]) > 0


def test_appearance_code_cannot_change_geometry():
    field = ObjectField(32, 3, 4, 16).double()
    with torch.no_grad():
        for p in field.parameters():
            p.add_(0.1 * torch.randn_like(p))
    x = torch.randn(20, 3, dtype=F64)
    beta = torch.randn(BETA_DIM, dtype=F64)
    d1, c1 = field(x, beta, torch.randn(APPEAR_DIM, dtype=F64))
    d2, c2 = field(x, beta, torch.randn(APPEAR_DIM, dtype=F64))
    assert torch.equal(d1, d2) and not torch.equal(c1, c2)
    wa = torch.randn(APPEAR_DIM, dtype=F64, requires_grad=True)
    d, _ = field(x, beta, wa)
    assert d.requires_grad is False or torch.autograd.grad(d.sum(), wa, allow_unused=True)[0] is None


def test_feature_field_is_unit_norm_and_matches_layer_loop():
    field = FeatureField(16, 3, 3).double()
    x = torch.cat((torch.zeros(1, 3, dtype=F64), torch.randn(7, 3, dtype=F64)))
    psi = field(x)
    assert bool(torch.isfinite(psi).all())
    assert torch.allclose(psi.norm(dim=-1), torch.ones(8, dtype=F64), atol=1e-6)
    h = positional_embed(x, 3)
    layers = field.net.layers
    for i, layer in enumerate(layers):
        h = h @ layer.weight.T + layer.bias
        if i < len(layers) - 1:
            h = torch.log1p(torch.exp(10.0 * h)) / 10.0
    ref = h / h.norm(dim=-1, keepdim=True)
    assert torch.allclose(psi, ref, atol=1e-10)


def test_background_density_is_non_negative():
    bg = BackgroundField(16, 3, 2, 1).double()
    with torch.no_grad():
        for p in bg.parameters():
            p.add_(torch.randn_like(p))
    x = torch.randn(100, 3, dtype=F64) * 3
    v = F.normalize(torch.randn(100, 3, dtype=F64), dim=-1)
    sigma, c = bg(x, v, torch.randn(BG_DIM, dtype=F64))
    assert bool((sigma >= 0).all()) and bool(((c >= 0) & (c <= 1)).all())


def test_same_seed_gives_identical_parameters():
    a = tiny_model(seed=7)
    b = tiny_model(seed=7)
    for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert na == nb and torch.equal(pa, pb)
    c = tiny_model(seed=8)
    assert not torch.equal(a.codes.beta, c.codes.beta)


# -- gradients -------------------------------------------------------------------


def test_sum_of_squares_gradient():
    p = torch.randn(10, dtype=F64, requires_grad=True)
    (p * p).sum().backward()
    assert torch.equal(p.grad, 2 * p.detach())


def test_linear_least_squares_gradient():
    g = torch.Generator().manual_seed(0)
    layer = torch.nn.Linear(4, 2).double()
    X = torch.randn(9, 4, generator=g, dtype=F64)
    Y = torch.randn(9, 2, generator=g, dtype=F64)
    ((layer(X) - Y) ** 2).sum().backward()
    residual = (X @ layer.weight.T + layer.bias - Y).detach()
    assert torch.allclose(layer.weight.grad, 2 * residual.T @ X, atol=1e-12)
    assert torch.allclose(layer.bias.grad, 2 * residual.sum(0), atol=1e-12)


def test_graph_cannot_be_replayed_after_backward():
    net = MLP(3, 1, 8, 2).double()
    loss = net(torch.randn(4, 3, dtype=F64)).sum()
    loss.backward()
    with pytest.raises(RuntimeError):
        loss.backward()


def _fd_nets():
    g = torch.Generator().manual_seed(0)

    def r(*s):
        return torch.randn(*s, generator=g, dtype=F64)

    x, beta, wa, theta = r(6, 3), r(BETA_DIM), r(APPEAR_DIM), r(16)
    v = F.normalize(r(6, 3), dim=-1)
    gamma, w3, w16, r_code = r(BG_DIM), r(6, 3), r(6, 16), r(DEFORM_DIM)
    obj = ObjectField(8, 3, 1, 4).double()
    feat = FeatureField(8, 2, 2).double()
    bg = BackgroundField(8, 2, 2, 1).double()
    jn = JointNet(r(4, 3), 8, 2).double()
    an = AngleNet(4, 8, 2).double()
    sk = SkinDeltaNet(5, 8, 2, 1).double()
    deform = DeformationStack(2, 6, 2, 1).double()
    codes = CodeTable([5], time_freqs=1).double()
    # move zero-initialised heads off zero so every parameter carries gradient
    heads = [obj.trunk.layers[-1], jn.net.layers[-1], an.net.layers[-1], sk.net.layers[-1]]
    heads += [b.net.layers[-1] for b in deform.blocks]
    for layer in heads:
        with torch.no_grad():
            layer.weight.copy_(r(*layer.weight.shape) * 0.3)

    def object_loss():
        d, c = obj(x, beta, wa)
        return (d * w3[:, 0]).sum() + (c * w3).sum()

    def background_loss():
        sigma, c = bg(x, v, gamma)
        return (sigma * w3[:, 1]).sum() + (c * w3).sum()

    return {
        "object": (obj, object_loss),
        "feature": (feat, lambda: (feat(x) * w16).sum()),
        "background": (bg, background_loss),
        "joints": (jn, lambda: (jn(beta) ** 2).sum()),
        "angles": (an, lambda: torch.sin(an(theta)).sum()),
        "skin_delta": (sk, lambda: torch.logsumexp(sk(x, beta, theta), -1).sum()),
        "deformation": (deform, lambda: (deform(x, r_code) * w3).sum()),
        "codes": (codes, lambda: sum((v * v).sum() for v in codes.frame_codes(
            torch.tensor([0, 0, 0]), torch.tensor([2, 0, 3])).values())),
    }


NETS = ["object", "feature", "background", "joints", "angles", "skin_delta", "deformation", "codes"]


@pytest.mark.parametrize("name", NETS)
def test_network_gradients_match_finite_differences(name):
    net, loss = _fd_nets()[name]
    assert sum(p.numel() for p in net.parameters()) <= 1000
    assert fd_relative_error(loss, list(net.parameters())) < 1e-4


def test_spatial_gradient_matches_finite_differences():
    field = ObjectField(16, 3, 3, 8).double()
    with torch.no_grad():
        for p in field.trunk.parameters():
            p.add_(0.2 * torch.randn_like(p))
    beta = torch.randn(BETA_DIM, dtype=F64)
    x = torch.randn(5, 3, dtype=F64)
    _, grad = field.sdf_and_gradient(x.clone(), beta)
    h = 1e-6
    for k in range(3):
        e = torch.zeros(3, dtype=F64)
        e[k] = h
        fd = (field.sdf(x + e, beta) - field.sdf(x - e, beta)) / (2 * h)
        assert float(((grad[:, k] - fd).abs() / fd.abs().clamp(min=1e-6)).max()) < 1e-4


def test_sphere_pretraining_leaves_a_valid_distance_field():
    model = CategoryModel(tiny_model().topology, [3, 3], ModelConfig(**TINY), seed=0)
    model.fit_sphere(radius=0.8, steps=50)
    x = (torch.rand(2000, 3) * 2 - 1) * 1.2
    d, g = model.object_field.sdf_and_gradient(x, model.codes.beta[0].detach(), create_graph=False)
    assert float(((g.norm(dim=-1) - 1) ** 2).mean()) < 1e-2
    assert float((d - (x.norm(dim=-1) - 0.8)).abs().max()) < 5e-2
