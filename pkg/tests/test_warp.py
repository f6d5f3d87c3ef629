import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from scipy.spatial.transform import Rotation

from animatable.skinning import NumericError, skinning_weights
from animatable.warp import (SCALE_BOUND, CouplingBlock, DeformationStack, WarpSpec,
                             coupling_masks, cycle_loss, skin_forward, warp_backward, warp_forward)

from conftest import tiny_model

F64 = torch.float64


def frame_codes(model, video=0, t=2):
    c = model.frame_codes(torch.tensor(video), torch.tensor(t))
    return WarpSpec(c["beta"].detach(), c["theta"].detach(), c["omega_d"].detach())


def force_slot(model, k):
    """Skinning delta that makes slot ``k`` win outright."""
    n = model.topology.num_bones

    def delta(x, beta, theta):
        d = torch.zeros(x.shape[:-1] + (n,), dtype=x.dtype)
        d[..., k] = 1e4
        return d

    model.skin_delta = delta


# -- oracle -------------------------------------------------------------------


def _frames(parent, joints, angles):
    B = len(parent)
    F = [None] * B
    done = set()
    while len(done) < B:
        for j in range(B):
            p = parent[j]
            if j in done or (p != -1 and p not in done):
                continue
            local = np.eye(4)
            local[:3, :3] = Rotation.from_rotvec(angles[j]).as_matrix()
            local[:3, 3] = joints[j] - (joints[p] if p != -1 else 0.0)
            F[j] = local if p == -1 else F[p] @ local
            done.add(j)
    return F


def _dq(M):
    x, y, z, w = Rotation.from_matrix(M[:3, :3]).as_quat()
    q = np.array([w, x, y, z])
    t = np.concatenate(([0.0], M[:3, 3]))
    return q, 0.5 * _qmul(t, q)


def _qmul(a, b):
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2, w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                     w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2, w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2])


def reference_forward(model, spec, x):
    """Per-bone stretch, then per-bone articulation, composed explicitly; blended
    with a scalar dual-quaternion loop; then each coupling block applied by hand."""
    topo = model.topology
    J_c = model.canonical_joints.detach().double().numpy()
    with torch.no_grad():
        J_i = model.instance_joints(spec.beta).double().numpy()
        Q = model.angles(spec.theta).double().numpy()
        W = skinning_weights(x, model.rig(spec.beta, spec.theta).canonical_bones,
                             model.skin_delta(x, spec.beta, spec.theta)).numpy()
    F = _frames(topo.parent, J_i, Q)
    slots = []
    for j, p in enumerate(topo.parent):
        b = j if p == -1 else p
        stretch = np.eye(4)
        stretch[:3, 3] = J_i[b] - J_c[b]
        rest_inv = np.eye(4)
        rest_inv[:3, 3] = -J_i[b]
        slots.append(F[b] @ rest_inv @ stretch)
    slots.append(np.eye(4))
    dqs = [_dq(M) for M in slots]
    out = np.zeros_like(x.numpy())
    for i, w in enumerate(W):
        pivot = dqs[int(np.argmax(w))][0]
        real = np.zeros(4)
        dual = np.zeros(4)
        for wk, (r, d) in zip(w, dqs):
            s = -1.0 if np.dot(r, pivot) < 0 else 1.0
            real += wk * s * r
            dual += wk * s * d
        n = np.linalg.norm(real)
        real, dual = real / n, dual / n
        conj = real * np.array([1, -1, -1, -1])
        R = Rotation.from_quat([real[1], real[2], real[3], real[0]]).as_matrix()
        out[i] = R @ x[i].numpy() + 2 * _qmul(dual, conj)[1:]
    y = torch.from_numpy(out)
    with torch.no_grad():
        for block in model.deform.blocks:
            s, t = block._scale_shift(y[:, block.held], spec.omega_d)
            moved = y[:, block.moved] * torch.exp(s) + t
            y = y.clone()
            y[:, block.moved] = moved
    return y


def test_fused_warp_matches_unfused_reference():
    model = tiny_model(randomize=True)
    g = torch.Generator().manual_seed(5)
    x = torch.randn(40, 3, generator=g, dtype=F64) * 0.5
    for video, t in ((0, 0), (1, 3)):
        spec = frame_codes(model, video, t)
        with torch.no_grad():
            fused = warp_forward(x, spec, model)
        assert float((fused - reference_forward(model, spec, x)).abs().max()) < 1e-9


# -- warps ---------------------------------------------------------------------


def test_fresh_model_warp_is_identity():
    model = tiny_model()
    x = torch.randn(50, 3, generator=torch.Generator().manual_seed(0), dtype=F64)
    spec = frame_codes(model)
    with torch.no_grad():
        assert float((warp_forward(x, spec, model) - x).abs().max()) < 1e-12
        assert float((warp_backward(x, spec.reversed(), model) - x).abs().max()) < 1e-12


def test_one_hot_skinning_moves_points_rigidly():
    model = tiny_model(randomize=True)
    spec = frame_codes(model)
    x = torch.randn(30, 3, generator=torch.Generator().manual_seed(1), dtype=F64)
    for k in range(model.topology.num_bones):
        force_slot(model, k)
        with torch.no_grad():
            slots = model.rig(spec.beta, spec.theta).slot_transforms
            y = skin_forward(x, spec, model)
            assert float((y - slots[k].apply(x)).abs().max()) < 1e-12
            back = warp_backward(warp_forward(x, spec, model), spec.reversed(), model)
        assert float((back - x).abs().max()) < 1e-12


def test_one_hot_cycle_is_exact():
    model = tiny_model(randomize=True)
    force_slot(model, 1)
    spec = frame_codes(model, 1, 2)
    x = torch.randn(1000, 3, generator=torch.Generator().manual_seed(2), dtype=F64)
    with torch.no_grad():
        assert float(cycle_loss(x, spec, model)) < 1e-12


def test_deformation_only_cycle_is_exact():
    model = tiny_model(randomize=True)
    force_slot(model, model.topology.num_bones - 1)  # root body slot: identity skinning
    spec = frame_codes(model)
    x = torch.randn(500, 3, generator=torch.Generator().manual_seed(3), dtype=F64)
    with torch.no_grad():
        assert float(cycle_loss(x, spec, model)) < 1e-10


def test_identity_configuration_has_zero_cycle():
    model = tiny_model()
    x = torch.randn(100, 3, generator=torch.Generator().manual_seed(4), dtype=F64)
    with torch.no_grad():
        assert float(cycle_loss(x, frame_codes(model), model)) < 1e-20


def test_wrong_direction_rejected():
    model = tiny_model()
    spec = frame_codes(model)
    with pytest.raises(ValueError):
        warp_forward(torch.zeros(1, 3, dtype=F64), spec.reversed(), model)
    with pytest.raises(ValueError):
        warp_backward(torch.zeros(1, 3, dtype=F64), spec, model)


def test_non_finite_stage_is_named():
    model = tiny_model()
    spec = frame_codes(model)
    x = torch.zeros(2, 3, dtype=F64)
    x[0, 0] = float("inf")
    with pytest.raises(NumericError, match="blend skinning|skinning delta"):
        warp_forward(x, spec, model)


# -- coupling -------------------------------------------------------------------


def test_two_blocks_touch_every_coordinate():
    masks = coupling_masks(2)
    moved = [any(not m[k] for m in masks) for k in range(3)]
    assert all(moved)


def test_zero_initialised_stack_is_identity():
    stack = DeformationStack(2).double()
    x = torch.randn(20, 3, dtype=F64)
    code = torch.randn(64, dtype=F64)
    assert torch.equal(stack(x, code), x)


def _random_stack(seed, blocks=2, std=0.5):
    torch.manual_seed(seed)
    stack = DeformationStack(blocks).double()
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in stack.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=F64) * std)
    return stack


def test_random_stack_round_trip_on_many_points():
    stack = _random_stack(0)
    g = torch.Generator().manual_seed(1)
    x = torch.randn(10_000, 3, generator=g, dtype=F64)
    code = torch.randn(64, generator=g, dtype=F64)
    with torch.no_grad():
        y, ld = stack(x, code, return_logdet=True)
        back, ld_inv = stack.inverse(y, code, return_logdet=True)
    assert float((back - x).abs().max()) < 1e-6
    assert float((ld + ld_inv).abs().max()) < 1e-9
    assert float((y - x).abs().max()) > 1e-2


def test_scale_is_clamped_not_rejected():
    block = CouplingBlock((True, False, False)).double()
    with torch.no_grad():
        block.net.layers[-1].bias[:2] = 100.0
    x = torch.randn(5, 3, dtype=F64)
    code = torch.zeros(64, dtype=F64)
    s, _ = block._scale_shift(x[:, block.held], code)
    assert float(s.detach().abs().max()) <= SCALE_BOUND
    y, _ = block(x, code)
    back, _ = block.inverse(y, code)
    assert torch.allclose(back, x, atol=1e-9)


@given(st.integers(0, 2**31 - 1))
def test_round_trip_property(seed):
    stack = _random_stack(seed % 1000)
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(64, 3, generator=g, dtype=F64) * 2
    code = torch.randn(64, generator=g, dtype=F64)
    with torch.no_grad():
        assert float((stack.inverse(stack(x, code), code) - x).abs().max()) < 1e-6
