"""Loss terms, the entropic transport divergence and the per-iteration loss schedule."""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .warp import WarpSpec, skin_forward

log = logging.getLogger(__name__)

TERMS = ("sil", "rgb", "flow", "feat", "eikonal", "sinkhorn", "soft", "cycle")


class ConvergenceWarning(UserWarning):
    pass


def _scalar(value) -> float:
    return float(value.detach()) if torch.is_tensor(value) else float(value)


@dataclass
class LossWeights:
    sil: float = 1.0
    rgb: float = 1.0
    flow: float = 1.0
    feat: float = 0.1
    eikonal: float = 0.01
    sinkhorn: float = 0.1
    soft: float = 0.01
    cycle: float = 0.1
    silhouette_cutoff: float = 0.2  # fraction of iterations after which sil is off
    squared_soft: bool = False


@dataclass
class LossReport:
    terms: dict = field(default_factory=dict)  # name -> scalar tensor
    weights: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in self.terms:
            if name not in TERMS:
                raise KeyError(f"unknown loss term {name!r}")

    def update(self, **terms) -> "LossReport":
        for name, value in terms.items():
            if name not in TERMS:
                raise KeyError(f"unknown loss term {name!r}")
            self.terms[name] = value
        return self

    def total(self) -> torch.Tensor:
        out = None
        for name, value in self.terms.items():
            w = self.weights.get(name, 1.0)
            if w == 0.0:
                continue
            out = w * value if out is None else out + w * value
        if out is None:
            return torch.zeros(())
        return out

    def check(self) -> None:
        for name, value in self.terms.items():
            v = _scalar(value)
            if not math.isfinite(v) or v < 0:
                raise FloatingPointError(f"loss term {name} = {v}")

    def row(self, iteration: int) -> list[str]:
        vals = [repr(_scalar(self.terms[t])) if t in self.terms else "" for t in TERMS]
        return [str(iteration), *vals, repr(_scalar(self.total()))]


class LossLog:
    """Streams one CSV row per iteration: iteration, every term, total."""

    header = ["iteration", *TERMS, "total"]

    def __init__(self, path):
        self._f = open(path, "w", newline="")
        self._w = csv.writer(self._f, lineterminator="\n")
        self._w.writerow(self.header)

    def write(self, iteration: int, report: LossReport) -> None:
        self._w.writerow(report.row(iteration))
        self._f.flush()

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_loss_log(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: (float(v) if v else None) for k, v in row.items()} for row in csv.DictReader(f)]


def loss_schedule(iteration: int, total_iters: int, weights: LossWeights) -> dict:
    """Per-term weights at ``iteration``; the silhouette term is switched off from
    ``int(silhouette_cutoff * total_iters)`` onwards."""
    if not 0 <= iteration <= max(total_iters, 0):
        raise ValueError(f"iteration {iteration} outside [0, {total_iters}]")
    out = {t: float(getattr(weights, t)) for t in TERMS}
    if iteration >= int(weights.silhouette_cutoff * total_iters):
        out["sil"] = 0.0
    return out


# ---------------------------------------------------------------------------
# reconstruction


def _check_channels(name, rendered, observed):
    if rendered.shape != observed.shape:
        raise ValueError(f"{name}: rendered {tuple(rendered.shape)} vs observed {tuple(observed.shape)}")


def reconstruction_losses(rendered: dict, observed: dict, image_diagonal: float) -> LossReport:
    """Squared errors per ray, averaged over rays. Flow is measured in units of the
    image diagonal. Only channels present in both dicts contribute."""
    report = LossReport()
    if "silhouette" in rendered and "mask" in observed:
        _check_channels("silhouette", rendered["silhouette"], observed["mask"])
        report.update(sil=((rendered["silhouette"] - observed["mask"]) ** 2).mean())
    if "rgb" in rendered and "rgb" in observed:
        _check_channels("rgb", rendered["rgb"], observed["rgb"])
        report.update(rgb=((rendered["rgb"] - observed["rgb"]) ** 2).sum(-1).mean())
    if "flow" in rendered and "flow" in observed:
        _check_channels("flow", rendered["flow"], observed["flow"])
        diff = (rendered["flow"] - observed["flow"]) / image_diagonal
        report.update(flow=(diff**2).sum(-1).mean())
    if "feature" in rendered and "feat" in observed:
        _check_channels("feature", rendered["feature"], observed["feat"])
        report.update(feat=((rendered["feature"] - observed["feat"]) ** 2).sum(-1).mean())
    return report


# ---------------------------------------------------------------------------
# regularisers


def eikonal_loss(points: torch.Tensor, sdf_fn) -> torch.Tensor:
    """Mean of ``(|grad d| - 1)^2``; differentiable w.r.t. the field's parameters."""
    x = points.detach().requires_grad_(True)
    with torch.enable_grad():
        d = sdf_fn(x)
        (g,) = torch.autograd.grad(d.sum(), x, create_graph=True)
    return ((g.norm(dim=-1) - 1.0) ** 2).mean()


def soft_deformation_penalty(points: torch.Tensor, spec: WarpSpec, model,
                             squared: bool = False) -> torch.Tensor:
    """Mean length of the residual displacement the coupling stack adds on top of
    blend skinning."""
    skinned = skin_forward(points, spec, model)
    deformed = model.deform(skinned, spec.omega_d)
    sq = ((deformed - skinned) ** 2).sum(-1)
    if squared:
        return sq.mean()
    # keep the gradient finite where the displacement vanishes
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq)).mean()


def cycle_term(points: torch.Tensor, spec: WarpSpec, model, **kw) -> torch.Tensor:
    from .warp import cycle_loss

    return cycle_loss(points, spec, model, **kw)


# ---------------------------------------------------------------------------
# entropic optimal transport


def sq_distances(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    top = x.max(axis=axis, keepdims=True)
    return (top + np.log(np.exp(x - top).sum(axis=axis, keepdims=True))).squeeze(axis)


# The potential solves run in float64 numpy: the clouds are small, so per-op
# dispatch dominates and numpy's is far cheaper than torch's.


def _potentials(C: torch.Tensor, eps: float, tol: float, max_iter: int, init=None):
    """Log-domain Sinkhorn iterations on a fixed cost; returns dual potentials and
    whether the marginal error fell below ``tol``."""
    Cn = C.double().numpy()
    n, m = Cn.shape
    log_nu = -math.log(m)
    log_mu = -math.log(n)
    g = np.zeros(m) if init is None else init[1].double().numpy()
    f = np.zeros(n)
    ok = False
    for _ in range(max_iter):
        f = -eps * _lse(log_nu + (g[None, :] - Cn) / eps, 1)
        g = -eps * _lse(log_mu + (f[:, None] - Cn) / eps, 0)
        # after the g update column marginals are exact; test the rows
        rows = np.exp(log_mu + log_nu + f / eps + _lse((g[None, :] - Cn) / eps, 1))
        if np.abs(rows - 1.0 / n).sum() < tol:
            ok = True
            break
    return torch.from_numpy(f).to(C.dtype), torch.from_numpy(g).to(C.dtype), ok


def _self_potential(C: torch.Tensor, eps: float, tol: float, max_iter: int, init=None):
    """Symmetric problem: one potential, averaged fixed-point updates."""
    Cn = C.double().numpy()
    n = Cn.shape[0]
    log_mu = -math.log(n)
    f = np.zeros(n) if init is None else init[0].double().numpy()
    ok = False
    for _ in range(max_iter):
        f = 0.5 * (f - eps * _lse(log_mu + (f[None, :] - Cn) / eps, 1))
        rows = np.exp(2 * log_mu + f / eps + _lse((f[None, :] - Cn) / eps, 1))
        if np.abs(rows - 1.0 / n).sum() < tol:
            ok = True
            break
    return torch.from_numpy(f).to(C.dtype), ok


def entropic_ot(a: torch.Tensor, b: torch.Tensor, eps: float, tol: float = 1e-6,
                max_iter: int = 500, warm: dict | None = None) -> torch.Tensor:
    """``min <P, C> + eps KL(P | mu x nu)`` between uniform clouds, squared-Euclidean
    cost. Potentials are solved without gradient tracking and the value is the dual
    objective, so gradients reach the points through the cost only.

    ``warm`` is a dict owned by the caller; the solved potentials are stored in it and
    seed the next solve with matching shapes and ``eps``. The stopping rule is
    unchanged, so only the iteration count differs.
    """
    if len(a) == 0 or len(b) == 0:
        raise ValueError("point clouds must be non-empty")
    if eps <= 0:
        raise ValueError("eps must be positive")
    C = sq_distances(a, b)
    init = None
    if warm is not None and warm.get("key") == (C.shape, eps):
        init = warm["fg"]
    with torch.no_grad():
        if a is b or (a.shape == b.shape and torch.equal(a.detach(), b.detach())):
            f, ok = _self_potential(C.detach(), eps, tol, max_iter, init)
            g = f
        else:
            f, g, ok = _potentials(C.detach(), eps, tol, max_iter, init)
    if warm is not None:
        warm["key"], warm["fg"] = (C.shape, eps), (f, g)
    if not ok:
        warnings.warn(f"Sinkhorn did not reach tolerance {tol} in {max_iter} iterations",
                      ConvergenceWarning, stacklevel=3)
    n, m = C.shape
    mass = torch.exp((f[:, None] + g[None, :] - C) / eps) / (n * m)
    return f.mean() + g.mean() - eps * (mass.sum() - 1.0)


def sinkhorn_divergence(a: torch.Tensor, b: torch.Tensor, eps: float, tol: float = 1e-6,
                        max_iter: int = 500, self_a: torch.Tensor | None = None,
                        warm: dict | None = None) -> torch.Tensor:
    """Debiased divergence ``OT(a, b) - OT(a, a)/2 - OT(b, b)/2``. ``self_a`` may
    carry a precomputed ``OT(a, a)`` when ``a`` is fixed across calls; ``warm``
    keeps potentials between calls (see :func:`entropic_ot`)."""
    ab = bb = None
    if warm is not None:
        ab, bb = warm.setdefault("ab", {}), warm.setdefault("bb", {})
    if self_a is None:
        self_a = entropic_ot(a, a, eps, tol, max_iter)
    return (entropic_ot(a, b, eps, tol, max_iter, ab)
            - 0.5 * self_a
            - 0.5 * entropic_ot(b, b, eps, tol, max_iter, bb))


def default_epsilon(points: torch.Tensor) -> float:
    """1e-2 times the squared diagonal of the points' bounding box."""
    ext = points.detach().max(0).values - points.detach().min(0).values
    return 1e-2 * float((ext**2).sum())


def weights_dict(weights: LossWeights) -> dict:
    return asdict(weights)
