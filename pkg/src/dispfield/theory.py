"""Numerical verification of the gradient-stability bounds.

For a field f displaced along its own gradient, three nested bounds
relate the gradient change to the displacement size:

  unnormalized:  |grad f(x + d n) - grad f(x)|  <=  |delta| L M
  eikonal form:  same lhs                       <=  (1 + eps) |delta| M
  unit normals:  |n_hat - n|                     <=  ((1+eps)/(1-eps)) |delta| M

with delta = d / |grad f(x)|, eps the worst eikonal residual, L the
worst gradient norm, and M a Lipschitz constant of the gradient. The
constants are measured, not derived, so two modes exist: "augmented"
folds every checked displacement pair into the estimates, which makes
the inequalities hold by construction (a failure then indicates a bug,
not a tight constant); "independent" estimates constants from separate
random probes, so a small violation fraction from underestimated M is
expected and tolerated.
"""

import copy
import dataclasses
import json
from typing import NamedTuple, Optional

import numpy as np
import torch

from .errors import ConfigError, InapplicableBoundError
from .meshing import _resolve_bounds

DEFAULT_PROBE_STEP = 1e-3
DEGENERATE_TOL = 1e-12
# one-sided slack on lhs <= rhs so float roundoff at exact equality
# (augmented mode meets the bound with equality) cannot flag a violation
REL_SLACK = 1e-12


class FieldConstants(NamedTuple):
    epsilon_hat: float
    M_hat: float
    L_hat: float


def gradient_evaluator(field):
    """Wrap any supported field into pts -> gradients, float64 numpy.

    Accepts the analytic field protocol (a .gradient method), a sine
    network or displacement model (copied to float64 so probe
    differences are not drowned by eval noise), or a plain callable
    mapping a torch (n, 3) batch to (n,) values.
    """
    from .model import DisplacementModel
    from .sirens import Siren

    if hasattr(field, "gradient") and not isinstance(field, torch.nn.Module):
        def eval_analytic(pts):
            x = torch.as_tensor(np.asarray(pts), dtype=torch.float64)
            return field.gradient(x).detach().numpy()
        return eval_analytic
    if isinstance(field, DisplacementModel):
        model = copy.deepcopy(field).to(torch.float64)
        def eval_model(pts):
            x = torch.as_tensor(np.asarray(pts), dtype=torch.float64)
            g = model.detail_gradient(x, on_degenerate="zero")
            return g.detach().numpy()
        return eval_model
    if isinstance(field, Siren):
        net = copy.deepcopy(field).to(torch.float64)
        def eval_net(pts):
            x = torch.as_tensor(np.asarray(pts), dtype=torch.float64)
            return net.value_and_grad(x).grads.detach().numpy()
        return eval_net
    if callable(field):
        def eval_callable(pts):
            x = torch.as_tensor(np.asarray(pts), dtype=torch.float64)
            x.requires_grad_(True)
            vals = field(x)
            if vals.shape != (x.shape[0],):
                raise ConfigError(
                    f"field must map (n, 3) to (n,), got {tuple(vals.shape)}")
            (g,) = torch.autograd.grad(vals.sum(), x)
            return g.detach().numpy()
        return eval_callable
    raise ConfigError(f"cannot evaluate gradients of {type(field).__name__}")


def _sample_box(rng, count, bounds):
    lo, hi = _resolve_bounds(bounds)
    return lo + rng.random((count, 3)) * (hi - lo)


def _probe_ratios(grad_fn, pts, grads, rng, step):
    """Finite-difference Lipschitz ratios |grad(x+su) - grad(x)| / s
    along one random unit direction per point."""
    u = rng.normal(size=pts.shape)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    moved = grad_fn(pts + step * u)
    return np.linalg.norm(moved - grads, axis=1) / step


def estimate_constants(field, sample_count=10000, seed=0, bounds=1.0,
                       step=DEFAULT_PROBE_STEP):
    """Measured eikonal residual, gradient-Lipschitz, and gradient-norm
    constants over uniform samples: (epsilon_hat, M_hat, L_hat)."""
    if sample_count <= 0:
        raise ConfigError("sample_count must be positive")
    if not step > 0:
        raise ConfigError("probe step must be positive")
    rng = np.random.default_rng(seed)
    grad_fn = gradient_evaluator(field)
    pts = _sample_box(rng, sample_count, bounds)
    grads = grad_fn(pts)
    norms = np.linalg.norm(grads, axis=1)
    ratios = _probe_ratios(grad_fn, pts, grads, rng, step)
    return FieldConstants(
        epsilon_hat=float(np.abs(norms - 1.0).max()),
        M_hat=float(ratios.max()),
        L_hat=float(norms.max()),
    )


@dataclasses.dataclass
class BoundCheck:
    """Outcome of one inequality over all checked (point, magnitude)
    pairs."""

    name: str
    n_checks: int
    violation_count: int
    violation_fraction: float
    max_ratio: float                 # worst lhs/rhs; 0 when both sides vanish
    violating_points: list           # up to a capped number of [x, y, z]

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclasses.dataclass
class BoundReport:
    epsilon_hat: float
    L_hat: float
    M_hat: float
    mode: str
    magnitudes: list
    n_samples: int
    n_dropped: int                   # degenerate-gradient samples excluded
    seed: int
    theorem: BoundCheck
    corollary: BoundCheck
    normalized: Optional[BoundCheck]

    def __post_init__(self):
        for check in (self.theorem, self.corollary, self.normalized):
            if check is not None and not 0.0 <= check.violation_fraction <= 1.0:
                raise ConfigError("violation fraction must lie in [0, 1]")
        if self.epsilon_hat < 0 or self.M_hat < 0:
            raise ConfigError("estimated constants must be nonnegative")

    def to_json(self):
        d = dataclasses.asdict(self)
        return json.dumps(d, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        for key in ("theorem", "corollary", "normalized"):
            if d.get(key) is not None:
                d[key] = BoundCheck(**d[key])
        return cls(**d)


def _bound_check(name, lhs, rhs, points, max_recorded):
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(rhs > 0, lhs / np.where(rhs > 0, rhs, 1.0),
                         np.where(lhs > 0, np.inf, 0.0))
    violated = lhs > rhs * (1.0 + REL_SLACK)
    idx = np.flatnonzero(violated)
    return BoundCheck(
        name=name,
        n_checks=int(lhs.size),
        violation_count=int(idx.size),
        violation_fraction=float(idx.size / lhs.size) if lhs.size else 0.0,
        max_ratio=float(ratio.max()) if lhs.size else 0.0,
        violating_points=[[float(v) for v in points[i]]
                          for i in idx[:max_recorded]],
    )


def verify_bounds(field, magnitudes, sample_count=10000, seed=0, bounds=1.0,
                  mode="augmented", include_normalized=True,
                  step=DEFAULT_PROBE_STEP, max_recorded=16):
    """Check the three displacement bounds on a field.

    magnitudes: displacement sizes d to test; each sample is pushed to
    x + d n along its unit gradient, which equals x + delta grad f for
    delta = d / |grad f|, so one displaced point feeds all three
    inequalities. Samples with a vanishing gradient are dropped and
    counted. mode "augmented" folds the displaced pairs into the
    constants (violations then indicate bugs); "independent" estimates
    constants from separate probes, accepting a small violation rate.
    """
    if mode not in ("augmented", "independent"):
        raise ConfigError(f"unknown mode {mode!r}")
    if sample_count <= 0:
        raise ConfigError("sample_count must be positive")
    mags = np.atleast_1d(np.asarray(magnitudes, dtype=np.float64))
    if mags.ndim != 1 or mags.size == 0 or not np.all(np.isfinite(mags)):
        raise ConfigError("magnitudes must be a nonempty finite sequence")

    rng = np.random.default_rng(seed)
    grad_fn = gradient_evaluator(field)
    pts = _sample_box(rng, sample_count, bounds)
    grads = grad_fn(pts)
    norms = np.linalg.norm(grads, axis=1)
    keep = norms > DEGENERATE_TOL
    n_dropped = int((~keep).sum())
    pts, grads, norms = pts[keep], grads[keep], norms[keep]
    if len(pts) == 0:
        raise ConfigError("all samples had degenerate gradients")
    unit = grads / norms[:, None]

    all_grads = [grads]
    all_lhs_grad, all_lhs_norm, all_delta, all_pairs = [], [], [], []
    for d in mags:
        moved = pts + d * unit
        mgrads = grad_fn(moved)
        mnorms = np.linalg.norm(mgrads, axis=1)
        all_grads.append(mgrads)
        diff = np.linalg.norm(mgrads - grads, axis=1)
        all_lhs_grad.append(diff)
        ok = mnorms > DEGENERATE_TOL
        munit = np.where(ok[:, None], mgrads / np.where(ok, mnorms, 1.0)[:, None], 0.0)
        all_lhs_norm.append(np.linalg.norm(munit - unit, axis=1))
        all_delta.append(np.abs(d) / norms)
        if d != 0:
            # |moved - pts| = |d| exactly: the offset direction is unit length
            all_pairs.append(diff / np.abs(d))

    if mode == "augmented":
        stack_norms = np.linalg.norm(np.concatenate(all_grads), axis=1)
        eps_hat = float(np.abs(stack_norms - 1.0).max())
        l_hat = float(stack_norms.max())
        probe = _probe_ratios(grad_fn, pts, grads, rng, step)
        pair_ratios = np.concatenate(all_pairs) if all_pairs else probe[:0]
        m_hat = float(np.concatenate([probe, pair_ratios]).max())
    else:
        eps_hat, m_hat, l_hat = estimate_constants(
            field, sample_count=sample_count, seed=seed + 1, bounds=bounds,
            step=step)

    if include_normalized and eps_hat >= 1.0:
        raise InapplicableBoundError(
            f"eikonal residual {eps_hat:.3g} >= 1: the normalized-gradient "
            "bound is undefined; rerun with include_normalized=False")

    lhs_grad = np.concatenate(all_lhs_grad)
    lhs_norm = np.concatenate(all_lhs_norm)
    delta = np.concatenate(all_delta)
    check_pts = np.concatenate([pts] * len(mags))

    theorem = _bound_check("unnormalized", lhs_grad, delta * l_hat * m_hat,
                           check_pts, max_recorded)
    corollary = _bound_check("eikonal", lhs_grad, (1.0 + eps_hat) * delta * m_hat,
                             check_pts, max_recorded)
    normalized = None
    if include_normalized:
        rhs = (1.0 + eps_hat) / (1.0 - eps_hat) * delta * m_hat
        normalized = _bound_check("normalized", lhs_norm, rhs,
                                  check_pts, max_recorded)

    return BoundReport(
        epsilon_hat=eps_hat, L_hat=l_hat, M_hat=m_hat, mode=mode,
        magnitudes=[float(d) for d in mags], n_samples=sample_count,
        n_dropped=n_dropped, seed=int(seed),
        theorem=theorem, corollary=corollary, normalized=normalized,
    )
