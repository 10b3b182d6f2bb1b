"""Composition of a smooth base SDF with a bounded normal displacement.

The detailed surface is never represented directly. A query point x is
shifted along the base field's unit gradient by a small signed amount
and the base field is evaluated at the shifted location:

    detail(x) = base(x + attenuation(base(x)) * disp(x) * normal(x))

disp is a second network whose output magnitude is capped (bounded tanh
head), and the attenuation factor fades the displacement to zero away
from the base surface so far-field values keep their sign structure.
Both stages are differentiable, so gradients of detail() with respect to
x or to either network's parameters come straight from autodiff over
this composition; the base normal inside uses the closed-form jacobian
from `Siren.value_and_grad`, keeping the whole expression exact.

Ablation switches turn the bounded head and the attenuation off
individually so the contribution of each part can be measured.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import torch
from torch import nn

from . import meshing, precision
from .errors import ConfigError, DegenerateGeometryError, ShapeError
from .sirens import Siren, load_siren, save_siren

# Base gradients shorter than this have no usable direction.
DEGENERATE_GRAD_TOL = 1e-9

MANIFEST_NAME = "manifest.json"
BUNDLE_FORMAT = 1


def attenuation(values, nu=0.02):
    """Quartic falloff 1 / (1 + (v/nu)^4).

    Equals 1 at v=0, 1/2 at |v|=nu, and decays like (nu/v)^4 beyond, so
    displacements are only active in a band of width ~nu around the base
    surface. Works elementwise on torch tensors and numpy arrays.
    """
    if not nu > 0:
        raise ConfigError(f"attenuation width nu must be positive, got {nu}")
    r = values / nu
    return 1.0 / (1.0 + r * r * r * r)


@dataclasses.dataclass(frozen=True)
class AblationSwitches:
    """Which parts of the composition are active.

    bounded_head: cap the displacement magnitude via the tanh head.
    attenuate: fade displacement away from the base surface.
    progressive: train base first, then cross-fade to the composition
    (consumed by the trainer, carried here so bundles record it).
    """

    bounded_head: bool = True
    attenuate: bool = True
    progressive: bool = True

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{f.name: bool(d[f.name]) for f in dataclasses.fields(cls)})


class DisplacementModel(nn.Module):
    """A base network and a displacement network composed into one SDF."""

    def __init__(self, base, disp, alpha=0.05, nu=0.02, switches=None):
        super().__init__()
        switches = switches or AblationSwitches()
        if base.out_dim != 1 or disp.out_dim != 1:
            raise ConfigError("base and displacement networks must be scalar-valued")
        if base.in_dim != disp.in_dim:
            raise ConfigError(
                f"input dims differ: base {base.in_dim}, displacement {disp.in_dim}")
        if not alpha > 0:
            raise ConfigError(f"displacement cap alpha must be positive, got {alpha}")
        if not nu > 0:
            raise ConfigError(f"attenuation width nu must be positive, got {nu}")
        if switches.bounded_head:
            if disp.head_kind != "bounded":
                raise ConfigError("switches request a bounded head but the "
                                  "displacement network has a linear one")
            if abs(disp.head_scale - alpha) > 1e-12:
                raise ConfigError(
                    f"displacement head scale {disp.head_scale} != alpha {alpha}")
        elif disp.head_kind != "linear":
            raise ConfigError("bounded head disabled but the displacement "
                              "network has one")
        self.base = base
        self.disp = disp
        self.alpha = float(alpha)
        self.nu = float(nu)
        self.switches = switches

    @property
    def dtype(self):
        return self.base.dtype

    def base_sdf(self, x):
        return self.base(x)

    def base_normal(self, x, on_degenerate="error"):
        """Unit gradient of the base field at x, shape (n, in_dim).

        on_degenerate: "error" raises when any gradient is shorter than
        DEGENERATE_GRAD_TOL; "zero" returns a zero row there instead.
        """
        grads = self.base.value_and_grad(x).grads
        return _normalize_rows(grads, on_degenerate)

    def displacement(self, x, on_degenerate="error"):
        """Signed displacement amount applied at x (attenuation included)."""
        base_vals = self.base(x)
        d = self.disp(x)
        if self.switches.attenuate:
            d = attenuation(base_vals, self.nu) * d
        if on_degenerate == "zero":
            norms = self.base.value_and_grad(x).grads.norm(dim=1)
            d = d * (norms >= DEGENERATE_GRAD_TOL).to(d.dtype)
        return d

    def detail_sdf(self, x, on_degenerate="error"):
        """The composed field: base evaluated at the displaced query.

        Differentiable in x and in both networks' parameters. With a
        zero displacement output the result is bit-identical to
        base_sdf(x): the offset is exactly zero and x + 0 == x.
        """
        if x.ndim != 2 or x.shape[1] != self.base.in_dim:
            raise ShapeError(
                f"expected (n, {self.base.in_dim}) points, got {tuple(x.shape)}")
        base_vals, base_grads = self.base.value_and_grad(x)
        normal = _normalize_rows(base_grads, on_degenerate)
        d = self.disp(x)
        if self.switches.attenuate:
            d = attenuation(base_vals, self.nu) * d
        return self.base(x + d.unsqueeze(-1) * normal)

    forward = detail_sdf

    def detail_gradient(self, x, on_degenerate="error", create_graph=False):
        """Spatial gradient of the composed field via reverse mode over
        the analytic forward graph."""
        x = x.detach().requires_grad_(True)
        vals = self.detail_sdf(x, on_degenerate=on_degenerate)
        (g,) = torch.autograd.grad(vals.sum(), x, create_graph=create_graph)
        return g

    def grid_values(self, resolution, bounds=1.0, which="detail", chunk=65536):
        """Evaluate the model on a regular grid, returning a ScalarGrid.

        In deterministic mode the result is bitwise-identical to
        evaluating every node individually.
        """
        if which == "detail":
            fn = lambda p: self.detail_sdf(p, on_degenerate="zero")
        elif which == "base":
            fn = self.base_sdf
        else:
            raise ConfigError(f"unknown field selector {which!r}")
        with torch.no_grad():
            return meshing.sample_grid(fn, resolution, bounds=bounds,
                                       chunk=chunk, dtype=self.dtype)

    def save_bundle(self, directory):
        """Write base.ckpt, disp.ckpt, and a manifest into `directory`.

        Bytes depend only on parameters and settings, so two identical
        fits produce identical bundles file for file.
        """
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_siren(self.base, directory / "base.ckpt")
        save_siren(self.disp, directory / "disp.ckpt")
        manifest = {
            "alpha": self.alpha,
            "format": BUNDLE_FORMAT,
            "kind": "displacement_model",
            "nu": self.nu,
            "switches": self.switches.to_dict(),
        }
        with open(directory / MANIFEST_NAME, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")

    @classmethod
    def load_bundle(cls, directory):
        directory = Path(directory)
        manifest_path = directory / MANIFEST_NAME
        if not manifest_path.exists():
            raise ConfigError(f"{directory} has no {MANIFEST_NAME}")
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
        if manifest.get("kind") != "displacement_model":
            raise ConfigError(f"{directory} does not hold a displacement model")
        base = load_siren(directory / "base.ckpt")
        disp = load_siren(directory / "disp.ckpt")
        return cls(base, disp,
                   alpha=float(manifest["alpha"]), nu=float(manifest["nu"]),
                   switches=AblationSwitches.from_dict(manifest["switches"]))


def _normalize_rows(grads, on_degenerate):
    norms = grads.norm(dim=1, keepdim=True)
    if on_degenerate == "error":
        bad = norms < DEGENERATE_GRAD_TOL
        if bool(bad.any()):
            idx = int(bad.squeeze(-1).nonzero()[0])
            raise DegenerateGeometryError(
                f"base gradient vanished at point index {idx} "
                f"(|grad| = {float(norms[idx].detach()):.3e})")
        return grads / norms
    if on_degenerate == "zero":
        mask = (norms >= DEGENERATE_GRAD_TOL).to(grads.dtype)
        return mask * grads / norms.clamp_min(DEGENERATE_GRAD_TOL)
    raise ConfigError(f"unknown degenerate-normal policy {on_degenerate!r}")


def build_model(omega_base=15.0, omega_disp=60.0, hidden_dim=256, depth=4,
                disp_hidden_dim=None, disp_depth=None, alpha=0.05, nu=0.02,
                switches=None, seed=0, dtype=None):
    """Construct a DisplacementModel with the usual two-network layout.

    Seeds are derived from `seed` so one integer pins both networks.
    """
    switches = switches or AblationSwitches()
    head = "bounded" if switches.bounded_head else "linear"
    base = Siren(3, hidden_dim, depth, 1, omega=omega_base,
                 seed=seed, dtype=dtype)
    disp = Siren(3, disp_hidden_dim or hidden_dim, disp_depth or depth, 1,
                 omega=omega_disp, head=head, head_scale=alpha,
                 seed=seed + 1, dtype=dtype)
    return DisplacementModel(base, disp, alpha=alpha, nu=nu, switches=switches)
