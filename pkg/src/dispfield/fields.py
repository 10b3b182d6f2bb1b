"""Closed-form scalar fields with exact gradients.

These serve two roles: ground truth for end-to-end runs (their zero sets
can be sampled exactly, normals included), and independent subjects for
the numerical bound checks, where a hand-derived gradient is worth more
than one produced by the same autodiff machinery under test.

All fields compute in the dtype of the incoming tensor and are pure
functions of position.
"""

from __future__ import annotations

import numpy as np
import torch

from .errors import ConfigError, ShapeError
from .geometry import OrientedPointCloud


class ScalarField:
    """Protocol: value(points) -> (n,), gradient(points) -> (n, 3)."""

    def value(self, points):
        raise NotImplementedError

    def gradient(self, points):
        raise NotImplementedError

    def __call__(self, points):
        return self.value(points)

    @staticmethod
    def _check(points):
        if points.ndim != 2 or points.shape[1] != 3:
            raise ShapeError(f"expected (n, 3) points, got {tuple(points.shape)}")


class PlaneField(ScalarField):
    """Exact signed distance to a plane: dot(x, normal) - offset."""

    def __init__(self, normal=(0.0, 0.0, 1.0), offset=0.0):
        n = np.asarray(normal, dtype=np.float64)
        length = np.linalg.norm(n)
        if length < 1e-12:
            raise ConfigError("plane normal must be nonzero")
        self.normal = n / length
        self.offset = float(offset)

    def value(self, points):
        self._check(points)
        n = torch.as_tensor(self.normal, dtype=points.dtype)
        return points @ n - self.offset

    def gradient(self, points):
        self._check(points)
        n = torch.as_tensor(self.normal, dtype=points.dtype)
        return n.expand(points.shape[0], 3).clone()


class SphereField(ScalarField):
    """Exact signed distance to a sphere surface.

    The gradient is radial and unit everywhere except the center, where
    the field is not differentiable; queries there produce zeros.
    """

    def __init__(self, radius=0.5, center=(0.0, 0.0, 0.0)):
        if not radius > 0:
            raise ConfigError(f"radius must be positive, got {radius}")
        self.radius = float(radius)
        self.center = np.asarray(center, dtype=np.float64)

    def value(self, points):
        self._check(points)
        c = torch.as_tensor(self.center, dtype=points.dtype)
        return (points - c).norm(dim=1) - self.radius

    def gradient(self, points):
        self._check(points)
        c = torch.as_tensor(self.center, dtype=points.dtype)
        rel = points - c
        dist = rel.norm(dim=1, keepdim=True)
        return torch.where(dist > 0, rel / dist.clamp_min(1e-300), torch.zeros_like(rel))

    def surface_samples(self, count, seed=0):
        """Uniform samples of the sphere with exact outward normals."""
        if count < 1:
            raise ConfigError(f"sample count must be >= 1, got {count}")
        rng = np.random.default_rng(seed)
        u = rng.normal(size=(count, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        return OrientedPointCloud(self.center + self.radius * u, u)


class BumpySphereField(ScalarField):
    """A sphere carrying a band of azimuthal ripples.

    In spherical terms the surface radius is

        r(u) = radius + amplitude * sin(frequency * azimuth) * sin(polar)^2

    and the field is f(x) = |x| - r(x / |x|). The sin(polar)^2 factor
    (equal to 1 - z^2/|x|^2) fades the ripples to zero at the poles,
    where the azimuth is undefined, keeping the field smooth away from
    the origin. Radial structure makes exact surface sampling trivial:
    along direction u the zero sits at distance r(u).

    Not an exact distance function; its gradient deviates from unit
    length in proportion to the ripple slope, which is what makes it a
    useful subject for the bound checks.
    """

    def __init__(self, radius=0.5, amplitude=0.02, frequency=20):
        if not radius > 0:
            raise ConfigError(f"radius must be positive, got {radius}")
        if amplitude < 0 or amplitude >= radius:
            raise ConfigError("amplitude must satisfy 0 <= amplitude < radius")
        if int(frequency) != frequency or frequency < 1:
            raise ConfigError(f"frequency must be a positive integer, got {frequency}")
        self.radius = float(radius)
        self.amplitude = float(amplitude)
        self.frequency = int(frequency)

    def _parts(self, points):
        x, y, z = points[:, 0], points[:, 1], points[:, 2]
        rho2 = (points * points).sum(dim=1)
        rho = rho2.sqrt()
        phi = torch.atan2(y, x)
        band = 1.0 - z * z / rho2  # sin(polar)^2, equals s/rho^2
        return x, y, z, rho, rho2, phi, band

    def value(self, points):
        self._check(points)
        _, _, _, rho, _, phi, band = self._parts(points)
        k = self.frequency
        return rho - self.radius - self.amplitude * torch.sin(k * phi) * band

    def gradient(self, points):
        """Hand-derived gradient; see the derivation in the tests.

        grad f = x/rho - A [ k cos(k phi) (-y, x, 0)/rho^2 * band_factor...
        written out:
          d(band)/dx = (2 z^2 x, 2 z^2 y, -2 z (rho^2 - z^2)) / rho^4
          d(phi)/dx * band = (-y, x, 0) * band / (rho^2 - z^2)
        the phi term times band reduces to (-y, x, 0)/rho^2, finite at
        the poles.
        """
        self._check(points)
        x, y, z, rho, rho2, phi, band = self._parts(points)
        k = self.frequency
        a = self.amplitude
        radial = points / rho.unsqueeze(-1)
        sin_k = torch.sin(k * phi)
        cos_k = torch.cos(k * phi)
        rho4 = rho2 * rho2
        phi_term = torch.stack([-y, x, torch.zeros_like(x)], dim=1) / rho2.unsqueeze(-1)
        band_grad = torch.stack(
            [2 * z * z * x, 2 * z * z * y, -2 * z * (rho2 - z * z)],
            dim=1) / rho4.unsqueeze(-1)
        bump_grad = a * (k * cos_k.unsqueeze(-1) * phi_term
                         + sin_k.unsqueeze(-1) * band_grad)
        return radial - bump_grad

    def surface_radius(self, directions):
        """r(u) for unit directions u, shape (n,)."""
        u = directions
        phi = torch.atan2(u[:, 1], u[:, 0])
        band = 1.0 - u[:, 2] * u[:, 2]
        return self.radius + self.amplitude * torch.sin(self.frequency * phi) * band

    def surface_samples(self, count, seed=0):
        """Exact on-surface samples with normals from the exact gradient."""
        if count < 1:
            raise ConfigError(f"sample count must be >= 1, got {count}")
        rng = np.random.default_rng(seed)
        u = rng.normal(size=(count, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        ut = torch.from_numpy(u)
        r = self.surface_radius(ut)
        pts = ut * r.unsqueeze(-1)
        g = self.gradient(pts)
        normals = g / g.norm(dim=1, keepdim=True)
        return OrientedPointCloud(pts.numpy(), normals.numpy())


class NetworkField(ScalarField):
    """Adapts a scalar network to the field protocol.

    Gradients come from the network's closed-form jacobian propagation,
    evaluated without building a parameter graph.
    """

    def __init__(self, net):
        if net.out_dim != 1:
            raise ConfigError("network field needs a scalar network")
        self.net = net

    def value(self, points):
        with torch.no_grad():
            return self.net(points)

    def gradient(self, points):
        with torch.no_grad():
            return self.net.input_gradient(points)


BUILTIN_FIELDS = {
    "plane": PlaneField,
    "sphere": SphereField,
    "bumpy-sphere": BumpySphereField,
}


def builtin_field(name, **kwargs):
    """Construct one of the named analytic fields."""
    if name not in BUILTIN_FIELDS:
        raise ConfigError(
            f"unknown field {name!r}; expected one of {sorted(BUILTIN_FIELDS)}")
    return BUILTIN_FIELDS[name](**kwargs)
