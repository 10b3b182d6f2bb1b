"""Detail transfer: re-usable displacement conditioned on local context.

A displacement network that reads raw coordinates memorizes where each
wrinkle sits, so it cannot decorate a new shape. Here the displacement
instead consumes two translation- and scale-invariant quantities: the
squashed base distance tanh(f/nu), and a local surface descriptor
looked up from a feature grid. The grid is built by encoding each
surface point's normal (positions never enter the encoder), averaging
the per-point features into grid cells, and letting a small
convolutional stack spread them into the off-surface region. A mapping
network turns the interpolated feature into per-layer modulation codes
for the sinusoidal displacement net. Swapping the smooth base field
underneath then re-dresses a different shape with the learned detail.

The four-stage pipeline mirrors that story: fit the source base, fit
the transfer stack against the frozen source base, fit the target
base, swap. Stages must run in order; each checks its prerequisites.
"""

import dataclasses
import json
import math
import os

import numpy as np
import torch
from torch import nn

from .checkpoint import load_arrays, save_arrays
from .errors import (ConfigError, ParseError, PipelineOrderError, ShapeError,
                     ValidationError)
from .geometry import OrientedPointCloud
from .meshing import _resolve_bounds
from .model import attenuation, _normalize_rows
from .precision import get_dtype
from .sirens import Siren, sine_init_
from .training import (FitResult, TrainConfig, TrainingHistory, annealed_lr,
                       fit_base, loss_terms, sphere_pretrain, weight_terms,
                       TERM_NAMES)

UNIT_NORMAL_TOL = 1e-6
NODE_SNAP = 1e-9  # in cell units; queries this close to a node land on it

BUNDLE_FORMAT = 1
_BUNDLE_FILES = ("base.ckpt", "film.ckpt", "encoder.ckpt",
                 "propagation.ckpt", "mapping.ckpt")


def _default_init_(layer, generator):
    # torch's stock Linear/Conv init (U[-1/sqrt(fan_in), ..]) but fed
    # from an explicit generator so construction is reproducible
    with torch.no_grad():
        fan_in = layer.weight.shape[1:].numel()
        bound = 1.0 / math.sqrt(fan_in)
        layer.weight.uniform_(-bound, bound, generator=generator)
        if layer.bias is not None:
            layer.bias.uniform_(-bound, bound, generator=generator)


class PointEncoder(nn.Module):
    """Per-point MLP over unit normals; positions are deliberately not
    an input, which makes the features translation and scale invariant
    for free."""

    def __init__(self, hidden_dim=32, out_channels=32, seed=None, dtype=None):
        super().__init__()
        if hidden_dim < 1 or out_channels < 1:
            raise ConfigError("encoder dims must be positive")
        dtype = dtype or get_dtype()
        self.hidden_dim = hidden_dim
        self.out_channels = out_channels
        self.layers = nn.ModuleList([
            nn.Linear(3, hidden_dim, dtype=dtype),
            nn.Linear(hidden_dim, hidden_dim, dtype=dtype),
            nn.Linear(hidden_dim, out_channels, dtype=dtype),
        ])
        gen = None
        if seed is not None:
            gen = torch.Generator().manual_seed(int(seed))
        for layer in self.layers:
            _default_init_(layer, gen)

    def forward(self, normals):
        if normals.ndim != 2 or normals.shape[1] != 3:
            raise ShapeError(f"expected (n, 3) normals, got {tuple(normals.shape)}")
        lengths = normals.detach().norm(dim=1)
        if normals.shape[0] and not bool(
                ((lengths - 1.0).abs() <= UNIT_NORMAL_TOL).all()):
            worst = float((lengths - 1.0).abs().max())
            raise ValidationError(
                f"encoder requires unit normals (worst deviation {worst:.3e})")
        h = normals
        for layer in self.layers[:-1]:
            h = torch.relu(layer(h))
        return self.layers[-1](h)


class PropagationNet(nn.Module):
    """Three same-channel convolutions that diffuse sparse cell
    features into empty space. Zero padding, smooth nonlinearity
    between layers, linear last layer."""

    def __init__(self, channels=32, dim=3, seed=None, dtype=None):
        super().__init__()
        if dim not in (2, 3):
            raise ConfigError(f"grid dimension must be 2 or 3, got {dim}")
        conv = nn.Conv3d if dim == 3 else nn.Conv2d
        dtype = dtype or get_dtype()
        self.channels = channels
        self.dim = dim
        self.convs = nn.ModuleList([
            conv(channels, channels, kernel_size=3, padding=1, dtype=dtype)
            for _ in range(3)
        ])
        gen = None
        if seed is not None:
            gen = torch.Generator().manual_seed(int(seed))
        for c in self.convs:
            _default_init_(c, gen)

    def forward(self, grid_features):
        # grid_features: (R, ..., R, C) node-major; conv wants (1, C, R, ..., R)
        spatial = grid_features.ndim - 1
        if spatial != self.dim or grid_features.shape[-1] != self.channels:
            raise ShapeError(
                f"expected (R,)*{self.dim} + ({self.channels},) features, "
                f"got {tuple(grid_features.shape)}")
        perm = (spatial,) + tuple(range(spatial))
        h = grid_features.permute(perm).unsqueeze(0)
        for c in self.convs[:-1]:
            h = torch.tanh(c(h))
        h = self.convs[-1](h)
        back = tuple(range(1, spatial + 1)) + (0,)
        return h.squeeze(0).permute(back)


class FeatureGrid:
    """Node-centered feature lattice with multilinear lookup.

    resolution nodes per axis span the given bounds; a query inside a
    cell blends its 2^dim corner nodes and is differentiable there.
    Out-of-domain queries clamp to the boundary and are counted in
    clamped_queries rather than raising: off-surface training samples
    legitimately graze the edge of the domain.
    """

    def __init__(self, features, lo, spacing, axes):
        self.features = features          # (R, ..., R, C), torch
        self.lo = lo                      # (dim,) torch
        self.spacing = spacing            # (dim,) torch
        self.axes = tuple(axes)           # world axes the grid spans
        self.clamped_queries = 0
        dim = features.ndim - 1
        if dim != len(self.axes):
            raise ShapeError("feature rank does not match grid axes")

    @property
    def dim(self):
        return len(self.axes)

    @property
    def resolution(self):
        return self.features.shape[0]

    @property
    def channels(self):
        return self.features.shape[-1]

    def node_position(self, index):
        """World coordinates of a node, restricted to the grid's axes."""
        idx = torch.as_tensor(index, dtype=self.lo.dtype)
        return self.lo + idx * self.spacing

    def query(self, points):
        """phi(x): multilinear interpolation at (n, 3) world points."""
        if points.ndim != 2 or points.shape[1] != 3:
            raise ShapeError(f"expected (n, 3) points, got {tuple(points.shape)}")
        coords = points[:, list(self.axes)]
        u = (coords - self.lo) / self.spacing
        top = float(self.resolution - 1)
        outside = (u.detach() < 0) | (u.detach() > top)
        self.clamped_queries += int(outside.any(dim=1).sum())
        u = u.clamp(0.0, top)
        nearest = u.detach().round()
        snap = (u.detach() - nearest).abs() < NODE_SNAP
        u = torch.where(snap, nearest.to(u.dtype), u)
        i0 = u.detach().floor().clamp(0, top - 1).long()
        t = u - i0.to(u.dtype)
        out = None
        for corner in range(2 ** self.dim):
            bits = [(corner >> a) & 1 for a in range(self.dim)]
            w = None
            for a, bit in enumerate(bits):
                wa = t[:, a] if bit else 1.0 - t[:, a]
                w = wa if w is None else w * wa
            idx = tuple(i0[:, a] + bits[a] for a in range(self.dim))
            part = w.unsqueeze(-1) * self.features[idx]
            out = part if out is None else out + part
        return out


def scatter_mean_features(features, coords, lo, spacing, resolution):
    """Average per-point features into their nearest grid node.

    Returns (R, ..., R, C). Cells holding no point stay zero. The count
    denominator is detached arithmetic, so gradients flow to the
    features untouched.
    """
    idx = ((coords - lo) / spacing).round().clamp(0, resolution - 1).long()
    dim = coords.shape[1]
    flat = idx[:, 0]
    for a in range(1, dim):
        flat = flat * resolution + idx[:, a]
    cells = resolution ** dim
    sums = features.new_zeros((cells, features.shape[1]))
    sums.index_add_(0, flat, features)
    counts = features.new_zeros(cells).index_add_(
        0, flat, features.new_ones(len(features)))
    mean = sums / counts.clamp(min=1.0).unsqueeze(-1)
    return mean.reshape((resolution,) * dim + (features.shape[1],))


def build_feature_grid(cloud, encoder, propagation=None, resolution=None,
                       bounds=1.0, dim=3, axis=2):
    """Encode a cloud's normals, scatter onto a lattice, propagate.

    cloud: OrientedPointCloud or (points, normals) torch pair. With
    propagation=None the raw scattered means are the grid (useful for
    inspecting the scatter itself). In 2D mode the given world axis is
    projected away.
    """
    if dim not in (2, 3):
        raise ConfigError(f"grid dimension must be 2 or 3, got {dim}")
    if resolution is None:
        resolution = 32 if dim == 3 else 128
    if resolution < 2:
        raise ConfigError("grid needs at least 2 nodes per axis")
    if isinstance(cloud, OrientedPointCloud):
        if isinstance(encoder, nn.Module):
            dtype = next(encoder.parameters()).dtype
        else:
            dtype = get_dtype()
        pts = torch.as_tensor(cloud.points, dtype=dtype)
        nrm = torch.as_tensor(cloud.normals, dtype=dtype)
    else:
        pts, nrm = cloud
    axes = tuple(a for a in range(3) if dim == 3 or a != axis)
    if dim == 2 and axis not in (0, 1, 2):
        raise ConfigError(f"projection axis must be 0, 1, or 2, got {axis}")
    lo3, hi3 = _resolve_bounds(bounds)
    lo = torch.as_tensor(lo3[list(axes)], dtype=pts.dtype)
    hi = torch.as_tensor(hi3[list(axes)], dtype=pts.dtype)
    spacing = (hi - lo) / (resolution - 1)
    feats = encoder(nrm)
    grid = scatter_mean_features(feats, pts[:, list(axes)], lo, spacing,
                                 resolution)
    if propagation is not None:
        grid = propagation(grid)
    return FeatureGrid(grid, lo, spacing, axes)


class ConditioningCodes:
    """Per-layer modulation pairs (gamma_i, beta_i), each (n, C)."""

    def __init__(self, gammas, betas):
        gammas, betas = list(gammas), list(betas)
        if len(gammas) != len(betas) or not gammas:
            raise ShapeError("need matching, nonempty gamma and beta lists")
        shape = gammas[0].shape
        for g, b in zip(gammas, betas):
            if g.shape != shape or b.shape != shape or g.ndim != 2:
                raise ShapeError("all code tensors must share one (n, C) shape")
        self.gammas = gammas
        self.betas = betas

    @property
    def depth(self):
        return len(self.gammas)

    @property
    def channels(self):
        return self.gammas[0].shape[1]

    @classmethod
    def zeros(cls, batch, depth, channels, dtype=None):
        dtype = dtype or get_dtype()
        z = [torch.zeros((batch, channels), dtype=dtype) for _ in range(depth)]
        return cls(z, [t.clone() for t in z])


class MappingNet(nn.Module):
    """Feature vector -> one (gamma, beta) pair per displacement layer."""

    def __init__(self, in_channels=32, hidden_dim=64, depth=4,
                 code_channels=256, seed=None, dtype=None):
        super().__init__()
        dtype = dtype or get_dtype()
        self.in_channels = in_channels
        self.code_depth = depth
        self.code_channels = code_channels
        out = 2 * depth * code_channels
        self.layers = nn.ModuleList([
            nn.Linear(in_channels, hidden_dim, dtype=dtype),
            nn.Linear(hidden_dim, hidden_dim, dtype=dtype),
            nn.Linear(hidden_dim, out, dtype=dtype),
        ])
        gen = None
        if seed is not None:
            gen = torch.Generator().manual_seed(int(seed))
        for layer in self.layers:
            _default_init_(layer, gen)

    def forward(self, phi):
        if phi.ndim != 2 or phi.shape[1] != self.in_channels:
            raise ShapeError(
                f"expected (n, {self.in_channels}) features, got {tuple(phi.shape)}")
        h = phi
        for layer in self.layers[:-1]:
            h = torch.relu(layer(h))
        codes = self.layers[-1](h)
        per_layer = codes.reshape(-1, self.code_depth, 2, self.code_channels)
        return ConditioningCodes(
            [per_layer[:, i, 0] for i in range(self.code_depth)],
            [per_layer[:, i, 1] for i in range(self.code_depth)],
        )


class FilmSiren(nn.Module):
    """Sine MLP whose hidden preactivations are modulated per query:
    sin(omega * ((1 + gamma/2) * (W h + b) + beta)).

    With zero codes the modulation is the exact identity, so the net
    collapses to a plain sine MLP with the same weights. The head is
    always the bounded tanh kind: transferable displacements keep the
    same magnitude contract as learned ones.
    """

    def __init__(self, in_dim=1, hidden_dim=256, depth=4, omega=60.0,
                 head_scale=0.05, seed=None, dtype=None):
        super().__init__()
        if depth < 1:
            raise ConfigError(f"depth must be >= 1, got {depth}")
        if not head_scale > 0:
            raise ConfigError(f"head_scale must be positive, got {head_scale}")
        if not omega > 0:
            raise ConfigError(f"omega must be positive, got {omega}")
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        self.depth = depth
        self.omega = float(omega)
        self.head_scale = float(head_scale)
        dtype = dtype or get_dtype()
        self.hidden = nn.ModuleList()
        d = in_dim
        for _ in range(depth):
            self.hidden.append(nn.Linear(d, hidden_dim, dtype=dtype))
            d = hidden_dim
        self.head = nn.Linear(d, 1, dtype=dtype)
        gen = None
        if seed is not None:
            gen = torch.Generator().manual_seed(int(seed))
        for i, layer in enumerate(self.hidden):
            sine_init_(layer, self.omega, gen, first=(i == 0))
        sine_init_(self.head, self.omega, gen, first=False)

    @property
    def dtype(self):
        return self.head.weight.dtype

    def forward(self, x, codes=None):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(
                f"expected (n, {self.in_dim}) inputs, got {tuple(x.shape)}")
        if codes is not None:
            if codes.depth != self.depth:
                raise ShapeError(
                    f"{codes.depth} code pairs for {self.depth} layers")
            if codes.channels != self.hidden_dim:
                raise ShapeError(
                    f"code width {codes.channels} != hidden width {self.hidden_dim}")
        h = x
        for i, layer in enumerate(self.hidden):
            pre = nn.functional.linear(h, layer.weight, layer.bias)
            if codes is not None:
                pre = (1.0 + 0.5 * codes.gammas[i]) * pre + codes.betas[i]
            h = torch.sin(self.omega * pre)
        y = nn.functional.linear(h, self.head.weight, self.head.bias)
        return (self.head_scale * torch.tanh(y)).squeeze(-1)

    def architecture(self):
        return {
            "in_dim": self.in_dim,
            "hidden_dim": self.hidden_dim,
            "depth": self.depth,
            "omega": self.omega,
            "head_scale": self.head_scale,
            "dtype": "float64" if self.dtype == torch.float64 else "float32",
        }


def _save_module(path, module, kind, arch):
    arrays = {k: v.detach().numpy() for k, v in module.state_dict().items()}
    save_arrays(path, arrays, meta={"kind": kind, "arch": arch})


@dataclasses.dataclass
class GridSettings:
    resolution: int = 32
    dim: int = 3
    axis: int = 2
    bounds: float = 1.0

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ConfigError(f"grid dimension must be 2 or 3, got {self.dim}")
        if self.resolution < 2:
            raise ConfigError("grid needs at least 2 nodes per axis")
        if self.axis not in (0, 1, 2):
            raise ConfigError(f"projection axis must be 0, 1, or 2, got {self.axis}")
        if not self.bounds > 0:
            raise ConfigError("grid bounds must be positive")

    def to_dict(self):
        return dataclasses.asdict(self)


class TransferModel(nn.Module):
    """Composed field with a context-conditioned displacement.

    detail(x) = base(x + chi(f) * film(tanh(f/nu), codes(x)) * n) where
    codes(x) come from the feature grid of whichever cloud currently
    describes the shape. The grid is an argument, not a member: the
    same trained components serve any base/cloud pair.
    """

    def __init__(self, base, film, encoder, propagation, mapping,
                 grid=None, alpha=0.05, nu=0.02):
        super().__init__()
        grid = grid or GridSettings()
        if not alpha > 0 or not nu > 0:
            raise ConfigError("alpha and nu must be positive")
        if abs(film.head_scale - alpha) > 1e-12:
            raise ConfigError(
                f"film head scale {film.head_scale} disagrees with alpha {alpha}")
        if film.in_dim != 1:
            raise ConfigError("transfer displacement takes the scalar tanh(f/nu)")
        if mapping.code_depth != film.depth or mapping.code_channels != film.hidden_dim:
            raise ConfigError("mapping output does not fit the displacement net")
        if encoder.out_channels != mapping.in_channels:
            raise ConfigError("encoder output does not fit the mapping input")
        if propagation.channels != encoder.out_channels or propagation.dim != grid.dim:
            raise ConfigError("propagation net does not fit the encoder/grid")
        self.base = base
        self.film = film
        self.encoder = encoder
        self.propagation = propagation
        self.mapping = mapping
        self.grid_settings = grid
        self.alpha = float(alpha)
        self.nu = float(nu)

    @property
    def dtype(self):
        return self.base.dtype

    def build_grid(self, cloud):
        g = self.grid_settings
        return build_feature_grid(cloud, self.encoder, self.propagation,
                                  resolution=g.resolution, bounds=g.bounds,
                                  dim=g.dim, axis=g.axis)

    def displacement(self, x, grid):
        """Attenuated displacement magnitude at x given a context grid."""
        f = self.base(x)
        codes = self.mapping(grid.query(x))
        raw = self.film(torch.tanh(f / self.nu).unsqueeze(-1), codes)
        return attenuation(f, self.nu) * raw

    def detail_sdf(self, x, grid, on_degenerate="error"):
        if x.ndim != 2 or x.shape[1] != 3:
            raise ShapeError(f"expected (n, 3) points, got {tuple(x.shape)}")
        f, grads = self.base.value_and_grad(x)
        normal = _normalize_rows(grads, on_degenerate)
        codes = self.mapping(grid.query(x))
        raw = self.film(torch.tanh(f / self.nu).unsqueeze(-1), codes)
        d = attenuation(f, self.nu) * raw
        return self.base(x + d.unsqueeze(-1) * normal)

    def sdf_with_cloud(self, cloud):
        """Closure detail_sdf(x) with a grid built once from `cloud`."""
        with torch.no_grad():
            grid = self.build_grid(cloud)
            grid.features = grid.features.detach()
        def field(x):
            return self.detail_sdf(x, grid, on_degenerate="zero")
        return field

    def save_bundle(self, directory):
        os.makedirs(directory, exist_ok=True)
        _save_module(os.path.join(directory, "base.ckpt"), self.base,
                     "siren", self.base.architecture())
        _save_module(os.path.join(directory, "film.ckpt"), self.film,
                     "film", self.film.architecture())
        _save_module(os.path.join(directory, "encoder.ckpt"), self.encoder,
                     "encoder", {"hidden_dim": self.encoder.hidden_dim,
                                 "out_channels": self.encoder.out_channels})
        _save_module(os.path.join(directory, "propagation.ckpt"), self.propagation,
                     "propagation", {"channels": self.propagation.channels,
                                     "dim": self.propagation.dim})
        _save_module(os.path.join(directory, "mapping.ckpt"), self.mapping,
                     "mapping", {"in_channels": self.mapping.in_channels,
                                 "hidden_dim": self.mapping.layers[0].out_features,
                                 "depth": self.mapping.code_depth,
                                 "code_channels": self.mapping.code_channels})
        manifest = {
            "format": BUNDLE_FORMAT,
            "kind": "transfer_model",
            "alpha": self.alpha,
            "nu": self.nu,
            "grid": self.grid_settings.to_dict(),
        }
        with open(os.path.join(directory, "manifest.json"), "w",
                  encoding="ascii") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=2)
            fh.write("\n")

    @classmethod
    def load_bundle(cls, directory):
        path = os.path.join(directory, "manifest.json")
        try:
            with open(path, encoding="utf-8") as fh:
                manifest = json.load(fh)
        except OSError as exc:
            raise ParseError(f"cannot read transfer manifest: {exc}", path=path)
        except json.JSONDecodeError as exc:
            raise ParseError(f"bad transfer manifest: {exc}", path=path)
        if manifest.get("kind") != "transfer_model":
            raise ParseError("manifest does not describe a transfer bundle",
                             path=path)
        if manifest.get("format") != BUNDLE_FORMAT:
            raise UnsupportedBundle(manifest.get("format"), path)
        b = os.path.join(directory, "base.ckpt")
        base_arrays, base_meta = load_arrays(b)
        arch = dict(base_meta["arch"])
        torch_dtype = torch.float64 if arch.pop("dtype") == "float64" else torch.float32
        base = Siren(**arch, seed=0, dtype=torch_dtype)
        base.load_state_dict({k: torch.as_tensor(v) for k, v in base_arrays.items()})

        f = os.path.join(directory, "film.ckpt")
        film_arrays, film_meta = load_arrays(f)
        farch = dict(film_meta["arch"])
        farch.pop("dtype")
        film = FilmSiren(**farch, seed=0, dtype=torch_dtype)
        film.load_state_dict({k: torch.as_tensor(v) for k, v in film_arrays.items()})

        grid = GridSettings(**manifest["grid"])
        arrays, meta = load_arrays(os.path.join(directory, "encoder.ckpt"))
        encoder = PointEncoder(**meta["arch"], seed=0, dtype=torch_dtype)
        encoder.load_state_dict({k: torch.as_tensor(v) for k, v in arrays.items()})
        arrays, meta = load_arrays(os.path.join(directory, "propagation.ckpt"))
        propagation = PropagationNet(**meta["arch"], seed=0, dtype=torch_dtype)
        propagation.load_state_dict({k: torch.as_tensor(v) for k, v in arrays.items()})
        arrays, meta = load_arrays(os.path.join(directory, "mapping.ckpt"))
        mapping = MappingNet(**meta["arch"], seed=0, dtype=torch_dtype)
        mapping.load_state_dict({k: torch.as_tensor(v) for k, v in arrays.items()})
        return cls(base, film, encoder, propagation, mapping, grid=grid,
                   alpha=manifest["alpha"], nu=manifest["nu"])


class UnsupportedBundle(ParseError):
    def __init__(self, version, path):
        super().__init__(f"unsupported transfer bundle format {version!r}",
                         path=path)


@dataclasses.dataclass
class TransferConfig:
    """Architecture knobs for the transfer stack.

    The base follows the low-frequency transfer recipe (omega 5, three
    96-wide layers); the displacement keeps the usual high-frequency
    settings. Channel counts for the context path are defaults, not
    load-bearing constants.
    """

    omega_base: float = 5.0
    base_hidden: int = 96
    base_depth: int = 3
    omega_disp: float = 60.0
    film_hidden: int = 256
    film_depth: int = 4
    feature_channels: int = 32
    encoder_hidden: int = 32
    mapping_hidden: int = 64
    grid: GridSettings = dataclasses.field(default_factory=GridSettings)
    grid_points: int = 0  # cloud subset per training grid build; 0 = all
    pretrain_radius: float = 0.0  # sphere-init the base stages; 0 = skip
    pretrain_steps: int = 500
    alpha: float = 0.05
    nu: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if not (self.omega_base > 0 and self.omega_disp > 0):
            raise ConfigError("frequencies must be positive")
        if not (self.alpha > 0 and self.nu > 0):
            raise ConfigError("alpha and nu must be positive")
        if self.grid_points < 0:
            raise ConfigError("grid_points must be >= 0")
        if not 0.0 <= self.pretrain_radius < 1.0:
            raise ConfigError("pretrain_radius must lie in [0, 1)")
        if self.pretrain_steps < 0:
            raise ConfigError("pretrain_steps must be >= 0")
        for field in ("base_hidden", "base_depth", "film_hidden", "film_depth",
                      "feature_channels", "encoder_hidden", "mapping_hidden"):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be positive")


def build_transfer_model(config=None, base=None, dtype=None):
    """Fresh TransferModel with deterministically seeded components."""
    config = config or TransferConfig()
    dtype = dtype or get_dtype()
    s = int(config.seed)
    if base is None:
        base = Siren(in_dim=3, hidden_dim=config.base_hidden,
                     depth=config.base_depth, omega=config.omega_base,
                     head="linear", seed=s, dtype=dtype)
    film = FilmSiren(in_dim=1, hidden_dim=config.film_hidden,
                     depth=config.film_depth, omega=config.omega_disp,
                     head_scale=config.alpha, seed=s + 1, dtype=dtype)
    encoder = PointEncoder(hidden_dim=config.encoder_hidden,
                           out_channels=config.feature_channels,
                           seed=s + 2, dtype=dtype)
    propagation = PropagationNet(channels=config.feature_channels,
                                 dim=config.grid.dim, seed=s + 3, dtype=dtype)
    mapping = MappingNet(in_channels=config.feature_channels,
                         hidden_dim=config.mapping_hidden,
                         depth=config.film_depth,
                         code_channels=config.film_hidden,
                         seed=s + 4, dtype=dtype)
    return TransferModel(base, film, encoder, propagation, mapping,
                         grid=config.grid, alpha=config.alpha, nu=config.nu)


class TransferPipeline:
    """The four-stage transfer recipe with explicit ordering.

    1. fit_source_base: smooth base for the shape carrying the detail.
    2. fit_transfer: train encoder, propagation, mapping, and
       displacement jointly against the frozen source base. The feature
       grid is rebuilt inside the graph every step; the encoder only
       learns if its output influences the loss. With grid_points set,
       each rebuild uses a fresh random cloud subset, which keeps the
       per-step encoder and scatter cost independent of cloud size.
    3. fit_target_base: smooth base for the shape to be decorated.
    4. compose: swap the target base under the trained transfer stack.
    """

    def __init__(self, config=None, base_train=None, transfer_train=None):
        self.config = config or TransferConfig()
        self.base_train = base_train or TrainConfig()
        self.transfer_train = transfer_train or TrainConfig()
        self.source_model = None
        self.target_base = None
        self._transfer_done = False

    def fit_source_base(self, cloud, config=None):
        cfg = self.config
        dtype = get_dtype()
        base = Siren(in_dim=3, hidden_dim=cfg.base_hidden, depth=cfg.base_depth,
                     omega=cfg.omega_base, head="linear", seed=cfg.seed,
                     dtype=dtype)
        if cfg.pretrain_radius > 0:
            base, _ = sphere_pretrain(base, radius=cfg.pretrain_radius,
                                      steps=cfg.pretrain_steps, seed=cfg.seed)
        result = fit_base(base, cloud, config or self.base_train)
        self.source_model = build_transfer_model(cfg, base=result.model,
                                                 dtype=result.model.dtype)
        return result

    def fit_transfer(self, source_cloud, config=None):
        if self.source_model is None:
            raise PipelineOrderError(
                "fit_transfer requires a fitted source base; run "
                "fit_source_base first")
        config = config or self.transfer_train
        model = self.source_model
        source_cloud.validate(require_unit=True, require_bounds=False)
        if len(source_cloud) == 0:
            raise ConfigError("source cloud is empty")
        dtype = model.dtype
        pool_pts = torch.as_tensor(source_cloud.points, dtype=dtype)
        pool_nrm = torch.as_tensor(source_cloud.normals, dtype=dtype)
        pool = len(source_cloud)
        steps_per_epoch = max(1, math.ceil(pool / config.batch_surface))
        total_steps = config.epochs * steps_per_epoch
        gen = torch.Generator().manual_seed(int(config.seed))

        for p in model.base.parameters():
            p.requires_grad_(False)
        trained = (list(model.film.parameters())
                   + list(model.encoder.parameters())
                   + list(model.propagation.parameters())
                   + list(model.mapping.parameters()))
        opt = torch.optim.Adam(trained, lr=config.lr_init,
                               betas=(0.9, 0.999), eps=1e-8)
        history = TrainingHistory()
        step = 0
        try:
            for epoch in range(config.epochs):
                order = torch.randperm(pool, generator=gen)
                sums = dict.fromkeys(TERM_NAMES + ("total", "lr"), 0.0)
                for k in range(steps_per_epoch):
                    rows = order[k * config.batch_surface:(k + 1) * config.batch_surface]
                    off = torch.rand((config.batch_offsurface, 3),
                                     generator=gen, dtype=dtype) * 2.0 - 1.0
                    lr = annealed_lr(step / total_steps, config.lr_init,
                                     config.lr_final, config.anneal_start_fraction)
                    sub = self.config.grid_points
                    if sub and sub < pool:
                        sel = torch.randperm(pool, generator=gen)[:sub]
                        grid = model.build_grid((pool_pts[sel], pool_nrm[sel]))
                    else:
                        grid = model.build_grid((pool_pts, pool_nrm))
                    field = lambda x: model.detail_sdf(x, grid, on_degenerate="zero")
                    terms = loss_terms(field, pool_pts[rows], pool_nrm[rows],
                                       off, signed_void=config.signed_void)
                    total = weight_terms(terms, config.lambdas)
                    opt.zero_grad(set_to_none=True)
                    total.backward()
                    opt.param_groups[0]["lr"] = lr
                    opt.step()
                    for name in TERM_NAMES:
                        sums[name] += float(terms[name].detach())
                    sums["total"] += float(total.detach())
                    sums["lr"] += lr
                    step += 1
                row = {name: sums[name] / steps_per_epoch
                       for name in TERM_NAMES + ("total", "lr")}
                history.append(epoch=epoch, kappa=0.0, **row)
        finally:
            for p in model.base.parameters():
                p.requires_grad_(True)
        self._transfer_done = True
        return FitResult(model=model, history=history, steps=step)

    def fit_target_base(self, cloud, config=None):
        if not self._transfer_done:
            raise PipelineOrderError(
                "fit_target_base runs after fit_transfer; the transfer stack "
                "must exist before a new base can be dressed")
        cfg = self.config
        base = Siren(in_dim=3, hidden_dim=cfg.base_hidden, depth=cfg.base_depth,
                     omega=cfg.omega_base, head="linear", seed=cfg.seed + 7,
                     dtype=get_dtype())
        if cfg.pretrain_radius > 0:
            base, _ = sphere_pretrain(base, radius=cfg.pretrain_radius,
                                      steps=cfg.pretrain_steps,
                                      seed=cfg.seed + 7)
        result = fit_base(base, cloud, config or self.base_train)
        self.target_base = result.model
        return result

    def compose(self):
        """Target-decorating model: trained transfer stack over the
        target base. Shares component modules with the source model."""
        if self.target_base is None:
            raise PipelineOrderError(
                "compose requires a fitted target base; run fit_target_base")
        src = self.source_model
        return TransferModel(self.target_base, src.film, src.encoder,
                             src.propagation, src.mapping,
                             grid=src.grid_settings, alpha=src.alpha,
                             nu=src.nu)


def transfer_pipeline(source_cloud, target_cloud, source_base_cloud=None,
                      target_base_cloud=None, config=None, base_train=None,
                      transfer_train=None):
    """Run all four stages; returns (pipeline, target model).

    When explicit smooth-base clouds are given, the base networks fit
    those; otherwise each base fits the detailed cloud directly and
    its low frequency budget does the smoothing.
    """
    pipe = TransferPipeline(config=config, base_train=base_train,
                            transfer_train=transfer_train)
    pipe.fit_source_base(source_base_cloud if source_base_cloud is not None
                         else source_cloud)
    pipe.fit_transfer(source_cloud)
    pipe.fit_target_base(target_base_cloud if target_base_cloud is not None
                         else target_cloud)
    return pipe, pipe.compose()
