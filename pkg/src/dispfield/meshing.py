"""Regular scalar grids and isosurface extraction.

Extraction is the classic 256-case cube polygonization: classify each
cell by the sign pattern of its eight corners, place one vertex on each
crossed edge by linear interpolation, and connect them per the case
table. Output is a triangle soup, optionally welded into a shared-vertex
mesh. Orientation follows the SDF convention (negative inside): emitted
triangles face outward.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import torch

from . import precision
from .errors import ConfigError, ValidationError
from .geometry import TriangleMesh
from .mc_tables import CROSSED_EDGES, EDGE_CORNERS, TRIANGLES

# grid nodes per axis above this are almost certainly a typo'd resolution
MAX_RESOLUTION = 1024

_CORNER_OFFSETS = np.array([
    (0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
    (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1),
], dtype=np.int64)


@dataclasses.dataclass
class ScalarGrid:
    """Scalar samples on a regular lattice.

    values has shape (nx, ny, nz), indexed values[ix, iy, iz]; node
    (ix, iy, iz) sits at origin + index * spacing.
    """

    values: np.ndarray
    origin: np.ndarray
    spacing: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.spacing = np.asarray(self.spacing, dtype=np.float64).reshape(3)

    def validate(self):
        if self.values.ndim != 3:
            raise ValidationError(f"grid values must be 3d, got {self.values.ndim}d")
        if min(self.values.shape) < 2:
            raise ValidationError("grid needs at least 2 nodes per axis")
        if not np.all(self.spacing > 0):
            raise ValidationError("grid spacing must be positive")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("grid contains non-finite values")

    @property
    def resolution(self):
        return self.values.shape

    def node_positions(self):
        """All node coordinates, x index varying fastest, shape (n, 3)."""
        nx, ny, nz = self.values.shape
        axes = [self.origin[k] + self.spacing[k] * np.arange(n)
                for k, n in ((0, nx), (1, ny), (2, nz))]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel(order="F") for g in grids], axis=1)

    def flat_values(self):
        """Values in the same x-fastest order as node_positions."""
        return self.values.ravel(order="F")

    def cell_diagonal(self):
        return float(np.linalg.norm(self.spacing))


def _resolve_bounds(bounds):
    if np.isscalar(bounds):
        b = float(bounds)
        if not b > 0:
            raise ConfigError(f"scalar bounds must be positive, got {bounds}")
        return np.full(3, -b), np.full(3, b)
    lo, hi = (np.asarray(side, dtype=np.float64).reshape(3) for side in bounds)
    if not np.all(hi > lo):
        raise ConfigError("bounds upper corner must exceed lower corner")
    return lo, hi


def sample_grid(fn, resolution, bounds=1.0, chunk=65536, dtype=None,
                max_resolution=MAX_RESOLUTION):
    """Evaluate a field callable on a regular grid.

    fn maps an (n, 3) torch tensor to (n,) values. resolution counts
    nodes per axis (int or triple, each >= 2). bounds is a half-width
    scalar for a centered cube or an explicit (lo, hi) pair. In
    deterministic mode the values are bitwise-identical to evaluating
    node by node, for any chunk size.
    """
    if np.isscalar(resolution):
        resolution = (int(resolution),) * 3
    resolution = tuple(int(r) for r in resolution)
    if min(resolution) < 2:
        raise ConfigError(f"resolution must be >= 2 per axis, got {resolution}")
    if max(resolution) > max_resolution:
        raise ConfigError(
            f"resolution {max(resolution)} exceeds the cap {max_resolution}")
    lo, hi = _resolve_bounds(bounds)
    spacing = (hi - lo) / (np.array(resolution) - 1)
    grid = ScalarGrid(np.zeros(resolution), lo, spacing)
    pts = grid.node_positions()
    tensor = torch.from_numpy(pts).to(dtype or precision.get_dtype())
    with torch.no_grad():
        vals = precision.eval_chunked(fn, tensor, chunk=chunk)
    flat = vals.detach().cpu().numpy().astype(np.float64).reshape(-1)
    if flat.shape[0] != pts.shape[0]:
        raise ValidationError("field returned a value count != node count")
    grid.values = flat.reshape(resolution, order="F")
    return grid


def marching_cubes(grid, iso=0.0, weld=True, weld_tol=1e-7):
    """Extract the iso-level surface of a grid as a triangle mesh.

    A corner is inside when its value is below iso. Crossed edges get a
    vertex at the linear zero of the two corner values. Returns a welded
    mesh by default; weld=False keeps the raw per-cell triangle soup.
    """
    grid.validate()
    vals = grid.values
    nx, ny, nz = vals.shape

    corner_vals = np.empty((8, nx - 1, ny - 1, nz - 1))
    for c, (ox, oy, oz) in enumerate(_CORNER_OFFSETS):
        corner_vals[c] = vals[ox:ox + nx - 1, oy:oy + ny - 1, oz:oz + nz - 1]
    config = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int32)
    for c in range(8):
        config |= (corner_vals[c] < iso).astype(np.int32) << c

    crossed = np.asarray(CROSSED_EDGES, dtype=np.int32)[config]
    active = np.nonzero(crossed)
    if active[0].size == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    acfg = config[active]
    across = crossed[active]
    cell_idx = np.stack(active, axis=1)  # (n_active, 3)

    # one interpolated vertex per crossed edge per active cell
    edge_verts = np.full((acfg.shape[0], 12, 3), np.nan)
    for e, (ca, cb) in enumerate(EDGE_CORNERS):
        need = (across >> e & 1).astype(bool)
        if not np.any(need):
            continue
        cells = cell_idx[need]
        va = corner_vals[ca][cells[:, 0], cells[:, 1], cells[:, 2]]
        vb = corner_vals[cb][cells[:, 0], cells[:, 1], cells[:, 2]]
        pa = (cells + _CORNER_OFFSETS[ca]) * grid.spacing + grid.origin
        pb = (cells + _CORNER_OFFSETS[cb]) * grid.spacing + grid.origin
        t = ((iso - va) / (vb - va))[:, None]
        edge_verts[need, e] = pa + t * (pb - pa)

    tri_vertices = []
    for k in range(acfg.shape[0]):
        spec = TRIANGLES[acfg[k]]
        for i in range(0, len(spec), 3):
            # table order gives inward-facing triangles under the
            # negative-inside convention; swap two corners to face out
            tri_vertices.append(edge_verts[k, spec[i]])
            tri_vertices.append(edge_verts[k, spec[i + 2]])
            tri_vertices.append(edge_verts[k, spec[i + 1]])
    soup = np.array(tri_vertices)
    faces = np.arange(len(soup), dtype=np.int64).reshape(-1, 3)
    mesh = TriangleMesh(soup, faces)
    if weld:
        mesh = weld_vertices(mesh, tol=weld_tol)
    return mesh


def weld_vertices(mesh, tol=1e-7):
    """Merge vertices that agree within tol per coordinate.

    Coordinates are snapped to a tol lattice and identical keys merged,
    first occurrence kept, so the result is deterministic. Triangles
    collapsed by the merge are dropped.
    """
    if not tol > 0:
        raise ConfigError(f"weld tolerance must be positive, got {tol}")
    keys = np.round(mesh.vertices / tol).astype(np.int64)
    seen = {}
    remap = np.empty(len(mesh.vertices), dtype=np.int64)
    kept = []
    for i, key in enumerate(map(tuple, keys)):
        j = seen.get(key)
        if j is None:
            j = len(kept)
            seen[key] = j
            kept.append(i)
        remap[i] = j
    faces = remap[mesh.faces]
    ok = ((faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2])
          & (faces[:, 0] != faces[:, 2]))
    return TriangleMesh(mesh.vertices[kept], faces[ok])
