from collections import Counter

import numpy as np
import pytest
import torch

from dispfield import precision
from dispfield.errors import ConfigError, ValidationError
from dispfield.geometry import TriangleMesh
from dispfield.mc_tables import CROSSED_EDGES, TRIANGLES
from dispfield.meshing import ScalarGrid, marching_cubes, sample_grid, weld_vertices


def sphere_fn(p):
    return p.norm(dim=1) - 0.5


def edge_use_counts(mesh):
    cnt = Counter()
    for f in mesh.faces:
        for e in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            cnt[e] += 1
    return cnt


class TestTables:
    def test_triangulation_edges_match_crossing_mask(self):
        for cfg in range(256):
            bits = {e for e in range(12) if CROSSED_EDGES[cfg] >> e & 1}
            assert set(TRIANGLES[cfg]) == bits
            assert len(TRIANGLES[cfg]) % 3 == 0

    def test_complement_symmetry(self):
        for cfg in range(256):
            assert CROSSED_EDGES[cfg] == CROSSED_EDGES[255 - cfg]


class TestScalarGrid:
    def test_node_positions_x_fastest(self):
        g = ScalarGrid(np.zeros((2, 3, 2)), origin=[0, 0, 0], spacing=[1, 1, 1])
        pts = g.node_positions()
        assert pts.shape == (12, 3)
        np.testing.assert_array_equal(pts[0], [0, 0, 0])
        np.testing.assert_array_equal(pts[1], [1, 0, 0])
        np.testing.assert_array_equal(pts[2], [0, 1, 0])

    def test_flat_values_align_with_positions(self):
        g = ScalarGrid(np.zeros((3, 3, 3)), origin=[-1, -1, -1], spacing=[1, 1, 1])
        pts = g.node_positions()
        g.values = (pts[:, 0] + 10 * pts[:, 1] + 100 * pts[:, 2]).reshape(
            (3, 3, 3), order="F")
        np.testing.assert_array_equal(
            g.flat_values(), pts[:, 0] + 10 * pts[:, 1] + 100 * pts[:, 2])

    def test_validate(self):
        with pytest.raises(ValidationError):
            ScalarGrid(np.zeros((1, 2, 2)), [0, 0, 0], [1, 1, 1]).validate()
        with pytest.raises(ValidationError):
            ScalarGrid(np.zeros((2, 2, 2)), [0, 0, 0], [0, 1, 1]).validate()
        g = ScalarGrid(np.full((2, 2, 2), np.nan), [0, 0, 0], [1, 1, 1])
        with pytest.raises(ValidationError):
            g.validate()


class TestSampleGrid:
    def test_values_match_direct_evaluation(self):
        g = sample_grid(sphere_fn, 9, bounds=1.0)
        pts = torch.from_numpy(g.node_positions()).float()
        direct = sphere_fn(pts).numpy()
        np.testing.assert_allclose(g.flat_values(), direct, atol=1e-7)

    def test_explicit_bounds(self):
        g = sample_grid(sphere_fn, (5, 3, 2), bounds=((0, 0, 0), (1, 2, 3)))
        assert g.values.shape == (5, 3, 2)
        np.testing.assert_allclose(g.origin, [0, 0, 0])
        np.testing.assert_allclose(g.spacing, [0.25, 1.0, 3.0])

    def test_resolution_validation(self):
        with pytest.raises(ConfigError):
            sample_grid(sphere_fn, 1)
        with pytest.raises(ConfigError):
            sample_grid(sphere_fn, 2048)

    def test_deterministic_chunking_bitwise(self):
        precision.set_deterministic(True)
        lin = torch.nn.Linear(3, 1)
        fn = lambda p: torch.sin(5.0 * lin(p)).squeeze(-1)
        full = sample_grid(fn, 7, chunk=7 ** 3)
        for chunk in (1, 11, 64):
            g = sample_grid(fn, 7, chunk=chunk)
            assert np.array_equal(g.values, full.values), f"chunk={chunk}"


class TestMarchingCubes:
    def test_single_corner_case_exact(self):
        # corner (0,0,0) inside, everything else outside: one triangle
        # whose vertices sit at the linear zeros of the three incident
        # edges, facing away from the inside corner
        vals = np.full((2, 2, 2), 1.0)
        vals[0, 0, 0] = -1.0
        g = ScalarGrid(vals, origin=[0, 0, 0], spacing=[2, 2, 2])
        mesh = marching_cubes(g, iso=0.0, weld=False)
        assert len(mesh.faces) == 1
        expected = {(1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)}
        got = {tuple(v) for v in mesh.vertices}
        assert got == expected
        n = mesh.face_normals()[0]
        assert np.dot(n, [1, 1, 1]) > 0

    def test_uneven_interpolation(self):
        vals = np.full((2, 2, 2), 3.0)
        vals[0, 0, 0] = -1.0
        g = ScalarGrid(vals, origin=[0, 0, 0], spacing=[1, 1, 1])
        mesh = marching_cubes(g, weld=False)
        # zero crossing at t = 1/4 along each incident edge
        got = {tuple(v) for v in mesh.vertices}
        assert got == {(0.25, 0.0, 0.0), (0.0, 0.25, 0.0), (0.0, 0.0, 0.25)}

    def test_sphere_accuracy_and_topology(self):
        g = sample_grid(sphere_fn, 64, bounds=1.0, dtype=torch.float64)
        mesh = marching_cubes(g)
        r = np.linalg.norm(mesh.vertices, axis=1)
        assert np.abs(r - 0.5).max() <= g.cell_diagonal()
        cnt = edge_use_counts(mesh)
        assert all(c == 1 and cnt.get((v, u)) == 1 for (u, v), c in cnt.items())
        v, f = len(mesh.vertices), len(mesh.faces)
        e = len(cnt) // 2
        assert v - e + f == 2
        a, b, c = mesh.face_corners()
        vol = np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0
        true = 4.0 / 3.0 * np.pi * 0.5 ** 3
        assert abs(vol - true) / true < 0.01

    def test_orientation_outward_everywhere(self):
        g = sample_grid(sphere_fn, 24, bounds=1.0)
        mesh = marching_cubes(g)
        n = mesh.face_normals()
        a, b, c = mesh.face_corners()
        centroid = (a + b + c) / 3
        assert np.all(np.einsum("ij,ij->i", n, centroid) > 0)

    def test_empty_and_full_levels(self):
        g = ScalarGrid(np.ones((3, 3, 3)), [0, 0, 0], [1, 1, 1])
        assert len(marching_cubes(g).faces) == 0
        g = ScalarGrid(-np.ones((3, 3, 3)), [0, 0, 0], [1, 1, 1])
        assert len(marching_cubes(g).faces) == 0

    def test_nonzero_iso(self):
        g = sample_grid(lambda p: p.norm(dim=1), 32, bounds=1.0)
        mesh = marching_cubes(g, iso=0.6)
        r = np.linalg.norm(mesh.vertices, axis=1)
        assert np.abs(r - 0.6).max() <= g.cell_diagonal()

    def test_nan_grid_rejected(self):
        g = ScalarGrid(np.full((2, 2, 2), np.nan), [0, 0, 0], [1, 1, 1])
        with pytest.raises(ValidationError):
            marching_cubes(g)


class TestWeld:
    def test_merges_shared_corners(self):
        g = sample_grid(sphere_fn, 16, bounds=1.0)
        soup = marching_cubes(g, weld=False)
        welded = marching_cubes(g, weld=True)
        assert len(welded.vertices) < len(soup.vertices)
        assert len(welded.faces) == len(soup.faces)
        assert welded.face_areas().sum() == pytest.approx(soup.face_areas().sum())

    def test_collapsed_faces_dropped(self):
        m = TriangleMesh(
            np.array([[0.0, 0, 0], [0, 0, 1e-9], [1, 0, 0], [0, 1, 0]]),
            np.array([[0, 1, 2], [0, 2, 3]]))
        out = weld_vertices(m, tol=1e-7)
        assert len(out.vertices) == 3
        assert len(out.faces) == 1

    def test_keeps_distinct_vertices(self):
        m = TriangleMesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]),
                         np.array([[0, 1, 2]]))
        out = weld_vertices(m, tol=1e-7)
        np.testing.assert_array_equal(out.vertices, m.vertices)

    def test_bad_tolerance(self):
        with pytest.raises(ConfigError):
            weld_vertices(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3))), tol=0)
