import numpy as np
import pytest

from proxyedit.geometry import CameraPose, GaussianSet, InvalidArgument, TriMesh
from proxyedit.mesh import (ScalarGrid, clean_grid, density_grid, extract_mesh, marching_cubes,
                            rasterize_mesh, vertex_normals)
from proxyedit.render import FAR_DEPTH
from proxyedit.scenes import box_mesh

CAM = CameraPose(40.0, 0.0, 0.0, 4.0, 32, 32)


def iso_gaussian(mu=(0.0, 0.0, 0.0), s=0.2, a=0.8):
    return GaussianSet([mu], [[1, 0, 0, 0]], [[s, s, s]], [a], [[1, 1, 1]])


def icosphere(levels=3):
    t = (1 + 5**0.5) / 2
    v = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t], [0, -1, -t],
         [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
         [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    v = [np.array(p, float) / np.linalg.norm(p) for p in v]
    for _ in range(levels):
        cache, nf = {}, []

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = v[i] + v[j]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        f = nf
    return TriMesh(np.array(v), np.array(f))


def sphere_grid(res=64, radius=0.6):
    h = 2.0 / (res - 1)
    origin = np.full(3, -1.0)
    ax = origin[0] + h * np.arange(res)
    X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
    return ScalarGrid(origin, h, radius - np.sqrt(X**2 + Y**2 + Z**2)), h


def test_density_empty():
    g = density_grid(GaussianSet.empty(), 16)
    assert np.all(g.values == 0)


def test_density_peak_and_value():
    G = iso_gaussian((0.1, -0.05, 0.02))
    for field in ("occupancy", "sum"):
        g = density_grid(G, 33, field=field)
        peak = np.unravel_index(np.argmax(g.values), g.values.shape)
        assert np.linalg.norm(g.coordinates(peak) - G.positions[0]) <= np.sqrt(3) * g.voxel_size / 2
        assert abs(g.sample(G.positions)[0] - 0.8) < 1e-3


def test_density_sum_is_linear_in_opacity():
    pos = [[0, 0, 0], [0.15, 0, 0]]
    G = GaussianSet(pos, [[1, 0, 0, 0]] * 2, [[0.1] * 3] * 2, [0.3, 0.5], [[1, 1, 1]] * 2)
    G2 = G.replace(opacities=np.array([0.6, 0.5]))
    G0 = G.replace(opacities=np.array([0.0, 0.5]))
    bounds = ([-0.6] * 3, [0.7] * 3)
    v1, v2, v0 = (density_grid(x, 24, bounds=bounds, field="sum").values for x in (G, G2, G0))
    assert np.allclose(v2 - v0, 2 * (v1 - v0), atol=1e-12)


def test_density_rejects_small_grid():
    with pytest.raises(InvalidArgument):
        density_grid(iso_gaussian(), 4)


def test_marching_cubes_below_iso_is_empty():
    g = ScalarGrid(np.zeros(3), 0.1, np.zeros((8, 8, 8)))
    assert marching_cubes(g, 0.5).n_vertices == 0


def test_marching_cubes_analytic_sphere():
    g, h = sphere_grid()
    m = marching_cubes(g, 0.0)
    r = np.linalg.norm(m.vertices, axis=1)
    assert np.all(np.abs(r - 0.6) <= np.sqrt(3) * h)
    assert m.is_edge_manifold_closed()
    assert m.euler_characteristic() == 2
    # outward orientation
    c = m.vertices[m.faces].mean(axis=1)
    n = np.cross(m.vertices[m.faces[:, 1]] - m.vertices[m.faces[:, 0]],
                 m.vertices[m.faces[:, 2]] - m.vertices[m.faces[:, 0]])
    assert np.all(np.sum(n * c, axis=1) > 0)


def test_clean_grid_drops_blob_and_fills_cavity():
    g, _ = sphere_grid(32, 0.7)
    v = np.array(g.values)
    X = np.stack(np.meshgrid(*(g.origin[0] + g.voxel_size * np.arange(32),) * 3, indexing="ij"), -1)
    r = np.linalg.norm(X, axis=-1)
    v[r < 0.3] = -1.0  # hollow interior
    blob = np.linalg.norm(X - [0.9, 0.9, 0.9], axis=-1) < 0.08
    v[blob] = 1.0
    cleaned = clean_grid(ScalarGrid(g.origin, g.voxel_size, v), 0.1)
    assert np.all(cleaned.values[blob] < 0.1)
    assert np.all(cleaned.values[r < 0.3] > 0.1)
    m = marching_cubes(cleaned, 0.1)
    assert m.euler_characteristic() == 2


def test_extract_mesh_sphere_cluster_genus_zero():
    rng = np.random.default_rng(0)
    d = rng.normal(size=(400, 3))
    pos = 0.5 * d / np.linalg.norm(d, axis=1, keepdims=True)
    K = len(pos)
    G = GaussianSet(pos, np.tile([1, 0, 0, 0], (K, 1)), np.full((K, 3), 0.06), np.full(K, 0.8),
                    np.full((K, 3), 0.5))
    m = extract_mesh(G, 48)
    assert m.is_edge_manifold_closed() and m.euler_characteristic() == 2
    assert m.meta["voxel_size"] > 0
    m2 = extract_mesh(G, 48)
    assert np.array_equal(m.vertices, m2.vertices) and np.array_equal(m.faces, m2.faces)


def test_vertex_normals_cube_faces():
    m = vertex_normals(box_mesh((1.0, 1.0, 1.0), (0, 0, 0), [(1, 1, 1)] * 6, n=4))
    v = m.vertices
    assert np.allclose(np.linalg.norm(m.normals, axis=1), 1, atol=1e-6)
    on_face = np.sum(np.isclose(np.abs(v), 0.5), axis=1) == 1
    axis = np.argmax(np.abs(v), axis=1)
    expected = np.zeros_like(v)
    expected[np.arange(len(v)), axis] = np.sign(v[np.arange(len(v)), axis])
    assert on_face.sum() > 0
    assert np.allclose(m.normals[on_face], expected[on_face], atol=1e-9)


def test_vertex_normals_icosphere_radial():
    m = vertex_normals(icosphere())
    cosang = np.sum(m.normals * m.vertices, axis=1)
    assert np.all(cosang >= np.cos(np.deg2rad(2.0)))


def test_vertex_normals_isolated_vertex():
    m = vertex_normals(TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]], [[0, 1, 2]]))
    assert np.array_equal(m.normals[3], [0, 0, 1])


def test_rasterize_empty():
    r = rasterize_mesh(TriMesh.empty(), CAM)
    assert np.all(r.mask == 0) and np.all(r.depth == FAR_DEPTH)


def test_rasterize_plane_depth():
    # world plane z = 2 is camera depth 2 for a camera at z = 4
    tri = TriMesh([[-20, -20, 2.0], [20, -20, 2.0], [0, 20, 2.0]], [[0, 1, 2]])
    r = rasterize_mesh(tri, CAM)
    assert np.all(r.mask == 1)
    assert np.allclose(r.depth, 2.0, atol=1e-9)
    assert np.allclose(r.normal, [0, 0, 1], atol=1e-9)


def test_rasterize_occlusion_and_mask_depth_consistency():
    near = TriMesh([[-1, -1, 3.0], [1, -1, 3.0], [0, 1, 3.0]], [[0, 1, 2]], colors=[[1, 0, 0]] * 3)
    far = TriMesh([[-3, -3, 1.0], [3, -3, 1.0], [0, 3, 1.0]], [[0, 1, 2]], colors=[[0, 0, 1]] * 3)
    both = TriMesh(np.vstack([far.vertices, near.vertices]), [[0, 1, 2], [3, 4, 5]],
                   colors=np.vstack([far.colors, near.colors]))
    r = rasterize_mesh(both, CAM)
    assert np.isclose(r.depth[16, 16], 1.0) and np.allclose(r.mesh_image[16, 16], [1, 0, 0])
    assert np.array_equal(r.mask == 1, r.depth < FAR_DEPTH)
