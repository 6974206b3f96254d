import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proxyedit.geometry import (CameraPose, GaussianSet, InvalidArgument, TriMesh,
                                covariance_from_rs, init_sphere_gaussians, normalize_quaternions,
                                project_covariance, quat_to_rotmat)


def random_unit_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def test_init_sphere_empty():
    G = init_sphere_gaussians(0)
    assert len(G) == 0
    assert G.positions.shape == (0, 3) and G.rotations.shape == (0, 4)


def test_init_sphere_radius_exact():
    G = init_sphere_gaussians(512, radius=1.0, seed=7)
    assert np.max(np.abs(np.linalg.norm(G.positions, axis=1) - 1.0)) < 1e-6
    assert np.all(G.rotations == [1, 0, 0, 0])
    assert np.all(G.opacities == 0.1)
    assert np.ptp(G.scales) == 0


def test_init_sphere_deterministic():
    a = init_sphere_gaussians(100, 2.0, seed=3)
    b = init_sphere_gaussians(100, 2.0, seed=3)
    for name in ("positions", "rotations", "scales", "opacities", "colors"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_init_sphere_bad_radius():
    with pytest.raises(InvalidArgument):
        init_sphere_gaussians(10, radius=0.0)


def test_covariance_identity_cases():
    assert np.allclose(covariance_from_rs([1, 0, 0, 0], [1, 1, 1]), np.eye(3))
    assert np.allclose(covariance_from_rs([1, 0, 0, 0], [2, 1, 1]), np.diag([4.0, 1, 1]))


def test_covariance_eigenvalues():
    rng = np.random.default_rng(0)
    for _ in range(20):
        S = covariance_from_rs(random_unit_quat(rng), [1.0, 2.0, 3.0])
        assert np.allclose(np.linalg.eigvalsh(S), [1, 4, 9], atol=1e-9)


def test_covariance_rejects_non_unit():
    with pytest.raises(InvalidArgument):
        covariance_from_rs([1.0, 0.1, 0, 0], [1, 1, 1])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4),
       st.lists(st.floats(1e-3, 10), min_size=3, max_size=3))
def test_covariance_symmetric_psd(q, s):
    q = np.asarray(q)
    if np.linalg.norm(q) < 1e-3:
        q = np.array([1.0, 0, 0, 0])
    S = covariance_from_rs(normalize_quaternions(q), s)
    assert np.max(np.abs(S - S.T)) < 1e-12
    assert np.linalg.eigvalsh(S).min() >= -1e-9


def test_project_covariance_cases():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(3, 3))
    S = A @ A.T
    assert np.allclose(project_covariance(S, np.eye(3), np.eye(3)), S)
    assert np.all(project_covariance(S, np.eye(3), np.zeros((3, 3))) == 0)
    R = quat_to_rotmat(random_unit_quat(rng))
    out = project_covariance(S, R, np.eye(3))
    assert np.allclose(out, out.T)
    assert np.allclose(np.linalg.eigvalsh(out), np.linalg.eigvalsh(S), atol=1e-9)


def test_gaussian_set_validation():
    with pytest.raises(InvalidArgument):
        GaussianSet(np.zeros((2, 3)), np.zeros((2, 4)), np.ones((2, 3)), np.array([0.5, 1.5]),
                    np.zeros((2, 3)))
    with pytest.raises(InvalidArgument):
        GaussianSet(np.zeros((1, 3)), np.zeros((1, 4)), np.zeros((1, 3)), np.ones(1), np.zeros((1, 3)))
    with pytest.raises(InvalidArgument):
        GaussianSet(np.full((1, 3), np.nan), np.zeros((1, 4)), np.ones((1, 3)), np.ones(1),
                    np.zeros((1, 3)))


def test_camera_validation_and_axes():
    with pytest.raises(InvalidArgument):
        CameraPose(180, 0, 0, 4, 64, 64)
    with pytest.raises(InvalidArgument):
        CameraPose(30, 0, 0, 4, 0, 64)
    cam = CameraPose(33.8, 0, 0, 4.0, 64, 64)
    assert np.allclose(cam.center, [0, 0, 4])
    uv, z = cam.project(np.zeros((1, 3)))
    assert np.allclose(uv, [[31.5, 31.5]]) and np.isclose(z[0], 4.0)
    assert CameraPose.from_dict(cam.to_dict()) == cam


def test_trimesh_validation():
    with pytest.raises(InvalidArgument):
        TriMesh(np.zeros((3, 3)), [[0, 1, 3]])
    with pytest.raises(InvalidArgument):
        TriMesh(np.zeros((3, 3)), [[0, 1, 1]])
    with pytest.raises(InvalidArgument):
        TriMesh(np.zeros((3, 3)), [[0, 1, 2]], colors=np.zeros((2, 3)))


def test_trimesh_tetrahedron_topology():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    f = [[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]]
    m = TriMesh(v, f)
    assert m.euler_characteristic() == 2
    assert m.is_edge_manifold_closed()
