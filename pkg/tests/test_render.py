import numpy as np

from gradcheck import splat_probe_errors, splat_scene
from proxyedit.geometry import CameraPose, GaussianSet
from proxyedit.render import FAR_DEPTH, render_gaussians, render_gaussians_backward

CAM = CameraPose(40.0, 0.0, 0.0, 4.0, 33, 33)


def _single(z_world=0.0, color=(1, 0, 0), alpha=0.9, scale=0.1):
    return GaussianSet([[0, 0, z_world]], [[1, 0, 0, 0]], [[scale] * 3], [alpha], [color])


def test_empty_scene():
    r = render_gaussians(GaussianSet.empty(), CAM, (0.2, 0.3, 0.4))
    assert np.all(r.rgb == [0.2, 0.3, 0.4]) and np.all(r.alpha == 0) and np.all(r.depth == FAR_DEPTH)


def test_single_splat_center_composite():
    bg = np.array([0.0, 0.5, 1.0])
    r = render_gaussians(_single(), CAM, bg)
    expected = 0.9 * np.array([1.0, 0, 0]) + 0.1 * bg
    assert np.allclose(r.rgb[16, 16], expected, atol=1e-5)
    assert np.isclose(r.depth[16, 16], 4.0)


def test_occlusion_ordering():
    # camera at z=+4 looking down -z: world z=3 is depth 1, world z=2 is depth 2
    G = GaussianSet([[0, 0, 2.0], [0, 0, 3.0]], [[1, 0, 0, 0]] * 2, [[0.05] * 3] * 2, [0.99, 0.99],
                    [[0, 0, 1], [1, 0, 0]])
    c = render_gaussians(G, CAM).rgb[16, 16]
    assert c[0] > 0.95 and c[2] < 0.05


def test_alpha_monotone_in_opacity():
    G, cam, _, _ = splat_scene(3)
    base = render_gaussians(G, cam).alpha
    op = np.array(G.opacities)
    op[4] = min(1.0, op[4] + 0.2)
    assert np.all(render_gaussians(G.replace(opacities=op), cam).alpha >= base - 1e-12)


def test_deterministic():
    G, cam, _, _ = splat_scene(4)
    a, b = render_gaussians(G, cam), render_gaussians(G, cam)
    assert np.array_equal(a.rgb, b.rgb) and np.array_equal(a.depth, b.depth)


def test_backward_zero_upstream():
    G, cam, _, _ = splat_scene(5)
    g = render_gaussians_backward(G, cam, grad_rgb=np.zeros((24, 24, 3)), grad_alpha=np.zeros((24, 24)))
    for name in ("positions", "rotations", "scales", "opacities", "colors"):
        assert np.all(getattr(g, name) == 0)


def test_color_gradients():
    assert splat_probe_errors("colors", n_probes=20, seed=7).max() < 1e-3


def test_opacity_gradients():
    assert splat_probe_errors("opacities", n_probes=20, seed=8).max() < 1e-3


def test_position_gradients():
    assert splat_probe_errors("positions", n_probes=20, seed=9).max() < 1e-2


def _fd(G, cam, attr, idx, up_rgb, up_alpha, up_depth, h):
    vals = []
    for s in (1, -1):
        a = np.array(getattr(G, attr))
        a[idx] += s * h
        r = render_gaussians(G.replace(**{attr: a}), cam)
        vals.append(np.sum(up_rgb * r.rgb) + np.sum(up_alpha * r.alpha) + np.sum(up_depth * r.depth))
    return (vals[0] - vals[1]) / (2 * h)


def test_scale_rotation_and_depth_gradients():
    G, cam, up_rgb, up_alpha = splat_scene(6)
    r = render_gaussians(G, cam)
    up_depth = np.where(r.alpha > 0.05, np.random.default_rng(0).normal(size=r.alpha.shape), 0.0)
    g = render_gaussians_backward(G, cam, grad_rgb=up_rgb, grad_alpha=up_alpha, grad_depth=up_depth)
    for attr, idx in [("scales", (2, 1)), ("scales", (7, 0)), ("rotations", (3, 2)),
                      ("positions", (1, 2))]:
        fd = _fd(G, cam, attr, idx, up_rgb, up_alpha, up_depth, 1e-6)
        assert abs(getattr(g, attr)[idx] - fd) <= 1e-3 * max(1.0, abs(fd))
