import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from proxyedit.cli import main
from proxyedit.io import load_obj, load_pfm, load_png, save_offsets
from proxyedit.propagation import GridConfig, propagate_geometry, render_edit_controls
from proxyedit.mesh import vertex_normals
from proxyedit.recon import load_result
from proxyedit.scenes import scene_cameras

TINY_CONFIG = {
    "recon": dict(iterations=40, num_gaussians=200, train_grid_resolution=24, grid_resolution=32,
                  mesh_refresh=10, deform_depth=2, deform_width=16, deform_skip=0, color_depth=2,
                  color_width=16, cycle_batch=64),
    "grid": {"resolution": 32, "padding": 0.1},
}
COMMON = ["--frames", "3", "--resolution", "32"]


def digests(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def config_path(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "config.json"
    p.write_text(json.dumps(TINY_CONFIG))
    return str(p)


@pytest.fixture(scope="module")
def e2e_run(tmp_path_factory, config_path):
    out = tmp_path_factory.mktemp("e2e")
    assert main(["e2e", "--config", config_path, *COMMON, "--out", str(out)]) == 0
    return out


def test_e2e_artifacts(e2e_run):
    for sub in ("scene/manifest.json", "recon", "canonical.obj", "propagated/times.json",
                "controls/mask", "metrics.json"):
        assert (e2e_run / sub).exists()
    reports = json.loads((e2e_run / "metrics.json").read_text())
    assert {r["metric"] for r in reports} >= {"tem_con", "fram_acc", "clap"}


def test_e2e_zero_edit_controls_match_unedited_proxy(e2e_run):
    result = load_result(e2e_run / "recon")
    cam = scene_cameras(32, 0)[0]
    times = json.loads((e2e_run / "propagated" / "times.json").read_text())
    grid = GridConfig(**TINY_CONFIG["grid"])
    for i, t in enumerate(times):
        ref = propagate_geometry(result.gaussians, result.theta, np.zeros((len(result.gaussians), 3)),
                                 t, grid)
        edited = load_obj(e2e_run / "propagated" / f"frame_{i:04d}.obj")
        assert np.array_equal(edited.vertices, ref.vertices)
        r = render_edit_controls([vertex_normals(ref.replace(colors=edited.colors))], [cam])[0]
        name = f"frame_{i:04d}"
        assert np.array_equal(load_pfm(e2e_run / "controls" / "depth" / f"{name}.pfm"),
                              r.depth.astype(np.float32))
        assert np.array_equal(load_png(e2e_run / "controls" / "mask" / f"{name}.png") > 0.5,
                              r.mask > 0.5)


def test_e2e_rerun_is_byte_identical(e2e_run, tmp_path, config_path):
    assert main(["e2e", "--config", config_path, *COMMON, "--out", str(tmp_path)]) == 0
    assert digests(tmp_path) == digests(e2e_run)


def test_reconstruct_twice_same_hashes(e2e_run, tmp_path, config_path):
    scene = str(e2e_run / "scene")
    for name in ("a", "b"):
        assert main(["reconstruct", "--config", config_path, "--scene", scene,
                     "--out", str(tmp_path / name)]) == 0
    assert digests(tmp_path / "a") == digests(tmp_path / "b") == digests(e2e_run / "recon")


def test_export_then_propagate_unmodified_is_identity(e2e_run, tmp_path, config_path):
    out = tmp_path / "prop"
    canon = str(e2e_run / "canonical.obj")
    assert main(["propagate", "--config", config_path, "--recon", str(e2e_run / "recon"),
                 "--edited-mesh", canon, "--canonical", canon, "--out", str(out)]) == 0
    assert digests(out) == digests(e2e_run / "propagated")


def test_propagate_translation_edit(e2e_run, tmp_path, config_path):
    spec = tmp_path / "edit.json"
    spec.write_text(json.dumps({"operations": [{"type": "translate", "vector": [0.1, 0, 0]}]}))
    out = tmp_path / "prop"
    assert main(["propagate", "--config", config_path, "--recon", str(e2e_run / "recon"),
                 "--edit", str(spec), "--out", str(out)]) == 0
    a = load_obj(out / "frame_0000.obj").vertices
    b = load_obj(e2e_run / "propagated" / "frame_0000.obj").vertices
    assert abs(a[:, 0].mean() - b[:, 0].mean() - 0.1) < 0.02


def test_propagate_missing_offset_file(e2e_run, tmp_path, config_path, capsys):
    spec = tmp_path / "edit.json"
    spec.write_text(json.dumps({"operations": [{"type": "offsets", "path": "missing.bin"}]}))
    code = main(["propagate", "--config", config_path, "--recon", str(e2e_run / "recon"),
                 "--edit", str(spec), "--out", str(tmp_path / "p")])
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert code == 1 and err["stage"] == "edit-propagation"


def test_propagate_offset_count_mismatch(e2e_run, tmp_path, config_path, capsys):
    save_offsets(tmp_path / "off.bin", np.zeros((5, 3)))
    spec = tmp_path / "edit.json"
    spec.write_text(json.dumps({"operations": [{"type": "offsets", "path": "off.bin"}]}))
    code = main(["propagate", "--config", config_path, "--recon", str(e2e_run / "recon"),
                 "--edit", str(spec), "--out", str(tmp_path / "p")])
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert code == 1 and err["stage"] == "edit-propagation" and "5 vertices" in err["error"]


def test_dataprep_deterministic(e2e_run, tmp_path):
    for name in ("a", "b"):
        assert main(["dataprep", "--scene", str(e2e_run / "scene"), "--stage", "2",
                     "--out", str(tmp_path / name)]) == 0
    assert digests(tmp_path / "a") == digests(tmp_path / "b")
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert len(manifest["batches"]) == 3


def test_usage_errors(capsys, tmp_path):
    assert main(["frobnicate", "--out", str(tmp_path)]) == 2
    err = json.loads(capsys.readouterr().err.strip())
    assert err["stage"] == "cli"
    assert main(["simulate", "--preset", "teapot", "--out", str(tmp_path / "s")]) == 1
    err = json.loads(capsys.readouterr().err.strip())
    assert err["stage"] == "scene-sim"
    assert main(["simulate", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 1
    assert json.loads(capsys.readouterr().err.strip())["stage"] == "config"
