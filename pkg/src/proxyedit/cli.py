"""Command-line entry point: ``proxyedit <command> [flags]``.

Commands: simulate, reconstruct, export-canonical, propagate, render-controls,
dataprep, metrics, e2e. Failures print one JSON object on stderr
(``{"error", "type", "stage"}``) and exit with status 1, or 2 for usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .geometry import InvalidArgument

log = logging.getLogger("proxyedit")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(str(cause))
        self.stage = stage
        self.cause = cause


class _Stage:
    """Context manager tagging any exception with the pipeline stage it came from."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


def _load_config(path) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise InvalidArgument(f"config file not found: {p}")
    cfg = json.loads(p.read_text())
    if not isinstance(cfg, dict):
        raise InvalidArgument("config must be a JSON object")
    return cfg


def _recon_config(args, cfg: dict):
    from .recon import ReconConfig

    d = dict(cfg.get("recon", {}))
    d.setdefault("seed", args.seed)
    return ReconConfig.from_dict(d)


def _grid(cfg: dict):
    from .propagation import GridConfig

    g = cfg.get("grid", {})
    return GridConfig(int(g.get("resolution", 96)), float(g.get("padding", 0.1)))


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------


def cmd_simulate(args, cfg) -> Path:
    from .scenes import corrupt_views, make_scene, save_bundle

    with _Stage("scene-sim"):
        bundle = make_scene(args.preset, args.frames, args.resolution, args.novel_views)
        if args.corrupt:
            bundle = corrupt_views(bundle, args.corrupt, args.seed)
        return save_bundle(bundle, Path(args.out))


def _scene_path(args) -> Path:
    p = Path(args.scene)
    return p / "manifest.json" if p.is_dir() else p


def cmd_reconstruct(args, cfg) -> Path:
    from .recon import save_result, train_reconstruction
    from .scenes import load_bundle

    with _Stage("scene-sim"):
        bundle = load_bundle(_scene_path(args))
    with _Stage("recon-optimizer"):
        result = train_reconstruction(bundle, _recon_config(args, cfg))
        out = Path(args.out)
        save_result(result, out)
    return out


def _canonical_mesh(recon_dir: Path, cfg):
    from .propagation import extract_canonical_mesh
    from .recon import load_result

    result = load_result(recon_dir)
    mesh = extract_canonical_mesh(result.gaussians, _grid(cfg))
    return result, mesh


def cmd_export_canonical(args, cfg) -> Path:
    from .deformation import color_query
    from .io import save_obj

    with _Stage("edit-propagation"):
        result, mesh = _canonical_mesh(Path(args.recon), cfg)
        mesh = mesh.replace(colors=np.clip(color_query(result.color_field, mesh.vertices), 0, 1))
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_obj(out, mesh)
    return out


def _edit_spec(args, canonical):
    from .io import load_obj
    from .propagation import EditSpec

    if args.edited_mesh:
        edited = load_obj(args.edited_mesh)
        if edited.n_vertices != canonical.n_vertices:
            raise InvalidArgument(f"edited mesh has {edited.n_vertices} vertices, canonical mesh has "
                                  f"{canonical.n_vertices}")
        delta = edited.vertices - canonical.vertices
        return EditSpec([{"type": "offsets", "data": delta.tolist()}] if np.any(delta) else [])
    if args.edit:
        return EditSpec.from_json(args.edit)
    return EditSpec()


def _times(result, args):
    if getattr(args, "frames", None) and args.frames != len(result.times):
        return np.linspace(0.0, 1.0, args.frames) if args.frames > 1 else np.zeros(1)
    return np.asarray(result.times)


def cmd_propagate(args, cfg) -> Path:
    from .io import save_obj
    from .propagation import prepare_edit, propagate_frame

    with _Stage("edit-propagation"):
        result, canonical = _canonical_mesh(Path(args.recon), cfg)
        # the diff is taken against the exported OBJ so an untouched export is an exact zero edit
        reference = canonical
        if args.edited_mesh and args.canonical:
            from .io import load_obj
            reference = load_obj(args.canonical)
        spec = _edit_spec(args, reference)
        state = prepare_edit(result.gaussians, result.theta, result.theta_inv, result.color_field,
                             spec, _grid(cfg), canonical_mesh=canonical)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        times = _times(result, args)
        for i, t in enumerate(times):
            save_obj(out / f"frame_{i:04d}.obj", propagate_frame(state, float(t)))
        _write_json(out / "times.json", [float(t) for t in times])
    return out


def _cameras(args, n: int):
    from .io import load_rig
    from .scenes import scene_cameras

    if getattr(args, "rig", None):
        cams = load_rig(args.rig)
        if len(cams) == 1:
            cams = cams * n
        return cams
    return [scene_cameras(args.resolution, 0)[0]] * n


def cmd_render_controls(args, cfg) -> Path:
    from .io import load_obj
    from .mesh import vertex_normals
    from .propagation import render_edit_controls

    with _Stage("mesh-pipeline"):
        src = Path(args.meshes)
        paths = sorted(src.glob("frame_*.obj"))
        if not paths:
            raise InvalidArgument(f"no frame_*.obj meshes in {src}")
        meshes = [vertex_normals(load_obj(p)) for p in paths]
        render_edit_controls(meshes, _cameras(args, len(meshes)), Path(args.out))
    return Path(args.out)


def cmd_dataprep(args, cfg) -> Path:
    from .controls import (AugmentParams, TextureSimParams, assemble_batch, augment_reference,
                           geometry_control_map, normal_from_depth, simulate_texture, split_fg_bg,
                           texture_control_map, write_batch)
    from .render import FAR_DEPTH
    from .scenes import load_bundle

    with _Stage("scene-sim"):
        bundle = load_bundle(_scene_path(args))
    with _Stage("control-data"):
        rng = np.random.default_rng(args.seed)
        frames = [bundle.observed(i).image for i in range(bundle.n_frames)]
        masks = [bundle.observed(i).mask for i in range(bundle.n_frames)]
        refs, _, order = augment_reference(frames, masks, AugmentParams.sample(rng))
        tex = TextureSimParams.sample(rng)
        out = Path(args.out)
        records = []
        for i in range(bundle.n_frames):
            v = bundle.observed(i)
            _, v_bg = split_fg_bg(v.image, v.mask)
            depth = np.where(v.mask > 0, 1.0 / np.maximum(v.disparity, 1e-12), FAR_DEPTH)
            depth = np.where(v.mask > 0, depth, depth[v.mask > 0].max() if v.mask.any() else 0.0)
            inputs = {
                "input": v.image,
                "mask": v.mask,
                "background": v_bg,
                "texture": texture_control_map(simulate_texture(v.image, tex), v.mask, v_bg),
                "geometry": geometry_control_map(normal_from_depth(depth), v.mask),
                "reference": refs[i],
            }
            batch, flags = assemble_batch(args.stage, inputs, rng)
            manifest = write_batch(batch, flags, out / f"batch_{i:04d}")
            records.append(str(manifest.relative_to(out)))
        _write_json(out / "manifest.json", {"batches": records, "stage": args.stage,
                                            "reference_order": order.tolist(), "seed": args.seed})
    return out


_PATH_ARGS = ("out", "config", "frames_dir", "inputs_dir", "meshes", "scene", "recon", "edit",
              "edited_mesh", "canonical", "rig")


def cmd_metrics(args, cfg) -> Path:
    from .io import load_obj, load_png
    from .metrics import (HistogramEmbedding, appearance_similarity, chamfer, clap_score, fram_acc,
                          metric_report, tem_con)

    with _Stage("metrics"):
        provider = HistogramEmbedding()
        reports = []
        # locations are left out so the same run in another directory hashes the same
        run_cfg = {"args": {k: v for k, v in vars(args).items() if k not in _PATH_ARGS},
                   "config": cfg}
        if args.frames_dir:
            edited = [load_png(p)[..., :3] for p in sorted(Path(args.frames_dir).glob("*.png"))]
            if not edited:
                raise InvalidArgument(f"no PNG frames in {args.frames_dir}")
            if len(edited) >= 2:
                reports.append(metric_report("tem_con", tem_con(edited, provider), run_cfg))
            src = provider.embed_text(args.src_prompt)
            tgt = provider.embed_text(args.tgt_prompt)
            fa = fram_acc(edited, src, tgt, provider)
            reports.append(metric_report("fram_acc", fa, run_cfg))
            if args.inputs_dir:
                inputs = [load_png(p)[..., :3] for p in sorted(Path(args.inputs_dir).glob(args.inputs_glob))]
                sim = appearance_similarity(inputs, edited, provider)
                reports.append(metric_report("appearance_similarity", sim, run_cfg))
                reports.append(metric_report("clap", clap_score(fa, max(0.0, sim)), run_cfg))
        if args.meshes and args.scene:
            from .scenes import load_bundle

            bundle = load_bundle(_scene_path(args))
            paths = sorted(Path(args.meshes).glob("frame_*.obj"))
            vals = [chamfer(load_obj(p).vertices, m.vertices)
                    for p, m in zip(paths, bundle.gt_meshes)]
            reports.append(metric_report("chamfer", float(np.mean(vals)), run_cfg))
        out = Path(args.out)
        _write_json(out, reports)
    return out


def cmd_e2e(args, cfg) -> Path:
    root = Path(args.out)
    ns = argparse.Namespace(**vars(args))
    ns.out = str(root / "scene")
    cmd_simulate(ns, cfg)
    ns.scene = str(root / "scene")
    ns.out = str(root / "recon")
    cmd_reconstruct(ns, cfg)
    ns.recon = str(root / "recon")
    ns.out = str(root / "canonical.obj")
    cmd_export_canonical(ns, cfg)
    ns.out = str(root / "propagated")
    ns.frames = None
    cmd_propagate(ns, cfg)
    ns.meshes = str(root / "propagated")
    ns.out = str(root / "controls")
    cmd_render_controls(ns, cfg)
    ns.frames_dir = str(root / "controls" / "mesh_image")
    ns.inputs_dir = str(root / "scene" / "images")
    ns.inputs_glob = "*_view_0.png"
    ns.out = str(root / "metrics.json")
    cmd_metrics(ns, cfg)
    return root


COMMANDS = {
    "simulate": cmd_simulate,
    "reconstruct": cmd_reconstruct,
    "export-canonical": cmd_export_canonical,
    "propagate": cmd_propagate,
    "render-controls": cmd_render_controls,
    "dataprep": cmd_dataprep,
    "metrics": cmd_metrics,
    "e2e": cmd_e2e,
}


class UsageError(InvalidArgument):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config with optional 'recon' and 'grid' sections")
    common.add_argument("--preset", default="translating-box")
    common.add_argument("--frames", type=int, default=None)
    common.add_argument("--novel-views", type=int, choices=(0, 6), default=6)
    common.add_argument("--resolution", type=int, default=64)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None)
    common.add_argument("--out", required=True)

    parser = _Parser(prog="proxyedit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="render a synthetic scene bundle")
    p.add_argument("--corrupt", type=float, default=0.0, help="novel-view degradation in [0, 1]")

    p = sub.add_parser("reconstruct", parents=[common], help="train Gaussians and fields")
    p.add_argument("--scene", required=True, help="scene manifest or its directory")

    p = sub.add_parser("export-canonical", parents=[common], help="write the canonical mesh OBJ")
    p.add_argument("--recon", required=True)

    p = sub.add_parser("propagate", parents=[common], help="propagate an edit to every frame")
    p.add_argument("--recon", required=True)
    p.add_argument("--edit", help="EditSpec JSON")
    p.add_argument("--edited-mesh", help="edited copy of the exported canonical OBJ")
    p.add_argument("--canonical", help="the exported canonical OBJ the edit was made on")

    p = sub.add_parser("render-controls", parents=[common], help="rasterize per-frame controls")
    p.add_argument("--meshes", required=True)
    p.add_argument("--rig", help="camera rig JSON (one camera, or one per frame)")

    p = sub.add_parser("dataprep", parents=[common], help="build control-data training batches")
    p.add_argument("--scene", required=True)
    p.add_argument("--stage", type=int, choices=(1, 2), default=1)

    p = sub.add_parser("metrics", parents=[common], help="editing and reconstruction metrics")
    p.add_argument("--frames-dir")
    p.add_argument("--inputs-dir")
    p.add_argument("--inputs-glob", default="*.png", help="e.g. '*_view_0.png' for a scene's observed views")
    p.add_argument("--src-prompt", default="source")
    p.add_argument("--tgt-prompt", default="target")
    p.add_argument("--meshes")
    p.add_argument("--scene")

    p = sub.add_parser("e2e", parents=[common], help="simulate through metrics in one go")
    p.add_argument("--corrupt", type=float, default=0.0)
    p.add_argument("--edit")
    p.add_argument("--src-prompt", default="source")
    p.add_argument("--tgt-prompt", default="target")
    return parser


def _defaults(args) -> None:
    for name in ("edit", "edited_mesh", "canonical", "rig", "frames_dir", "inputs_dir", "meshes",
                 "scene", "corrupt"):
        if not hasattr(args, name):
            setattr(args, name, None)
    if args.command in ("simulate", "e2e") and args.frames is None:
        args.frames = 8


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SFM_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        _report(e, "cli")
        return 2
    _defaults(args)
    if args.threads:
        import numba

        numba.set_num_threads(max(1, min(args.threads, numba.config.NUMBA_NUM_THREADS)))
    try:
        cfg = _load_config(args.config)
        out = COMMANDS[args.command](args, cfg)
    except StageError as e:
        _report(e.cause, e.stage)
        return 1
    except (InvalidArgument, OSError, ValueError, KeyError) as e:
        _report(e, "config")
        return 1
    print(json.dumps({"status": "ok", "command": args.command, "out": str(out)}))
    return 0


def _report(exc: BaseException, stage: str) -> None:
    print(json.dumps({"error": str(exc), "type": type(exc).__name__, "stage": stage}), file=sys.stderr)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
