"""Command-line front end: ``occfields <command> ...``.

Every command takes ``--seed`` and an optional ``--config`` JSON file whose
keys are flag names (dashes or underscores); explicit flags win. Exit codes:
0 success, 1 numerical failure, 2 I/O or validation failure. The worker
count comes from the NLOS_THREADS environment variable.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .field import FitConfig, FitDivergence, OcclusionField, fit
from .geometry import AffineTransform, GeometryError, load_mesh, save_mesh
from .metrics import DEFAULT_SAMPLES, DEFAULT_TAU, evaluate
from .noise import DEFAULT_PEAK_PHOTONS, add_spad_noise
from .occlusion import OcclusionSampleSet, label_set, labeling_sensors, sample_points
from .scene import (
    PRESETS, MeshDirectory, ScenePlacement, build_scene,
    generate_scene, load_scene, preset, save_scene,
)
from .shapes import BUILTIN_NAMES, builtin_mesh
from .surface import evaluate_grid, extract_surface, wall_visible_faces
from .transient import RenderError, TransientVolume, render


class StageError(Exception):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage, self.cause = stage, cause


# ---------------------------------------------------------------------------
# helpers


def mesh_library(mesh_dir):
    """Mesh directory if given, otherwise the procedural built-in meshes."""
    if mesh_dir:
        root = Path(mesh_dir)
        if not root.is_dir():
            raise FileNotFoundError(f"mesh directory not found: {root}")
        return MeshDirectory(root)
    return _Builtins()


class _Builtins:
    def ids(self):
        return list(BUILTIN_NAMES)

    def __getitem__(self, name):
        return builtin_mesh(name)


def _scene(args):
    config, placements = load_scene(args.scene)
    if getattr(args, "preset", None):
        config = preset(args.preset, seed=config.seed)
    mesh, bvh = build_scene(config, placements, mesh_library(args.mesh_dir))
    return config, placements, mesh, bvh


def _sensors(config, grid):
    return labeling_sensors(config.wall, None if grid in (None, "full") else int(grid))


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _log(msg):
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_dataset(args):
    config = preset(args.preset, seed=args.seed)
    lib = mesh_library(args.mesh_dir)
    ids = args.meshes.split(",") if args.meshes else lib.ids()
    if not ids:
        raise FileNotFoundError(f"no meshes in {args.mesh_dir}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        placements = generate_scene(config, ids, lib, i, args.objects)
        save_scene(out / f"scene_{i:05d}.json", config, placements)
    _log(f"wrote {args.count} scene files to {out}")


def cmd_render(args):
    config, _, mesh, bvh = _scene(args)
    config.check()
    vol = render(mesh, bvh, config, args.spp, linear_bins=args.linear_bins)
    vol.save(args.out)
    _log(f"transient {vol.shape} -> {args.out}")


def cmd_sample(args):
    config, _, mesh, bvh = _scene(args)
    rng = np.random.default_rng(args.seed)
    pts = sample_points(mesh, config.hidden_cube, args.n, rng=rng)
    s = label_set(bvh, pts, _sensors(config, args.sensors), args.k)
    s.save(args.out)
    _log(f"{len(s)} points, {s.sensor_count} sensors, occluded fraction {s.global_label.mean():.3f} -> {args.out}")


def cmd_fit(args):
    sets = [OcclusionSampleSet.load(p) for p in args.samples]
    transients = None
    kw = {}
    if args.mode == "conditioned":
        if not args.transient or len(args.transient) != len(sets):
            raise ValueError("conditioned mode needs one --transient per --samples file")
        transients = [TransientVolume.load(p) for p in args.transient]
        kw["transient_shape"] = transients[0].shape
    cube = PRESETS[args.preset].hidden_cube
    fld = OcclusionField.create(args.mode, cube=cube, seed=args.seed,
                                dtype=np.float64 if args.float64 else np.float32, **kw)
    cfg = FitConfig(steps=args.steps, batch=args.batch, lr=args.lr, seed=args.seed,
                    eval_every=args.eval_every)
    report = fit(fld, sets, cfg, transients)
    fld.save(args.out)
    Path(str(args.out) + ".loss.csv").write_text(report.loss_csv())
    _write_json(str(args.out) + ".report.json", report.to_dict())
    _log(f"fit: best val BCE {report.best_val_loss:.4f} at step {report.best_step}, "
         f"val IoU {report.val_iou:.4f}, {report.wall_clock_s:.1f} s -> {args.out}")
    return report


def cmd_extract(args):
    if bool(args.field) == bool(args.oracle_scene):
        raise ValueError("give exactly one of --field or --oracle-scene")
    if args.field:
        source = OcclusionField.load(args.field)
        cube = source.cube
        if args.samples:
            sensors = OcclusionSampleSet.load(args.samples).sensors
        else:
            sensors = _sensors(PRESETS[args.preset or "confocal-small"], args.sensors)
    else:
        args.scene = args.oracle_scene
        config, _, _, source = _scene(args)
        cube = config.hidden_cube
        sensors = _sensors(config, args.sensors)
    transient = TransientVolume.load(args.transient) if args.transient else None
    grid = evaluate_grid(source, args.res, cube, sensors=sensors, k=args.k, transient=transient)
    ex = extract_surface(grid, sensors, args.k)
    if args.out_closed:
        save_mesh(ex.closed_mesh, args.out_closed)
    if args.out_nlos:
        save_mesh(ex.nlos_mesh, args.out_nlos)
    _log(f"r={args.res}: closed {len(ex.closed_mesh)} triangles, nlos {len(ex.nlos_mesh)} triangles")
    return ex


def _labels(path, points):
    """Labels from a sample file, or predictions of a weight file at ``points``."""
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == b"OCCF":
        return OcclusionField.load(path).predict(points) > 0.5
    return OcclusionSampleSet.load(path).global_label


def cmd_eval(args):
    cube = PRESETS[args.preset].hidden_cube
    pred = load_mesh(args.pred) if args.pred else None
    gt = load_mesh(args.gt) if args.gt else None
    lp = lg = None
    if args.labels_gt:
        gt_set = OcclusionSampleSet.load(args.labels_gt)
        lg = gt_set.global_label
        if args.labels_pred:
            lp = _labels(args.labels_pred, gt_set.points)
    report = evaluate(pred, gt, lp, lg, args.tau, args.n, args.seed, cube)
    d = report.to_dict()
    if args.json_out:
        _write_json(args.json_out, d)
    _log(json.dumps(d, sort_keys=True))
    return report


def cmd_add_noise(args):
    vol = TransientVolume.load(args.inp)
    noisy = add_spad_noise(vol, args.C, args.a, args.b, args.seed, args.per_bin, args.peak_photons)
    noisy.save(args.out)
    _log(f"noisy transient (total counts {noisy.data.sum():.0f}) -> {args.out}")


DEMOS = {
    # Plate parallel to the wall, centered in the hidden cube.
    "plate": [("plate", AffineTransform(0.7))],
    # Two letters at different depths; the front one shadows part of the back one.
    "letters": [
        ("letter-T", AffineTransform(0.45, (0.0, 0.0, 0.0), (-0.2, 0.0, -0.15))),
        ("letter-L", AffineTransform(0.45, (0.0, 0.0, 0.0), (0.15, 0.05, 0.2))),
    ],
}


def cmd_pipeline(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed
    manifest = {
        "versions": {
            "occfields": __version__, "python": platform.python_version(), "numpy": np.__version__,
        },
        "seed": seed,
        "settings": {k: v for k, v in vars(args).items() if k not in ("func", "config")},
        "stages": {},
        "status": "running",
    }
    artifacts = {}

    def stage(name, fn):
        t0 = time.perf_counter()
        _log(f"[{name}]")
        try:
            result = fn()
        except Exception as e:  # noqa: BLE001 - re-raised with the stage name
            manifest["status"] = f"failed in {name}"
            _finish()
            raise StageError(name, e) from e
        manifest["stages"][name] = round(time.perf_counter() - t0, 3)
        return result

    def _finish():
        manifest["artifacts"] = {k: {"path": str(p), "sha256": sha256(p)}
                                 for k, p in artifacts.items() if Path(p).exists()}
        _write_json(out / "manifest.json", manifest)

    scene_path = out / "scene.json"

    def gen():
        if args.scene:
            config, placements = load_scene(args.scene)
            config = preset(args.preset or config.preset, seed=seed)
        else:
            config = preset(args.preset or "confocal-small", seed=seed)
            placements = [ScenePlacement(m, xf) for m, xf in DEMOS[args.demo]]
        save_scene(scene_path, config, placements)
        artifacts["scene"] = scene_path
        mesh, bvh = build_scene(config, placements, mesh_library(args.mesh_dir))
        return config, mesh, bvh

    config, mesh, bvh = stage("gen", gen)
    cube = config.hidden_cube
    sensors = labeling_sensors(config.wall)

    def do_render():
        config.check()
        vol = render(mesh, bvh, config, args.spp)
        vol.save(out / "transient.bin")
        artifacts["transient"] = out / "transient.bin"
        return vol

    stage("render", do_render)

    def do_sample():
        train = label_set(bvh, sample_points(mesh, cube, args.n, rng=np.random.default_rng(seed)), sensors)
        test = label_set(bvh, sample_points(mesh, cube, max(1, args.n // 4),
                                            rng=np.random.default_rng(seed + 1)), sensors)
        train.save(out / "samples.bin")
        test.save(out / "samples_test.bin")
        artifacts["samples"] = out / "samples.bin"
        artifacts["samples_test"] = out / "samples_test.bin"
        return train, test

    train, test = stage("sample", do_sample)

    def do_fit():
        fld = OcclusionField.create("single", cube=cube, seed=seed)
        report = fit(fld, train, FitConfig(steps=args.steps, batch=args.batch, lr=args.lr, seed=seed))
        fld.save(out / "field.bin")
        (out / "loss.csv").write_text(report.loss_csv())
        artifacts["weights"] = out / "field.bin"
        artifacts["loss_curve"] = out / "loss.csv"
        return fld, report

    fld, report = stage("fit", do_fit)
    _log(f"  best val BCE {report.best_val_loss:.4f} (step {report.best_step}), {report.wall_clock_s:.1f} s")

    def do_extract():
        grid = evaluate_grid(fld, args.res, cube)
        ex = extract_surface(grid, sensors)
        if len(ex.nlos_mesh) == 0:
            raise ValueError("extracted NLoS surface is empty")
        gt = wall_visible_faces(mesh, sensors)
        for name, m in (("closed", ex.closed_mesh), ("nlos", ex.nlos_mesh), ("gt_visible", gt)):
            save_mesh(m, out / f"{name}.ply")
            artifacts[f"mesh_{name}"] = out / f"{name}.ply"
        return ex, gt

    ex, gt = stage("extract", do_extract)

    def do_eval():
        pred = fld.predict(test.points) > 0.5
        rep = evaluate(ex.nlos_mesh, gt, pred, test.global_label, DEFAULT_TAU, DEFAULT_SAMPLES, seed, cube)
        d = rep.to_dict()
        d["test_points"] = len(test)
        _write_json(out / "eval.json", d)
        artifacts["eval"] = out / "eval.json"
        return rep

    rep = stage("eval", do_eval)
    manifest["status"] = "ok"
    manifest["result"] = rep.to_dict()
    _finish()
    _log(f"oracle-vs-fit point IoU {rep.iou:.4f}; Chamfer x1e3 {rep.chamfer_x1e3:.4f}; "
         f"F-score {rep.fscore:.4f}")
    return rep


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="occfields", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    presets = sorted(PRESETS)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON file of flag defaults")
        sp.add_argument("--seed", type=int, default=0)
        sp.set_defaults(func=func)
        return sp

    sp = add("gen-dataset", cmd_gen_dataset, "write random scene description files")
    sp.add_argument("--preset", choices=presets, default="confocal-small")
    sp.add_argument("--count", type=int, default=10)
    sp.add_argument("--mesh-dir", help="directory of .obj/.ply meshes (default: built-in shapes)")
    sp.add_argument("--meshes", help="comma-separated subset of mesh ids")
    sp.add_argument("--objects", type=int, default=1, help="objects per scene")
    sp.add_argument("--out", required=True)

    sp = add("render", cmd_render, "render the confocal transient of a scene")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--preset", choices=presets)
    sp.add_argument("--mesh-dir")
    sp.add_argument("--spp", type=int, default=4, help="samples per triangle")
    sp.add_argument("--linear-bins", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("sample", cmd_sample, "sample and label training points")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--preset", choices=presets)
    sp.add_argument("--mesh-dir")
    sp.add_argument("--n", type=int, default=400_000)
    sp.add_argument("--k", type=int, default=1)
    sp.add_argument("--sensors", default="5", help="labeling grid size per side, or 'full'")
    sp.add_argument("--out", required=True)

    sp = add("fit", cmd_fit, "fit an occlusion field to labeled points")
    sp.add_argument("--samples", nargs="+", required=True)
    sp.add_argument("--mode", choices=("single", "conditioned"), default="single")
    sp.add_argument("--transient", nargs="+")
    sp.add_argument("--preset", choices=presets, default="confocal-small")
    sp.add_argument("--steps", type=int, default=4000)
    sp.add_argument("--batch", type=int, default=4096)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--eval-every", type=int, default=100)
    sp.add_argument("--float64", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("extract", cmd_extract, "extract closed and NLoS meshes from a field or oracle")
    sp.add_argument("--field")
    sp.add_argument("--oracle-scene")
    sp.add_argument("--preset", choices=presets, default=None)
    sp.add_argument("--mesh-dir")
    sp.add_argument("--samples", help="sample file whose sensors are used for segmentation")
    sp.add_argument("--transient", help="transient for conditioned fields")
    sp.add_argument("--sensors", default="5")
    sp.add_argument("--res", type=int, default=64)
    sp.add_argument("--k", type=int, default=1)
    sp.add_argument("--out-closed")
    sp.add_argument("--out-nlos")

    sp = add("eval", cmd_eval, "Chamfer / F-score / label IoU report")
    sp.add_argument("--pred")
    sp.add_argument("--gt")
    sp.add_argument("--labels-pred", help="sample file or weight file")
    sp.add_argument("--labels-gt", help="sample file")
    sp.add_argument("--preset", choices=presets, default="confocal-small")
    sp.add_argument("--tau", type=float, default=DEFAULT_TAU)
    sp.add_argument("--n", type=int, default=DEFAULT_SAMPLES)
    sp.add_argument("--json-out")

    sp = add("add-noise", cmd_add_noise, "SPAD Poisson noise on a transient")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--C", type=float)
    g.add_argument("--peak-photons", type=float, default=DEFAULT_PEAK_PHOTONS)
    sp.add_argument("--a", type=float, default=0.0)
    sp.add_argument("--b", type=float, default=0.0)
    sp.add_argument("--per-bin", action="store_true", help="draw the base noise per bin")

    sp = add("pipeline", cmd_pipeline, "gen, render, sample, fit, extract and eval in one go")
    src = sp.add_mutually_exclusive_group()
    src.add_argument("--scene")
    src.add_argument("--demo", choices=sorted(DEMOS), default="plate")
    sp.add_argument("--preset", choices=presets)
    sp.add_argument("--mesh-dir")
    sp.add_argument("--spp", type=int, default=4)
    sp.add_argument("--n", type=int, default=400_000)
    sp.add_argument("--steps", type=int, default=4000)
    sp.add_argument("--batch", type=int, default=4096)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--res", type=int, default=64)
    sp.add_argument("--out", default="pipeline_out")
    return p


def parse_args(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else [str(a) for a in argv]
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    command = next((a for a in rest if not a.startswith("-")), None)
    if known.config and command in parser._subparsers._group_actions[0].choices:
        cfg = {k.replace("-", "_"): v for k, v in json.loads(Path(known.config).read_text()).items()}
        sp = parser._subparsers._group_actions[0].choices[command]
        sp.set_defaults(**cfg)
        # Flags the config provides are no longer mandatory on the command line.
        for action in sp._actions:
            if action.dest in cfg:
                action.required = False
    return parser.parse_args(argv)


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as e:
        print(f"error: bad config file: {e}", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return _code(e.cause) or 1
    except Exception as e:  # noqa: BLE001 - mapped to exit codes
        code = _code(e)
        if code is None:
            raise
        print(f"error: {e}", file=sys.stderr)
        return code
    return 0


def _code(e):
    if isinstance(e, (FitDivergence, FloatingPointError, ArithmeticError)):
        return 1
    if isinstance(e, (OSError, ValueError, KeyError, GeometryError, RenderError)):
        return 2
    return None


if __name__ == "__main__":
    sys.exit(main())
