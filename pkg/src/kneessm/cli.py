"""Command line interface.

Exit codes: 0 success, 1 invalid configuration or input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .mesh import load_mesh, save_mesh
from .pointset import PointSet, load_pointset, save_pointset
from .registration import CpdParams, cpd_nonrigid, cpd_rigid, gpa, save_transform
from .spm import spm_ttest
from .ssm import ShapeModel, instance_mesh, load_model, save_model, synthesize
from .volume import LabelAbsentError, VolumeFormatError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
_INVALID = (pl.ConfigError, VolumeFormatError, LabelAbsentError, FileNotFoundError, json.JSONDecodeError)


def _points(path) -> PointSet:
    """Point set manifest, or the vertices of a mesh file."""
    p = Path(path)
    if p.suffix.lower() in (".stl", ".obj"):
        return PointSet(load_mesh(p).vertices)
    return load_pointset(p)


def _emit(obj, out):
    text = json.dumps(obj, indent=1, sort_keys=True) + "\n"
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _overrides(args) -> dict:
    return {"seed": args.seed, "workers": args.workers}


def _section(args, name) -> dict:
    """Defaulted config section, taken from ``--config`` when given."""
    if args.config:
        return pl.validate_config(args.config, _overrides(args), check_paths=False)[name]
    return pl.CONFIG_DEFAULTS[name]


def cmd_run(args):
    if not args.config:
        raise pl.ConfigError("run requires --config")
    cfg = pl.validate_config(args.config, _overrides(args))
    report = pl.run_pipeline(cfg)
    _emit({"output_dir": str(cfg.output_dir), "stages": report.stages, "warnings": report.warnings}, None)


def cmd_ingest(args):
    c = _section(args, "ingest")
    label = args.label if args.label is not None else c["label"]
    mesh = pl.surface_from_volume(args.volume, label, c["iso"], c["largest_component"] and not args.keep_all)
    save_mesh(mesh, args.out)


def cmd_condition(args):
    c = dict(_section(args, "condition"))
    if args.n_points:
        c["n_points"] = args.n_points
    mesh, pts = pl.condition_surface(load_mesh(args.mesh), args.seed or 0, c)
    if args.out_mesh:
        save_mesh(mesh, args.out_mesh)
    save_pointset(pts, args.out)


def _cpd(args) -> CpdParams:
    c = _section(args, "register")
    return CpdParams(w=c["w"], max_iterations=c["max_iterations"], tolerance=c["tolerance"],
                     beta=c["beta"], lamb=c["lambda"])


def cmd_register(args):
    moving, fixed = _points(args.moving), _points(args.fixed)
    params = _cpd(args)
    if args.mode == "correspond":
        mesh = load_mesh(args.fixed) if Path(args.fixed).suffix.lower() in (".stl", ".obj") else None
        c = _section(args, "register")
        out, coarse = pl.correspond(moving, fixed, mesh, params, c["project_to_surface"], c["affine"])
        if args.transform:
            save_transform(coarse, args.transform)
    elif args.mode == "rigid":
        t, out = cpd_rigid(moving, fixed, params)
        if args.transform:
            save_transform(t, args.transform)
    else:
        out = cpd_nonrigid(moving, fixed, params)
    save_pointset(out, args.out)


def cmd_build_ssm(args):
    configs = [_points(p) for p in args.points]
    c = _section(args, "ssm")
    if not args.no_gpa:
        r = _section(args, "register")
        configs, _ = gpa(configs, scaling=r["gpa_scaling"], tol=r["gpa_tolerance"], max_iter=r["gpa_max_iterations"])
    template = None
    if args.template:
        template = load_mesh(args.template)
        if args.template_points:
            mean = np.mean([x.points for x in configs], axis=0)
            template = pl.template_for_mean(template, _points(args.template_points), mean, c["tps_regularization"])
    variance = args.variance if args.variance is not None else c["variance_to_retain"]
    model = ShapeModel(variance).fit(configs, template_mesh=template)
    path = save_model(model, args.out)
    _emit({"model": str(path), "n_modes": model.n_components_,
           "explained_variance_ratio": model.explained_variance_ratio_.tolist()}, None)


def _coefficients(text) -> np.ndarray:
    if text is None:
        return np.zeros(0)
    p = Path(text)
    if p.suffix == ".json" and p.exists():
        return np.asarray(json.loads(p.read_text()), dtype=float)
    return np.asarray([float(v) for v in text.split(",") if v.strip()], dtype=float)


def cmd_synthesize(args):
    model = load_model(args.model)
    b = _coefficients(args.b)
    pts = synthesize(model, b)
    save_pointset(pts, args.out)
    if args.mesh:
        save_mesh(instance_mesh(model, pts), args.mesh)


def cmd_project(args):
    model = load_model(args.model)
    b = model.transform([_points(args.shape).points])[0]
    _emit({"b": b.tolist()}, args.out)


def cmd_metrics(args):
    m = dict(_section(args, "metrics"))
    if args.threshold is not None:
        m["threshold_mm"] = args.threshold
    if args.percentile is not None:
        m["percentile"] = args.percentile
    if args.directed:
        m["directed"] = True
    pair = {"id": args.id, "segmented": args.segmented, "ground_truth": args.ground_truth, "label": args.label}
    row = pl.evaluate_pair(pair, m, _section(args, "ingest"))
    _emit(row, args.out)
    if args.csv:
        Path(args.csv).write_text(pl.metrics_csv([row]))


def _trajectories(path) -> np.ndarray:
    p = Path(path)
    if p.suffix == ".json":
        return np.asarray(json.loads(p.read_text()), dtype=float)
    return np.loadtxt(p, delimiter=",", ndmin=2)


def cmd_spm(args):
    res = spm_ttest(_trajectories(args.group_a), _trajectories(args.group_b), alpha=args.alpha,
                    permutations=args.permutations, seed=args.seed or 0)
    _emit(res.to_dict(), args.out)


def cmd_stress_eval(args):
    m = _section(args, "materials")
    phi0 = args.phi0 if args.phi0 is not None else m["phi0"]
    phi1 = args.phi1 if args.phi1 is not None else m["phi1"]
    table = args.table or m["table"]
    result = pl.evaluate_states(json.loads(Path(args.states).read_text()), phi0, phi1, table,
                                m["quadrature_order"], m["tension_only"])
    _emit(result, args.out)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline JSON config supplying stage parameters")
    common.add_argument("--seed", type=int, default=None, help="random seed (overrides config)")
    common.add_argument("--workers", type=int, default=None, help="parallel subjects (overrides config)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="kneessm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="run the configured pipeline")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ingest", parents=[common], help="label volume -> surface mesh")
    p.add_argument("volume")
    p.add_argument("--label", type=int)
    p.add_argument("--keep-all", action="store_true", help="keep every connected component")
    p.add_argument("--out", required=True, help="output .stl or .obj")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("condition", parents=[common], help="smooth a mesh and sample a uniform point set")
    p.add_argument("mesh")
    p.add_argument("--n-points", type=int)
    p.add_argument("--out", required=True, help="point set manifest (.json)")
    p.add_argument("--out-mesh", help="smoothed mesh output")
    p.set_defaults(func=cmd_condition)

    p = sub.add_parser("register", parents=[common], help="register a moving point set onto a fixed one")
    p.add_argument("moving")
    p.add_argument("fixed")
    p.add_argument("--mode", choices=("correspond", "rigid", "nonrigid"), default="correspond")
    p.add_argument("--out", required=True)
    p.add_argument("--transform", help="write the rigid or coarse transform JSON")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("build-ssm", parents=[common], help="fit a shape model to corresponded point sets")
    p.add_argument("points", nargs="+")
    p.add_argument("--template", help="template mesh corresponded to the point ordering")
    p.add_argument("--template-points", help="template point set, to carry the mesh onto the mean")
    p.add_argument("--variance", type=float)
    p.add_argument("--no-gpa", action="store_true")
    p.add_argument("--out", required=True, help="model path stem")
    p.set_defaults(func=cmd_build_ssm)

    p = sub.add_parser("synthesize", parents=[common], help="shape instance from coefficients")
    p.add_argument("model")
    p.add_argument("--b", help="comma separated coefficients or a JSON list file")
    p.add_argument("--out", required=True)
    p.add_argument("--mesh", help="also write the template mesh warped onto the instance")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("project", parents=[common], help="shape coefficients of a corresponded shape")
    p.add_argument("model")
    p.add_argument("shape")
    p.add_argument("--out")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("metrics", parents=[common], help="Dice and surface distances of one pair")
    p.add_argument("segmented")
    p.add_argument("ground_truth")
    p.add_argument("--id", default="pair")
    p.add_argument("--label", type=int, default=1)
    p.add_argument("--threshold", type=float)
    p.add_argument("--percentile", type=float)
    p.add_argument("--directed", action="store_true")
    p.add_argument("--out")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("spm", parents=[common], help="two-sample SPM t-test of trajectories")
    p.add_argument("group_a", help="CSV or JSON, one trajectory per row")
    p.add_argument("group_b")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--permutations", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_spm)

    p = sub.add_parser("stress-eval", parents=[common], help="cartilage Cauchy stress for deformation states")
    p.add_argument("states", help="JSON list of {F, p, zone}")
    p.add_argument("--phi0", type=float)
    p.add_argument("--phi1", type=float)
    p.add_argument("--table", help="material table override JSON")
    p.add_argument("--out")
    p.set_defaults(func=cmd_stress_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except _INVALID as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except pl.PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
