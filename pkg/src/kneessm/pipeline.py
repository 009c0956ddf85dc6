"""Declarative end-to-end pipeline.

Stages run in dependency order::

    ingest -> condition -> register -> ssm -> metrics -> materials

and persist their intermediates as ``<output_dir>/<stage>/<subject>.<ext>``
next to a top-level ``manifest.json``. Each subject draws from its own random
stream derived from ``(seed, subject index)``. Results therefore do not depend
on the worker count.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .conditioning import poisson_disk_sample, relax_tessellation, taubin_smooth, uniformize
from .materials import DeformationState, cartilage_constants, load_material_table, total_stress, TABLE_VERSION
from .mesh import TriMesh, is_watertight, load_mesh, save_mesh, signed_volume
from .metrics import dice, surface_distance_report
from .pointset import PointSet, load_pointset, save_pointset
from .proximity import MeshProximity
from .registration import CpdParams, SimilarityTransform, coarse_align, cpd_affine, cpd_nonrigid, cpd_rigid, gpa, kabsch, save_transform
from .ssm import ShapeModel, instance_mesh, load_model, save_model, tps_fit
from .volume import common_grid, extract_surface, largest_component, load_label_volume, voxelize_mesh

log = logging.getLogger(__name__)

STAGES = ("ingest", "condition", "register", "ssm", "metrics", "materials")


class ConfigError(ValueError):
    """Configuration failed schema or path validation."""


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# -- configuration ------------------------------------------------------------

def _obj(properties: dict, required=()) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": properties,
            "required": list(required), "default": {}}


_POS = {"type": "number", "exclusiveMinimum": 0}
_COUNT = {"type": "integer", "minimum": 1}

SUBJECT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "id": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
        "volume": {"type": "string"},
        "mesh": {"type": "string"},
        "label": {"type": "integer", "minimum": 0, "maximum": 255},
    },
    "required": ["id"],
    "oneOf": [{"required": ["volume"]}, {"required": ["mesh"]}],
}

PAIR_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "id": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
        "segmented": {"type": "string"},
        "ground_truth": {"type": "string"},
        "label": {"type": "integer", "minimum": 0, "maximum": 255, "default": 1},
    },
    "required": ["id", "segmented", "ground_truth"],
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "kneessm pipeline configuration",
    **_obj({
        "inputs": _obj({
            "subjects": {"type": "array", "items": SUBJECT_SCHEMA, "default": []},
            "metric_pairs": {"type": "array", "items": PAIR_SCHEMA, "default": []},
            "stress_states": {"type": ["string", "null"], "default": None},
        }),
        "output_dir": {"type": "string", "default": "out"},
        "seed": {"type": "integer", "minimum": 0, "default": 0},
        "workers": {"type": "integer", "minimum": 1, "default": 1},
        "stages": _obj({s: {"type": "boolean", "default": True} for s in STAGES}),
        "ingest": _obj({
            "label": {"type": "integer", "minimum": 0, "maximum": 255, "default": 1},
            "iso": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1, "default": 0.5},
            "largest_component": {"type": "boolean", "default": True},
        }),
        "condition": _obj({
            "taubin_lambda": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1, "default": 0.5},
            "taubin_mu": {"type": "number", "exclusiveMinimum": -1, "maximum": 0, "default": -0.53},
            "taubin_iterations": {"type": "integer", "minimum": 0, "default": 10},
            "n_points": {**_COUNT, "default": 1000},
            "uniformize_iterations": {"type": "integer", "minimum": 0, "default": 10},
            "uniformize_k": {**_COUNT, "default": 8},
            "uniformize_step": {"type": "number", "exclusiveMinimum": 0, "maximum": 1, "default": 0.5},
        }),
        "template": _obj({
            "subject": {"type": ["string", "null"], "default": None},
            "relax_iterations": {"type": "integer", "minimum": 0, "default": 5},
            "n_points": {"type": ["integer", "null"], "minimum": 4, "default": None},
        }),
        "register": _obj({
            "w": {"type": "number", "minimum": 0, "exclusiveMaximum": 1, "default": 0.1},
            "max_iterations": {**_COUNT, "default": 150},
            "tolerance": {**_POS, "default": 1e-5},
            "beta": {**_POS, "default": 2.0},
            "lambda": {**_POS, "default": 3.0},
            "affine": {"type": "boolean", "default": False},
            "retain_size": {"type": "boolean", "default": True},
            "project_to_surface": {"type": "boolean", "default": True},
            "gpa_scaling": {"type": "boolean", "default": False},
            "gpa_tolerance": {**_POS, "default": 1e-10},
            "gpa_max_iterations": {**_COUNT, "default": 100},
        }),
        "ssm": _obj({
            "variance_to_retain": {"type": "number", "exclusiveMinimum": 0, "maximum": 1, "default": 0.95},
            "tps_regularization": {"type": "number", "minimum": 0, "default": 0.0},
        }),
        "metrics": _obj({
            "threshold_mm": {**_POS, "default": 1.0},
            "percentile": {"type": "number", "exclusiveMinimum": 0, "maximum": 100, "default": 100.0},
            "directed": {"type": "boolean", "default": False},
            "sample_level": {**_COUNT, "default": 3},
            "dice_voxel_mm": {**_POS, "default": 1.0},
        }),
        "materials": _obj({
            "phi0": {"type": ["number", "null"], "minimum": 0, "default": None},
            "phi1": {"type": ["number", "null"], "minimum": 0, "default": None},
            "table": {"type": ["string", "null"], "default": None},
            "quadrature_order": {**_COUNT, "default": 35},
            "tension_only": {"type": "boolean", "default": True},
        }),
    }),
}


def _fill_defaults(schema: dict, instance):
    if schema.get("type") == "object" and isinstance(instance, dict):
        for key, sub in schema.get("properties", {}).items():
            if key not in instance and "default" in sub:
                instance[key] = copy.deepcopy(sub["default"])
            if key in instance:
                instance[key] = _fill_defaults(sub, instance[key])
    elif isinstance(instance, list) and isinstance(schema.get("items"), dict):
        instance = [_fill_defaults(schema["items"], x) for x in instance]
    return instance


def _field(error: jsonschema.ValidationError) -> str:
    return ".".join(str(p) for p in error.absolute_path) or "<root>"


@dataclass
class PipelineConfig:
    """Validated, fully defaulted configuration; paths resolved to absolute."""

    data: dict
    base_dir: Path = field(default_factory=Path.cwd)

    def __getitem__(self, key):
        return self.data[key]

    @property
    def output_dir(self) -> Path:
        return Path(self.data["output_dir"])

    def cpd_params(self) -> CpdParams:
        r = self.data["register"]
        return CpdParams(w=r["w"], max_iterations=r["max_iterations"], tolerance=r["tolerance"],
                         beta=r["beta"], lamb=r["lambda"])

    def echo(self) -> dict:
        return copy.deepcopy(self.data)


def config_from_dict(raw: dict, base_dir=None, check_paths: bool = True) -> PipelineConfig:
    """Validate against the schema, fill defaults and resolve paths."""
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(f"config field '{_field(e)}': {e.message}")
    data = _fill_defaults(CONFIG_SCHEMA, copy.deepcopy(raw))

    def resolve(p):
        q = Path(p)
        return str(q if q.is_absolute() else (base / q).resolve())

    missing = []
    for i, s in enumerate(data["inputs"]["subjects"]):
        for key in ("volume", "mesh"):
            if key in s:
                s[key] = resolve(s[key])
                if check_paths and not Path(s[key]).exists():
                    missing.append(f"inputs.subjects.{i}.{key}: {s[key]}")
    for i, pr in enumerate(data["inputs"]["metric_pairs"]):
        for key in ("segmented", "ground_truth"):
            pr[key] = resolve(pr[key])
            if check_paths and not Path(pr[key]).exists():
                missing.append(f"inputs.metric_pairs.{i}.{key}: {pr[key]}")
    for section, key in (("inputs", "stress_states"), ("materials", "table")):
        if data[section][key] is not None:
            data[section][key] = resolve(data[section][key])
            if check_paths and not Path(data[section][key]).exists():
                missing.append(f"{section}.{key}: {data[section][key]}")
    if missing:
        raise ConfigError("missing input paths: " + "; ".join(missing))
    data["output_dir"] = resolve(data["output_dir"])

    ids = [s["id"] for s in data["inputs"]["subjects"]]
    if len(set(ids)) != len(ids):
        raise ConfigError("config field 'inputs.subjects': duplicate subject ids")
    tmpl = data["template"]["subject"]
    if tmpl is not None and tmpl not in ids:
        raise ConfigError(f"config field 'template.subject': unknown subject {tmpl!r}")
    c = data["condition"]
    if c["taubin_mu"] != 0 and abs(c["taubin_mu"]) <= c["taubin_lambda"]:
        raise ConfigError("config field 'condition.taubin_mu': |mu| must exceed lambda")
    st = data["stages"]
    if st["materials"] and data["inputs"]["stress_states"] is not None:
        if data["materials"]["phi0"] is None or data["materials"]["phi1"] is None:
            raise ConfigError("config field 'materials.phi0': volume fractions phi0 and phi1 are required")
    return PipelineConfig(data=data, base_dir=base)


def validate_config(path, overrides: dict | None = None, check_paths: bool = True) -> PipelineConfig:
    """Load a JSON config file; relative paths resolve against its directory."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return config_from_dict(raw, base_dir=path.parent.resolve(), check_paths=check_paths)


# -- deterministic output helpers --------------------------------------------

def write_json(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _map(fn, items, workers: int):
    """Ordered parallel map."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def subject_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


# -- building blocks reused outside the pipeline -----------------------------

def surface_from_volume(path, label: int = 1, iso: float = 0.5, keep_largest: bool = True) -> TriMesh:
    mesh = extract_surface(load_label_volume(path), label, iso)
    return largest_component(mesh) if keep_largest else mesh


def condition_surface(mesh: TriMesh, seed: int, cfg: dict) -> tuple[TriMesh, PointSet]:
    """Smooth a surface and sample a uniform point set on it."""
    smooth = taubin_smooth(mesh, cfg["taubin_lambda"], cfg["taubin_mu"], cfg["taubin_iterations"])
    pts = poisson_disk_sample(smooth, cfg["n_points"], seed=seed)
    pts = uniformize(pts, smooth, cfg["uniformize_iterations"], cfg["uniformize_k"], cfg["uniformize_step"])
    return smooth, PointSet(pts.points)


def correspond(template_points, subject_points, subject_mesh: TriMesh | None = None,
               params: CpdParams | None = None, project_to_surface: bool = True, affine: bool = False):
    """Carry the template point ordering onto a subject.

    The subject is coarse-aligned to the template, the template is registered
    rigidly, optionally affinely, then non-rigidly onto it, and the result
    optionally snapped onto the subject surface. Returns (corresponded points in the template frame,
    coarse transform subject -> template frame).
    """
    coarse, aligned = coarse_align(subject_points, template_points)
    _, moved = cpd_rigid(template_points, aligned, params)
    if affine:
        moved = cpd_affine(moved, aligned, params)
    warped = cpd_nonrigid(moved, aligned, params).points
    if project_to_surface and subject_mesh is not None:
        warped = MeshProximity(subject_mesh.with_vertices(coarse.apply(subject_mesh.vertices))).project(warped)
    return PointSet(warped), coarse


def template_for_mean(template_mesh: TriMesh, template_points, mean_points, regularization: float = 0.0) -> TriMesh:
    """Template mesh expressed in the frame and shape of the model mean."""
    tp = np.asarray(template_points.points if isinstance(template_points, PointSet) else template_points)
    mp = np.asarray(mean_points.points if isinstance(mean_points, PointSet) else mean_points)
    R = kabsch(tp - tp.mean(0), mp - mp.mean(0))
    rigid = SimilarityTransform(R, mp.mean(0) - tp.mean(0) @ R.T)
    tps = tps_fit(rigid.apply(tp), mp, regularization)
    return template_mesh.with_vertices(tps.transform(rigid.apply(template_mesh.vertices)))


def ssm_adjust(mesh: TriMesh, model: ShapeModel, template_points, seed: int = 0, n_points: int | None = None,
               params: CpdParams | None = None, condition: dict | None = None,
               retain_size: bool = True) -> TriMesh:
    """Replace a defective surface by its closest shape-model instance.

    The surface is sampled, put in correspondence with ``template_points``,
    aligned to the model mean, projected onto the retained modes and rebuilt
    from the template mesh. The result is mapped back to the input frame.
    ``retain_size`` must match how the model was built: True when the model
    holds shapes at their own size.
    """
    cfg = dict(CONFIG_DEFAULTS["condition"], taubin_iterations=0)
    cfg.update(condition or {})
    cfg["n_points"] = n_points or len(np.asarray(template_points.points if isinstance(template_points, PointSet) else template_points))
    _, pts = condition_surface(mesh, seed, cfg)
    corr, coarse = correspond(template_points, pts, mesh, params)
    # in subject frame when sizes are retained, else in the coarse frame
    to_input = SimilarityTransform(np.eye(3), np.zeros(3)) if retain_size else coarse.inverse()
    x = coarse.inverse().apply(corr.points) if retain_size else corr.points
    m = model.mean_
    R = kabsch(x - x.mean(0), m - m.mean(0))
    to_mean = SimilarityTransform(R, m.mean(0) - x.mean(0) @ R.T)
    b = model.transform([to_mean.apply(x)])[0]
    inst = model.inverse_transform(b[None])[0]
    out = instance_mesh(model, inst)
    back = to_input.compose(to_mean.inverse())
    return out.with_vertices(back.apply(out.vertices))


CONFIG_DEFAULTS = _fill_defaults(CONFIG_SCHEMA, {})


# -- run report ---------------------------------------------------------------

@dataclass
class RunReport:
    seed: int
    parameters: dict
    timings: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    stages: list = field(default_factory=list)

    def add_stage(self, name: str, seconds: float):
        if name in self.stages:
            raise ValueError(f"stage {name} recorded twice")
        self.stages.append(name)
        self.timings[name] = seconds

    def to_dict(self) -> dict:
        return {"seed": self.seed, "stages": self.stages, "timings_s": self.timings,
                "parameters": self.parameters, "tables": self.tables, "warnings": self.warnings}


# -- stages ------------------------------------------------------------------

class _Run:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = cfg.output_dir
        self.seed = cfg["seed"]
        self.workers = cfg["workers"]
        self.subjects = cfg["inputs"]["subjects"]
        self.report = RunReport(seed=self.seed, parameters=cfg.echo())
        self.files: dict[str, list[str]] = {}

    def _record(self, stage, *paths):
        self.files.setdefault(stage, []).extend(str(Path(p).relative_to(self.out)) for p in paths)

    def stage_dir(self, stage) -> Path:
        d = self.out / stage
        d.mkdir(parents=True, exist_ok=True)
        return d

    # ingest
    def ingest(self):
        c = self.cfg["ingest"]
        d = self.stage_dir("ingest")

        def one(s):
            if "mesh" in s:
                mesh = load_mesh(s["mesh"])
                mesh = largest_component(mesh) if c["largest_component"] else mesh
            else:
                mesh = surface_from_volume(s["volume"], s.get("label", c["label"]), c["iso"], c["largest_component"])
            path = d / f"{s['id']}.stl"
            save_mesh(mesh, path)
            return path, is_watertight(mesh)

        for s, (path, closed) in zip(self.subjects, _map(one, self.subjects, self.workers)):
            self._record("ingest", path)
            if not closed:
                self.report.warnings.append(f"ingest: surface of {s['id']} is not watertight")

    def _ingested(self, sid) -> TriMesh:
        return load_mesh(self.out / "ingest" / f"{sid}.stl")

    # condition
    def condition(self):
        c = self.cfg["condition"]
        d = self.stage_dir("condition")

        def one(item):
            i, s = item
            mesh, pts = condition_surface(self._ingested(s["id"]), subject_seed(self.seed, i), c)
            save_mesh(mesh, d / f"{s['id']}.stl")
            save_pointset(pts, d / f"{s['id']}.points.json")
            return [d / f"{s['id']}.stl", d / f"{s['id']}.points.json", d / f"{s['id']}.points.bin"]

        for paths in _map(one, list(enumerate(self.subjects)), self.workers):
            self._record("condition", *paths)

    def _template_id(self):
        return self.cfg["template"]["subject"] or self.subjects[0]["id"]

    # register
    def register(self):
        if not self.subjects:
            raise ValueError("no subjects to register")
        d = self.stage_dir("register")
        t = self.cfg["template"]
        cond = self.out / "condition"
        tid = self._template_id()
        tmesh = relax_tessellation(load_mesh(cond / f"{tid}.stl"), t["relax_iterations"])
        n = t["n_points"] or self.cfg["condition"]["n_points"]
        c = self.cfg["condition"]
        tpts = poisson_disk_sample(tmesh, n, seed=subject_seed(self.seed, len(self.subjects)))
        tpts = PointSet(uniformize(tpts, tmesh, c["uniformize_iterations"], c["uniformize_k"], c["uniformize_step"]).points)
        save_mesh(tmesh, d / "template.obj")
        save_pointset(tpts, d / "template.points.json")
        self._record("register", d / "template.obj", d / "template.points.json", d / "template.points.bin")
        params = self.cfg.cpd_params()
        project = self.cfg["register"]["project_to_surface"]
        affine = self.cfg["register"]["affine"]
        retain_size = self.cfg["register"]["retain_size"]

        def one(s):
            pts = load_pointset(cond / f"{s['id']}.points.json")
            mesh = load_mesh(cond / f"{s['id']}.stl")
            corr, coarse = correspond(tpts, pts, mesh, params, project, affine)
            if retain_size:
                # back to the subject's own scale; pose is left to GPA
                corr = PointSet(coarse.inverse().apply(corr.points))
            save_pointset(corr, d / f"{s['id']}.points.json")
            save_transform(coarse, d / f"{s['id']}.transform.json")
            return [d / f"{s['id']}.points.json", d / f"{s['id']}.points.bin", d / f"{s['id']}.transform.json"]

        for paths in _map(one, self.subjects, self.workers):
            self._record("register", *paths)

    # ssm
    def ssm(self):
        d = self.stage_dir("ssm")
        reg = self.out / "register"
        r = self.cfg["register"]
        configs = [load_pointset(reg / f"{s['id']}.points.json") for s in self.subjects]
        aligned, mean = gpa(configs, scaling=r["gpa_scaling"], tol=r["gpa_tolerance"], max_iter=r["gpa_max_iterations"])
        tmesh = load_mesh(reg / "template.obj")
        tpts = load_pointset(reg / "template.points.json")
        mesh_mean = template_for_mean(tmesh, tpts, mean, self.cfg["ssm"]["tps_regularization"])
        model = ShapeModel(self.cfg["ssm"]["variance_to_retain"]).fit(aligned, template_mesh=mesh_mean)
        path = save_model(model, d / "model")
        for s, a in zip(self.subjects, aligned):
            save_pointset(a, d / f"{s['id']}.aligned.json")
            self._record("ssm", d / f"{s['id']}.aligned.json", d / f"{s['id']}.aligned.bin")
        self._record("ssm", path, d / "model.ssm.bin", d / "model.template.obj")
        ratio = model.all_explained_variance_ / model.total_variance_ if model.total_variance_ > 0 else model.all_explained_variance_ * 0
        summary = {
            "n_training": model.n_training_,
            "n_points": int(len(model.mean_)),
            "n_modes": model.n_components_,
            "explained_variance_ratio": [float(v) for v in ratio],
            "cumulative_2_modes": float(ratio[:2].sum()),
            "template_watertight": bool(is_watertight(mesh_mean)),
            "template_volume_mm3": float(signed_volume(mesh_mean)),
        }
        write_json(summary, d / "summary.json")
        self._record("ssm", d / "summary.json")
        self.report.tables["ssm"] = summary

    # metrics
    def metrics(self):
        pairs = self.cfg["inputs"]["metric_pairs"]
        if not pairs:
            self.report.warnings.append("metrics: no metric pairs configured")
            return
        m = self.cfg["metrics"]
        d = self.stage_dir("metrics")
        rows = _map(lambda p: evaluate_pair(p, m, self.cfg["ingest"]), pairs, self.workers)
        for p, row in zip(pairs, rows):
            write_json(row, d / f"{p['id']}.json")
            self._record("metrics", d / f"{p['id']}.json")
        (d / "summary.csv").write_text(metrics_csv(rows))
        self._record("metrics", d / "summary.csv")
        self.report.tables["metrics"] = rows

    # materials
    def materials(self):
        states = self.cfg["inputs"]["stress_states"]
        if states is None:
            self.report.warnings.append("materials: no stress states configured")
            return
        m = self.cfg["materials"]
        d = self.stage_dir("materials")
        result = evaluate_states(json.loads(Path(states).read_text()), m["phi0"], m["phi1"], m["table"],
                                 m["quadrature_order"], m["tension_only"])
        write_json(result, d / "stresses.json")
        self._record("materials", d / "stresses.json")


def _load_surface(path, label, ingest) -> tuple[TriMesh, object]:
    path = Path(path)
    if path.suffix.lower() == ".json":
        vol = load_label_volume(path)
        mesh = extract_surface(vol, label, ingest["iso"])
        if ingest["largest_component"]:
            mesh = largest_component(mesh)
        return mesh, vol
    return load_mesh(path), None


def evaluate_pair(pair: dict, m: dict, ingest: dict | None = None) -> dict:
    """Dice and surface metrics of one segmented / ground truth pair."""
    ingest = ingest or CONFIG_DEFAULTS["ingest"]
    label = pair.get("label", 1)
    seg, vseg = _load_surface(pair["segmented"], label, ingest)
    gt, vgt = _load_surface(pair["ground_truth"], label, ingest)
    if vseg is not None and vgt is not None:
        dsc = dice(vseg, vgt, label)
    else:
        spacing, origin, dims = common_grid([seg, gt], m["dice_voxel_mm"])
        dsc = dice(voxelize_mesh(seg, spacing, origin, dims), voxelize_mesh(gt, spacing, origin, dims), 1)
    rep = surface_distance_report(seg, gt, m["threshold_mm"], m["directed"], m["percentile"], m["sample_level"])
    return {"id": pair["id"], "dice": float(dsc), **rep.to_dict()}


TABLE_COLUMNS = ("subject", "dsc_pct", "hausdorff_mm", "average_distance_mm", "area_beyond_threshold_pct")


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for r in rows:
        w.writerow([r["id"], repr(100.0 * r["dice"]), repr(r["hausdorff_mm"]), repr(r["average_mm"]),
                    repr(100.0 * r["area_fraction_beyond_threshold"])])
    if rows:
        for name, fn in (("mean", np.mean), ("sd", lambda a: np.std(a, ddof=1) if len(a) > 1 else 0.0)):
            w.writerow([name] + [repr(float(fn([100.0 * r["dice"] for r in rows]))),
                                 repr(float(fn([r["hausdorff_mm"] for r in rows]))),
                                 repr(float(fn([r["average_mm"] for r in rows]))),
                                 repr(float(fn([100.0 * r["area_fraction_beyond_threshold"] for r in rows])))])
    return buf.getvalue()


def evaluate_states(states, phi0=None, phi1=None, table=None, order=35, tension_only=True) -> dict:
    """Cauchy stresses for a list of ``{"F", "p", "zone"}`` records.

    Each record may carry its own ``phi0``/``phi1``; otherwise the arguments
    apply. Missing volume fractions are an error.
    """
    if not isinstance(states, list):
        raise ConfigError("stress states must be a JSON list")
    tab = load_material_table(table) if table else None
    out = []
    cache = {}
    for i, s in enumerate(states):
        unknown = set(s) - {"F", "p", "zone", "phi0", "phi1"}
        if unknown:
            raise ConfigError(f"state {i}: unknown keys {sorted(unknown)}")
        p0 = s.get("phi0", phi0)
        p1 = s.get("phi1", phi1)
        if p0 is None or p1 is None:
            raise ConfigError(f"state {i}: volume fractions phi0 and phi1 are required")
        zone = s.get("zone", "superficial")
        key = (zone, float(p0), float(p1))
        if key not in cache:
            cache[key] = cartilage_constants(zone, p0, p1, tab, order, tension_only)
        try:
            st = DeformationState(np.asarray(s["F"], dtype=float), float(s.get("p", 0.0)))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"state {i}: invalid deformation state ({exc})") from exc
        sigma = total_stress(st, cache[key])
        out.append({"index": i, "zone": zone, "J": st.J, "p": st.p, "phi0": float(p0), "phi1": float(p1),
                    "sigma": sigma.tolist()})
    return {"table_version": TABLE_VERSION, "units": "MPa", "states": out}


def run_pipeline(cfg: PipelineConfig) -> RunReport:
    """Execute the enabled stages; a failure leaves a ``FAILED`` marker and raises ``PipelineError``."""
    run = _Run(cfg)
    run.out.mkdir(parents=True, exist_ok=True)
    failed = run.out / "FAILED"
    if failed.exists():
        failed.unlink()
    for stage in STAGES:
        if not cfg["stages"][stage]:
            continue
        t0 = time.perf_counter()
        try:
            getattr(run, stage)()
        except Exception as exc:
            failed.write_text(f"stage: {stage}\n{type(exc).__name__}: {exc}\n")
            _write_manifest(run, failed_stage=stage)
            write_json(run.report.to_dict(), run.out / "report.json")
            raise PipelineError(stage, exc) from exc
        run.report.add_stage(stage, round(time.perf_counter() - t0, 6))
        log.info("stage %s done in %.2f s", stage, run.report.timings[stage])
    _write_manifest(run)
    write_json(run.report.to_dict(), run.out / "report.json")
    return run.report


def _write_manifest(run: _Run, failed_stage: str | None = None):
    files = {stage: {f: sha256(run.out / f) for f in sorted(paths)} for stage, paths in run.files.items()}
    manifest = {
        "format": "kneessm-run/1",
        "seed": run.seed,
        "config": run.cfg.echo(),
        "stages": [s for s in STAGES if s in run.files or (run.cfg["stages"][s] and s in run.report.stages)],
        "files": files,
        "failed_stage": failed_stage,
    }
    write_json(manifest, run.out / "manifest.json")
