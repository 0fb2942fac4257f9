"""Command-line entry point: ``voxssm <command> [options]``.

Every command takes an optional YAML or JSON config file whose keys can be
overridden by flags (``--set key.sub=value`` reaches any key). The resolved
config, input content hashes and package version go into each manifest.
Outputs are deterministic: no timestamps, sorted JSON keys, fixed NRRD
headers.

Exit codes: 0 success, 2 configuration or input mismatch, 3 file I/O,
4 numerical stage failure.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import yaml

from . import __version__
from .completion import Template
from .dataset import DEFAULT_PHANTOM, PoseJitter, build_dataset, case_from_defect
from .errors import (
    DegenerateInputError,
    DegenerateWeightsError,
    EmptyImplantError,
    NrrdParseError,
    ShapeError,
    SpecError,
    UndefinedMetricError,
    UnsupportedFormatError,
)
from .metrics import DEFAULT_BDSC_TOLERANCE_MM, aggregate, aggregate_csv, compare
from .pipeline import build, complete, parallel_map, parse_template_mode
from .postprocess import PostprocessConfig, extract_implant
from .registration import RegistrationConfig, estimate_transform, warp
from .ssm import NORMALIZATIONS, load_model, mode_report, save_model
from .volume.grid import VoxelGrid, threshold_grid
from .volume.nrrd import read_nrrd, write_nrrd
from .volume.phantom import DefectSpec, PhantomSpec

log = logging.getLogger("voxssm")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

METHODS = ("template-single", "template-mean", "ssm", "ssm-external")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class StageError(Exception):
    def __init__(self, stage: str, code: int, cause: BaseException):
        super().__init__(f"stage '{stage}': {cause}")
        self.stage = stage
        self.code = code


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (NrrdParseError, UnsupportedFormatError, OSError)):
        return EXIT_IO
    if isinstance(exc, (DegenerateInputError, DegenerateWeightsError, EmptyImplantError,
                        UndefinedMetricError, np.linalg.LinAlgError, FloatingPointError)):
        return EXIT_NUMERICAL
    if isinstance(exc, (ConfigError, SpecError, ShapeError, ValueError, KeyError, TypeError)):
        return EXIT_CONFIG
    return EXIT_NUMERICAL


class stage:
    """Context manager tagging failures with the pipeline stage they came from."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        log.debug("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is None or isinstance(exc, StageError):
            return False
        raise StageError(self.name, _exit_code(exc), exc) from exc


# ---------------------------------------------------------------- config --

DEFAULTS: dict[str, Any] = {
    "reference": None,
    "training": [],
    "num_modes": None,
    "template_mode": "mean",
    "method": "ssm",
    "ssm_target": "mean",
    "external": None,
    "registration": RegistrationConfig().to_dict(),
    "postprocess": {"enabled": True, "median_kernel": 3, "opening_radius": 1,
                    "connectivity": 26, "selection": "auto"},
    "minmax_weights": False,
    "centered": True,
    "normalization": "unit",
    "output": None,
    "save_warped": False,
    "seed": 0,
    "jobs": 1,
    "phantom": {
        "spec": DEFAULT_PHANTOM.to_dict(),
        "n_train": 10,
        "n_test": 5,
        "defect_kind": "sphere",
        "fraction": [0.1, 0.3],
        "n_defects": 2,
        "jitter": PoseJitter().to_dict(),
        "defects": None,
    },
}


def _merge(base: dict, extra: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def _set_dotted(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got '{assignment}'")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config key '{key}'")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key '{key}'")
    node[parts[-1]] = yaml.safe_load(raw)


def load_config(path: str | None, overrides: dict[str, Any], sets: Sequence[str] = ()) -> dict:
    """Defaults, then the config file, then ``--set`` assignments, then explicit flags."""
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise StageError("config", EXIT_IO, exc) from exc
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
        base_dir = Path(path).resolve().parent
        data = _resolve_paths(data, base_dir)
        cfg = _merge(cfg, data)
    for s in sets:
        _set_dotted(cfg, s)
    for key, value in overrides.items():
        if value is None:
            continue
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node[p]
        node[parts[-1]] = value
    return cfg


def _resolve_paths(data: dict, base: Path) -> dict:
    """Paths in a config file are relative to the file itself."""
    out = dict(data)

    def fix(p):
        return str((base / p).resolve()) if p is not None and not os.path.isabs(str(p)) else p

    for key in ("reference", "output", "external"):
        if key in out:
            out[key] = fix(out[key])
    if isinstance(out.get("training"), list):
        out["training"] = [fix(p) for p in out["training"]]
    elif isinstance(out.get("training"), str):
        out["training"] = [fix(out["training"])]
    return out


def _expand_paths(entries: Sequence[str]) -> list[Path]:
    """Files and directories (all ``*.nrrd`` inside, sorted) in the given order."""
    out: list[Path] = []
    for e in entries:
        p = Path(e)
        if p.is_dir():
            out.extend(sorted(p.glob("*.nrrd")))
        else:
            out.append(p)
    return out


def _registration(cfg: dict) -> RegistrationConfig:
    try:
        return RegistrationConfig.from_dict(cfg["registration"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad registration settings: {exc}") from exc


def _postprocess(cfg: dict, erase_mask: VoxelGrid | None = None) -> PostprocessConfig:
    pp = {k: v for k, v in cfg["postprocess"].items() if k != "enabled"}
    try:
        return PostprocessConfig(erase_mask=erase_mask, **pp)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad postprocess settings: {exc}") from exc


# ------------------------------------------------------------------ files --

def file_sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def grid_sha256(grid: VoxelGrid) -> str:
    """Hash of the voxel values and geometry, independent of file encoding."""
    h = hashlib.sha256()
    h.update(json.dumps(grid.geometry.to_dict(), sort_keys=True).encode())
    h.update(np.ascontiguousarray(grid.data).astype(grid.data.dtype.newbyteorder("<")).tobytes())
    return h.hexdigest()


def _dump_json(obj: Any, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read(path: Path, what: str) -> VoxelGrid:
    with stage(f"read {what} {path.name}"):
        return read_nrrd(path)


def _case_id(path: Path) -> str:
    name = path.name
    for suffix in (".nhdr", ".nrrd"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return path.stem


class _atomic_dir:
    """Build a directory under a temporary name and move it into place on success."""

    def __init__(self, final: Path):
        self.final = final

    def __enter__(self) -> Path:
        self.final.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.final.name}.", dir=self.final.parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        if self.final.exists():
            shutil.rmtree(self.final)
        os.replace(self.tmp, self.final)
        return False


def _manifest_header(command: str, cfg: dict) -> dict:
    return {"command": command, "version": __version__, "config": cfg}


def _require_output(cfg: dict) -> Path:
    if not cfg.get("output"):
        raise ConfigError("an output directory is required (--out or 'output' in the config)")
    return Path(cfg["output"])


# ------------------------------------------------------------- build-model --

@dataclass
class PipelineConfig:
    """Validated view of the keys used by model building and completion."""

    reference: Path
    training: list[Path]
    num_modes: int
    template_mode: str
    centered: bool
    normalization: str
    registration: RegistrationConfig
    output: Path
    seed: int
    jobs: int

    @classmethod
    def from_config(cls, cfg: dict) -> PipelineConfig:
        if not cfg.get("reference"):
            raise ConfigError("a reference shape is required")
        reference = Path(cfg["reference"])
        training = _expand_paths(cfg.get("training") or [])
        for p in [reference, *training]:
            if not p.is_file():
                raise ConfigError(f"input file does not exist: {p}")
        n_shapes = len({p.resolve() for p in training} | {reference.resolve()})
        num_modes = cfg.get("num_modes")
        num_modes = n_shapes if num_modes is None else int(num_modes)
        if not 1 <= num_modes <= n_shapes:
            raise ConfigError(f"num_modes {num_modes} must lie in 1..{n_shapes} (training shapes incl. reference)")
        parse_template_mode(cfg["template_mode"], n_shapes)
        if cfg["normalization"] not in NORMALIZATIONS:
            raise ConfigError(f"normalization must be one of {NORMALIZATIONS}")
        jobs = int(cfg.get("jobs") or 1)
        if jobs < 1:
            raise ConfigError("jobs must be >= 1")
        return cls(reference, training, num_modes, cfg["template_mode"], bool(cfg["centered"]),
                   cfg["normalization"], _registration(cfg), _require_output(cfg), int(cfg["seed"]), jobs)


def cmd_build_model(cfg: dict) -> int:
    pc = PipelineConfig.from_config(cfg)
    ref_id = _case_id(pc.reference)
    reference = _read(pc.reference, "reference")
    training = []
    seen = {pc.reference.resolve()}
    for p in pc.training:
        if p.resolve() in seen:
            continue
        seen.add(p.resolve())
        training.append((_case_id(p), _read(p, "training shape")))
    ids = [ref_id] + [i for i, _ in training]
    if len(set(ids)) != len(ids):
        raise ConfigError("training shapes must have distinct file names")
    with stage("build model"):
        built = build(ref_id, reference, [(ref_id, reference)] + training, pc.num_modes, pc.template_mode,
                      pc.centered, pc.normalization, pc.registration, pc.jobs)

    out = pc.output
    with _atomic_dir(out) as tmp:
        with stage("write model"):
            save_model(built.model, tmp / "model")
            (tmp / "templates").mkdir()
            write_nrrd(built.templates["single"].grid, tmp / "templates" / "single.nrrd")
            if len(built.templates) > 1:
                write_nrrd(built.templates[pc.template_mode].grid, tmp / "templates" / "mean.nrrd")
            if cfg.get("save_warped"):
                (tmp / "warped").mkdir()
                for name, w in built.warped:
                    write_nrrd(w, tmp / "warped" / f"{name}.nrrd")
        manifest = _manifest_header("build-model", cfg)
        manifest.update({
            "reference_id": ref_id,
            "inputs": {str(p): file_sha256(p) for p in [pc.reference] + pc.training},
            "warped": [
                {
                    "id": name,
                    "sha256": grid_sha256(w),
                    "transform": built.reports[name].transform.to_dict() if built.reports[name] else None,
                    "residual_mm": built.reports[name].residual if built.reports[name] else None,
                }
                for name, w in built.warped
            ],
            "templates": {
                "single": built.templates["single"].provenance,
                **({"mean": built.templates[pc.template_mode].provenance} if len(built.templates) > 1 else {}),
            },
            "outputs": {
                str(p.relative_to(tmp)): file_sha256(p)
                for p in sorted(tmp.rglob("*")) if p.is_file()
            },
        })
        _dump_json(manifest, tmp / "manifest.json")
    print(f"model with {built.model.num_modes} modes written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- complete --

def _load_built(model_dir: Path, method: str, ssm_target: str):
    model = template = target = None
    if method.startswith("ssm"):
        with stage("load model"):
            model = load_model(model_dir / "model")
        if ssm_target == "reference":
            target = _read(model_dir / "templates" / "single.nrrd", "reference")
        elif ssm_target != "mean":
            raise ConfigError("ssm_target must be 'mean' or 'reference'")
    else:
        name = "single.nrrd" if method == "template-single" else "mean.nrrd"
        path = model_dir / "templates" / name
        if not path.is_file():
            raise ConfigError(f"method {method} needs {path}; build the model with a mean template mode")
        grid = _read(path, "template")
        template = Template(grid, {"kind": "single" if method == "template-single" else "mean", "file": str(path)})
    return model, template, target


def _external_for(cfg: dict, case_id: str) -> Path | None:
    ext = cfg.get("external")
    if ext is None:
        return None
    p = Path(ext)
    if p.is_dir():
        for cand in (p / f"{case_id}.nrrd", p / case_id / "completed.nrrd"):
            if cand.is_file():
                return cand
        raise ConfigError(f"no external completion for case '{case_id}' in {p}")
    return p


def _complete_one(case: Path, cfg: dict, model, template, target, out_root: Path) -> dict:
    case_id = _case_id(case)
    method = cfg["method"]
    try:
        defective = _read(case, "case")
        ext_path = _external_for(cfg, case_id)
        external = _read(ext_path, "external completion") if ext_path else None
        with stage("complete"):
            result = complete(method, defective, model=model, template=template, external=external,
                              registration_target=target, config=_registration(cfg),
                              minmax_weights=bool(cfg["minmax_weights"]))
        pp_log: list = []
        extracted = None
        if cfg["postprocess"].get("enabled", True):
            with stage("extract implant"):
                extracted = extract_implant(result.implant_original_space, _postprocess(cfg), manifest=pp_log)
        with _atomic_dir(out_root / case_id) as tmp, stage("write outputs"):
            write_nrrd(result.completed_reference_space, tmp / "completed.nrrd")
            write_nrrd(result.implant_reference_space, tmp / "implant.nrrd")
            write_nrrd(result.completed_original_space, tmp / "completed_original.nrrd")
            write_nrrd(result.implant_original_space, tmp / "implant_original.nrrd")
            if extracted is not None:
                write_nrrd(extracted, tmp / "implant_extracted.nrrd")
            (tmp / "transform.json").write_text(result.transform.to_json() + "\n")
            manifest = _manifest_header("complete", cfg)
            manifest.update({
                "case_id": case_id,
                "inputs": {str(case): file_sha256(case), **({str(ext_path): file_sha256(ext_path)} if ext_path else {})},
                "result": result.manifest(),
                "postprocess": pp_log if extracted is not None else None,
                "outputs": {p.name: file_sha256(p) for p in sorted(tmp.iterdir())},
            })
            _dump_json(manifest, tmp / "manifest.json")
    except StageError as exc:
        raise StageError(f"{case_id}: {exc.stage}", exc.code, exc.__cause__ or exc) from exc
    return {"case_id": case_id, "implant_voxels": result.implant_original_space.count()}


def cmd_complete(cfg: dict, cases: Sequence[str], model_dir: str | None) -> int:
    method = cfg["method"]
    if method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}")
    if method == "ssm-external" and not cfg.get("external"):
        raise ConfigError("method 'ssm-external' needs an external completion (--external)")
    if not model_dir:
        raise ConfigError("--model is required")
    case_paths = _expand_paths(cases)
    if not case_paths:
        raise ConfigError("no input cases given")
    for p in case_paths:
        if not p.is_file():
            raise ConfigError(f"input file does not exist: {p}")
    ids = [_case_id(p) for p in case_paths]
    if len(set(ids)) != len(ids):
        raise ConfigError("case files must have distinct names")
    out = _require_output(cfg)
    model, template, target = _load_built(Path(model_dir), method, cfg["ssm_target"])
    jobs = int(cfg.get("jobs") or 1)
    done = parallel_map(lambda p: _complete_one(p, cfg, model, template, target, out), case_paths, jobs)
    for d in done:
        print(f"{d['case_id']}: implant {d['implant_voxels']} voxels")
    return EXIT_OK


# --------------------------------------------------------- extract-implant --

def cmd_extract_implant(cfg: dict, raw: str, out: str, hint: str | None, erase: str | None,
                        manifest_path: str | None) -> int:
    raw_p = Path(raw)
    grid = _read(raw_p, "raw subtraction")
    hint_grid = _read(Path(hint), "defect hint") if hint else None
    erase_grid = _read(Path(erase), "erase mask") if erase else None
    pp_log: list = []
    with stage("extract implant"):
        implant = extract_implant(grid, _postprocess(cfg, erase_grid), defect_hint=hint_grid, manifest=pp_log)
    out_p = Path(out)
    out_p.parent.mkdir(parents=True, exist_ok=True)
    with stage("write implant"):
        write_nrrd(implant, out_p)
    manifest = _manifest_header("extract-implant", cfg)
    inputs = {str(raw_p): file_sha256(raw_p)}
    for p in (hint, erase):
        if p:
            inputs[str(p)] = file_sha256(p)
    manifest.update({"inputs": inputs, "stages": pp_log, "output_sha256": file_sha256(out_p)})
    mpath = Path(manifest_path) if manifest_path else out_p.with_name(_case_id(out_p) + ".manifest.json")
    _dump_json(manifest, mpath)
    print(f"implant {implant.count()} voxels written to {out_p}")
    return EXIT_OK


# ---------------------------------------------------------------- evaluate --

def _case_files(directory: Path, name: str) -> dict[str, Path]:
    """Case id -> file, from ``<dir>/<case>.nrrd`` or ``<dir>/<case>/<name>``."""
    found: dict[str, Path] = {}
    if not directory.is_dir():
        raise StageError(f"list {directory}", EXIT_IO, FileNotFoundError(f"not a directory: {directory}"))
    for p in sorted(directory.iterdir()):
        if p.name.startswith("."):
            continue
        if p.is_dir() and (p / name).is_file():
            found[p.name] = p / name
        elif p.is_file() and p.suffix == ".nrrd":
            found[_case_id(p)] = p
    return found


def cmd_evaluate(cfg: dict, pred: str, gt: str, tolerance: float, pred_name: str, gt_name: str) -> int:
    preds = _case_files(Path(pred), pred_name)
    gts = _case_files(Path(gt), gt_name)
    missing_pred = sorted(set(gts) - set(preds))
    missing_gt = sorted(set(preds) - set(gts))
    if missing_pred or missing_gt:
        parts = []
        if missing_pred:
            parts.append("no prediction for: " + ", ".join(missing_pred))
        if missing_gt:
            parts.append("no ground truth for: " + ", ".join(missing_gt))
        raise StageError("match cases", EXIT_CONFIG, ConfigError("; ".join(parts)))
    if not preds:
        raise ConfigError("no cases found")
    if tolerance < 0:
        raise ConfigError("tolerance must be non-negative")
    out = _require_output(cfg)
    out.mkdir(parents=True, exist_ok=True)

    def one(case_id: str):
        p, g = _read(preds[case_id], "prediction"), _read(gts[case_id], "ground truth")
        with stage(f"{case_id}: metrics"):
            rep = compare(p, g, tolerance, case_id, provenance={
                "prediction": str(preds[case_id]), "prediction_sha256": file_sha256(preds[case_id]),
                "ground_truth": str(gts[case_id]), "ground_truth_sha256": file_sha256(gts[case_id]),
            })
        (out / f"{case_id}.json").write_text(rep.to_json() + "\n")
        return rep

    reports = parallel_map(one, sorted(preds), int(cfg.get("jobs") or 1))
    (out / "aggregate.csv").write_text(aggregate_csv(reports))
    summary = _manifest_header("evaluate", cfg)
    summary.update({"tolerance_mm": tolerance, "aggregate": aggregate(reports), "cases": sorted(preds)})
    _dump_json(summary, out / "manifest.json")
    agg = summary["aggregate"]
    hd = agg["hd95"]["mean"]
    print(f"{len(reports)} cases: mean DSC {agg['dsc']['mean']:.4f}, mean bDSC {agg['bdsc']['mean']:.4f}, "
          f"mean HD95 {'n/a' if hd is None else f'{hd:.3f}'} mm")
    return EXIT_OK


# ----------------------------------------------------------------- phantom --

def cmd_phantom(cfg: dict) -> int:
    ph = cfg["phantom"]
    try:
        base = PhantomSpec.from_dict(ph["spec"])
        base.validate()
        jitter = PoseJitter.from_dict(ph["jitter"]) if ph.get("jitter") is not None else None
        fraction = ph["fraction"]
        fraction = float(fraction) if np.isscalar(fraction) else tuple(float(f) for f in fraction)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"bad phantom settings: {exc}") from exc
    n_train, seed = int(ph["n_train"]), int(cfg["seed"])
    explicit = ph.get("defects")
    n_test = len(explicit) if explicit else int(ph["n_test"])
    if n_train < 1 or n_test < 0:
        raise ConfigError("need n_train >= 1 and n_test >= 0")
    out = _require_output(cfg)

    with stage("generate phantoms"):
        ds = build_dataset(base, n_train, 0 if explicit else n_test, seed=seed,
                           defect_kind=ph["defect_kind"], fraction=fraction,
                           n_defects=int(ph["n_defects"]), jitter=jitter)
        cases = list(ds.cases)
        if explicit:
            rng = np.random.default_rng([seed, 1])
            for j, d in enumerate(explicit):
                phantom = replace(base, seed=int(rng.integers(0, 2**31 - 1)))
                pose = jitter.sample(rng, phantom) if jitter is not None else None
                cases.append(case_from_defect(f"case_{j:03d}", phantom, pose, DefectSpec.from_dict(d)))

    with _atomic_dir(out) as tmp, stage("write dataset"):
        for name in ("training", "defective", "implants"):
            (tmp / name).mkdir()
        for name, grid in ds.training:
            write_nrrd(grid, tmp / "training" / f"{name}.nrrd")
        for c in cases:
            write_nrrd(c.defective, tmp / "defective" / f"{c.case_id}.nrrd")
            write_nrrd(c.implant, tmp / "implants" / f"{c.case_id}.nrrd")
        manifest = _manifest_header("phantom", cfg)
        dm = ds.manifest()
        dm["cases"] = [c.manifest() for c in cases]
        manifest["dataset"] = dm
        manifest["outputs"] = {str(p.relative_to(tmp)): file_sha256(p) for p in sorted(tmp.rglob("*.nrrd"))}
        _dump_json(manifest, tmp / "manifest.json")
    print(f"{n_train} training phantoms and {len(cases)} test cases written to {out}")
    return EXIT_OK


# --------------------------------------------------------- inspect-weights --

def cmd_inspect_weights(cfg: dict, model_dir: str, shapes: Sequence[str], roi: str | None, register: bool) -> int:
    paths = _expand_paths(shapes)
    if not paths:
        raise ConfigError("inspect-weights needs at least one shape")
    with stage("load model"):
        model = load_model(Path(model_dir) / "model" if (Path(model_dir) / "model").is_dir() else Path(model_dir))
    grids = [_read(p, "shape") for p in paths]
    if register:
        target = threshold_grid(model.mean, 0.5, inclusive=True)
        reg = _registration(cfg)

        def to_ref(g):
            with stage("register shape"):
                return warp(g, estimate_transform(g, target, reg).transform)

        grids = parallel_map(to_ref, grids, int(cfg.get("jobs") or 1))
    roi_grid = _read(Path(roi), "roi") if roi else None
    with stage("mode report"):
        rep = mode_report(model, grids, roi_grid)
    out = _require_output(cfg)
    out.mkdir(parents=True, exist_ok=True)
    rows = rep.rows()
    cols = list(rows[0].keys()) if rows else ["mode"]
    lines = [",".join(cols)] + [",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols) for r in rows]
    (out / "weights.csv").write_text("\n".join(lines) + "\n")
    plot = {
        "shapes": [_case_id(p) for p in paths],
        "weights": rep.weights.tolist(),
        "singular_values": [float(s) for s in model.singular_values[: model.num_modes]],
        "roi_energy_fraction": None if rep.energy_fraction is None else [
            None if np.isnan(e) else float(e) for e in rep.energy_fraction
        ],
    }
    _dump_json(plot, out / "plot_data.json")
    manifest = _manifest_header("inspect-weights", cfg)
    manifest["inputs"] = {str(p): file_sha256(p) for p in paths + ([Path(roi)] if roi else [])}
    _dump_json(manifest, out / "manifest.json")
    print(f"weights of {len(paths)} shapes over {model.num_modes} modes written to {out}")
    return EXIT_OK


# -------------------------------------------------------------------- main --

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="voxssm", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=False):
        sp.add_argument("--config", help="YAML or JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. registration.trim_fraction=0.9")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--jobs", type=int, help="parallel workers over cases")
        sp.add_argument("--seed", type=int)

    def pp_flags(sp):
        sp.add_argument("--median-kernel", type=int)
        sp.add_argument("--opening-radius", type=int)
        sp.add_argument("--connectivity", type=int, choices=(6, 18, 26))
        sp.add_argument("--selection", choices=("auto", "largest", "max-overlap"))

    b = sub.add_parser("build-model", help="register training shapes and build the SSM and templates")
    common(b)
    b.add_argument("--reference")
    b.add_argument("--training", nargs="+", help="training NRRD files or directories")
    b.add_argument("--num-modes", type=int)
    b.add_argument("--template-mode", help="single, mean or mean-K")
    b.add_argument("--normalization", choices=NORMALIZATIONS)
    b.add_argument("--uncentered", action="store_true", help="project without subtracting the mean")
    b.add_argument("--save-warped", action="store_true", help="also write the registered training shapes")

    c = sub.add_parser("complete", help="complete defective shapes")
    common(c)
    c.add_argument("cases", nargs="+", help="defective NRRD files or directories")
    c.add_argument("--model", required=True, help="output directory of build-model")
    c.add_argument("--method", choices=METHODS)
    c.add_argument("--external", help="external completion file or directory (ssm-external)")
    c.add_argument("--ssm-target", choices=("mean", "reference"))
    c.add_argument("--minmax-weights", action="store_true",
                   help="min-max rescale weights and use them verbatim in the reconstruction")
    c.add_argument("--no-extract", action="store_true", help="skip implant post-processing")
    pp_flags(c)

    e = sub.add_parser("extract-implant", help="clean a raw subtraction into an implant")
    common(e)
    e.add_argument("raw")
    e.add_argument("--output", dest="implant_out", required=True, help="implant NRRD to write")
    e.add_argument("--hint", help="defect hint mask for max-overlap selection")
    e.add_argument("--erase-mask", help="mask of voxels to erase before smoothing")
    e.add_argument("--manifest")
    pp_flags(e)

    v = sub.add_parser("evaluate", help="DSC, bDSC and HD95 of predictions against ground truth")
    common(v)
    v.add_argument("--pred", required=True)
    v.add_argument("--gt", required=True)
    v.add_argument("--tolerance", type=float, default=DEFAULT_BDSC_TOLERANCE_MM, help="bDSC tolerance in mm")
    v.add_argument("--pred-name", default="implant_extracted.nrrd",
                   help="file inside per-case prediction directories")
    v.add_argument("--gt-name", default="implant.nrrd", help="file inside per-case ground-truth directories")

    f = sub.add_parser("phantom", help="generate a synthetic training and test set")
    common(f)
    f.add_argument("--n-train", type=int)
    f.add_argument("--n-test", type=int)
    f.add_argument("--defect-kind", choices=("sphere", "box", "multi"))
    f.add_argument("--fraction", type=float, nargs="+", help="defect share of the shell, or a low high range")
    f.add_argument("--n-defects", type=int)

    w = sub.add_parser("inspect-weights", help="per-mode weight statistics")
    common(w)
    w.add_argument("shapes", nargs="*")
    w.add_argument("--model", required=True)
    w.add_argument("--roi")
    w.add_argument("--register", action="store_true", help="register shapes to the model mean first")
    return p


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    o: dict[str, Any] = {"output": args.out, "jobs": args.jobs, "seed": args.seed}
    g = lambda name: getattr(args, name, None)  # noqa: E731
    o.update({
        "reference": g("reference"),
        "training": g("training"),
        "num_modes": g("num_modes"),
        "template_mode": g("template_mode"),
        "normalization": g("normalization"),
        "method": g("method"),
        "external": g("external"),
        "ssm_target": g("ssm_target"),
        "postprocess.median_kernel": g("median_kernel"),
        "postprocess.opening_radius": g("opening_radius"),
        "postprocess.connectivity": g("connectivity"),
        "postprocess.selection": g("selection"),
        "phantom.n_train": g("n_train"),
        "phantom.n_test": g("n_test"),
        "phantom.defect_kind": g("defect_kind"),
        "phantom.n_defects": g("n_defects"),
    })
    if g("uncentered"):
        o["centered"] = False
    if g("save_warped"):
        o["save_warped"] = True
    if g("minmax_weights"):
        o["minmax_weights"] = True
    if g("no_extract"):
        o["postprocess.enabled"] = False
    frac = g("fraction")
    if frac is not None:
        if len(frac) not in (1, 2):
            raise ConfigError("--fraction takes one value or a low high pair")
        o["phantom.fraction"] = frac[0] if len(frac) == 1 else list(frac)
    return o


def _run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, _overrides(args), args.set)
    if args.command == "build-model":
        return cmd_build_model(cfg)
    if args.command == "complete":
        return cmd_complete(cfg, args.cases, args.model)
    if args.command == "extract-implant":
        return cmd_extract_implant(cfg, args.raw, args.implant_out, args.hint, args.erase_mask, args.manifest)
    if args.command == "evaluate":
        return cmd_evaluate(cfg, args.pred, args.gt, args.tolerance, args.pred_name, args.gt_name)
    if args.command == "phantom":
        return cmd_phantom(cfg)
    if args.command == "inspect-weights":
        return cmd_inspect_weights(cfg, args.model, args.shapes, args.roi, args.register)
    raise ConfigError(f"unknown command {args.command}")


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _run(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, SpecError, ShapeError) as exc:
        print(f"error: configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: I/O: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
