"""End-to-end conversion runs driven by a single JSON config.

Artifacts of one run (all inside ``output_dir``):

``config.json``            canonical config plus its hash
``teacher/``               the MoE layer (model directory)
``calibration.stats``      calibration statistics bundle
``dense/``                 the converted dense FFN (model directory)
``conversion_report.json`` selection, partition, scaling factors, metadata
``equivalence.json``       concatenation equivalence check
``selections.json``        selections of every named scoring method
``distill_curve.csv``      step, loss, lr (only when distillation is configured)
``distill_random_init.csv`` the same for a random student of equal width (optional)

Every JSON artifact has a ``config_hash`` field, model manifests and the stats
bundle carry it under ``extra``, and CSV files start with a
``# config_hash: ...`` comment line.
"""
from __future__ import annotations

import contextlib
import copy
import csv
import hashlib
import io as _io
import itertools
import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import calibration, conversion, distill, io, scoring, synthgen
from .errors import Moe2DenseError, NumericError, ValidationError
from .model import MoeLayer

OUTPUT_ROOT_ENV = "MOE2DENSE_OUT"
EQUIVALENCE_TOL = 1e-10
REPORT_FORMATS = ("json", "csv")
MODEL_KINDS = ("random_moe", "redundant_pool")
_DISTILL_EXTRA = {"vocab": 32, "head_seed": None, "head_scale": 4.0, "compare_random_init": False}


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "."))


def resolve_output(path) -> Path:
    """Relative output paths live under ``$MOE2DENSE_OUT`` (default: the working directory)."""
    path = Path(path)
    return path if path.is_absolute() else output_root() / path


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def _require_seed(section: dict, where: str, key: str = "seed") -> None:
    if not isinstance(section.get(key), int) or isinstance(section.get(key), bool):
        raise ValidationError(f"{where}.{key} is mandatory and must be an integer")


@dataclass(frozen=True)
class PipelineConfig:
    model: dict
    calibration: dict
    conversion: conversion.ConversionConfig
    distill: dict | None = None
    output_dir: str = "run"
    report_formats: tuple[str, ...] = REPORT_FORMATS

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = copy.deepcopy(data)
        unknown = set(data) - {"model", "calibration", "conversion", "distill", "output_dir", "report_formats"}
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        for key in ("model", "calibration", "conversion"):
            if not isinstance(data.get(key), dict):
                raise ValidationError(f"config section {key!r} is required")

        model = data["model"]
        if ("path" in model) == ("generate" in model):
            raise ValidationError("model needs exactly one of 'path' or 'generate'")
        if "generate" in model:
            gen = model["generate"]
            if gen.get("kind", "random_moe") not in MODEL_KINDS:
                raise ValidationError(f"model.generate.kind must be one of {MODEL_KINDS}")
            _require_seed(gen, "model.generate")

        calib = {"chunk_size": calibration.DEFAULT_CHUNK, **data["calibration"]}
        if set(calib) - {"tokens", "seed", "chunk_size"}:
            raise ValidationError(f"unknown calibration keys: {sorted(set(calib) - {'tokens', 'seed', 'chunk_size'})}")
        _require_seed(calib, "calibration")
        if int(calib.get("tokens", 0)) < 1 or int(calib["chunk_size"]) < 1:
            raise ValidationError("calibration.tokens and calibration.chunk_size must be >= 1")

        _require_seed(data["conversion"], "conversion")
        conv = conversion.ConversionConfig.from_dict(data["conversion"])

        dist = data.get("distill")
        if dist is not None:
            dist = {**_DISTILL_EXTRA, **dist}
            _require_seed(dist, "distill")
            _require_seed(dist, "distill", "head_seed")
            distill.DistillConfig.from_dict({k: v for k, v in dist.items() if k not in _DISTILL_EXTRA})

        formats = tuple(data.get("report_formats", REPORT_FORMATS))
        if set(formats) - set(REPORT_FORMATS):
            raise ValidationError(f"report_formats must be drawn from {REPORT_FORMATS}")
        return cls(model, calib, conv, dist, str(data.get("output_dir", "run")), formats)

    def to_dict(self) -> dict:
        return {"model": self.model, "calibration": self.calibration, "conversion": self.conversion.to_dict(),
                "distill": self.distill, "output_dir": self.output_dir, "report_formats": list(self.report_formats)}

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    def distill_config(self) -> distill.DistillConfig | None:
        if self.distill is None:
            return None
        return distill.DistillConfig.from_dict({k: v for k, v in self.distill.items() if k not in _DISTILL_EXTRA})


def load_config(path) -> PipelineConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ValidationError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path} is not valid JSON ({exc})") from None
    return PipelineConfig.from_dict(data)


def set_path(data: dict, dotted: str, value) -> dict:
    """Return a copy of ``data`` with ``a.b.c`` set to ``value``."""
    out = copy.deepcopy(data)
    node = out
    keys = dotted.split(".")
    for k in keys[:-1]:
        if node.get(k) is None:
            node[k] = {}
        node = node[k]
        if not isinstance(node, dict):
            raise ValidationError(f"cannot set {dotted}: {k} is not a section")
    node[keys[-1]] = value
    return out


@contextlib.contextmanager
def stage(name: str):
    """Prefix errors with the pipeline stage; keep the error class (and exit code)."""
    try:
        yield
    except Moe2DenseError as exc:
        raise type(exc)(f"{name}: {exc}") from exc
    except (np.linalg.LinAlgError, FloatingPointError, OverflowError) as exc:
        raise NumericError(f"{name}: {exc}") from exc


def build_model(source: dict) -> MoeLayer:
    if "path" in source:
        model = io.load_model(source["path"])
        if not isinstance(model, MoeLayer):
            raise ValidationError(f"{source['path']} holds a dense model, expected an MoE layer")
        return model
    gen = dict(source["generate"])
    kind = gen.pop("kind", "random_moe")
    if kind == "random_moe":
        return synthgen.gen_random_moe(**gen)
    return synthgen.gen_redundant_pool(**gen)[0]


def _write_json(path: Path, obj, chash: str) -> None:
    path.write_text(json.dumps({"config_hash": chash, **obj}, indent=2, sort_keys=True, allow_nan=False) + "\n")


def write_csv(path: Path, header, rows, chash: str) -> None:
    buf = _io.StringIO()
    buf.write(f"# config_hash: {chash}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    path.write_text(buf.getvalue())


def read_csv(path) -> tuple[str | None, list[str], list[list[str]]]:
    lines = Path(path).read_text().splitlines()
    chash = None
    if lines and lines[0].startswith("# config_hash:"):
        chash = lines.pop(0).split(":", 1)[1].strip()
    rows = list(csv.reader(lines))
    return chash, rows[0], rows[1:]


def all_selections(stats: calibration.CalibStats, K: int) -> dict:
    """Selections of every named method, with effective ranks on the ACP kernel."""
    acp_kernel = scoring.build_kernel(scoring.score(stats, "acp"), scoring.mean_gram(stats), K)
    out = {}
    for name in conversion.METHOD_NAMES:
        sel, _ = conversion.select_experts(stats, conversion.method_config(name, K=K))
        out[name] = {**sel.to_dict(), "effective_rank": scoring.effective_rank(acp_kernel, sel.indices)}
    return out


@dataclass
class PipelineResult:
    output_dir: Path
    config_hash: str
    files: list[str] = field(default_factory=list)
    equivalence_error: float = float("nan")


def _run_into(cfg: PipelineConfig, out: Path) -> float:
    chash = cfg.hash
    extra = {"config_hash": chash}
    with stage("gen"):
        layer = build_model(cfg.model)
    with stage("validate"):
        cfg.conversion.validate_for(layer)
        dcfg = cfg.distill_config()
        if dcfg is not None and dcfg.k_prime is not None and not layer.k <= dcfg.k_prime <= layer.E:
            raise ValidationError(f"distill.k_prime={dcfg.k_prime} outside [{layer.k}, {layer.E}]")
    _write_json(out / "config.json", {"config": cfg.to_dict()}, chash)
    io.save_model(layer, out / "teacher", extra=extra)
    with stage("calibrate"):
        tokens = synthgen.gaussian_tokens(cfg.calibration["seed"], cfg.calibration["tokens"], layer.d)
        stats = calibration.collect(layer, tokens, cfg.calibration["chunk_size"])
        calibration.save_stats(stats, out / "calibration.stats", extra=extra)
    with stage("convert"):
        dense, rep = conversion.convert_layer(layer, stats, cfg.conversion)
        io.save_model(dense, out / "dense", extra=extra)
        _write_json(out / "conversion_report.json", rep.to_dict(), chash)
    with stage("check"):
        _write_json(out / "equivalence.json", {
            "max_relative_error": rep.equivalence_error, "n_probes": cfg.conversion.n_probes,
            "tolerance": EQUIVALENCE_TOL, "passed": rep.equivalence_error <= EQUIVALENCE_TOL}, chash)
        if not rep.equivalence_error <= EQUIVALENCE_TOL:
            raise NumericError(f"concatenation equivalence error {rep.equivalence_error:.3e} > {EQUIVALENCE_TOL}")
    with stage("select"):
        _write_json(out / "selections.json", {"K": cfg.conversion.K,
                                              "selections": all_selections(stats, cfg.conversion.K)}, chash)
    if dcfg is not None:
        with stage("distill"):
            head = distill.gen_logit_head(cfg.distill["head_seed"], cfg.distill["vocab"], layer.d,
                                          cfg.distill["head_scale"])
            result = distill.train(dense, layer, head, dcfg)
            write_csv(out / "distill_curve.csv", ("step", "loss", "lr"), result.curve_rows(), chash)
            if cfg.distill["compare_random_init"]:
                init = distill.random_dense(dcfg.seed, layer.d, dense.d_dense)
                rand = distill.train(init, layer, head, dcfg)
                write_csv(out / "distill_random_init.csv", ("step", "loss", "lr"), rand.curve_rows(), chash)
    return rep.equivalence_error


def run_pipeline(cfg: PipelineConfig, output_dir=None) -> PipelineResult:
    """Run every stage into a scratch directory and move it into place on success.

    On failure the scratch directory is removed, so no partial artifacts
    remain; an existing output directory is only replaced after success.
    """
    out = resolve_output(output_dir if output_dir is not None else cfg.output_dir)
    out.parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        err = _run_into(cfg, scratch)
        if out.exists():
            shutil.rmtree(out)
        os.replace(scratch, out)
    except BaseException:
        shutil.rmtree(scratch, ignore_errors=True)
        raise
    files = sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file())
    return PipelineResult(out, cfg.hash, files, err)


# --- report ----------------------------------------------------------------------

def _load_artifact_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise ValidationError(f"missing artifact {path}") from None


def report(artifacts, out=None) -> list[Path]:
    """Summaries of a run directory.

    ``overlap_matrix.csv``  method, then one column per method (overlap fraction)
    ``effective_rank.csv``  method, indices (space separated), effective_rank
    ``loss_curve.csv``      init, step, loss, lr (when distillation ran)
    ``summary.json``        equivalence error, selected experts, partition, final losses
    """
    artifacts = Path(artifacts)
    out = artifacts / "report" if out is None else Path(out)
    cfg = _load_artifact_json(artifacts / "config.json")
    chash = cfg["config_hash"]
    formats = cfg["config"].get("report_formats", list(REPORT_FORMATS))
    sels = _load_artifact_json(artifacts / "selections.json")["selections"]
    conv = _load_artifact_json(artifacts / "conversion_report.json")
    equiv = _load_artifact_json(artifacts / "equivalence.json")
    out.mkdir(parents=True, exist_ok=True)
    written = []

    names = list(sels)
    sets = {n: set(sels[n]["indices"]) for n in names}
    overlap = [[len(sets[a] & sets[b]) / len(sets[a]) for b in names] for a in names]
    curves = {}
    for init, fname in (("moe", "distill_curve.csv"), ("random", "distill_random_init.csv")):
        if (artifacts / fname).exists():
            curves[init] = read_csv(artifacts / fname)[2]

    if "csv" in formats:
        write_csv(out / "overlap_matrix.csv", ["method", *names],
                  [[a, *row] for a, row in zip(names, overlap)], chash)
        write_csv(out / "effective_rank.csv", ["method", "indices", "effective_rank"],
                  [[n, " ".join(map(str, sels[n]["indices"])), float(sels[n]["effective_rank"])] for n in names], chash)
        written += [out / "overlap_matrix.csv", out / "effective_rank.csv"]
        if curves:
            write_csv(out / "loss_curve.csv", ["init", "step", "loss", "lr"],
                      [[init, *row] for init, rows in curves.items() for row in rows], chash)
            written.append(out / "loss_curve.csv")
    if "json" in formats:
        summary = {
            "equivalence_error": equiv["max_relative_error"],
            "selected": conv["selected"], "partition": conv["partition"], "alpha": conv["alpha"],
            "methods": names, "overlap": overlap,
            "effective_rank": {n: sels[n]["effective_rank"] for n in names},
            "final_loss": {init: float(rows[-1][1]) for init, rows in curves.items() if rows},
        }
        _write_json(out / "summary.json", summary, chash)
        written.append(out / "summary.json")
    return written


# --- sweeps ----------------------------------------------------------------------

def expand_matrix(base: dict, matrix: dict) -> list[tuple[dict, dict]]:
    """Cartesian product of ``{dotted.key: [values...]}`` applied to ``base``."""
    keys = sorted(matrix)
    for k in keys:
        if not isinstance(matrix[k], list) or not matrix[k]:
            raise ValidationError(f"sweep axis {k!r} needs a non-empty list of values")
    combos = []
    for values in itertools.product(*(matrix[k] for k in keys)):
        cfg = base
        for k, v in zip(keys, values):
            cfg = set_path(cfg, k, v)
        combos.append((dict(zip(keys, values)), cfg))
    return combos


def sweep(base: dict, matrix: dict, root) -> list[dict]:
    """Run each configuration into ``root/<config hash>``; failures are recorded, not raised."""
    root = resolve_output(root)
    entries = []
    for overrides, data in expand_matrix(base, matrix):
        entry = {"overrides": overrides}
        try:
            cfg = PipelineConfig.from_dict(data)
            entry["config_hash"] = cfg.hash
            res = run_pipeline(cfg, root / cfg.hash[:16])
            entry.update(status="ok", output_dir=res.output_dir.name, equivalence_error=res.equivalence_error)
        except Moe2DenseError as exc:
            entry.update(status="error", exit_code=exc.exit_code, error=str(exc))
        entries.append(entry)
    root.mkdir(parents=True, exist_ok=True)
    (root / "sweep_index.json").write_text(json.dumps({"runs": entries}, indent=2, sort_keys=True) + "\n")
    return entries
