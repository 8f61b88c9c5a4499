"""Command-line entry point: ``moe2dense <subcommand> ...``.

Exit codes: 0 success, 2 validation error, 3 numeric failure, 4 theorem-check
failure.  Relative output paths are resolved under ``$MOE2DENSE_OUT``.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import calibration, conversion, distill, grouping, io, pipeline, scoring, synthgen, theory
from .errors import Moe2DenseError, NumericError, TheoremCheckError, ValidationError
from .model import DenseFfn, MoeLayer

GEN_KINDS = (*pipeline.MODEL_KINDS, "counterexample", "planted")

ENUMS = {
    "scoring_method": [m.value for m in scoring.ScoreMethod],
    "selection_algo": [m.value for m in scoring.SelectMethod],
    "method (named)": list(conversion.METHOD_NAMES),
    "grouping_strategy": [m.value for m in grouping.GroupStrategy],
    "dissimilarity_source": [m.value for m in grouping.DissimilaritySource],
    "scaling_mode": [m.value for m in conversion.ScalingMode],
    "loss": [m.value for m in distill.LossType],
    "model.generate.kind": list(pipeline.MODEL_KINDS),
    "gen --kind": list(GEN_KINDS),
    "report_formats": list(pipeline.REPORT_FORMATS),
    "theorem": list(theory.VERIFIERS),
}


def _enum_epilog() -> str:
    lines = ["accepted enum values:"]
    lines += [f"  {k}: {', '.join(v)}" for k, v in ENUMS.items()]
    lines += ["", "exit codes: 0 ok, 2 validation, 3 numeric, 4 theorem check failed",
              f"relative output paths are resolved under ${pipeline.OUTPUT_ROOT_ENV}"]
    return "\n".join(lines)


def _parse_set(items) -> list[tuple[str, object]]:
    out = []
    for item in items or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        out.append((key, value))
    return out


def _apply_sets(data: dict, items) -> dict:
    for key, value in _parse_set(items):
        data = pipeline.set_path(data, key, value)
    return data


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ValidationError(f"{path} not found") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path} is not valid JSON ({exc})") from None


def _emit(obj, out) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        path = pipeline.resolve_output(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)


def _load_moe(path) -> MoeLayer:
    model = io.load_model(path)
    if not isinstance(model, MoeLayer):
        raise ValidationError(f"{path} holds a dense model, expected an MoE layer")
    return model


def _load_dense(path) -> DenseFfn:
    model = io.load_model(path)
    if not isinstance(model, DenseFfn):
        raise ValidationError(f"{path} holds an MoE layer, expected a dense model")
    return model


# --- subcommands -------------------------------------------------------------------

def _write_sidecar(model_dir: Path, truth: dict) -> None:
    (model_dir / "ground_truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n")


def cmd_gen(args) -> int:
    out = pipeline.resolve_output(args.out)
    renorm = not args.no_renormalize
    if args.kind == "counterexample":
        table = synthgen.gen_redundancy_counterexample(args.K)
        truth = {"generator": "counterexample", "K": args.K, "identical_block": list(range(args.K)),
                 "lambda_reg": (1.0 / (2 * args.K - 1)) ** 1.5}
        synthgen.save_table(table, out, truth)
        _emit({"table": str(out), "E": table.E, "n_points": table.n_points}, None)
        return 0
    if args.kind == "planted":
        table, groups = synthgen.gen_planted_clusters(args.groups, args.group_size, args.delta_in, args.delta_out,
                                                      args.dim, args.seed)
        truth = {"generator": "planted", "seed": args.seed, "groups": groups,
                 "delta_in": args.delta_in, "delta_out": args.delta_out}
        synthgen.save_table(table, out, truth)
        _emit({"table": str(out), "E": table.E, "n_points": table.n_points}, None)
        return 0
    if args.kind == "random_moe":
        layer = synthgen.gen_random_moe(args.seed, args.d, args.d_expert, args.E, args.k, renorm, args.n_shared)
        truth = {"generator": "random_moe", "seed": args.seed}
    else:
        layer, labels = synthgen.gen_redundant_pool(args.E, args.groups, args.noise, args.seed, d=args.d,
                                                    d_expert=args.d_expert, k=args.k, renormalize=renorm)
        truth = {"generator": "redundant_pool", "seed": args.seed, "noise": args.noise,
                 "duplicate_labels": [int(x) for x in labels]}
    io.save_model(layer, out, extra={"generator": truth["generator"], "seed": args.seed})
    _write_sidecar(out, truth)
    _emit({"model": str(out), "E": layer.E, "k": layer.k, "d": layer.d, "d_expert": layer.d_expert}, None)
    return 0


def cmd_calibrate(args) -> int:
    out = pipeline.resolve_output(args.out)
    if args.merge:
        stats = calibration.load_stats(args.merge[0])
        for p in args.merge[1:]:
            stats = calibration.merge_stats(stats, calibration.load_stats(p))
    elif args.table:
        table, _ = synthgen.load_table(args.table)
        points = None
        if args.points is not None:
            if args.seed is None:
                raise ValidationError("sampling table points needs --seed")
            points = np.random.default_rng(args.seed).integers(0, table.n_points, size=args.points)
        stats = calibration.collect_table(table, points, chunk_size=args.chunk_size)
    else:
        if args.model is None or args.seed is None:
            raise ValidationError("calibrate needs --model and --seed (or --table, or --merge)")
        layer = _load_moe(args.model)
        tokens = synthgen.gaussian_tokens(args.seed, args.tokens, layer.d)
        stats = calibration.collect(layer, tokens, args.chunk_size)
    calibration.save_stats(stats, out)
    _emit({"stats": str(out), "n": stats.n, "E": stats.E}, None)
    return 0


def cmd_score(args) -> int:
    stats = calibration.load_stats(args.stats)
    methods = list(scoring.ScoreMethod) if args.method == "all" else [scoring.ScoreMethod(args.method)]
    _emit({m.value: scoring.score(stats, m).values.tolist() for m in methods}, args.out)
    return 0


def cmd_select(args) -> int:
    stats = calibration.load_stats(args.stats)
    method = args.method
    if args.base:
        method = f"do_{args.base}"
    kw = {"K": args.K}
    algo = {"greedy": "greedy_do", "brute": "brute_do"}.get(args.algo, args.algo)
    if algo:
        if not method.startswith("do_"):
            raise ValidationError(f"--algo applies to do_* methods, not {method}")
        kw["selection_algo"] = algo
    cfg = conversion.method_config(method, **kw)
    if args.lambda_reg is not None and cfg.selection_algo is not scoring.SelectMethod.TOPK:
        kernel = scoring.build_kernel(scoring.score(stats, cfg.base_for_kernel), scoring.mean_gram(stats), args.K,
                                      lambda_override=args.lambda_reg)
        solve = scoring.greedy_do_select if cfg.selection_algo is scoring.SelectMethod.GREEDY_DO \
            else scoring.brute_force_select
        sel = solve(kernel, args.K)
    else:
        sel, kernel = conversion.select_experts(stats, cfg)
    if kernel is None:
        kernel = scoring.build_kernel(scoring.score(stats, "acp"), scoring.mean_gram(stats), args.K)
    body = {"method_name": method, **sel.to_dict(), "lambda_reg": kernel.lambda_reg,
            "kernel_base": kernel.base_method.value,
            "effective_rank": scoring.effective_rank(kernel, sel.indices),
            "scores": scoring.score(stats, cfg.scoring_method).values.tolist()}
    _emit(body, args.out)
    return 0


def _ground_truth(args) -> dict:
    if args.truth:
        path = Path(args.truth)
        data = _read_json(path)
        return data.get("ground_truth", data)
    if args.model and (Path(args.model) / "ground_truth.json").exists():
        return _read_json(Path(args.model) / "ground_truth.json")
    return {}


def _truth_groups(truth: dict, selected) -> list[list[int]] | None:
    """Planted groups, or duplicate labels restricted to the selected experts."""
    if "groups" in truth:
        return truth["groups"]
    if "duplicate_labels" in truth:
        labels = truth["duplicate_labels"]
        by_label: dict[int, list[int]] = {}
        for e in selected:
            by_label.setdefault(labels[e], []).append(int(e))
        return list(by_label.values())
    return None


def cmd_group(args) -> int:
    stats = calibration.load_stats(args.stats)
    if args.selection:
        selected = _read_json(args.selection)["indices"]
    elif args.experts:
        selected = [int(x) for x in args.experts.split(",")]
    else:
        selected = list(range(stats.E))
    layer = _load_moe(args.model) if args.model else None
    k = args.k if args.k is not None else (layer.k if layer is not None else None)
    if k is None:
        raise ValidationError("group needs --k or --model")
    scores = scoring.score(stats, args.score_method).values
    part = grouping.group(args.strategy, selected, scores, k, layer, stats)
    body = part.to_dict()
    truth = _truth_groups(_ground_truth(args), selected)
    if truth is not None:
        body["ground_truth"] = truth
        body["matches_ground_truth"] = part.as_sets() == {frozenset(g) for g in truth}
    _emit(body, args.out)
    return 0


def _conversion_data(args) -> dict:
    data = _read_json(args.config) if args.config else {}
    return _apply_sets(data, args.set)


def cmd_convert(args) -> int:
    cfg = conversion.ConversionConfig.from_dict(_conversion_data(args))
    layer = _load_moe(args.model)
    cfg.validate_for(layer)
    stats = calibration.load_stats(args.stats)
    dense, rep = conversion.convert_layer(layer, stats, cfg)
    out = pipeline.resolve_output(args.out)
    chash = pipeline.config_hash(cfg.to_dict())
    io.save_model(dense, out, extra={"config_hash": chash})
    (out / "conversion_report.json").write_text(
        json.dumps({"config_hash": chash, **rep.to_dict()}, indent=2, sort_keys=True, allow_nan=False) + "\n")
    _emit({"dense": str(out), "d_dense": dense.d_dense, "equivalence_error": rep.equivalence_error}, None)
    return 0


def cmd_check(args) -> int:
    layer = _load_moe(args.model)
    dense = _load_dense(args.dense)
    rep = _read_json(args.report)
    scores = np.asarray(rep["scores"], dtype=np.float64)
    groups = [conversion.merge_group([layer.experts[e] for e in g], [scores[e] for e in g])
              for g in rep["partition"]["groups"]]
    probes = np.random.default_rng(args.seed).standard_normal((args.probes, layer.d))
    err = conversion.check_concat_equivalence(dense, groups, rep["alpha"], probes, layer.shared_experts)
    ok = err <= args.tol
    _emit({"max_relative_error": err, "tolerance": args.tol, "passed": ok}, args.out)
    if not ok:
        raise NumericError(f"equivalence error {err:.3e} exceeds {args.tol:g}")
    return 0


def cmd_distill(args) -> int:
    teacher = _load_moe(args.teacher)
    data = _read_json(args.config) if args.config else {}
    cfg = distill.DistillConfig.from_dict(_apply_sets(data, args.set))
    if args.student == "random":
        width = args.random_width or teacher.k * teacher.d_expert
        student = distill.random_dense(cfg.seed, teacher.d, width)
    else:
        student = _load_dense(args.student)
    head = distill.gen_logit_head(args.head_seed, args.vocab, teacher.d, args.head_scale)
    result = distill.train(student, teacher, head, cfg)
    out = pipeline.resolve_output(args.out)
    out.mkdir(parents=True, exist_ok=True)
    chash = pipeline.config_hash({**cfg.to_dict(), "vocab": args.vocab, "head_seed": args.head_seed,
                                  "head_scale": args.head_scale, "student": args.student})
    pipeline.write_csv(out / "loss_curve.csv", ("step", "loss", "lr"), result.curve_rows(), chash)
    io.save_model(result.student, out / "student", extra={"config_hash": chash})
    _emit({"output_dir": str(out), "first_loss": result.losses[0], "final_loss": result.losses[-1]}, None)
    return 0


def cmd_verify_theory(args) -> int:
    if args.check:
        data = _read_json(args.check)
        reports = [theory.TheoremReport.from_dict(r) for r in data["reports"]]
    else:
        reports = theory.verify_all(args.only)
    for r in reports:
        flag = "PASS" if r.passed else "FAIL"
        print(f"{flag} {r.theorem_id}: {r.instance} (slack {r.slack:.3g})", file=sys.stderr)
    if args.out:
        _emit({"reports": [r.to_dict() for r in reports]}, args.out)
    failed = [r for r in reports if not r.passed]
    if failed:
        raise TheoremCheckError(f"{len(failed)} theorem report(s) failed: "
                                + ", ".join(sorted({r.theorem_id for r in failed})))
    return 0


def cmd_run(args) -> int:
    cfg = pipeline.PipelineConfig.from_dict(_apply_sets(_read_json(args.config), args.set))
    res = pipeline.run_pipeline(cfg, args.out)
    _emit({"output_dir": str(res.output_dir), "config_hash": res.config_hash, "files": res.files,
           "equivalence_error": res.equivalence_error}, None)
    return 0


def cmd_sweep(args) -> int:
    entries = pipeline.sweep(_read_json(args.config), _read_json(args.matrix), args.out)
    _emit({"runs": len(entries), "failed": sum(e["status"] != "ok" for e in entries)}, None)
    return 0 if all(e["status"] == "ok" for e in entries) else max(e.get("exit_code", 1) for e in entries)


def cmd_report(args) -> int:
    written = pipeline.report(args.artifacts, pipeline.resolve_output(args.out) if args.out else None)
    _emit({"written": [str(p) for p in written]}, None)
    return 0


# --- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="moe2dense", description="Convert an MoE FFN layer into a dense FFN.",
                                     epilog=_enum_epilog(), formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_, epilog=_enum_epilog(), formatter_class=fmt)
        p.set_defaults(func=func)
        return p

    p = add("gen", cmd_gen, "generate a synthetic MoE layer")
    p.add_argument("--kind", choices=GEN_KINDS, default="random_moe")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--d-expert", type=int, default=8)
    p.add_argument("--E", type=int, default=16)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--n-shared", type=int, default=0)
    p.add_argument("--no-renormalize", action="store_true", help="do not renormalize the top-k probabilities")
    p.add_argument("--groups", type=int, default=4, help="redundant_pool / planted: number of groups")
    p.add_argument("--noise", type=float, default=0.05, help="redundant_pool: perturbation scale")
    p.add_argument("--K", type=int, default=4, help="counterexample: subset size")
    p.add_argument("--group-size", type=int, default=4, help="planted: experts per group")
    p.add_argument("--delta-in", type=float, default=0.1, help="planted: within-group dissimilarity")
    p.add_argument("--delta-out", type=float, default=0.8, help="planted: cross-group dissimilarity")
    p.add_argument("--dim", type=int, default=24, help="planted: number of points")
    p.add_argument("--out", required=True, help="model directory (table file for counterexample/planted)")

    p = add("calibrate", cmd_calibrate, "collect calibration statistics (or merge saved ones)")
    p.add_argument("--model")
    p.add_argument("--tokens", type=int, default=2048)
    p.add_argument("--seed", type=int)
    p.add_argument("--chunk-size", type=int, default=calibration.DEFAULT_CHUNK)
    p.add_argument("--table", help="expert output table written by 'gen'")
    p.add_argument("--points", type=int, help="table: sample this many points (default: every point once)")
    p.add_argument("--merge", nargs="+", metavar="STATS")
    p.add_argument("--out", required=True)

    p = add("score", cmd_score, "importance scores from calibration statistics")
    p.add_argument("--stats", required=True)
    p.add_argument("--method", choices=[*ENUMS["scoring_method"], "all"], default="all")
    p.add_argument("--out")

    p = add("select", cmd_select, "select K experts with a named method")
    p.add_argument("--stats", "--kernel-from", dest="stats", required=True)
    p.add_argument("--method", choices=conversion.METHOD_NAMES, default="do_acp")
    p.add_argument("--base", choices=["cp", "acp"], help="shorthand for --method do_<base>")
    p.add_argument("--K", type=int, required=True)
    p.add_argument("--algo", choices=["greedy", "brute", "greedy_do", "brute_do"], help="solver for do_* methods")
    p.add_argument("--lambda-reg", type=float, help="override the kernel regularizer for do_* methods")
    p.add_argument("--out")

    p = add("group", cmd_group, "partition selected experts into k groups")
    p.add_argument("--stats", required=True)
    p.add_argument("--selection", help="JSON written by 'select'")
    p.add_argument("--experts", help="comma-separated expert ids")
    p.add_argument("--strategy", choices=ENUMS["grouping_strategy"], default="rr")
    p.add_argument("--score-method", choices=ENUMS["scoring_method"], default="acp")
    p.add_argument("--model", help="needed by wc, rc and ab; its ground_truth.json is compared when present")
    p.add_argument("--truth", help="ground truth JSON (or a table file from 'gen')")
    p.add_argument("--k", type=int)
    p.add_argument("--out")

    p = add("convert", cmd_convert, "convert an MoE layer into a dense FFN")
    p.add_argument("--model", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--config", help="ConversionConfig JSON")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    p.add_argument("--out", required=True)

    p = add("check", cmd_check, "verify concatenation equivalence of a converted model")
    p.add_argument("--model", required=True)
    p.add_argument("--dense", required=True)
    p.add_argument("--report", required=True, help="conversion_report.json")
    p.add_argument("--probes", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=pipeline.EQUIVALENCE_TOL)
    p.add_argument("--out")

    p = add("distill", cmd_distill, "distill a dense student from the MoE teacher")
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", required=True, help="dense model directory, or 'random'")
    p.add_argument("--random-width", type=int, help="width of a random student (default k * d_expert)")
    p.add_argument("--config", help="DistillConfig JSON")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--vocab", type=int, default=32)
    p.add_argument("--head-seed", type=int, required=True)
    p.add_argument("--head-scale", type=float, default=4.0)
    p.add_argument("--out", required=True, help="directory for loss_curve.csv and the trained student")

    p = add("verify-theory", cmd_verify_theory, "run the executable theorem checks")
    p.add_argument("--only", nargs="+", choices=list(theory.VERIFIERS))
    p.add_argument("--check", help="re-validate a saved report file instead of recomputing")
    p.add_argument("--out")

    p = add("run", cmd_run, "run the full pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", help="output directory (default: config output_dir)")

    p = add("sweep", cmd_sweep, "run a config matrix")
    p.add_argument("--config", required=True, help="base pipeline config")
    p.add_argument("--matrix", required=True, help='JSON {"dotted.key": [values, ...]}')
    p.add_argument("--out", required=True, help="sweep root directory")

    p = add("report", cmd_report, "CSV/JSON summaries of a run directory")
    p.add_argument("--artifacts", required=True)
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Moe2DenseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
