"""Command-line entry point: ``sageselect {synth,select,verify,experiment,bench}``.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 I/O or data error, 4 numerical non-convergence. Every run writes its
fully resolved flags to a JSON sidecar; ``--config SIDECAR`` replays it.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path


from . import data, pipeline, verify
from .errors import (
    BudgetError,
    ConfigError,
    ConvergenceError,
    DataError,
    FormatError,
    InputShapeError,
    ScaleGuardError,
    StreamError,
)
from .fd_sketch import sketch_matrix

log = logging.getLogger("sageselect")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_IO, EXIT_NUMERICS = 0, 1, 2, 3, 4


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _int_list(text: str) -> list[int]:
    return [int(float(x)) for x in text.split(",") if x.strip()]


def _str_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sageselect", description="Streaming gradient-agreement subset selection.")
    parser.add_argument("--config", type=Path, help="JSON sidecar from a previous run; its values become defaults")
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker cap for parallel experiment cells")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic gradients or a blob dataset")
    kind = p.add_mutually_exclusive_group(required=True)
    kind.add_argument("--blob", action="store_true", help="Gaussian-blob dataset plus its training gradients")
    kind.add_argument("--lowrank", action="store_true", help="low-rank-plus-noise gradient matrix")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--d", type=int, default=64, help="gradient dimension (lowrank)")
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--d-feat", type=int, default=10)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--separation", type=float, default=4.0)
    p.add_argument("--imbalance", type=float, default=None, help="geometric class ratio, e.g. 0.5")
    p.add_argument("--dtype", choices=["float32", "float64"], default="float64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("select", help="run SAGE on a gradient file")
    p.add_argument("--grads", type=Path, required=True)
    p.add_argument("--ell", type=int, default=16)
    p.add_argument("--fraction", type=float, default=0.1)
    p.add_argument("--class-balanced", action="store_true")
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(handler=cmd_select)

    p = sub.add_parser("verify", help="check the sketch bound and the agreement lemmas")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--grads", type=Path)
    src.add_argument("--suite", action="store_true", help="seeded randomized suite")
    p.add_argument("--ell", type=int, default=8)
    p.add_argument("--kmax", type=int, default=None, help="largest k for the bound (default ceil(ell/2))")
    p.add_argument("--fraction", type=float, default=0.1, help="selection budget for the lemma checks")
    p.add_argument("--cases", type=int, default=100)
    p.add_argument("--d", type=int, default=None, help="force the suite's dimension")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="verdict CSV")
    p.set_defaults(handler=cmd_verify)

    p = sub.add_parser("experiment", help="accuracy retention versus subset fraction")
    p.add_argument("--n", type=int, default=3000)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--d-feat", type=int, default=10)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--separation", type=float, default=4.0)
    p.add_argument("--imbalance", type=float, default=None)
    p.add_argument("--dataset-seed", type=int, default=29)
    p.add_argument("--fractions", type=_float_list, default=[0.05, 0.15, 0.25, 1.0])
    p.add_argument("--methods", type=_str_list, default=list(pipeline.METHODS))
    p.add_argument("--seeds", type=_int_list, default=[1, 2, 3])
    p.add_argument("--ell", type=int, default=16)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0, help="unused; experiment seeds come from --seeds")
    p.add_argument("--out", type=Path, required=True, help="per-run CSV; a .summary.csv is written next to it")
    p.set_defaults(handler=cmd_experiment)

    p = sub.add_parser("bench", help="time and memory of the sketch pass")
    p.add_argument("--n", type=_int_list, default=[1000, 100000])
    p.add_argument("--d", type=int, default=128)
    p.add_argument("--ell", type=int, default=16)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--no-trace", action="store_true", help="skip the tracemalloc measurement")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_bench)
    parser.subcommands = sub.choices
    return parser


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def resolved_config(args) -> dict:
    return {k: _jsonable(v) for k, v in vars(args).items() if k not in ("handler", "config")}


def _sidecar_path(out: Path) -> Path:
    if out.suffix and not out.is_dir():
        return out.with_name(out.name + ".config.json")
    return out / "config.json"


def write_sidecar(args) -> Path:
    path = _sidecar_path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(resolved_config(args), indent=2, sort_keys=True) + "\n")
    return path


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, _ = pre.parse_known_args(argv)
    if known.config is None:
        return parser.parse_args(argv)
    try:
        saved = json.loads(known.config.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        parser.exit(EXIT_IO, f"sageselect: cannot read config {known.config}: {exc}\n")
    command = saved.get("command")
    if command not in parser.subcommands:
        parser.exit(EXIT_CONFIG, f"sageselect: config {known.config} names no known subcommand\n")
    # Sidecar values become defaults; flags given now still win.
    for target in (parser, parser.subcommands[command]):
        for action in target._actions:
            if action.dest in saved:
                action.default = saved[action.dest]
                action.required = False
        for group in target._mutually_exclusive_groups:
            group.required = False
    argv = list(argv if argv is not None else sys.argv[1:])
    if command not in argv:
        argv = _insert_command(parser, argv, command)
    args = parser.parse_args(argv)
    if args.command != command:
        parser.exit(EXIT_CONFIG, f"sageselect: config was written by '{command}', not '{args.command}'\n")
    return args


def _insert_command(parser, argv, command):
    # Top-level options go first, then the subcommand, then its flags.
    takes_value = {o for a in parser._actions if a.nargs != 0 for o in a.option_strings}
    flags = {o for a in parser._actions for o in a.option_strings}
    head, rest, i = [], [], 0
    while i < len(argv):
        tok = argv[i]
        name = tok.split("=", 1)[0]
        if name in flags:
            head.append(tok)
            if name in takes_value and "=" not in tok and i + 1 < len(argv):
                head.append(argv[i + 1])
                i += 1
        else:
            rest.append(tok)
        i += 1
    return head + [command] + rest


# -- subcommands ----------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.lowrank:
        g = data.synth_lowrank(args.n, args.d, args.rank, args.noise, args.seed)
        args.out.parent.mkdir(parents=True, exist_ok=True)
        data.write_gradients(args.out, g, dtype=args.dtype)
        log.info("wrote %s (%d x %d)", args.out, *g.shape)
    else:
        ds = data.make_blobs(args.n, args.d_feat, args.classes, args.sigma, args.seed, args.imbalance, args.separation)
        args.out.mkdir(parents=True, exist_ok=True)
        ds.write_csv(args.out / "dataset.csv")
        grads, labels = data.training_gradients(ds, args.seed)
        data.write_gradients(args.out / "gradients.sagegrdm", grads, labels, dtype=args.dtype)
        log.info("wrote %s (n=%d, D=%d)", args.out, ds.n, grads.shape[1])
    write_sidecar(args)
    return EXIT_OK


def cmd_select(args) -> int:
    source = pipeline.FileSource(args.grads)
    config = pipeline.SageConfig(args.ell, args.fraction, args.class_balanced, args.seed, args.batch_size)
    report = pipeline.run_sage(source, config)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "indices.txt").write_text("".join(f"{i}\n" for i in report.selection.indices))
    report.scores.write_csv(args.out / "scores.csv")
    (args.out / "report.json").write_text(json.dumps(report.summary(), indent=2) + "\n")
    write_sidecar(args)
    if report.degenerate:
        print("warning: degenerate consensus direction; selection filled by index order", file=sys.stderr)
    return EXIT_OK


def _verify_matrix(g, labels, ell, kmax, fraction, tag=""):
    rows = []
    frozen = sketch_matrix(g, ell)
    sandwich = verify.check_psd_sandwich(g, frozen, ell, kmax)
    rows.extend((check, f"{tag}{param}", value, bound, ok) for check, param, value, bound, ok in sandwich.rows())
    report = pipeline.run_sage(pipeline.ArraySource(g, labels), pipeline.SageConfig(ell=ell, budget_fraction=fraction))
    naive = verify.naive_scores(g, report.sketch)
    lemma = verify.check_lemma1(report.scores, report.selection.indices, naive.z, naive.u)
    corollary = verify.check_corollary(report.scores, report.selection.indices, naive.z)
    for check in (lemma, corollary):
        if check.applicable:
            rows.extend((c, f"{tag}{param}", value, bound, ok) for c, param, value, bound, ok in check.rows())
        else:
            rows.append((f"{check.name}_not_applicable", tag, 0.0, 0.0, True))
    return rows


def cmd_verify(args) -> int:
    rows = []
    if args.suite:
        skipped = 0
        for i, case in enumerate(verify.suite_cases(args.cases, args.seed, args.d)):
            tag = f"case={i};n={case.n};d={case.d};ell={case.ell};{case.kind};"
            if case.d > verify.MAX_ORACLE_DIM or case.n > verify.MAX_ORACLE_ROWS:
                skipped += 1
                rows.append(("skip_scale_guard", tag, case.d, verify.MAX_ORACLE_DIM, True))
                continue
            rows.extend(_verify_matrix(case.matrix(), None, case.ell, args.kmax, args.fraction, tag))
        if skipped:
            print(f"skipped {skipped} case(s) beyond the oracle scale guard", file=sys.stderr)
    else:
        g, labels = data.read_gradients(args.grads)
        try:
            rows.extend(_verify_matrix(g, labels, args.ell, args.kmax, args.fraction))
        except ScaleGuardError as exc:
            rows.append(("skip_scale_guard", str(exc), g.shape[1], verify.MAX_ORACLE_DIM, True))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    verify.write_verdicts(args.out, rows)
    write_sidecar(args)
    failed = [r for r in rows if not r[4]]
    for check, param, value, bound, _ in failed:
        print(f"FAIL {check} {param}: value {value!r} vs bound {bound!r}", file=sys.stderr)
    return EXIT_OK if not failed else EXIT_FAIL


def cmd_experiment(args) -> int:
    if not args.methods:
        raise ConfigError("no methods given")
    ds = data.make_blobs(args.n, args.d_feat, args.classes, args.sigma, args.dataset_seed, args.imbalance, args.separation)
    settings = pipeline.ExperimentSettings(ell=args.ell, epochs=args.epochs, lr=args.lr)
    rows = pipeline.accuracy_retention_experiment(ds, args.fractions, args.methods, args.seeds, settings, workers=max(1, args.threads))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    pipeline.write_rows(args.out, rows, pipeline.EXPERIMENT_FIELDS)
    summary_path = args.out.with_name(args.out.stem + ".summary.csv")
    pipeline.write_rows(summary_path, pipeline.summarize(rows), pipeline.SUMMARY_FIELDS)
    write_sidecar(args)
    return EXIT_OK


def cmd_bench(args) -> int:
    rows = [pipeline.bench_phase1(n, args.d, args.ell, args.seed, trace=not args.no_trace, repeats=args.repeats) for n in args.n]
    args.out.parent.mkdir(parents=True, exist_ok=True)
    pipeline.write_rows(args.out, rows, pipeline.BENCH_FIELDS)
    write_sidecar(args)
    return EXIT_OK


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.handler(args)
    except (ConfigError, BudgetError, InputShapeError) as exc:
        print(f"sageselect: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConvergenceError as exc:
        print(f"sageselect: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICS
    except (FormatError, DataError, StreamError, OSError) as exc:
        print(f"sageselect: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
