"""Command-line interface.

Exit codes: 0 on success, 2 for bad input or configuration, 3 when a
numerical routine fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from adagran import cpd, datagen, icebreaker, io
from adagran import pipeline as pl
from adagran.sparse_tensor import mode3_product
from adagran.utility import UtilityKind

log = logging.getLogger("adagran")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, pl.StageError):
        exc = exc.cause
    if isinstance(exc, ArithmeticError):
        return EXIT_NUMERIC
    return EXIT_INPUT


def _print_json(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


# ---------------------------------------------------------------- config


def _run_config(args, method: str) -> pl.RunConfig:
    base = io.load_json(args.config) if args.config else {}
    if args.input is not None:
        base["input"] = args.input
    base["method"] = method
    if args.seed is not None:
        base["seed"] = args.seed
    base.setdefault("seed", 0)
    ucfg = dict(base.get("utility", {}))
    for flag, key in (("threshold", "threshold"), ("energy_fraction", "energy_fraction"),
                      ("holdout", "holdout_fraction")):
        if getattr(args, flag, None) is not None:
            ucfg[key] = getattr(args, flag)
    for flag, key in (("sgd_rank", "rank"), ("sgd_lr", "learning_rate"),
                      ("sgd_reg", "regularization"), ("sgd_epochs", "epochs")):
        if getattr(args, flag, None) is not None:
            ucfg.setdefault("sgd", {})[key] = getattr(args, flag)
    base["utility"] = ucfg
    qcfg = dict(base.get("quality", {}))
    if args.r_max is not None:
        qcfg["R_max"] = args.r_max
    if args.als_restarts is not None:
        qcfg.setdefault("als", {})["n_restarts"] = args.als_restarts
    if args.rank_policy is not None:
        qcfg["policy"] = args.rank_policy
    base["quality"] = qcfg
    ecfg = dict(base.get("eval", {}))
    if args.labels is not None:
        ecfg["labels"] = args.labels
    if args.mode is not None:
        ecfg["mode"] = args.mode
    base["eval"] = ecfg
    for key in ("out_tensor", "out_map", "report"):
        if getattr(args, key, None) is not None:
            base[key] = getattr(args, key)
    if base.get("input") is None:
        raise ValueError("no input tensor given (--input or config 'input')")
    return pl.RunConfig.from_dict(base)


# ---------------------------------------------------------------- commands


def cmd_ingest(args) -> int:
    spec = pl.IngestSpec(
        mode1_col=args.mode1_col,
        mode2_col=args.mode2_col,
        time_col=args.time_col,
        value_col=args.value_col,
        time_format=args.time_format,
        bin_seconds=args.bin_seconds,
        reject_cap=args.reject_cap,
    )
    dictionaries = None
    if args.dictionaries and Path(args.dictionaries).exists():
        dictionaries = io.load_json(args.dictionaries)
    with open(args.csv, newline="") as fh:
        res = pl.ingest(fh, spec, dictionaries)
    if args.rejects:
        with open(args.rejects, "w") as fh:
            for lineno, reason, raw in res.rejects:
                fh.write(f"{lineno}\t{reason}\t{raw}\n")
    elif res.rejects:
        for lineno, reason, _ in res.rejects:
            log.warning("line %d rejected: %s", lineno, reason)
    io.write_coo(res.tensor, args.out)
    if args.dictionaries:
        io.dump_json({**res.dictionaries(), "ingest": spec.to_dict()}, args.dictionaries)
    print(f"{args.out}: shape {res.tensor.shape}, nnz {res.tensor.nnz}, "
          f"{len(res.rejects)} of {res.n_rows} rows rejected")
    return EXIT_OK


def _aggregate_cmd(args, method: str) -> int:
    cfg = _run_config(args, method)
    if args.evaluate:
        report = pl.pipeline(cfg)
    else:
        try:
            t = io.read_coo(cfg.input)
        except Exception as exc:
            raise pl.StageError("load", exc) from exc
        try:
            Y, W, report = pl.aggregate(t, cfg.method, cfg.utility)
        except Exception as exc:
            raise pl.StageError("aggregate", exc) from exc
        report["config"] = cfg.to_dict()
        if cfg.out_tensor:
            io.write_coo(Y, cfg.out_tensor)
        if cfg.out_map:
            io.write_map(W, cfg.out_map)
        if cfg.report:
            io.dump_json(report, cfg.report)
    if not cfg.report:
        _print_json(report)
    else:
        print(f"K={report['K']} K*={report['K_star']} -> {cfg.report}")
    return EXIT_OK


def cmd_run(args) -> int:
    return _aggregate_cmd(args, UtilityKind.parse(args.utility).value)


def cmd_baseline(args) -> int:
    return _aggregate_cmd(args, f"fixed-{args.window}")


def cmd_oracle(args) -> int:
    t = io.read_coo(args.input)
    qcfg = cpd.QualityConfig(R_max=args.r_max, als=cpd.AlsConfig(seed=args.seed, n_restarts=args.als_restarts))

    def quality(Y, _w):
        return cpd.quality_search(Y, qcfg).corcondia

    res = icebreaker.optimal_exhaustive(t, quality, K_cap=args.max_k)
    report = {
        "schema_version": pl.SCHEMA_VERSION,
        "K": res.map.K,
        "K_star": res.map.K_star,
        "boundaries": [[s + 1, e + 1] for s, e in res.map.boundaries],
        "score": res.score,
        "n_evaluated": res.n_evaluated,
        "n_failures": len(res.failures),
        "quality": qcfg.to_dict(),
    }
    if args.out_map:
        io.write_map(res.map, args.out_map)
    if args.report:
        io.dump_json(report, args.report)
    else:
        _print_json(report)
    return EXIT_OK


def cmd_generate(args) -> int:
    if args.spec:
        spec = datagen.SyntheticSpec.from_dict(io.load_json(args.spec))
    else:
        spec = datagen.SyntheticSpec(
            I=args.I, J=args.J, n_factors=args.factors, n_epochs=args.epochs,
            base_window=args.window, scenario=datagen.Scenario(args.scenario),
            window_jitter=tuple(args.jitter), density=args.density, noise=args.noise,
            activation_prob=args.activation_prob, seed=args.seed,
        )
    if args.edges:
        labels = io.read_labels(args.labels)
        t, truth = datagen.semi_synthetic(io.read_edges(args.edges), labels, spec, explode=args.explode)
    else:
        t, truth = datagen.generate(spec)
        if args.explode:
            exploded, _ = datagen.explode_nonzeros(t)
            truth = datagen.exploded_boundaries(t, truth)
            t = exploded
    io.write_coo(t, args.out)
    prefix = Path(args.out).with_suffix("")
    io.write_labels(truth.labels_mode1, f"{prefix}.mode1.labels")
    io.write_labels(truth.labels_mode2, f"{prefix}.mode2.labels")
    io.dump_json({"spec": spec.to_dict(), "explode": args.explode, **truth.to_dict()},
                 args.truth or f"{prefix}.truth.json")
    print(f"{args.out}: shape {t.shape}, nnz {t.nnz}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    Y = io.read_coo(args.input)
    W = None
    if args.map:
        W = io.read_map(args.map)
        if W.K_star != Y.shape[2]:
            if W.K != Y.shape[2]:
                raise ValueError(f"map covers K={W.K}, tensor has {Y.shape[2]} slices")
            Y = mode3_product(Y, W)
    qcfg = cpd.QualityConfig(
        R_max=args.r_max or 10,
        als=cpd.AlsConfig(seed=args.seed or 0, n_restarts=args.als_restarts or 1),
        policy=args.rank_policy or "consistent",
    )
    ecfg = pl.EvalConfig(labels=args.labels, mode=args.mode or 1)
    labels = io.read_labels(args.labels, Y.shape[ecfg.mode - 1]) if args.labels else None
    report = {"schema_version": pl.SCHEMA_VERSION,
              **pl.evaluate_tensor(Y, qcfg, ecfg, labels, W, seed=args.seed or 0)}
    if args.report:
        io.dump_json(report, args.report)
    else:
        _print_json(report)
    return EXIT_OK


def _sweep_one(cfg: pl.RunConfig) -> dict:
    return pl.pipeline(cfg)


def cmd_sweep(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    methods = pl.sweep_methods(tuple(args.windows))
    cfgs = []
    for m in methods:
        cfg = _run_config(args, m)
        cfgs.append(replace(cfg, report=str(out / f"{m}.json")))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            reports = list(pool.map(_sweep_one, cfgs))
    else:
        reports = [_sweep_one(c) for c in cfgs]
    summary = []
    for m, r in zip(methods, reports):
        row = {"method": m, "K_star": r["K_star"], "aggregation_ratio": r["eval"]["aggregation_ratio"],
               "rank": r["eval"]["rank"], "corcondia": r["eval"]["corcondia"]}
        if "nmi" in r["eval"]:
            row["nmi"] = r["eval"]["nmi"]
        summary.append(row)
    io.dump_json(summary, out / "summary.json")
    for row in summary:
        nmi = f" nmi={row['nmi']:.3f}" if "nmi" in row else ""
        print(f"{row['method']:>12}  K*={row['K_star']:<6} rank={row['rank']} "
              f"corcondia={row['corcondia']:.1f}{nmi}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", help="input tensor (.coo)")
    p.add_argument("--config", help="RunConfig JSON; flags override its fields")
    p.add_argument("--seed", type=int, help="seed for every stochastic step (default 0)")
    p.add_argument("--labels", help="ground-truth labels file 'entity_id label'")
    p.add_argument("--mode", type=int, choices=(1, 2), help="mode the labels refer to")
    p.add_argument("--r-max", type=int, help="largest CP rank tried")
    p.add_argument("--als-restarts", type=int, help="CP-ALS random restarts per rank")
    p.add_argument("--rank-policy", choices=("consistent", "argmax"))


def _add_utility_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threshold", type=float, help="relative-change cutoff")
    p.add_argument("--energy-fraction", type=float, help="energy share for the rank utility")
    p.add_argument("--holdout", type=float, help="hidden share for the missing-value utility")
    p.add_argument("--sgd-rank", type=int)
    p.add_argument("--sgd-lr", type=float)
    p.add_argument("--sgd-reg", type=float)
    p.add_argument("--sgd-epochs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adagran", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="event CSV -> tensor")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True, help="output tensor (.coo)")
    p.add_argument("--mode1-col", required=True)
    p.add_argument("--mode2-col", required=True)
    p.add_argument("--time-col", required=True)
    p.add_argument("--value-col")
    p.add_argument("--time-format", choices=("epoch", "iso8601"), default="epoch")
    p.add_argument("--bin-seconds", type=float, default=3600.0)
    p.add_argument("--reject-cap", type=float, default=0.01)
    p.add_argument("--dictionaries", help="JSON dictionaries; reused when present, then rewritten")
    p.add_argument("--rejects", help="write rejected rows here")
    p.set_defaults(func=cmd_ingest)

    for name, func, helptext in (
        ("run", cmd_run, "greedy aggregation"),
        ("baseline", cmd_baseline, "fixed-window aggregation"),
    ):
        p = sub.add_parser(name, help=helptext)
        _add_run_options(p)
        if name == "run":
            p.add_argument("--utility", required=True, choices=[k.value for k in UtilityKind])
            _add_utility_options(p)
        else:
            p.add_argument("--window", type=int, required=True)
        p.add_argument("--out-tensor")
        p.add_argument("--out-map")
        p.add_argument("--report")
        p.add_argument("--evaluate", action="store_true",
                       help="also run the rank search and evaluation metrics")
        p.set_defaults(func=func)

    p = sub.add_parser("oracle", help="exhaustive search over all aggregations (small K)")
    p.add_argument("--input", required=True)
    p.add_argument("--max-k", type=int, default=12)
    p.add_argument("--r-max", type=int, default=3)
    p.add_argument("--als-restarts", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-map")
    p.add_argument("--report")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("generate", help="synthetic tensor with planted communities")
    p.add_argument("--out", required=True)
    p.add_argument("--truth", help="ground truth JSON (default <out>.truth.json)")
    p.add_argument("--spec", help="SyntheticSpec JSON; replaces the individual knobs")
    p.add_argument("--scenario", choices=[s.value for s in datagen.Scenario], default="fixed")
    p.add_argument("--I", type=int, default=30)
    p.add_argument("--J", type=int, default=30)
    p.add_argument("--factors", type=int, default=3)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--window", type=int, default=10)
    p.add_argument("--jitter", type=int, nargs=2, default=(5, 20), metavar=("LO", "HI"))
    p.add_argument("--density", type=float, default=0.05)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--activation-prob", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--explode", action="store_true", help="one nonzero per slice")
    p.add_argument("--edges", help="graph edge list; builds a semi-synthetic tensor")
    p.add_argument("--labels", help="vertex labels for --edges")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="rank search and metrics on a tensor")
    p.add_argument("--input", required=True)
    p.add_argument("--map", help="aggregation map; applied if the tensor is not yet aggregated")
    p.add_argument("--labels")
    p.add_argument("--mode", type=int, choices=(1, 2))
    p.add_argument("--r-max", type=int)
    p.add_argument("--als-restarts", type=int)
    p.add_argument("--rank-policy", choices=("consistent", "argmax"))
    p.add_argument("--seed", type=int)
    p.add_argument("--report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="every utility kind plus the fixed baselines")
    _add_run_options(p)
    _add_utility_options(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--windows", type=int, nargs="+", default=list(pl.BASELINE_WINDOWS))
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "generate" and args.edges and not args.labels:
        print("error: --edges needs --labels", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except (pl.StageError, ValueError, IndexError, KeyError, OSError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
