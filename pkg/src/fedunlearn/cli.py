"""Command-line entry point: ``fedunlearn <prep|train|attack|eval|sweep|report>``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import experiment as ex
from . import metrics
from .attacks import attack_store
from .config import OUTPUT_ENV, load_config
from .errors import FedUnlearnError

log = logging.getLogger("fedunlearn")


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("-c", "--config", help="YAML or JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config key (repeatable)")


def _config(args):
    return load_config(args.config, args.overrides)


def cmd_prep(args) -> int:
    cfg = _config(args)
    ds = ex.load_dataset(cfg, cfg.run.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(ds.to_json(), encoding="utf-8")
    print(json.dumps({"users": len(ds.users), "items": len(ds.items), "train_interactions": len(ds.interactions),
                      "holdout": len(ds.test_holdout), "path": str(out)}))
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    res = ex.run_experiment(cfg, args.out)
    print(json.dumps({"run_dir": str(res.path), **res.report.to_dict()}, sort_keys=True))
    return 0


def _seed_dirs(run: Path) -> list[Path]:
    dirs = sorted(p for p in run.glob("seed*") if p.is_dir())
    if not dirs:
        raise FedUnlearnError(f"no saved seeds under {run}")
    return dirs


def _run_config(run: Path, overrides):
    return load_config(run / "config.yaml", overrides)


def cmd_attack(args) -> int:
    run = Path(args.run_dir)
    cfg = _run_config(run, args.overrides)
    out = []
    for d in _seed_dirs(run):
        seed = int(d.name[len("seed"):])
        sim, idx = ex.load_run(cfg, d)
        entry = {"seed": seed}
        if args.method in ("embedding", "all"):
            entry["f1"], entry["bacc"] = ex.attribute_attack(cfg, sim.embeddings(), idx.labels, idx.n_classes, seed)
        if args.method in ("dlg", "idlg", "all"):
            if cfg.adversary.head == "none":
                entry["grad_attack_acc"] = None
            else:
                method = "dlg" if args.method == "all" else args.method
                entry["grad_attack_acc"] = attack_store(sim.store, ex.dlg_config(cfg, seed), method, seed)["accuracy"]
        out.append(entry)
    print(json.dumps(out, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    run = Path(args.run_dir)
    cfg = _run_config(run, args.overrides)
    out = []
    for d in _seed_dirs(run):
        seed = int(d.name[len("seed"):])
        sim, idx = ex.load_run(cfg, d)
        ranks = ex.rank_users(sim, idx, cfg.run.eval_candidates, seed)
        row = {"seed": seed}
        row.update({f"hr{k}": metrics.hr_at_k(ranks, k) for k in ex.KS})
        row.update({f"ndcg{k}": metrics.ndcg_at_k(ranks, k) for k in ex.KS})
        out.append(row)
    print(json.dumps(out, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    if args.kind == "lambda":
        rows = ex.sweep_lambda(cfg, args.values or [0.0, 1.0, 4.0], args.out)
    else:
        rows = []
        for mode in args.values or ["binary", "always"]:
            c = cfg.with_overrides([f"sut.mode={mode}"])
            res = ex.run_experiment(c, Path(args.out or c.output_dir()) / c.run_id(), save=False)
            rows.append({"sut_mode": mode, "ndcg10": res.report.ndcg[10], "bacc": res.report.bacc,
                         "skip_rate_mean": res.report.skip_rate_mean, "run_id": c.run_id()})
    _emit(rows, args.format)
    return 0


def cmd_report(args) -> int:
    rows = ex.merge_reports(args.csv)
    if args.out:
        ex.write_csv(args.out, rows)
    else:
        _emit(rows, args.format)
    return 0


def _emit(rows, fmt: str) -> None:
    if fmt == "json":
        print(json.dumps(rows, sort_keys=True, indent=1))
        return
    if not rows:
        return
    writer = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedunlearn",
        description="Attribute unlearning in user-level federated recommendation.",
        epilog=f"Outputs go to run.output_dir, overridden by ${OUTPUT_ENV}.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", help="ingest and preprocess a dataset to JSON")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("train", help="federated training plus evaluation; writes a run directory")
    _add_config_args(p)
    p.add_argument("--out", help="run directory (default <output>/<run_id>)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="replay attacks on a saved run")
    p.add_argument("run_dir")
    p.add_argument("--method", choices=["embedding", "dlg", "idlg", "all"], default="all")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="ranking metrics from a saved run's checkpoint")
    p.add_argument("run_dir")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="lambda or SUT-mode grid")
    _add_config_args(p)
    p.add_argument("kind", choices=["lambda", "sut"])
    p.add_argument("values", nargs="*", type=str)
    p.add_argument("--out")
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="merge metrics CSVs")
    p.add_argument("csv", nargs="+")
    p.add_argument("--out", help="write merged CSV here instead of stdout")
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "kind", None) == "lambda" and args.values:
        args.values = [float(v) for v in args.values]
    try:
        return args.func(args)
    except FedUnlearnError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
