"""Command-line front end: ``pals gen``, ``pals train`` and ``pals report``."""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import statistics
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .data import ConfigError, GenSpec, check_rate, load_dataset, make_benchmark, save_dataset
from .model import save_model
from .trainer import (PRESETS, RunConfig, run_method, timed, write_metrics_csv,
                      write_summary)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("pals")

BASELINES = ("supervised", "naive", "knn_majority")
_CONFIG_FIELDS = {f.name: f for f in fields(RunConfig)}


class AggregationError(RuntimeError):
    pass


def _atomic_write(path: Path, writer) -> None:
    tmp = path.with_name(path.name + ".tmp")
    writer(tmp)
    os.replace(tmp, path)


# --- gen ------------------------------------------------------------------

def cmd_gen(args) -> int:
    check_rate("--q", args.q)
    check_rate("--eta", args.eta)
    spec = GenSpec(num_classes=args.classes, samples_per_class=args.per_class,
                   feature_dim=args.dim, class_mean_scale=args.scale,
                   partial_rate=args.q, noise_rate=args.eta, seed=args.seed)
    spec.validate()
    train, test = make_benchmark(spec, args.test_per_class)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "train.txt", lambda p: save_dataset(train, p))
    _atomic_write(out / "test.txt", lambda p: save_dataset(test, p))
    meta = asdict(spec) | {"test_per_class": args.test_per_class or args.per_class}
    _atomic_write(out / "gen.json",
                  lambda p: p.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n"))
    print(f"wrote {out / 'train.txt'} (n={train.n}) and {out / 'test.txt'} (n={test.n})")
    return 0


# --- train ----------------------------------------------------------------

def _parse_value(name: str, raw):
    kind = _CONFIG_FIELDS[name].type
    if name == "hidden":
        if isinstance(raw, str):
            raw = raw.split(",")
        return tuple(int(v) for v in raw)
    if kind == "bool":
        if isinstance(raw, bool):
            return raw
        low = str(raw).lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    if kind == "int":
        return int(raw)
    return float(raw)


def load_config_file(path) -> dict:
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    unknown = set(raw) - set(_CONFIG_FIELDS)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    return {k: _parse_value(k, v) for k, v in raw.items()}


_FLAG_FIELDS = ("k", "delta", "zeta", "smoothing", "lambda_max", "lambda_min", "epochs",
                "batch_size", "lr", "momentum", "weight_decay", "hidden", "weak_sigma",
                "strong_sigma", "drop_frac", "q", "eta")


def resolve_config(args, data_meta: dict | None = None) -> RunConfig:
    """Built-in defaults < preset < dataset metadata < config file < flags."""
    cfg = PRESETS[args.preset].to_dict()
    if data_meta:
        cfg["q"] = data_meta.get("partial_rate", cfg["q"])
        cfg["eta"] = data_meta.get("noise_rate", cfg["eta"])
    if args.config:
        cfg.update(load_config_file(args.config))
    for name in _FLAG_FIELDS:
        val = getattr(args, name)
        if val is not None:
            cfg[name] = _parse_value(name, val)
    if args.no_mixup:
        cfg["mixup"] = False
    if args.no_cr:
        cfg["cr"] = False
    config = RunConfig.from_dict(cfg)
    config.validate()
    return config


def parse_grid(items) -> list[dict]:
    axes = []
    for item in items or ():
        key, sep, vals = item.partition("=")
        if not sep or key not in _CONFIG_FIELDS or key in ("seed", "hidden"):
            raise ConfigError(f"bad --grid entry {item!r}; use field=v1,v2")
        axes.append([(key, _parse_value(key, v)) for v in vals.split(",")])
    return [dict(combo) for combo in itertools.product(*axes)]


def parse_seeds(raw: str) -> list[int]:
    seeds = sorted({int(s) for s in raw.replace(";", ",").split(",") if s.strip()})
    if not seeds:
        raise ConfigError("no seeds given")
    return seeds


@dataclass(frozen=True)
class PlannedRun:
    data_dir: Path
    method: str
    config: RunConfig
    variant: str
    out_dir: Path


def build_plan(args) -> list[PlannedRun]:
    """Data dirs x grid variants x seeds, each with its own output directory."""
    method = args.baseline or "pals"
    seeds = parse_seeds(args.seeds) if args.seeds else [args.seed if args.seed is not None else 0]
    plan = []
    for data_dir in map(Path, args.data):
        meta_path = data_dir / "gen.json"
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else None
        base = resolve_config(args, meta)
        for overrides in parse_grid(args.grid):
            variant = ",".join(f"{k}={v}" for k, v in sorted(overrides.items()))
            for seed in seeds:
                cfg = replace(base, seed=seed, **overrides)
                cfg.validate()
                tag = method + (f"[{variant}]" if variant else "")
                out = Path(args.out) / data_dir.name / tag / f"seed{seed}"
                plan.append(PlannedRun(data_dir, method, cfg, variant, out))
    outs = [p.out_dir for p in plan]
    if len(set(outs)) != len(outs):
        raise ConfigError("two runs map to the same output directory; give data dirs distinct names")
    return plan


def execute_run(run: PlannedRun) -> dict:
    train = load_dataset(run.data_dir / "train.txt")
    test_path = run.data_dir / "test.txt"
    test = load_dataset(test_path) if test_path.exists() else None
    if run.method == "knn_majority" and test is None:
        raise ConfigError("knn_majority needs a test split")
    result, wall = timed(run_method, run.method, run.config, train, test)
    run.out_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write(run.out_dir / "metrics.csv", lambda p: write_metrics_csv(result.history, p))
    if result.model is not None:
        _atomic_write(run.out_dir / "model.txt", lambda p: save_model(result.model, p))
    summary = {}
    extra = {"variant": run.variant, "data_dir": str(run.data_dir)}
    _atomic_write(run.out_dir / "summary.json", lambda p: summary.update(
        write_summary(result, run.config, train, p, wall, extra)))
    return summary


def cmd_train(args) -> int:
    plan = build_plan(args)
    for run in plan:
        if not (run.data_dir / "train.txt").exists():
            raise FileNotFoundError(f"missing dataset file {run.data_dir / 'train.txt'}")
    for run in plan:
        summary = execute_run(run)
        print(f"{run.out_dir}: test_acc={summary['final_test_acc']:.4f} "
              f"({summary['wall_time_s']:.1f}s)")
    return 0


# --- report ---------------------------------------------------------------

def collect_summaries(dirs) -> list[dict]:
    paths = sorted({p for d in dirs for p in Path(d).rglob("summary.json")})
    return [json.loads(p.read_text()) for p in paths]


def aggregate(summaries: list[dict]) -> list[dict]:
    """Mean and sample std of final test accuracy per (method, variant, q, eta)."""
    if not summaries:
        raise AggregationError("no runs found")
    classes = {s["num_classes"] for s in summaries}
    if len(classes) > 1:
        raise AggregationError(f"runs disagree on the number of classes: {sorted(classes)}")
    groups: dict[tuple, list[dict]] = {}
    for s in summaries:
        key = (s["method"], s.get("variant", ""), s["q"], s["eta"])
        groups.setdefault(key, []).append(s)
    rows = []
    for key in sorted(groups):
        runs = groups[key]
        hashes = {s["dataset_hash"] for s in runs}
        if len(hashes) > 1:
            raise AggregationError(f"group {key} mixes {len(hashes)} different datasets")
        accs = sorted(s["final_test_acc"] for s in runs)
        rows.append({
            "method": key[0], "variant": key[1], "q": key[2], "eta": key[3],
            "runs": len(accs), "mean": statistics.fmean(accs),
            "std": statistics.stdev(accs) if len(accs) > 1 else 0.0,
        })
    return rows


def format_table(rows: list[dict]) -> str:
    lines = ["| method | variant | q | eta | runs | accuracy (%) |",
             "|---|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['method']} | {r['variant'] or '-'} | {r['q']:g} | {r['eta']:g} | "
                     f"{r['runs']} | {100 * r['mean']:.2f} ± {100 * r['std']:.2f} |")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    rows = aggregate(collect_summaries(args.dirs))
    table = format_table(rows)
    if args.out:
        _atomic_write(Path(args.out), lambda p: p.write_text(table, encoding="utf-8"))
    sys.stdout.write(table)
    return 0


# --- entry point ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pals", description="Pseudo-labelling and label "
                                     "smoothing for noisy partial-label learning.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="synthesise a noisy partial-label benchmark")
    g.add_argument("--out", default="data", help="output directory (default: data)")
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--per-class", type=int, default=500, help="training samples per class")
    g.add_argument("--test-per-class", type=int, default=100)
    g.add_argument("--dim", type=int, default=32)
    g.add_argument("--scale", type=float, default=4.75, help="class mean norm")
    g.add_argument("--q", type=float, default=0.3, help="partial rate")
    g.add_argument("--eta", type=float, default=0.3, help="noise rate")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train PALS or a baseline")
    t.add_argument("--data", action="append", required=True,
                   help="directory with train.txt/test.txt; repeat for a q/eta grid")
    t.add_argument("--out", default="runs")
    t.add_argument("--config", help="TOML file with RunConfig keys")
    t.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    t.add_argument("--baseline", choices=BASELINES)
    t.add_argument("--seed", type=int)
    t.add_argument("--seeds", help="comma-separated seed list (overrides --seed)")
    t.add_argument("--grid", action="append", metavar="FIELD=V1,V2",
                   help="sweep a config field; repeat for a cartesian grid")
    t.add_argument("--k", type=int, help="neighbours (default 15)")
    t.add_argument("--delta", type=float, help="budget quantile (default 0.25)")
    t.add_argument("--zeta", type=float, help="mixup Beta parameter (default 1.0)")
    t.add_argument("--smoothing", "--r", dest="smoothing", type=float,
                   help="label smoothing rate (default 0.5)")
    t.add_argument("--lambda-max", type=float, help="initial augmentation threshold (0.45)")
    t.add_argument("--lambda-min", type=float, help="final augmentation threshold (0.35)")
    t.add_argument("--epochs", type=int, help="default 150 (desk) / 500 (full)")
    t.add_argument("--batch-size", type=int, help="default 64")
    t.add_argument("--lr", type=float, help="default 0.05 (desk) / 0.1 (full)")
    t.add_argument("--momentum", type=float, help="default 0.9")
    t.add_argument("--weight-decay", type=float, help="default 1e-3")
    t.add_argument("--hidden", help="encoder widths, e.g. 64,32")
    t.add_argument("--weak-sigma", type=float)
    t.add_argument("--strong-sigma", type=float)
    t.add_argument("--drop-frac", type=float)
    t.add_argument("--q", type=float, help="recorded partial rate (default: from gen.json)")
    t.add_argument("--eta", type=float, help="recorded noise rate (default: from gen.json)")
    t.add_argument("--no-mixup", action="store_true")
    t.add_argument("--no-cr", action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("report", help="aggregate run summaries into a table")
    r.add_argument("dirs", nargs="+")
    r.add_argument("--out", help="also write the table here")
    r.set_defaults(func=cmd_report)
    return parser


def _limit_threads():
    raw = os.environ.get("PALS_THREADS")
    if not raw:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(int(raw))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = _limit_threads()
    try:
        return args.func(args)
    except ConfigError as exc:
        parser.error(str(exc))
    except AggregationError as exc:
        print(f"pals report: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"pals {args.command}: {exc}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
