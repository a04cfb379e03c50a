"""Command-line entry point: ``atdt {gen-data,run,report,selftest}``.

Exit codes: 0 success, 1 run failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .config import ConfigError, ExperimentPlan, load_plan
from .scenegen import DEPTH_PGM_SCALE, build_dataset, read_pnm, write_dataset, write_ppm

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _err(msg: str) -> None:
    print(f"atdt: {msg}", file=sys.stderr)


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _master_seed(default: int) -> int:
    env = os.environ.get("ATDT_SEED")
    if env is None:
        return default
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"ATDT_SEED must be an integer, got {env!r}") from None


def resolve_plan(args: argparse.Namespace) -> tuple[ExperimentPlan, list[str] | None]:
    """Config file (or manifest) plus flag overrides. Also returns manifest arms if any."""
    arms = None
    plan = ExperimentPlan()
    if args.config:
        plan = load_plan(args.config)
        doc = json.loads(Path(args.config).read_text())
        if "manifest_version" in doc:
            arms = list(doc["arms"])
    if getattr(args, "paired", False):
        plan.data.paired = True
    if getattr(args, "direction", None):
        plan.direction = args.direction
    if getattr(args, "split_level", None) is not None:
        plan.split_level = args.split_level
    if getattr(args, "no_batchnorm", False):
        plan.use_batchnorm = False
    if getattr(args, "no_shared_encoder", False):
        plan.shared_encoder = False
    if getattr(args, "proxy_labels", False):
        plan.proxy_labels_on_b = True
    if getattr(args, "name", None):
        plan.name = args.name
    if getattr(args, "methods", None):
        plan.methods = _csv_list(args.methods)
        arms = None
    master = _master_seed(plan.seeds[0])
    if getattr(args, "seeds", None) is not None:
        if args.seeds < 1:
            raise ConfigError("--seeds must be at least 1")
        plan.seeds = [master + i for i in range(args.seeds)]
    elif "ATDT_SEED" in os.environ:
        plan.seeds = [master + i for i in range(len(plan.seeds))]
    return plan.validate(), arms


# ---------------------------------------------------------------- commands
def cmd_gen_data(args) -> int:
    plan, _ = resolve_plan(args)
    d = plan.data
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        data = build_dataset(d.n_train, d.n_val, d.n_test, d.style_a, d.style_b, seed=plan.seeds[0],
                             paired=d.paired, resolution=(d.resolution, d.resolution), grammar=d.grammar)
        path = write_dataset(data, out)
    except OSError as exc:
        _err(f"cannot write dataset to {out}: {exc}")
        return EXIT_FAIL
    print(f"wrote {path}")
    return EXIT_OK


def cmd_run(args) -> int:
    plan, arms = resolve_plan(args)
    if arms is None:
        arms = pipeline.methods_to_arms(plan.methods) + _csv_list(args.ablations or "")
    bad = [a for a in arms if a not in pipeline.ARMS]
    if bad:
        raise ConfigError(f"unknown ablations {bad}; choose from {pipeline.ARMS[4:]}")
    try:
        Path(args.out).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        _err(f"cannot create {args.out}: {exc}")
        return EXIT_FAIL
    result = pipeline.run_arms(plan, arms, args.out, jobs=args.jobs)
    failed = [r for r in result.records if r["status"] != "ok"]
    for seed, d in sorted(result.run_dirs.items()):
        print(f"seed {seed}: {d}")
    if failed:
        for r in failed:
            _err(f"seed {r['seed']} {r['method']}/{r['variant']}/{r['domain']} failed: {r['error']}")
        return EXIT_FAIL
    return EXIT_OK


# ------------------------------------------------------------------ report
def _find_runs(roots: list[str]) -> tuple[list[Path], list[str]]:
    found, missing = [], []
    for root in roots:
        p = Path(root)
        files = sorted(p.rglob("metrics.json")) if p.is_dir() else []
        if not files:
            missing.append(root)
        found.extend(files)
    return found, missing


def _label(rec: dict) -> str:
    return rec["method"] if rec["variant"] == "default" else f"{rec['method']}[{rec['variant']}]"


def build_tables(records: list[dict]) -> dict[str, list[list[str]]]:
    """One table per (direction, domain): rows method x seed, then seed-mean rows."""
    tables: dict[str, list[list[str]]] = {}
    groups: dict[tuple[str, str], list[dict]] = {}
    for r in records:
        if r["status"] != "ok" or r["method"] == "feature_magnitude":
            continue
        if r["method"] == "n1":
            continue
        groups.setdefault((r["direction"], r["domain"]), []).append(r)
    for (direction, domain), recs in sorted(groups.items()):
        cols = list(pipeline.metric_names(direction))
        rows = [["method", "seed", *cols]]
        by_method: dict[str, list[dict]] = {}
        for r in sorted(recs, key=lambda r: (_label(r), r["seed"])):
            by_method.setdefault(_label(r), []).append(r)
            rows.append([_label(r), str(r["seed"]), *[_fmt(r["metrics"].get(c)) for c in cols]])
        for label, rs in by_method.items():
            means = []
            for c in cols:
                vals = [r["metrics"][c] for r in rs if c in r["metrics"] and not np.isnan(r["metrics"][c])]
                means.append(_fmt(float(np.mean(vals)) if vals else None))
            rows.append([label, "mean", *means])
        tables[f"{direction}_{domain}"] = rows
    return tables


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return "-"
    return f"{v:.4f}"


def aligned(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for r in rows:
        cells = [c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines) + "\n"


def _as_rgb(path: Path) -> np.ndarray:
    arr = read_pnm(path).astype(np.float64)
    if arr.ndim == 3:
        return arr.transpose(2, 0, 1) / 255.0
    depth = arr / DEPTH_PGM_SCALE
    # near is bright; inverse depth spreads the near range
    gray = np.clip(1.0 / np.maximum(depth, 1.0), 0, 1) ** 0.5
    return np.repeat(gray[None], 3, axis=0)


def write_triptychs(run_dir: Path, out: Path, prefix: str) -> int:
    """input | prediction | ground truth, one file per sample and method."""
    samples = run_dir / "samples"
    count = 0
    for inp in sorted(samples.glob("*_input.ppm")):
        idx = inp.name.split("_")[0]
        gt = next(iter(sorted(samples.glob(f"{idx}_gt.*"))), None)
        if gt is None:
            continue
        for pred in sorted(samples.glob(f"{idx}_*.p?m")):
            method = pred.stem.split("_", 1)[1]
            if method in ("input", "gt"):
                continue
            strip = np.concatenate([_as_rgb(inp), _as_rgb(pred), _as_rgb(gt)], axis=2)
            out.mkdir(parents=True, exist_ok=True)
            write_ppm(out / f"{prefix}_{idx}_{method}.ppm", strip)
            count += 1
    return count


def cmd_report(args) -> int:
    files, missing = _find_runs(args.runs)
    for m in missing:
        _err(f"warning: no runs found under {m}; skipped")
    records = []
    for f in files:
        records.extend(json.loads(f.read_text()))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tables = build_tables(records)
    text = io.StringIO()
    for name, rows in tables.items():
        with open(out / f"{name}.csv", "w", newline="") as fh:
            csv.writer(fh).writerows(rows)
        text.write(f"== {name}\n{aligned(rows)}\n")
    (out / "report.txt").write_text(text.getvalue())
    sys.stdout.write(text.getvalue())
    n = 0
    for f in files:
        run_dir = f.parent
        n += write_triptychs(run_dir, out / "triptychs", f"{run_dir.parent.name}_{run_dir.name}")
    print(f"{len(files)} runs, {len(tables)} tables, {n} triptychs -> {out}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest
    return EXIT_OK if run_selftest() else EXIT_FAIL


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="atdt", description="Cross-task feature transfer across domains.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render the paired A/B dataset to disk")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--paired", action="store_true", help="B re-renders A's scenes (debug)")
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("run", help="train and evaluate methods and ablations")
    r.add_argument("--config", help="config JSON or a run manifest.json")
    r.add_argument("--out", default="runs")
    r.add_argument("--name", help="run name (subdirectory of --out)")
    r.add_argument("--methods", help="comma list of atdt,baseline,oracle,multitask")
    r.add_argument("--ablations", help="comma list of levels,non_shared,no_bn,proxy")
    r.add_argument("--direction", choices=["dep2sem", "sem2dep"])
    r.add_argument("--seeds", type=int, help="number of seeds, counted up from the master seed")
    r.add_argument("--split-level", type=int, choices=[1, 2, 3, 4])
    r.add_argument("--no-batchnorm", action="store_true")
    r.add_argument("--no-shared-encoder", action="store_true")
    r.add_argument("--proxy-labels", action="store_true", help="proxy depth labels for B-side supervision")
    r.add_argument("--paired", action="store_true")
    r.add_argument("--jobs", type=int, default=1, help="seeds run concurrently")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="tables and triptychs from finished runs")
    rep.add_argument("--runs", nargs="+", required=True)
    rep.add_argument("--out", default="report")
    rep.set_defaults(func=cmd_report)

    s = sub.add_parser("selftest", help="gradient, metric and scene checks (<60 s)")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
