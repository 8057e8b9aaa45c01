"""Command line entry point: run, batch, report, list-presets, validate."""

from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import PRESETS, ConfigError, RunConfig, preset
from .diagnostics import (
    MONO_TOL,
    classify_end,
    detect_tower,
    lambda_ratio_monotone,
    norm_drift_rate,
    toy_flow,
    verify_energy_monotone,
)
from .geometry import find_critical_points
from .integrator import NumericFault, simulate

log = logging.getLogger("shadowflow")

EXIT_OK, EXIT_FAILED_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
NORM_DRIFT_TOL = 1e-8
RATIO_TOL = 1e-8
CSV_FIELDS = ("run_id", "outcome", "t_end", "limit_points", "index_at_infinity", "distinct_limits",
              "slope_inv_lambda", "slope_balance_defect", "slope_vnorm", "slope_center_dist",
              "energy_monotone", "norm_drift_ok", "lambda_ratio_ok")


def _json_default(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not serialisable: {type(x)}")


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default, allow_nan=False)
        fh.write("\n")


def _finite(x):
    return None if x is None or not np.isfinite(x) else float(x)


def execute(cfg, out_dir):
    """Run one validated configuration; write outputs under out_dir/<name>/. Returns the summary."""
    run_dir = Path(out_dir) / cfg.name
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(cfg.to_yaml())
    if cfg.model == "toy":
        return _execute_toy(cfg, run_dir)

    K = cfg.build_field()
    crits = find_critical_points(K)
    system = cfg.build_system(K)
    s0 = cfg.initial_state(K)
    traj = simulate(s0, system, cfg.integrator_config(), crits=crits, dump_cutoffs=cfg.dump_cutoffs)
    traj.write_jsonl(run_dir / "trajectory.jsonl")
    if cfg.dump_cutoffs:
        with open(run_dir / "cutoffs.jsonl", "w") as fh:
            for row in traj.cutoff_log:
                fh.write(json.dumps(row, default=_json_default) + "\n")

    report = classify_end(traj, crits, K, cfg.integrator_config().conv_radius, system.expansion.c_hat0)
    mono_ok, worst = verify_energy_monotone(traj, MONO_TOL)
    drift = norm_drift_rate(traj, system.expansion.cbar0)
    ratio_ok, ratio_worst = lambda_ratio_monotone(traj, RATIO_TOL)
    invariants = {
        "energy_monotone": {"ok": mono_ok, "worst_increase": worst},
        "norm_drift": {"ok": drift < NORM_DRIFT_TOL, "rate": drift},
        "lambda_ratio": {"ok": ratio_ok, "worst_increase": ratio_worst},
    }
    if s0.q >= 2:
        attempt, floor = detect_tower(traj)
        invariants["tower"] = {"is_tower_attempt": attempt, "min_pair_floor": _finite(floor)}
    event = traj.events[-1]
    summary = {
        "run_id": cfg.name,
        "model": "shadow",
        "outcome": event.kind,
        "event": event.to_dict(),
        "n_samples": len(traj.samples),
        "n_steps": traj.n_steps,
        "n_rejected": traj.n_rejected,
        "final_state": traj.samples[-1].state.to_dict(),
        "end_report": report.to_dict(),
        "invariants": invariants,
        "config": cfg.to_dict(),
    }
    _write_json(run_dir / "summary.json", summary)
    return summary


def _execute_toy(cfg, run_dir):
    path = toy_flow(cfg.toy["x0"], cfg.toy["b"], float(cfg.toy.get("t_end", 1.0)),
                    int(cfg.toy.get("n_samples", 101)))
    with open(run_dir / "trajectory.jsonl", "w") as fh:
        for t, x, J in zip(path.t, path.x, path.J):
            fh.write(json.dumps({"t": float(t), "x": x.tolist(), "energy": float(J)}) + "\n")
    mono_ok, worst = verify_energy_monotone(path.J, MONO_TOL)
    summary = {
        "run_id": cfg.name,
        "model": "toy",
        "outcome": "t_max_reached",
        "end_report": {"index_at_infinity": path.index, "note": path.note},
        "invariants": {"energy_monotone": {"ok": mono_ok, "worst_increase": worst},
                       "energy_strictly_decreasing": {"ok": bool(np.all(np.diff(path.J) < 0))}},
        "config": cfg.to_dict(),
    }
    _write_json(run_dir / "summary.json", summary)
    return summary


def _load_config(args):
    if getattr(args, "config", None):
        cfg = RunConfig.load(args.config)
    elif getattr(args, "preset", None):
        cfg = preset(args.preset, n=args.n, seed=args.seed or 0)
    else:
        raise ConfigError(["give --preset or --config"])
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "t_max", None) is not None:
        cfg.integrator = {**cfg.integrator, "t_max": args.t_max}
    if getattr(args, "dump_cutoffs", False):
        cfg.dump_cutoffs = True
    return cfg.validate()


def _run_one(cfg, out_dir):
    """Execute and map failures to exit codes."""
    try:
        summary = execute(cfg, out_dir)
    except NumericFault as exc:
        log.error("numeric fault in %s: %s", cfg.name, exc)
        return EXIT_NUMERIC, None
    return EXIT_OK, summary


def cmd_run(args):
    try:
        cfg = _load_config(args)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    code, summary = _run_one(cfg, args.out)
    if summary is not None:
        er = summary["end_report"]
        print(f"{cfg.name}: outcome={summary['outcome']} index={er.get('index_at_infinity')} "
              f"-> {Path(args.out) / cfg.name}")
    return code


def _batch_child(path, out_dir, t_max):
    try:
        cfg = RunConfig.load(path)
        if t_max is not None:
            cfg.integrator = {**cfg.integrator, "t_max": t_max}
        cfg.validate()
    except (ConfigError, OSError) as exc:
        return path, EXIT_CONFIG, None, str(exc)
    code, summary = _run_one(cfg, out_dir)
    return path, code, summary, ""


def _csv_row(summary):
    er = summary["end_report"]
    inv = summary["invariants"]

    def worst_slope(key):
        fits = (er.get("rates") or {}).get(key)
        if not fits or any(f is None for f in fits):
            return ""
        return repr(max(f["slope"] for f in fits))

    limits = er.get("limit_points")
    return {
        "run_id": summary["run_id"],
        "outcome": summary["outcome"],
        "t_end": repr(summary.get("event", {}).get("t", "")),
        "limit_points": "" if not limits else " | ".join(
            " ".join(f"{v:.6f}" for v in c["location"]) for c in limits),
        "index_at_infinity": "" if er.get("index_at_infinity") is None else er["index_at_infinity"],
        "distinct_limits": er.get("distinct_limits", ""),
        "slope_inv_lambda": worst_slope("inv_lambda"),
        "slope_balance_defect": worst_slope("balance_defect"),
        "slope_vnorm": worst_slope("vnorm"),
        "slope_center_dist": worst_slope("center_dist"),
        "energy_monotone": inv["energy_monotone"]["ok"],
        "norm_drift_ok": inv.get("norm_drift", {}).get("ok", ""),
        "lambda_ratio_ok": inv.get("lambda_ratio", {}).get("ok", ""),
    }


def write_batch_csv(summaries, path):
    rows = sorted((_csv_row(s) for s in summaries), key=lambda r: r["run_id"])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def cmd_batch(args):
    paths = sorted(glob.glob(args.config))
    if not paths:
        print(f"no configuration files match {args.config!r}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = max(1, int(args.jobs or 1))
    if jobs == 1:
        results = [_batch_child(p, out, args.t_max) for p in paths]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_batch_child, paths, [out] * len(paths), [args.t_max] * len(paths)))
    codes, summaries = [], []
    for path, code, summary, msg in results:
        codes.append(code)
        if msg:
            print(f"{path}: {msg}", file=sys.stderr)
        if summary is not None:
            summaries.append(summary)
    write_batch_csv(summaries, out / "batch.csv")
    n_ok = sum(c == 0 for c in codes)
    print(f"batch: {n_ok}/{len(paths)} runs completed -> {out / 'batch.csv'}")
    return max(codes)


def build_report(out_dir):
    """(markdown text, exit code) for all runs below out_dir."""
    out = Path(out_dir)
    found = sorted(out.glob("*/summary.json")) if out.is_dir() else []
    if not found:
        return "nothing to report\n", EXIT_OK
    summaries, broken = [], []
    for p in found:
        try:
            summaries.append(json.loads(p.read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            broken.append(f"{p}: {exc}")
    summaries.sort(key=lambda s: s.get("run_id", ""))
    lines = ["# Run report", "", "## Outcomes", "",
             "| run | outcome | index | distinct limits | limit points |", "|---|---|---|---|---|"]
    for s in summaries:
        er = s.get("end_report", {})
        lp = er.get("limit_points")
        lp_txt = "; ".join("(" + ", ".join(f"{v:.3g}" for v in c["location"]) + ")" for c in lp) if lp else "-"
        lines.append(f"| {s['run_id']} | {s['outcome']} | {er.get('index_at_infinity', '-')} "
                     f"| {er.get('distinct_limits', '-')} | {lp_txt} |")
    lines += ["", "## Rate fits (slope / R^2, worst bubble)", "",
              "| run | 1/lambda | abs(1-B) | vnorm | d(a, x) |", "|---|---|---|---|---|"]
    for s in summaries:
        rates = s.get("end_report", {}).get("rates") or {}
        cells = []
        for key in ("inv_lambda", "balance_defect", "vnorm", "center_dist"):
            fits = rates.get(key)
            if not fits or any(f is None for f in fits):
                cells.append("n/a")
            else:
                f = max(fits, key=lambda r: r["slope"])
                cells.append(f"{f['slope']:.3g} / {f['r2']:.4f}")
        lines.append(f"| {s['run_id']} | " + " | ".join(cells) + " |")
    checks = ("energy_monotone", "norm_drift", "lambda_ratio", "energy_strictly_decreasing")
    lines += ["", "## Invariant checks", "", "| run | " + " | ".join(checks) + " |",
              "|---|" + "---|" * len(checks)]
    failed = False
    for s in summaries:
        inv = s.get("invariants", {})
        cells = []
        for c in checks:
            if c not in inv:
                cells.append("-")
            elif inv[c]["ok"]:
                cells.append("pass")
            else:
                cells.append("**FAIL**")
                failed = True
        lines.append(f"| {s['run_id']} | " + " | ".join(cells) + " |")
    if broken:
        lines += ["", "## Unreadable run files", ""] + [f"- {b}" for b in broken]
    lines.append("")
    return "\n".join(lines), EXIT_FAILED_CHECK if failed else EXIT_OK


def cmd_report(args):
    text, code = build_report(args.out)
    if text != "nothing to report\n":
        (Path(args.out) / "report.md").write_text(text)
    sys.stdout.write(text)
    return code


def cmd_list_presets(args):
    for name in PRESETS:
        cfg = preset(name, n=args.n)
        desc = (f"q={cfg.q}, lambda={cfg.initial.get('lambda')}" if cfg.model == "shadow"
                else f"toy model, b={cfg.toy['b']}")
        print(f"{name:28s} {desc}")
    return EXIT_OK


def cmd_validate(args):
    try:
        cfg = _load_config(args)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    print(f"{cfg.name}: ok")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="shadowflow", description="Simulate the finite-dimensional bubble flow.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def source(sp):
        g = sp.add_mutually_exclusive_group(required=True)
        g.add_argument("--preset", choices=PRESETS)
        g.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--n", type=int, default=6, help="torus dimension for presets (default 6)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--t-max", dest="t_max", type=float, default=None)

    sp = sub.add_parser("run", help="run one configuration or preset")
    source(sp)
    sp.add_argument("--out", default="runs")
    sp.add_argument("--dump-cutoffs", action="store_true")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("batch", help="run every configuration matching a glob")
    sp.add_argument("--config", required=True, help="glob of YAML configurations")
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--out", default="runs")
    sp.add_argument("--t-max", dest="t_max", type=float, default=None)
    sp.set_defaults(func=cmd_batch)

    sp = sub.add_parser("report", help="summarise completed runs")
    sp.add_argument("--out", default="runs")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("list-presets", help="list built-in scenarios")
    sp.add_argument("--n", type=int, default=6)
    sp.set_defaults(func=cmd_list_presets)

    sp = sub.add_parser("validate", help="validate a configuration without running it")
    source(sp)
    sp.set_defaults(func=cmd_validate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
