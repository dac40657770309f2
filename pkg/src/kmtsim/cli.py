"""Command line: validate, run, report, sweep.

Exit codes: 0 pass, 1 hypothesis or soft-assertion warning, 2 config error,
3 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import coupling as C
from . import harness as H
from . import laws as L
from .blocking import BlockingError
from .conditions import sakhanenko_lambda
from .config import ConfigError, load_document, to_experiment

EXIT_OK, EXIT_WARN, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3
WORKERS_ENV = "KMTSIM_WORKERS"
IDENTITY_TOL = 1e-9

log = logging.getLogger("kmtsim")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else str(v)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def resolve_workers(flag: int | None) -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise CliError(EXIT_CONFIG, f"{WORKERS_ENV} must be an integer, got {env!r}") from None
    if flag is not None:
        return max(1, flag)
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def _load(path, seed=None, retain=None):
    try:
        doc = load_document(path)
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read config: {exc}") from None
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from None
    if seed is not None:
        doc["experiment"]["seed"] = seed
    if retain:
        doc["experiment"]["retain_levels"] = True
    try:
        cfg = to_experiment(doc, Path(path).parent)
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from None
    return doc, cfg


# -- validate --------------------------------------------------------------------

def validation_report(cfg: H.ExperimentConfig) -> tuple[int, list[str], dict]:
    lines = []
    info: dict = {"laws": {}}
    try:
        x_laws = cfg.x_laws()
    except L.LawError as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from None
    code = EXIT_OK
    seen = {}
    for i, d in enumerate(x_laws):
        nm = cfg.law_names[i % len(cfg.law_names)]
        if nm in seen:
            continue
        try:
            rep = sakhanenko_lambda(d)
        except L.LawError as exc:
            raise CliError(EXIT_CONFIG, f"config error: law {nm!r}: {exc}") from None
        seen[nm] = rep
        ok = cfg.lam is None or cfg.lam <= rep.lambda_star
        proxy = sakhanenko_lambda(L.gaussian(d.variance)).lambda_star
        lines.append(f"law {nm}: variance {d.variance:.6g}, lambda_star {rep.lambda_star:.10g}"
                     f" (Gaussian proxy {proxy:.6g})"
                     + ("" if cfg.lam is None else f", lambda {cfg.lam:g} {'ok' if ok else 'EXCEEDS lambda_star'}"))
        info["laws"][nm] = {"variance": d.variance, "lambda_star": rep.lambda_star, "proxy_lambda_star": proxy,
                            "ok": ok}
        if not ok:
            code = EXIT_WARN
    var = np.array([d.variance for d in x_laws])
    c_min, c_max = var.min() / cfg.lambda_n**2, var.max() / cfg.lambda_n**2
    lines.append(f"variance band: lambda_n = {cfg.lambda_n:g}, C_min = {c_min:.6g}, C_max = {c_max:.6g}")
    info["c_min"], info["c_max"] = float(c_min), float(c_max)
    bound = 2 * c_max / c_min
    if not cfg.n_min > bound:
        raise CliError(EXIT_CONFIG, f"config error: blocking/n_min = {cfg.n_min} violates "
                                    f"n_min > 2C_max/C_min = {bound:.6g}")
    if not cfg.n > cfg.n_min:
        raise CliError(EXIT_CONFIG, f"config error: need n > n_min (n = {cfg.n}, n_min = {cfg.n_min})")
    lines.append(f"n_min = {cfg.n_min} > 2C_max/C_min = {bound:.6g}: admissible")
    if code == EXIT_WARN:
        lines.append("WARNING: Sakhanenko's condition fails at the configured lambda")
    return code, lines, info


def cmd_validate(args) -> int:
    _, cfg = _load(args.config)
    code, lines, _ = validation_report(cfg)
    print("\n".join(lines))
    print("hypotheses hold" if code == EXIT_OK else "hypothesis warning")
    return code


# -- run -------------------------------------------------------------------------

def _prepare_out(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write to {out}: {exc}") from None
    return out


def _verdicts(cfg, con, base) -> dict:
    v: dict = {}
    hard = {"aborted_fraction_ok": con.aborted <= H.MAX_ABORT_FRACTION * cfg.R}
    if con.identities:
        for k, err in con.identities.items():
            hard[f"identity_{k}"] = err <= IDENTITY_TOL
    soft = {"marginal": con.marginal.get("verdict", True),
            "independence": con.correlation.get("verdict", True)}
    v["marginal"] = con.marginal
    v["independence"] = con.correlation
    fit = H.tail_decay_fit(con)
    v["tail_fit"] = fit
    soft["tail_fit"] = fit["verdict"]
    if con.R >= H.MIN_R_MGF:
        v["theorem_mgf"] = H.check_theorem_bound(con)
        soft["theorem_mgf"] = v["theorem_mgf"]["verdict"]
        if con.diagnostics is not None:
            v["lemma_basic"] = H.check_lemma_basic(con)
            soft["lemma_basic"] = v["lemma_basic"]["verdict"]
    else:
        v["theorem_mgf"] = {"status": f"skipped: R < {H.MIN_R_MGF}"}
    if con.diagnostics is not None:
        v["across_j_independence"] = con.diagnostics["across_j_correlation"]
        soft["across_j_independence"] = v["across_j_independence"]["verdict"]
        mon = con.monitor
        v["quantile_monitor"] = {k: mon[k] for k in ("constants", "in_proviso", "violations", "violation_rate")}
        soft["quantile_monitor"] = mon["violation_rate"] <= 1e-3
    if base is not None:
        v["baseline_tail_fit"] = H.tail_decay_fit(base)
        if cfg.n >= 256:
            v["dominance"] = H.dominance_check(con, base)
            soft["dominance"] = v["dominance"]["verdict"]
    v["symmetry"] = H.symmetry_check(con)
    v["hard"] = hard
    v["soft"] = soft
    return v


def _write_replications(path: Path, st: H.SummaryStats) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rep", "f_id", "S_n"])
        for r in range(st.R):
            for fi, fid in enumerate(st.function_ids):
                w.writerow([r, fid, repr(float(st.S[r, fi]))])


def _write_diagnostics(path: Path, st: H.SummaryStats) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rep", "m", "k", "j", "S_tilde"])
        for (m, k), s in sorted(st.diagnostics["samples"].items()):
            kk = "top" if k < 0 else k
            for r in range(s.shape[0]):
                for j in range(s.shape[1]):
                    w.writerow([r, m, kk, j + 1, repr(float(s[r, j]))])


def _write_coupling(path: Path, cfg: H.ExperimentConfig, reps: int) -> None:
    plan = C.build_plan(cfg.x_laws(), cfg.n_min)
    N = C.draw_gaussians(plan.variances, cfg.seed, range(reps))
    X = C.run_construction(plan, N).X
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rep", "i", "N_i", "X_tilde_i"])
        for r in range(reps):
            for i in range(cfg.n):
                w.writerow([r, i + 1, repr(float(N[r, i])), repr(float(X[r, i]))])


def _manifest(out: Path, args, doc, cfg, files: dict, verdict: dict, started, elapsed) -> None:
    manifest = {
        "config_path": str(Path(args.config).resolve()),
        "config_hash": config_hash(doc),
        "artifact_version": __version__,
        "seed": cfg.seed,
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "elapsed_seconds": elapsed,
        "workers": args.resolved_workers,
        "outputs": {name: {"path": p.name, "sha256": _sha256_file(p)} for name, p in files.items()},
        "verdict": verdict,
    }
    _write_json(out / "manifest.json", manifest)


def _summary_verdict(v: dict) -> dict:
    return {"hard_pass": all(v["hard"].values()), "soft_pass": all(v["soft"].values()),
            "failed": [k for k, ok in {**v["hard"], **v["soft"]}.items() if not ok]}


def cmd_run(args) -> int:
    doc, cfg = _load(args.config, args.seed, args.retain_levels)
    code, lines, info = validation_report(cfg)
    for line in lines:
        log.info(line)
    out = _prepare_out(args.out)
    args.resolved_workers = resolve_workers(args.workers)
    started = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    try:
        con = H.run_mc(cfg, args.resolved_workers)
        base = H.baseline_independent(cfg, args.resolved_workers) if cfg.baseline else None
    except (BlockingError, L.LawError) as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from None
    except C.CouplingError as exc:
        print(f"FAIL: {exc}", file=sys.stderr)
        return EXIT_WARN
    verdicts = _verdicts(cfg, con, base)
    summary = {"config": cfg.to_dict(), "seed": cfg.seed, "validation": info,
               "construction": con.to_dict(), "baseline": base.to_dict() if base else None,
               "verdicts": verdicts, "summary": _summary_verdict(verdicts)}
    opts = doc.get("output", {})
    files = {}
    try:
        files["summary"] = out / "summary.json"
        _write_json(files["summary"], summary)
        if opts.get("replication_csv", True):
            files["replications"] = out / "replications.csv"
            _write_replications(files["replications"], con)
        if con.diagnostics is not None and opts.get("diagnostics_csv", True):
            files["diagnostics"] = out / "diagnostics.csv"
            _write_diagnostics(files["diagnostics"], con)
        files["coupling"] = out / "coupling.csv"
        _write_coupling(files["coupling"], cfg, min(cfg.R, 100))
        _manifest(out, args, doc, cfg, files, summary["summary"], started, time.perf_counter() - t0)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write results: {exc}") from None
    s = summary["summary"]
    print(f"run complete: R = {con.R}, n = {cfg.n}; hard {'pass' if s['hard_pass'] else 'FAIL'}, "
          f"soft {'pass' if s['soft_pass'] else 'WARN'}" + (f" ({', '.join(s['failed'])})" if s["failed"] else ""))
    if not (s["hard_pass"] and s["soft_pass"]):
        return EXIT_WARN
    return code


# -- sweep -----------------------------------------------------------------------

def cmd_sweep(args) -> int:
    doc, cfg = _load(args.config, args.seed, False)
    validation_report(cfg)
    ns = args.n or doc["experiment"].get("sweep_n") or [64, 256, 1024]
    out = _prepare_out(args.out)
    args.resolved_workers = resolve_workers(args.workers)
    started = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    cfg = cfg.with_(keep_marginals=False, retain_levels=False)
    try:
        res = H.run_sweep(cfg, ns, args.resolved_workers, baseline=True)
    except (BlockingError, L.LawError) as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from None
    table = res["table"]
    per_n = {}
    ok = True
    for n, (con, base) in res["results"].items():
        fit = H.tail_decay_fit(con)
        entry = {"construction": con.to_dict(), "baseline": base.to_dict(), "tail_fit": fit}
        ok &= fit["verdict"]
        if con.R >= H.MIN_R_MGF:
            entry["theorem_mgf"] = H.check_theorem_bound(con)
            ok &= entry["theorem_mgf"]["verdict"]
        per_n[str(n)] = entry
    table["verdict"] = {"construction_exponent_le_0.25": table["construction"]["exponent"] <= 0.25,
                        "baseline_exponent_ge_0.45": table["baseline"]["exponent"] >= 0.45}
    ok &= all(table["verdict"].values())
    sweep = {"config": cfg.to_dict(), "seed": cfg.seed, "ns": list(ns), "table": table, "per_n": per_n,
             "summary": {"pass": bool(ok)}}
    try:
        files = {"sweep": out / "sweep.json"}
        _write_json(files["sweep"], sweep)
        _manifest(out, args, doc, cfg, files, sweep["summary"], started, time.perf_counter() - t0)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write results: {exc}") from None
    for row in table["rows"]:
        print(f"n = {row['n']:5d}  median max|S| = {row['median_battery_max']:.4f}"
              f"  baseline = {row['baseline_median_battery_max']:.4f}")
    print(f"growth exponent: construction {table['construction']['exponent']:.4f}, "
          f"baseline {table['baseline']['exponent']:.4f}")
    return EXIT_OK if ok else EXIT_WARN


# -- report ----------------------------------------------------------------------

def _check_manifest(results: Path) -> dict:
    mpath = results / "manifest.json"
    if not mpath.is_file():
        raise CliError(EXIT_CONFIG, f"missing files in {results}: manifest.json")
    try:
        manifest = json.loads(mpath.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_CONFIG, f"unreadable manifest: {exc}") from None
    missing = [v["path"] for v in manifest["outputs"].values() if not (results / v["path"]).is_file()]
    if missing:
        raise CliError(EXIT_CONFIG, f"missing files in {results}: {', '.join(missing)}")
    changed = [v["path"] for v in manifest["outputs"].values()
               if _sha256_file(results / v["path"]) != v["sha256"]]
    if changed:
        raise CliError(EXIT_CONFIG, f"files changed since the run (hash mismatch): {', '.join(changed)}")
    return manifest


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "pass" if v else "FAIL"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _write_tail_csv(path: Path, summary: dict, baseline: dict | None) -> None:
    x = summary["x_grid"]
    tails = np.asarray(summary["tails"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=" ")
        head = ["x", "battery_max"] + list(summary["function_ids"])
        if baseline is not None:
            head.append("baseline_battery_max")
        fh.write("# " + " ".join(head) + "\n")
        btop = np.asarray(baseline["tails"]).max(axis=0) if baseline is not None else None
        top = tails.max(axis=0)
        for i, xv in enumerate(x):
            row = [repr(float(xv)), repr(float(top[i]))] + [repr(float(t)) for t in tails[:, i]]
            if btop is not None:
                row.append(repr(float(btop[i])))
            w.writerow(row)


def cmd_report(args) -> int:
    from . import plotting

    results = Path(args.results)
    manifest = _check_manifest(results)
    outs = manifest["outputs"]
    rep_dir = results / "report"
    try:
        rep_dir.mkdir(exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write report: {exc}") from None
    lines = []
    try:
        if "summary" in outs:
            summary = json.loads((results / outs["summary"]["path"]).read_text())
            con, base = summary["construction"], summary.get("baseline")
            lines.append(f"run: n = {summary['config']['n']}, R = {con['R']}, seed = {summary['seed']}")
            lines.append(f"{'check':32s} {'verdict':8s} detail")
            for kind in ("hard", "soft"):
                for k, ok in summary["verdicts"][kind].items():
                    detail = summary["verdicts"].get(k, {})
                    brief = ""
                    if isinstance(detail, dict):
                        for key in ("worst_adjusted_margin", "slope", "max_abs", "violation_rate", "min_p"):
                            if key in detail:
                                brief = f"{key} = {_fmt(detail[key])}"
                                break
                    lines.append(f"{k:32s} {_fmt(ok):8s} {brief}")
            fit = summary["verdicts"]["tail_fit"]
            if fit.get("status") == "fit":
                lines.append(f"tail fit: c1 = {fit['c1_hat']:.4g}, c2 = {fit['c2_hat']:.4g}, R^2 = {fit['r2']:.4f}"
                             f" over x in [{fit['x_range'][0]:g}, {fit['x_range'][1]:g}]")
                for reg in ("small_x", "large_x"):
                    if reg in fit:
                        lines.append(f"  {reg}: slope {fit[reg]['slope']:.4g}, R^2 {fit[reg]['r2']:.4f}")
            _write_tail_csv(rep_dir / "tail_curves.csv", con, base)
            plotting.plot_tail_curves(con, rep_dir / "tail_curves.png", base)
            plotting.plot_mgf(con, rep_dir / "mgf.png", summary["config"]["mgf_constants"][1])
        if "sweep" in outs:
            sweep = json.loads((results / outs["sweep"]["path"]).read_text())
            table = sweep["table"]
            lines.append(f"{'n':>6s} {'median max|S|':>14s} {'baseline':>10s} {'tail slope':>11s} {'R^2':>7s}")
            with open(rep_dir / "scaling.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["n", "median_battery_max", "baseline_median_battery_max", "tail_slope", "tail_r2"])
                for row in table["rows"]:
                    fit = sweep["per_n"][str(row["n"])]["tail_fit"]
                    slope, r2 = fit.get("slope", float("nan")), fit.get("r2", float("nan"))
                    lines.append(f"{row['n']:6d} {row['median_battery_max']:14.5f} "
                                 f"{row['baseline_median_battery_max']:10.4f} {slope:11.4f} {r2:7.4f}")
                    w.writerow([row["n"], row["median_battery_max"], row["baseline_median_battery_max"], slope, r2])
            lines.append(f"growth exponent: construction {table['construction']['exponent']:.4f}, "
                         f"baseline {table['baseline']['exponent']:.4f}")
            plotting.plot_scaling(table, rep_dir / "scaling.png")
            for n, entry in sweep["per_n"].items():
                _write_tail_csv(rep_dir / f"tail_curves_n{n}.csv", entry["construction"], entry["baseline"])
        (rep_dir / "report.txt").write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write report: {exc}") from None
    print("\n".join(lines))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kmtsim", description="Functional KMT coupling experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    v = sub.add_parser("validate", help="check a config against the theorem hypotheses")
    v.add_argument("--config", required=True)
    v.set_defaults(func=cmd_validate)
    for name, fn, helptext in (("run", cmd_run, "run the Monte Carlo experiment"),
                               ("sweep", cmd_sweep, "run an n-grid scaling study")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--workers", type=int, default=None,
                       help=f"worker processes (environment {WORKERS_ENV} overrides)")
        s.add_argument("--seed", type=int, default=None, help="override the config seed")
        s.set_defaults(func=fn)
        if name == "run":
            s.add_argument("--retain-levels", action="store_true", help="keep level archives for diagnostics")
        else:
            s.add_argument("--n", type=int, nargs="+", help="override experiment.sweep_n")
    r = sub.add_parser("report", help="render tables and figures from stored results")
    r.add_argument("results")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(str(exc), file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
