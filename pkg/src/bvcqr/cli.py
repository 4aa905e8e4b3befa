"""Command-line interface: ``bvcqr {simulate,fit,eval,reproduce,replay}``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical or
diagnostic failure. Every command writes ``manifest.json`` into its output
directory; ``bvcqr replay manifest.json`` re-runs the recorded command.
"""

from __future__ import annotations

import argparse
import logging
import platform
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from . import io
from .errors import BVCQRError, ConfigError, DataError
from .pipeline import FitConfig, fit_panel
from .posterior import (
    evaluate_h,
    global_trend,
    mean_null_width,
    read_effects_csv,
    selection_counts,
    summarize_effects,
    write_effects_csv,
)
from .simulate import SCENARIO_IDS, GroundTruth, Scenario, builtin_scenario, generate

log = logging.getLogger("bvcqr")

# acceptance bands for the h regressions (horseshoe fits)
BANDS = {"intercept": 0.35, "slope": (0.90, 1.10), "r2": 0.95, "rmse": 0.50}
QUICK_WIDEN = 1.5


class UsageError(ConfigError):
    pass


def _fmt(x) -> str:
    return "undefined" if x is None or not np.isfinite(x) else f"{x:.4f}"


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"output directory {out} is not writable: {exc.strerror}") from None
    return out


def _write_manifest(out: Path, command: str, argv: list[str], config: dict, inputs: list[Path],
                    outputs: list[str], started: float, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "argv": argv,
        "config": config,
        "seed": config.get("seed", config.get("sampler", {}).get("seed")),
        "inputs": {str(p): io.sha256_file(p) for p in inputs},
        "outputs": {name: io.sha256_file(out / name) for name in outputs},
        "software": {"artifact": _version(), "python": platform.python_version(), "numpy": np.__version__},
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    if extra:
        manifest.update(extra)
    io.write_json(out / "manifest.json", manifest)


# --------------------------------------------------------------------------- simulate


def _scenario_from_args(args) -> Scenario:
    if args.scenario_config:
        sc = Scenario.from_dict(io.read_json(args.scenario_config))
        return Scenario.from_dict({**sc.to_dict(), "seed": args.seed})
    if args.scenario not in SCENARIO_IDS:
        raise UsageError(
            f"unknown scenario id {args.scenario}; valid ids: {', '.join(map(str, SCENARIO_IDS))}"
        )
    overrides = {"n": args.n} if args.n else {}
    return builtin_scenario(args.scenario, seed=args.seed, **overrides)


def cmd_simulate(args, argv) -> int:
    started = time.time()
    sc = _scenario_from_args(args)
    out = _out_dir(args.out_dir)
    panel, truth = generate(sc)
    io.write_panel_csv(panel, out / "panel.csv")
    # the panel hash lets eval reject a truth file from another simulation
    io.write_json(out / "truth.json", {**truth.to_dict(), "panel_sha256": io.sha256_file(out / "panel.csv")})
    inputs = [Path(args.scenario_config)] if args.scenario_config else []
    _write_manifest(out, "simulate", argv, sc.to_dict(), inputs, ["panel.csv", "truth.json"], started)
    log.info("wrote %d subjects x %d chemicals to %s", panel.n_subjects, panel.n_exposures, out)
    return 0


# --------------------------------------------------------------------------- fit


def _fit_config(args) -> FitConfig:
    cfg = FitConfig.from_dict(io.read_json(args.config)) if args.config else FitConfig()
    sampler = {
        k: v
        for k, v in {
            "iterations": args.iterations,
            "warmup": args.warmup,
            "chains": args.chains,
            "seed": args.seed,
            "n_jobs": args.n_jobs,
            "max_tree_depth": args.max_tree_depth,
            "target_accept": args.target_accept,
        }.items()
        if v is not None
    }
    pre = {}
    if args.no_detect_filter:
        pre["detect_filter"] = False
    if args.no_lod_impute:
        pre["impute"] = False
    if args.no_scale:
        pre["scale"] = False
    model = {"horseshoe": False} if args.no_horseshoe else {}
    if args.tau_power is not None:
        model["tau_power"] = args.tau_power
    design = {k: v for k, v in {"baseline_age": args.baseline_age, "age_scale": args.age_scale}.items() if v is not None}
    return cfg.replace(sampler=sampler, preprocess=pre, model=model, design=design)


def _write_fit_outputs(out: Path, res, reference=None) -> list[str]:
    io.write_draws(res.draws, out / "draws.csv", out / "draws_manifest.json",
                   extra={"config": res.config.to_dict()})
    rows = summarize_effects(res.draws, reference=reference)
    write_effects_csv(rows, out / "effects.csv")
    g1, g2 = global_trend(res.draws)
    diag = dict(res.diagnostics)
    diag["global_trend"] = {"gamma1": g1, "gamma2": g2}
    io.write_json(out / "diagnostics.json", _jsonable(diag))
    io.write_json(out / "preprocess.json", res.preprocess_report)
    return ["draws.csv", "draws_manifest.json", "effects.csv", "diagnostics.json", "preprocess.json"]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def cmd_fit(args, argv) -> int:
    started = time.time()
    cfg = _fit_config(args)
    out = _out_dir(args.out_dir)
    panel = io.read_panel_csv(args.data, args.lod)
    res = fit_panel(panel, cfg)
    outputs = _write_fit_outputs(out, res)
    if args.dump_design:
        res.design.write_triplets(out / "design_triplets.csv")
        outputs.append("design_triplets.csv")
    if args.dump_terms:
        u = res.draws.unconstrained[-1, 0]
        io.write_json(out / "terms.json", _jsonable(res.model.terms(res.model.constrain(u))))
        outputs.append("terms.json")
    inputs = [Path(args.data)] + [Path(p) for p in (args.lod, args.config) if p]
    _write_manifest(out, "fit", argv, cfg.to_dict(), inputs, outputs, started,
                    extra={"unreliable": res.unreliable, "reasons": res.reasons})
    if res.unreliable:
        log.error("fit unreliable: %s", "; ".join(res.reasons))
        return 3
    return 0


# --------------------------------------------------------------------------- eval


def _check_conformable(fit_dir: Path, draws, raw: dict, truth: GroundTruth) -> None:
    if truth.subject_ids:
        fitted = [name[3:-1] for name in draws.names if name.startswith("h1[")]
        if list(truth.subject_ids) != fitted:
            raise DataError("ground truth does not conform to the fit: subject ids differ")
    panel_hash = raw.get("panel_sha256")
    manifest = fit_dir / "manifest.json"
    if panel_hash and manifest.exists():
        if panel_hash not in io.read_json(manifest).get("inputs", {}).values():
            raise DataError("ground truth does not conform to the fit: it was generated for a different panel")


def cmd_eval(args, argv) -> int:
    # heval.json joins the fit directory, which already holds the fit manifest
    fit_dir = Path(args.fit_dir)
    if not args.truth or not Path(args.truth).exists():
        raise UsageError(f"ground-truth file not found: {args.truth}")
    draws = io.read_draws(fit_dir / "draws.csv", fit_dir / "draws_manifest.json")
    raw = io.read_json(args.truth)
    truth = GroundTruth.from_dict(raw)
    _check_conformable(fit_dir, draws, raw, truth)
    report = evaluate_h(draws, truth)
    if (fit_dir / "effects.csv").exists():
        rows = read_effects_csv(fit_dir / "effects.csv")
        report["selection"] = selection_counts(rows, truth.theta1, truth.theta2)
        report["mean_null_width"] = mean_null_width(rows, truth.theta1, truth.theta2)
    io.write_json(fit_dir / "heval.json", _jsonable(report))
    for lvl in ("h1", "h2"):
        r = report[lvl]
        fields = " ".join(f"{k}={_fmt(r[k])}" for k in ("intercept", "slope", "r2", "rmse"))
        print(f"{lvl}: {fields}")
    return 0


# --------------------------------------------------------------------------- reproduce


def check_bands(report: dict, widen: float = 1.0) -> dict[str, bool]:
    """Pass/fail of one h-level regression report against the recovery bands."""
    lo, hi = BANDS["slope"]
    half = 0.5 * (hi - lo) * widen
    out = {
        "intercept": report["intercept"] is not None and abs(report["intercept"]) <= BANDS["intercept"] * widen,
        "slope": report["slope"] is not None and abs(report["slope"] - 1.0) <= half,
        "r2": report["r2"] is not None and report["r2"] >= 1.0 - (1.0 - BANDS["r2"]) * widen,
        "rmse": report["rmse"] <= BANDS["rmse"] * widen,
    }
    return out


def cmd_reproduce(args, argv) -> int:
    started = time.time()
    out = _out_dir(args.out_dir)
    widen = QUICK_WIDEN if args.quick else 1.0
    cfg = FitConfig()
    sampler = {"seed": args.seed, "n_jobs": args.n_jobs}
    if args.quick:
        sampler.update(iterations=800, warmup=400)
    cfg = cfg.replace(sampler=sampler)
    if args.config:
        # config sections override the defaults field by field (validated first)
        raw = io.read_json(args.config)
        FitConfig.from_dict(raw)
        cfg = cfg.replace(**raw).replace(sampler={"seed": args.seed})
    n = 50 if args.quick else None

    table, checks, failures, outputs = [], {}, [], []
    for sid in SCENARIO_IDS:
        sc = builtin_scenario(sid, seed=args.seed, **({"n": n} if n else {}))
        panel, truth = generate(sc)
        fits = {}
        for prior in ("hs", "nohs"):
            sub = out / f"scenario{sid}_{prior}"
            sub.mkdir(exist_ok=True)
            fcfg = cfg.replace(model={"horseshoe": prior == "hs"})
            try:
                res = fit_panel(panel, fcfg)
            except BVCQRError as exc:
                failures.append(f"scenario {sid} {prior}: {exc}")
                continue
            fits[prior] = res
            ev = evaluate_h(res.draws, truth)
            for lvl in ("h1", "h2"):
                table.append({"scenario": sid, "prior": prior, "level": lvl, **ev[lvl]})
            fits[prior + "_eval"] = ev
        if "hs" in fits and "nohs" in fits:
            ref = fits["nohs"].draws
            for prior in ("hs", "nohs"):
                res = fits[prior]
                sub = out / f"scenario{sid}_{prior}"
                names = _write_fit_outputs(sub, res, reference=ref if prior == "hs" else None)
                outputs += [f"{sub.name}/{n_}" for n_ in names]
            hs_ev, no_ev = fits["hs_eval"], fits["nohs_eval"]
            rows_hs = summarize_effects(fits["hs"].draws)
            rows_no = summarize_effects(fits["nohs"].draws)
            sel = selection_counts(rows_hs, truth.theta1, truth.theta2)
            max_fp = 0 if sid == 1 else 1
            checks[f"scenario{sid}"] = {
                **{f"hs_{lvl}_{k}": v for lvl in ("h1", "h2") for k, v in check_bands(hs_ev[lvl], widen).items()},
                "ablation_rmse_h1": hs_ev["h1"]["rmse"] < no_ev["h1"]["rmse"],
                "ablation_rmse_h2": hs_ev["h2"]["rmse"] <= no_ev["h2"]["rmse"],
                "null_width": mean_null_width(rows_hs, truth.theta1, truth.theta2)
                < mean_null_width(rows_no, truth.theta1, truth.theta2),
                "selection": sel["planted_flagged"] == sel["planted"] and sel["null_flagged"] <= max_fp,
                "diagnostics": not (fits["hs"].unreliable or fits["nohs"].unreliable),
            }
        elif fits:
            for prior, res in fits.items():
                if prior in ("hs", "nohs"):
                    sub = out / f"scenario{sid}_{prior}"
                    outputs += [f"{sub.name}/{n_}" for n_ in _write_fit_outputs(sub, res)]

    lines = _format_table(table, checks, failures, widen)
    (out / "table1.txt").write_text("\n".join(lines) + "\n")
    io.write_json(out / "reproduce.json", _jsonable({"rows": table, "checks": checks, "failures": failures,
                                                     "band_widening": widen}))
    outputs += ["table1.txt", "reproduce.json"]
    inputs = [Path(args.config)] if args.config else []
    _write_manifest(out, "reproduce", argv, {"quick": args.quick, **cfg.to_dict()}, inputs, outputs, started)
    print("\n".join(lines))
    ok = not failures and all(all(c.values()) for c in checks.values()) and len(checks) == len(SCENARIO_IDS)
    return 0 if ok else 3


def _format_table(table, checks, failures, widen) -> list[str]:
    lines = [f"{'scenario':>8} {'prior':>6} {'level':>5} {'intercept':>10} {'slope':>7} {'R2':>7} {'RMSE':>7}"]
    for r in table:
        fmt = lambda v, w, p: f"{v:>{w}.{p}f}" if v is not None else f"{'NA':>{w}}"  # noqa: E731
        lines.append(
            f"{r['scenario']:>8} {r['prior']:>6} {r['level']:>5} {fmt(r['intercept'], 10, 3)} "
            f"{fmt(r['slope'], 7, 3)} {fmt(r['r2'], 7, 3)} {fmt(r['rmse'], 7, 3)}"
        )
    lines.append("")
    if widen != 1.0:
        lines.append(f"bands widened x{widen}")
    for sc, cs in checks.items():
        for name, ok in cs.items():
            lines.append(f"{sc} {name}: {'PASS' if ok else 'FAIL'}")
    for f in failures:
        lines.append(f"FAILED RUN {f}")
    return lines


# --------------------------------------------------------------------------- replay


def cmd_replay(args, argv) -> int:
    manifest = io.read_json(args.manifest)
    rec = manifest.get("argv")
    if not rec:
        raise UsageError(f"{args.manifest} has no recorded command line")
    rec = list(rec)
    if rec[0] == "replay":
        raise UsageError("refusing to replay a replay")
    if args.out_dir:
        rec = _replace_out_dir(rec, args.out_dir)
    return main(rec)


def _replace_out_dir(rec: list[str], out_dir: str) -> list[str]:
    # the output directory is the last positional argument of every command
    parser = build_parser()
    try:
        ns = parser.parse_args(rec)
    except SystemExit:
        raise UsageError("recorded command line does not parse") from None
    old = getattr(ns, "out_dir", None) or getattr(ns, "fit_dir", None)
    if old is None:
        raise UsageError(f"recorded command {rec[0]!r} has no output directory")
    idx = len(rec) - 1 - rec[::-1].index(old)
    return rec[:idx] + [out_dir] + rec[idx + 1 :]


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bvcqr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic panel")
    s.add_argument("--scenario", type=int, default=1, help="built-in scenario id (1 or 2)")
    s.add_argument("--scenario-config", help="JSON scenario file (overrides --scenario)")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--n", type=int, help="number of subjects (built-in scenarios)")
    s.add_argument("out_dir")

    f = sub.add_parser("fit", help="fit the model to a panel CSV")
    f.add_argument("data", help="long-format panel CSV")
    f.add_argument("out_dir")
    f.add_argument("--lod", help="companion CSV with columns chemical, lod")
    f.add_argument("--config", help="JSON config with hyper/model/sampler/preprocess/design sections")
    f.add_argument("--seed", type=int)
    f.add_argument("--iterations", type=int)
    f.add_argument("--warmup", type=int)
    f.add_argument("--chains", type=int)
    f.add_argument("--n-jobs", type=int)
    f.add_argument("--max-tree-depth", type=int)
    f.add_argument("--target-accept", type=float)
    f.add_argument("--baseline-age", type=float)
    f.add_argument("--age-scale", type=float)
    f.add_argument("--tau-power", type=float, choices=(1.0, 2.0))
    f.add_argument("--no-detect-filter", action="store_true")
    f.add_argument("--no-lod-impute", action="store_true")
    f.add_argument("--no-scale", action="store_true")
    f.add_argument("--no-horseshoe", action="store_true", help="wide normal prior on theta instead")
    f.add_argument("--dump-design", action="store_true", help="write design matrices as triplets")
    f.add_argument("--dump-terms", action="store_true", help="write per-term log-density at the last draw")

    e = sub.add_parser("eval", help="regress posterior-mean h on the true h")
    e.add_argument("fit_dir")
    e.add_argument("--truth", required=True)

    r = sub.add_parser("reproduce", help="both scenarios with and without the horseshoe")
    r.add_argument("out_dir")
    r.add_argument("--seed", type=int, required=True)
    r.add_argument("--quick", action="store_true", help="n=50, 800 iterations, bands widened x1.5")
    r.add_argument("--n-jobs", type=int, default=1)
    r.add_argument("--config", help="JSON config applied to every fit (sampler seed comes from --seed)")

    rp = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    rp.add_argument("manifest")
    rp.add_argument("--out-dir")
    return p


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "eval": cmd_eval,
    "reproduce": cmd_reproduce,
    "replay": cmd_replay,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, argv)
    except BVCQRError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
