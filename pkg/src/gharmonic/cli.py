"""Command-line experiment runner.

    gharmonic <kind> --config cfg.json [--seed S] [--paths M] [--steps N] [--out DIR] [--quiet]

Exit codes: 0 all gates pass, 2 configuration error, 3 gate failure,
4 runtime or solver error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime
import hashlib
import json
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__, bsde, generator, harness, model, pde
from .errors import (ComparisonViolation, ConfigError, EvaluationError, ExprSyntaxError,
                     GHarmonicError)
from .paths import make_region, simulate
from .regression import RegressionConfig

log = logging.getLogger("gharmonic")

KINDS = ("simulate", "bsde", "pde", "generator", "check-martingale", "check-mvp", "cascade",
         "compare-fk", "compare-drivers")

EXIT_OK, EXIT_CONFIG, EXIT_GATE, EXIT_RUNTIME = 0, 2, 3, 4


# ------------------------------------------------------------------ config

class _Errors:
    def __init__(self):
        self.items = []

    def guard(self, path, fn, *args, **kw):
        try:
            return fn(*args, **kw)
        except (ConfigError, ExprSyntaxError, EvaluationError, TypeError, ValueError,
                KeyError) as exc:
            msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
            self.items.append(f"{path}: {msg}")
            return None


def _build_driver(spec, n):
    if "catalog" in spec:
        return model.from_catalog("driver", spec["catalog"], spec.get("params"), n)
    if "expr" in spec:
        d = model.driver_from_expr(spec["expr"], spec.get("params"), n)
        return model.validate_h1(d, np.linspace(-10, 10, 41)).subject
    raise ConfigError("needs 'catalog' or 'expr'")


def _build_field(spec, n):
    if "catalog" in spec:
        return model.from_catalog("field", spec["catalog"], spec.get("params"), n)
    if "expr" in spec:
        return model.field_from_expr(spec["expr"], spec.get("params"), n,
                                     int(spec.get("growth_degree", 0)))
    raise ConfigError("needs 'catalog' or 'expr'")


def _build_diffusion(spec, n):
    if "catalog" in spec:
        return model.from_catalog("diffusion", spec["catalog"], spec.get("params"), n)
    if "drift" in spec:
        d = model.diffusion_from_expr(spec["drift"], spec["diffusion"], spec.get("params"),
                                      float(spec.get("lipschitz_bound", 0.0)))
        if d.dimension != n:
            raise ConfigError(f"expression diffusion has dimension {d.dimension}, expected {n}")
        return d
    raise ConfigError("needs 'catalog' or 'drift'/'diffusion'")


def _build_numerics(cfg):
    num = cfg.get("numerics", {})
    reg = RegressionConfig(**num.get("regression", {}))
    out = bsde.Numerics(paths=int(num.get("paths", 100_000)), steps=int(num.get("steps", 200)),
                        seed=int(cfg.get("seed", 0)), regression=reg,
                        blocks=int(num.get("blocks", 20)))
    for key in ("horizon", "h", "dt", "T_max"):
        if key in num and not float(num[key]) > 0:
            raise ConfigError(f"numerics.{key} must be positive")
    return out


def _points(raw, n):
    pts = np.asarray(raw, dtype=np.float64)
    return pts.reshape(-1, n)


@dataclasses.dataclass
class Experiment:
    kind: str
    config: dict
    diffusion: object
    driver: object
    field: object
    numerics: bsde.Numerics


def load_experiment(cfg: dict) -> Experiment:
    """Validate a config dict; every problem is collected before raising."""
    errs = _Errors()
    kind = cfg.get("kind")
    if kind not in KINDS:
        errs.items.append(f"kind: must be one of {', '.join(KINDS)}, got {kind!r}")
    n = cfg.get("dimension", 1)
    if not isinstance(n, int) or n < 1:
        errs.items.append("dimension: must be a positive integer")
        n = 1
    diffusion = errs.guard("diffusion", _build_diffusion, cfg.get("diffusion", {"catalog": "brownian"}), n)
    driver = errs.guard("driver", _build_driver, cfg.get("driver", {"catalog": "zero"}), n)
    field = errs.guard("field", _build_field, cfg.get("field", {"catalog": "linear"}), n)
    numerics = errs.guard("numerics", _build_numerics, cfg)
    if "probes" in cfg:
        errs.guard("probes.x", _points, cfg["probes"].get("x", [[0.0] * n]), n)
        for t in cfg["probes"].get("t", []):
            if not float(t) > 0:
                errs.items.append(f"probes.t: times must be positive, got {t}")
    if kind == "compare-drivers":
        cmp_ = cfg.get("compare", {})
        for side in ("lower", "upper"):
            if side not in cmp_:
                errs.items.append(f"compare.{side}: missing driver spec")
            else:
                errs.guard(f"compare.{side}", _build_driver, cmp_[side], n)
        for i, t in enumerate(cmp_.get("terminals", [])):
            errs.guard(f"compare.terminals[{i}]", _build_field, t, n)
    if kind in ("check-mvp",) and "region" not in cfg and "radius" not in cfg:
        errs.items.append("radius: check-mvp needs 'radius' (list or number)")
    if kind == "cascade":
        cas = cfg.get("cascade", {})
        if "region" not in cas:
            errs.items.append("cascade.region: missing")
        else:
            errs.guard("cascade.region", make_region, cas["region"])
        rad = cas.get("radius", "half-distance")
        if rad != "half-distance":
            from . import expr
            errs.guard("cascade.radius", expr.parse, rad)
    if kind == "pde" and diffusion is not None and driver is not None:
        p = cfg.get("pde", {})
        try:
            axes = pde.make_axes((p["box"][0], p["box"][1]), float(p["h"]))
            st = pde.Stepper(diffusion, driver, axes, float(p["dt"]))
            if not st.certificate["monotone"]:
                errs.items.append(f"pde.dt: step restriction violated ({st.certificate})")
        except (KeyError, TypeError) as exc:
            errs.items.append(f"pde: needs box, h and dt ({exc})")
        except ConfigError as exc:
            errs.items.append(f"pde: {exc}")
    if errs.items:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errs.items))
    return Experiment(kind, cfg, diffusion, driver, field, numerics)


# ----------------------------------------------------------------- running

def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _to_jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _gate(name, passed, **detail):
    return {"name": name, "passed": bool(passed), **detail}


def _probe_x(cfg, n):
    return _points(cfg.get("probes", {}).get("x", [[0.0] * n]), n)


def _run_simulate(ex, out):
    cfg, num = ex.config, ex.numerics
    n = ex.diffusion.dimension
    T = float(cfg.get("numerics", {}).get("horizon", 1.0))
    region = make_region(cfg["region"]) if "region" in cfg else None
    x = _probe_x(cfg, n)[0]
    b = simulate(ex.diffusion, x, T, num.steps, num.paths, num.seed, region=region)
    xt = b.terminal
    meas = {"x": x, "T": T, "mean_XT": xt.mean(axis=0), "var_XT": xt.var(axis=0, ddof=1),
            "se_mean": xt.std(axis=0, ddof=1) / np.sqrt(b.paths)}
    if region is not None:
        meas["truncation_fraction"] = b.truncation_fraction
        meas["mean_exit_time"] = float(np.nanmean(b.exit_times))
    keep = min(b.paths, int(cfg.get("csv_paths", 50)))
    rows = [(m, k, b.times[k], *b.states[k, m]) for m in range(keep) for k in range(b.steps + 1)]
    _write_csv(out / "paths.csv", ["path", "step", "time"] + [f"x_{i + 1}" for i in range(n)], rows)
    return meas, []


def _run_bsde(ex, out):
    cfg, num = ex.config, ex.numerics
    n = ex.diffusion.dimension
    T = float(cfg.get("numerics", {}).get("horizon", 1.0))
    rows, gates = [], []
    expected = cfg.get("expected")
    for i, x in enumerate(_probe_x(cfg, n)):
        est = bsde.g_expectation(ex.diffusion, ex.driver, ex.field, x, T,
                                 dataclasses.replace(num, stream=num.stream + i))
        rows.append({"x": x, "t": T, "value": est.value, "se": est.se})
        if expected is not None:
            e = float(expected[i] if isinstance(expected, list) else expected)
            gates.append(_gate(f"probe {i} matches expected", abs(est.value - e) <= 3 * est.se,
                               deviation=est.value - e, se=est.se))
    _write_csv(out / "bsde.csv", ["x", "t", "value", "se"],
               [(r["x"][0], r["t"], r["value"], r["se"]) for r in rows])
    return {"probes": rows}, gates


def _run_pde(ex, out):
    p = ex.config["pde"]
    sol = pde.parabolic_solve(ex.diffusion, ex.driver, ex.field, (p["box"][0], p["box"][1]),
                              float(p["T"]), float(p["h"]), float(p["dt"]))
    sol.to_csv(out / "field.csv")
    meas = {"certificate": sol.certificate, "slices": len(sol.times),
            "min": float(sol.values.min()), "max": float(sol.values.max())}
    return meas, [_gate("monotone scheme certificate", sol.certificate["monotone"])]


def _run_generator(ex, out):
    cfg, num = ex.config, ex.numerics
    n = ex.diffusion.dimension
    ts = cfg.get("numerics", {}).get("t_sequence", list(generator.DEFAULT_TS))
    tol = float(cfg.get("tolerance", 5e-2))
    rows, gates, csv_rows = [], [], []
    for i, x in enumerate(_probe_x(cfg, n)):
        est = generator.probabilistic_generator(
            ex.field, ex.diffusion, ex.driver, x, ts,
            dataclasses.replace(num, stream=num.stream + 100 * i))
        rows.append(dataclasses.asdict(est))
        csv_rows += [(x[0], *r) for r in est.probabilistic_values]
        gates.append(_gate(f"probe {x.tolist()} extrapolation vs analytic",
                           est.discrepancy <= max(tol, 3 * est.extrapolated_se),
                           discrepancy=est.discrepancy, se=est.extrapolated_se))
    _write_csv(out / "generator.csv", ["x", "t", "quotient", "stderr"], csv_rows)
    return {"probes": rows}, gates


def _run_check_martingale(ex, out):
    cfg = ex.config
    n = ex.diffusion.dimension
    ts = cfg.get("probes", {}).get("t", [0.25, 0.5, 1.0])
    v = harness.check_g_martingale(ex.field, ex.diffusion, ex.driver, _probe_x(cfg, n), ts,
                                   ex.numerics)
    expect = cfg.get("expect", harness.MARTINGALE)
    _write_csv(out / "probes.csv", ["x", "t", "delta", "se", "classification"],
               [(p["x"][0], p["t"], p["delta"], p["se"], p["classification"]) for p in v.probes])
    gates = [_gate(f"probe x={p['x']} t={p['t']} is {expect}", p["classification"] == expect,
                   delta=p["delta"], se=p["se"]) for p in v.probes]
    return {"probes": v.probes, "overall": v.overall}, gates


def _run_check_mvp(ex, out):
    cfg = ex.config
    n = ex.diffusion.dimension
    radii = cfg.get("radius", [0.5])
    radii = radii if isinstance(radii, list) else [radii]
    max_trunc = float(cfg.get("max_truncation", 1e-3))
    rows, gates = [], []
    for i, x in enumerate(_probe_x(cfg, n)):
        for j, r in enumerate(radii):
            T_max = float(cfg.get("numerics", {}).get("T_max", 8 * r * r))
            num = dataclasses.replace(ex.numerics, stream=ex.numerics.stream + 10 * i + j)
            rep = harness.check_mvp(ex.field, ex.diffusion, ex.driver, x, r, T_max, num)
            rows.append({"x": x, "radius": r, **dataclasses.asdict(rep)})
            gates.append(_gate(f"mean value at x={x.tolist()} r={r}", rep.within,
                               deviation=rep.deviation, se=rep.se))
            gates.append(_gate(f"truncation at x={x.tolist()} r={r}",
                               rep.truncation_fraction < max_trunc,
                               truncation_fraction=rep.truncation_fraction))
    _write_csv(out / "mvp.csv", ["x", "radius", "value", "se", "deviation", "truncation"],
               [(r["x"][0], r["radius"], r["value"], r["se"], r["deviation"],
                 r["truncation_fraction"]) for r in rows])
    return {"probes": rows}, gates


def _run_cascade(ex, out):
    cfg = ex.config
    cas = cfg["cascade"]
    n = ex.diffusion.dimension
    region = make_region(cas["region"])
    rad = cas.get("radius", "half-distance")
    rfn = harness.half_distance(region) if rad == "half-distance" else rad
    y = _probe_x(cfg, n)[0]
    c = harness.iterated_stopping(ex.field, ex.diffusion, ex.driver, y, region, rfn,
                                  int(cas.get("stages", 6)), ex.numerics,
                                  stage_steps=cas.get("stage_steps"),
                                  stage_dt=float(cas.get("stage_dt", 0.005)),
                                  direct_dt=float(cas.get("direct_dt", 0.01)))
    min_prox = float(cas.get("min_proximity", 0.99))
    _write_csv(out / "cascade.csv",
               ["stage", "value", "se", "tower_deviation", "tower_se", "proximity_fraction",
                "truncation_fraction"],
               [(s["stage"], s["value"], s["se"], s["tower_deviation"], s["tower_se"],
                 s["proximity_fraction"], s["truncation_fraction"]) for s in c.stages])
    gates = [_gate(f"tower stage {s['stage']}", s["tower_ok"], deviation=s["tower_deviation"],
                   se=s["tower_se"]) for s in c.stages]
    gates.append(_gate("stage times monotone", c.times_monotone))
    gates.append(_gate("final stage matches direct exit", c.final_matches_direct,
                       final=c.stages[-1]["value"], direct=c.direct_value))
    gates.append(_gate(f"boundary proximity >= {min_prox}",
                       c.stages[-1]["proximity_fraction"] >= min_prox,
                       proximity=c.stages[-1]["proximity_fraction"]))
    meas = {"stages": c.stages, "direct_value": c.direct_value, "direct_se": c.direct_se,
            "epsilon": c.epsilon, "f_start": c.f_start}
    return meas, gates


def _run_compare_fk(ex, out):
    cfg = ex.config
    n = ex.diffusion.dimension
    T = float(cfg.get("numerics", {}).get("horizon", 1.0))
    pts = _probe_x(cfg, n) if "probes" in cfg else np.linspace(-1, 1, 9).reshape(-1, 1)
    p = cfg.get("pde", {})
    rep = harness.feynman_kac_crosscheck(ex.field, ex.diffusion, ex.driver, T, pts,
                                         ex.numerics, h=float(p.get("h", 0.05)),
                                         dt=p.get("dt"),
                                         box=(p["box"][0], p["box"][1]) if "box" in p else None,
                                         abs_tol=float(cfg.get("tolerance", 2e-2)))
    _write_csv(out / "compare_fk.csv", ["x", "pde", "bsde", "bsde_se"],
               [(x[0], a, b, s) for x, a, b, s in
                zip(rep.points, rep.pde_values, rep.bsde_values, rep.bsde_se)])
    meas = dataclasses.asdict(rep)
    return meas, [_gate("PDE vs BSDE max discrepancy", rep.passed, max_abs=rep.max_abs,
                        tolerance=rep.tolerance)]


def _run_compare_drivers(ex, out):
    cfg, num = ex.config, ex.numerics
    n = ex.diffusion.dimension
    cmp_ = cfg["compare"]
    lower = _build_driver(cmp_["lower"], n)
    upper = _build_driver(cmp_["upper"], n)
    T = float(cfg.get("numerics", {}).get("horizon", 1.0))
    x = _probe_x(cfg, n)[0]
    terminals = [_build_field(t, n) for t in cmp_.get("terminals", [cfg.get("field", {"catalog": "linear"})])]
    bundle = simulate(ex.diffusion, x, T, num.steps, num.paths, num.seed)
    rows, gates = [], []
    for fld in terminals:
        try:
            rep = bsde.comparison_check(bundle, lower, upper, fld(bundle.terminal),
                                        num.regression, blocks=num.blocks)
            rows.append({"terminal": fld.name, **dataclasses.asdict(rep)})
            gates.append(_gate(f"y0(lower) <= y0(upper) for {fld.name}", rep.holds_strictly,
                               lower=rep.y0_lower, upper=rep.y0_upper))
        except ComparisonViolation as exc:
            rows.append({"terminal": fld.name, "violation": str(exc)})
            gates.append(_gate(f"y0(lower) <= y0(upper) for {fld.name}", False))
    _write_csv(out / "compare_drivers.csv", ["terminal", "y0_lower", "se_lower", "y0_upper",
                                             "se_upper"],
               [(r["terminal"], r.get("y0_lower"), r.get("se_lower"), r.get("y0_upper"),
                 r.get("se_upper")) for r in rows])
    return {"terminals": rows}, gates


RUNNERS = {
    "simulate": _run_simulate,
    "bsde": _run_bsde,
    "pde": _run_pde,
    "generator": _run_generator,
    "check-martingale": _run_check_martingale,
    "check-mvp": _run_check_mvp,
    "cascade": _run_cascade,
    "compare-fk": _run_compare_fk,
    "compare-drivers": _run_compare_drivers,
}


def _git_describe():
    try:
        r = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                           text=True, timeout=5)
        return r.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def run(config_path, overrides=None, kind=None):
    """Run one experiment; returns ``(exit_code, report_dict)``."""
    overrides = overrides or {}
    try:
        with open(config_path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        return EXIT_CONFIG, {"error": f"cannot read config: {exc}"}
    except json.JSONDecodeError as exc:
        return EXIT_CONFIG, {"error": f"config is not valid JSON: {exc}"}
    if not isinstance(cfg, dict):
        return EXIT_CONFIG, {"error": "config must be a JSON object"}
    if kind is not None:
        cfg["kind"] = kind
    if overrides.get("seed") is not None:
        cfg["seed"] = overrides["seed"]
    for key in ("paths", "steps"):
        if overrides.get(key) is not None:
            cfg.setdefault("numerics", {})[key] = overrides[key]
    out = Path(overrides.get("out") or cfg.pop("out", None) or "gharmonic-out")
    cfg.pop("out", None)
    try:
        ex = load_experiment(cfg)
    except ConfigError as exc:
        return EXIT_CONFIG, {"error": str(exc)}
    out.mkdir(parents=True, exist_ok=True)
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    report = {
        "kind": ex.kind,
        "effective_config": cfg,
        "output_dir": str(out),
        "provenance": {
            "seed": ex.numerics.seed,
            "git_describe": _git_describe(),
            "config_hash": hashlib.sha256(canonical.encode()).hexdigest(),
            "package_version": __version__,
        },
    }
    try:
        measurements, gates = RUNNERS[ex.kind](ex, out)
        code = EXIT_OK if all(g["passed"] for g in gates) else EXIT_GATE
    except (ConfigError, ExprSyntaxError) as exc:
        report["error"] = str(exc)
        return EXIT_CONFIG, report
    except (GHarmonicError, FloatingPointError) as exc:
        report["error"] = f"{type(exc).__name__}: {exc}"
        measurements, gates, code = {}, [], EXIT_RUNTIME
    report["measurements"] = measurements
    report["gates"] = gates
    report["passed"] = code == EXIT_OK
    report["timestamp"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
    report = _to_jsonable(report)
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    return code, report


def build_parser():
    p = argparse.ArgumentParser(prog="gharmonic", description=__doc__.split("\n")[0])
    p.add_argument("kind", choices=KINDS)
    p.add_argument("--config", required=True, help="experiment config (JSON)")
    p.add_argument("--seed", type=int)
    p.add_argument("--paths", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--quiet", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    code, report = run(args.config, {"seed": args.seed, "paths": args.paths,
                                     "steps": args.steps, "out": args.out}, kind=args.kind)
    if "error" in report:
        print(report["error"], file=sys.stderr)
    if not args.quiet:
        for g in report.get("gates", []):
            print(f"[{'PASS' if g['passed'] else 'FAIL'}] {g['name']}")
        print(f"exit {code}")
    return code


if __name__ == "__main__":
    sys.exit(main())
