"""Acceptance criteria at their stated tolerances and path counts.

Each ``criterion_*`` function runs one experiment with fixed seeds and returns
its reported numbers; the tests gate on them, and the determinism test reruns
every function and compares the numbers bit for bit.  Expect roughly 20 minutes
in total.
"""
import dataclasses
import functools
import json

import numpy as np
import pytest

from gharmonic import bsde, generator, harness, model, pde
from gharmonic.bsde import Numerics
from gharmonic.paths import Box, simulate

from conftest import ACCEPTANCE

MU = 0.5
BM = model.brownian()
ZERO = model.zero_driver()
KAPPA = model.kappa_driver(MU)
NEG_KAPPA = model.validate_h1(model.driver_from_expr("-mu*abs(z1)", {"mu": MU}), [0.0]).subject
DESK = Numerics(paths=100_000, steps=200, seed=1)
XS = [[-1.0], [0.0], [1.0]]
TS = [0.25, 0.5, 1.0]


def record(key, ok, detail):
    ACCEPTANCE[key] = (bool(ok), detail)
    return ok


def criterion_1():
    v = harness.check_g_martingale(model.linear_field(), BM, ZERO, XS, TS, DESK)
    return {"probes": [(p["delta"], p["se"], p["classification"]) for p in v.probes],
            "overall": v.overall}


def criterion_2():
    est = bsde.g_expectation(BM, KAPPA, model.linear_field(), [0.0], 1.0, DESK)
    return {"value": est.value, "se": est.se}


GENERATOR_TRIPLES = {
    "x^2, zero driver": (model.quadratic_field(), ZERO),
    "x, kappa driver": (model.linear_field(), KAPPA),
    "exp-profile, kappa driver": (model.exp_profile(MU), KAPPA),
}
GENERATOR_POINTS = [-0.5, 0.0, 0.5]
# 4e5 paths: at 1e5 the extrapolated se alone exceeds the 5e-2 gate for x^2
GENERATOR_NUMERICS = Numerics(paths=400_000, steps=25, seed=7)


def criterion_3():
    out = {}
    for label, (f, g) in GENERATOR_TRIPLES.items():
        rows = []
        for i, x in enumerate(GENERATOR_POINTS):
            num = dataclasses.replace(GENERATOR_NUMERICS, stream=100 * i)
            est = generator.probabilistic_generator(f, BM, g, [x], numerics=num)
            rows.append((x, est.analytic_value, est.extrapolated_value, est.extrapolated_se))
        out[label] = rows
    return out


FK_POINTS = np.linspace(-1.0, 1.0, 9)[:, None]


def criterion_4():
    rep = harness.feynman_kac_crosscheck(model.linear_field(), BM, KAPPA, 1.0, FK_POINTS,
                                         Numerics(paths=100_000, steps=200, seed=2))
    return {"pde": rep.pde_values.tolist(), "bsde": rep.bsde_values.tolist(),
            "se": rep.bsde_se.tolist(), "max_abs": rep.max_abs}


PERTURBED = model.ScalarField(lambda x: -np.exp(-2 * MU * x[:, 0]) + 0.1 * x[:, 0] ** 2, 1, 2,
                              "exp-profile + 0.1 x^2")
RESIDUAL_PROBES = np.linspace(-2.0, 2.0, 5)


def criterion_5():
    f = model.exp_profile(MU)
    res = pde.elliptic_residual(f, BM, KAPPA, RESIDUAL_PROBES).values
    res_p = pde.elliptic_residual(PERTURBED, BM, KAPPA, RESIDUAL_PROBES).values
    v = harness.check_g_martingale(f, BM, KAPPA, XS, TS, DESK)
    vp = harness.check_g_martingale(PERTURBED, BM, KAPPA, XS, TS, DESK)
    return {"residual": res.tolist(), "residual_perturbed": res_p.tolist(),
            "classes": v.classifications(), "classes_perturbed": vp.classifications(),
            "deltas": [(p["delta"], p["se"]) for p in v.probes],
            "deltas_perturbed": [(p["delta"], p["se"]) for p in vp.probes]}


TERMINALS = {
    "linear": model.linear_field(),
    "quadratic": model.quadratic_field(),
    "exp_profile": model.exp_profile(MU),
    "constant": model.constant_field(1.0),
    "sine": model.sine_field(),
}
DRIVER_PAIRS = {"0 vs mu|z|": (ZERO, KAPPA), "-mu|z| vs mu|z|": (NEG_KAPPA, KAPPA)}


def criterion_6():
    # matched seeds: both drivers see the same paths
    bundle = simulate(BM, 0.0, 1.0, DESK.steps, DESK.paths, seed=3)
    out = {}
    for pair, (g1, g2) in DRIVER_PAIRS.items():
        for name, f in TERMINALS.items():
            rep = bsde.comparison_check(bundle, g1, g2, f(bundle.terminal))
            out[f"{pair} / {name}"] = (rep.y0_lower, rep.y0_upper, rep.combined_se)
    return out


def criterion_7():
    f = model.exp_profile(MU)
    out = {}
    for r in (0.25, 0.5):
        rep = harness.check_mvp(f, BM, KAPPA, [0.0], r, 8 * r * r,
                                Numerics(paths=100_000, steps=200, seed=3))
        out[r] = (rep.value, rep.f_x, rep.se, rep.truncation_fraction)
    return out


U = Box(np.array([-1.0]), np.array([1.0]))
CASCADE_CASES = {"linear f, zero driver": (model.linear_field(), ZERO),
                 "exp-profile, kappa driver": (model.exp_profile(MU), KAPPA)}


def criterion_8():
    out = {}
    for label, (f, g) in CASCADE_CASES.items():
        c = harness.iterated_stopping(f, BM, g, [0.0], U, harness.half_distance(U), 6, DESK)
        out[label] = {
            "stages": [(s["value"], s["se"], s["tower_deviation"], s["tower_se"],
                        s["proximity_fraction"]) for s in c.stages],
            "direct": (c.direct_value, c.direct_se),
            "times_monotone": c.times_monotone,
        }
    return out


CRITERIA = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5,
            6: criterion_6, 7: criterion_7, 8: criterion_8}


@functools.lru_cache(maxsize=None)
def first_run(n):
    return CRITERIA[n]()


# ------------------------------------------------------------------ gates

def test_criterion_1_classical_reduction():
    r = first_run(1)
    worst = max(abs(d) / s for d, s, _ in r["probes"])
    ok = all(c == harness.MARTINGALE for *_, c in r["probes"])
    record("1", ok, f"9 probes martingale-consistent; max |delta|/se = {worst:.2f}")
    assert ok


def test_criterion_2_closed_form():
    r = first_run(2)
    ok = abs(r["value"] - 0.5) <= 3 * r["se"] and r["se"] <= 5e-3
    record("2", ok, f"y0 = {r['value']:.5f} +/- {r['se']:.5f} (target 0.5)")
    assert ok


def test_criterion_3_generator_agreement():
    r = first_run(3)
    worst = max(abs(ext - ana) for rows in r.values() for _, ana, ext, _ in rows)
    ok = worst <= 5e-2
    record("3", ok, f"max |extrapolated - analytic| = {worst:.4f} over 9 cases (gate 5e-2)")
    assert ok


def test_criterion_4_feynman_kac():
    r = first_run(4)
    ok = r["max_abs"] <= 2e-2
    record("4", ok, f"max PDE-BSDE discrepancy on [-1, 1] = {r['max_abs']:.4f} (gate 2e-2)")
    assert ok


def test_criterion_5_round_trip():
    r = first_run(5)
    res_ok = max(abs(v) for v in r["residual"]) <= 1e-6
    mart_ok = all(c == harness.MARTINGALE for c in r["classes"])
    pert_res = any(v > 0 for v in r["residual_perturbed"])
    pert_sub = harness.SUB in r["classes_perturbed"]
    ok = res_ok and mart_ok and pert_res and pert_sub
    record("5", ok, f"max residual {max(abs(v) for v in r['residual']):.1e}, "
                    f"{sum(c == harness.SUB for c in r['classes_perturbed'])}/9 perturbed "
                    f"probes sub")
    assert res_ok and mart_ok and pert_res and pert_sub


def test_criterion_6_comparison():
    r = first_run(6)
    ok = all(lo <= hi for lo, hi, _ in r.values())
    gap = min(hi - lo for lo, hi, _ in r.values())
    record("6", ok, f"y0(g1) <= y0(g2) on {len(r)} driver/terminal pairs; min gap {gap:.4g}")
    assert ok


def test_criterion_7_mean_value_property():
    r = first_run(7)
    ok = all(abs(v - fx) <= 3 * se and tr < 1e-3 for v, fx, se, tr in r.values())
    detail = "; ".join(f"r={k}: dev {v - fx:+.5f} se {se:.5f} trunc {tr:.2%}"
                       for k, (v, fx, se, tr) in r.items())
    record("7", ok, detail)
    assert ok


def _cascade_ok(case):
    stages_ok = all(abs(dev) <= 3 * tse for _, _, dev, tse, _ in case["stages"])
    last_v, last_se = case["stages"][-1][:2]
    dv, dse = case["direct"]
    direct_ok = abs(last_v - dv) <= 3 * np.hypot(last_se, dse)
    return stages_ok, direct_ok


def test_criterion_8_tower_and_direct():
    r = first_run(8)
    results = {k: _cascade_ok(c) for k, c in r.items()}
    ok = all(a and b for a, b in results.values()) and all(c["times_monotone"]
                                                           for c in r.values())
    record("8 (tower, direct exit)", ok,
           "; ".join(f"{k}: tower {'ok' if a else 'FAIL'}, direct {'ok' if b else 'FAIL'}"
                     for k, (a, b) in results.items()))
    assert ok


def test_criterion_8_boundary_proximity():
    r = first_run(8)
    prox = {k: c["stages"][-1][4] for k, c in r.items()}
    ok = all(p >= 0.99 for p in prox.values())
    record("8 (proximity >= 99% at K=6)", ok,
           "; ".join(f"{k}: {p:.1%}" for k, p in prox.items()))
    assert ok


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, default=repr)


@pytest.mark.parametrize("n", sorted(CRITERIA))
def test_criterion_9_determinism(n):
    again = CRITERIA[n]()
    same = _canonical(again) == _canonical(first_run(n))
    prev = ACCEPTANCE.get("9", (True, ""))[0]
    record("9", prev and same, f"criteria 1-{n} rerun bit-for-bit" if prev and same
           else f"criterion {n} differs on rerun")
    assert same
