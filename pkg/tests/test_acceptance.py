"""End-to-end acceptance criteria; each prints one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``.
"""

import itertools
import json
import math
import os
import subprocess
import sys
import time
from importlib import resources

import numpy as np
import pytest

import frozen as F
from helpers import make_spec, ou_spec
from oracles import brute_force_wq, gauss_expectation_quad, heat_bump
from herdlab.chaos import clipped_identity, conditional_chaos_test, fit_loglog_slope, run_rate_experiment
from herdlab.cli import run_command
from herdlab.control import ControlParams
from herdlab.fokker_planck import Plateau, default_bank, duality_check, mean_max_residual
from herdlab.measures import wasserstein_assignment
from herdlab.optimize import gamma_experiment
from herdlab.scenario import parse_scenario

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]


def shipped(name):
    return str(resources.files("herdlab") / "scenarios" / f"{name}.json")


@pytest.fixture
def report(capsys):
    """Print one verdict line straight to the terminal and fail the test on FAIL."""
    start = time.perf_counter()

    def emit(number, title, ok, detail, limit=None):
        elapsed = time.perf_counter() - start
        if limit is not None and elapsed > limit:
            ok = False
            detail += f"; runtime {elapsed:.0f}s exceeds {limit}s"
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'}  {title}: {detail} ({elapsed:.1f}s)")
        assert ok, detail

    return emit


def zero(spec, pieces=1):
    return ControlParams.zero(spec, pieces)


def test_criterion_1_lln_rate(report):
    spec = make_spec(N=64, dt=0.5, p=4.0)
    N_list = [64, 128, 256, 512, 1024, 2048, 4096]
    table = run_rate_experiment(spec, zero(spec), N_list, 16384, 64, 1.0, 2024)
    slope, _, r2 = fit_loglog_slope(table, "wq_err")
    ok = abs(slope + 0.5) <= 0.15 and r2 >= 0.95
    report(1, "LLN rate d=1", ok, f"slope {slope:.3f} (target -0.5 +- 0.15), r2 {r2:.4f}", limit=120)


def test_criterion_2_mean_field_coupling(report):
    scn = parse_scenario(shipped("ou"))
    ex = scn.experiment
    table = run_rate_experiment(scn.spec, scn.control, ex["N_list"], ex["N_ref"], ex["replicas"], 1.0, scn.seed)
    err, se = table.column("coupled_err"), table.column("coupled_se")
    decreasing = bool(np.all(err[1:] < err[:-1] + 2 * np.hypot(se[1:], se[:-1])))
    slope, _, r2 = fit_loglog_slope(table, "coupled_err")
    ok = decreasing and slope <= -0.25 and len(table.rows) == 5
    errs = ", ".join(f"{e:.4g}" for e in err)
    report(2, "mean-field coupling", ok, f"errors [{errs}], decreasing={decreasing}, slope {slope:.3f} (<= -0.25)", limit=600)


def test_criterion_3_conditional_chaos(report):
    scn = parse_scenario(shipped("common_noise"))
    obs = [clipped_identity(), clipped_identity()]
    rep = conditional_chaos_test(scn.spec, scn.control, 256, obs, 128, scn.seed, inner=16)
    row = rep.rows[0]
    ok = row.unconditional >= 10 * abs(row.conditional) and abs(row.conditional) <= 3 * row.conditional_se
    detail = (
        f"unconditional {row.unconditional:.4f} +- {row.unconditional_se:.4f} (closed form {F.COMMON_NOISE_COV:.4f}), "
        f"conditional {row.conditional:.5f} +- {row.conditional_se:.5f}"
    )
    report(3, "conditional chaos", ok, detail, limit=180)


def test_criterion_4_weak_residual(report):
    bank = default_bank(1, 1.0)
    coarse = ou_spec(dt=0.1)
    fine = ou_spec(dt=0.05)
    a = mean_max_residual(coarse, zero(coarse), bank, 2048, 8, 7)
    b = mean_max_residual(fine, zero(fine), bank, 8192, 8, 7)
    ratio = a / b
    report(4, "weak Fokker-Planck residual", ratio >= 1.5, f"max residual {a:.4g} -> {b:.4g}, ratio {ratio:.2f} (>= 1.5)", limit=300)


def test_criterion_5_duality(report):
    bank = default_bank(1, 1.0)
    ou = parse_scenario(shipped("ou"))
    rep_ou = duality_check(ou.spec, ou.control, bank, 4096, 16, ou.seed)
    brown = make_spec(N=64, dt=0.02, sigma_i=1.0)
    rep_bm = duality_check(brown, zero(brown), bank, 4096, 16, 3)
    plateau = gauss_expectation_quad(lambda z: Plateau(4.0, 1.0)(np.array([z]))[0][0], 0.0, 2.0)
    exact = {
        "plateau": plateau,
        "bump0": F.HEAT_BUMP_C0,
        "bump_shift": F.HEAT_BUMP_C05,
        "tanh_clip": F.HEAT_TANH,
        "smooth_square": F.HEAT_SMOOTH_SQUARE,
    }
    assert exact["bump0"] == pytest.approx(heat_bump(0, 1, 0, 1, 1), abs=1e-15)
    closed = all(abs(r.lhs - exact[r.phi_id]) <= 3 * r.se and abs(r.rhs - exact[r.phi_id]) <= 3 * r.se for r in rep_bm.rows)
    ok = rep_ou.within(3.0) and rep_bm.within(3.0) and closed
    worst = max(abs(r.gap) / r.se for r in rep_ou.rows + rep_bm.rows if r.se > 0)
    report(5, "Feynman-Kac duality", ok, f"worst |gap|/se {worst:.2f} (<= 3), Brownian closed form {'ok' if closed else 'off'}", limit=300)


def test_criterion_6_gamma(report):
    scn = parse_scenario(shipped("steering"))
    ex = scn.experiment
    assert ex["N_list"] == [50, 100, 200, 400] and ex["N_star"] == 2000 and ex["budget"] == 300
    lines, ok = [], True
    for seed in (scn.seed, scn.seed + 1, scn.seed + 2):
        rep = gamma_experiment(
            scn.spec, scn.costs, ex["N_list"], ex["N_star"], ex["budget"], ex["replicas"], seed,
            init=scn.control, restarts=ex["restarts"], search=scn.search,
        )
        gaps = [r.gap for r in rep.rows]
        ses = [math.hypot(r.se, rep.se_F) for r in rep.rows]
        monotone = all(g2 <= g1 + 2 * math.hypot(s1, s2) for g1, g2, s1, s2 in zip(gaps, gaps[1:], ses, ses[1:]))
        final = gaps[-1] <= 0.25 * rep.spread
        ok = ok and monotone and final and rep.spread > 0
        lines.append(f"seed {seed}: gaps {[round(g, 4) for g in gaps]}, spread {rep.spread:.3f}")
    report(6, "Gamma-convergence of minima", ok, "; ".join(lines), limit=1800)


def test_criterion_7_exact_transport(report):
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(200):
        n, d, q = int(rng.integers(1, 7)), int(rng.integers(1, 4)), float(rng.choice([1, 2]))
        X, Y = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        worst = max(worst, abs(wasserstein_assignment(X, Y, q) - brute_force_wq(X, Y, q)))
    report(7, "exact-transport oracle", worst <= 1e-10, f"max deviation {worst:.2e} over 200 instances", limit=60)


SMALL = {"N_list": [16, 32, 64], "N_ref": 128, "replicas": 8, "budget": 20, "N_star": 128, "inner_replicas": 4}
RUNS = [
    ("ou", "validate"),
    ("ou", "simulate"),
    ("ou", "chaos-rates"),
    ("ou", "fp-check"),
    ("ou", "duality"),
    ("steering", "optimize"),
    ("steering", "gamma"),
    ("common_noise", "simulate"),
    ("common_noise", "chaos-rates"),
    ("common_noise", "fp-check"),
]


def test_criterion_8_determinism(report, tmp_path):
    bad, files = [], 0
    for name, command in RUNS:
        doc = json.loads(open(shipped(name)).read())
        doc["system"]["N"] = 64
        doc.setdefault("experiment", {}).update(SMALL)
        path = tmp_path / f"{name}.json"
        path.write_text(json.dumps(doc))
        outs = []
        for tag in "ab":
            out = tmp_path / f"{name}-{command}-{tag}"
            man = run_command(command, str(path), str(out))
            assert man["exit_code"] == 0, man["errors"]
            outs.append((out, man["outputs"]))
        (a, names_a), (b, names_b) = outs
        if names_a != names_b:
            bad.append(f"{name}/{command}: output lists differ")
        for fn in names_a:
            files += 1
            if (a / fn).read_bytes() != (b / fn).read_bytes():
                bad.append(f"{name}/{command}/{fn}")
    ok = not bad
    report(8, "determinism", ok, f"{files} files byte-identical across reruns" if ok else f"differing: {bad}")


def test_criterion_9_invariant_suites(report):
    here = os.path.dirname(os.path.abspath(__file__))
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-m", "invariant and not acceptance", "-p", "no:cacheprovider", here],
        capture_output=True,
        text=True,
    )
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    report(9, "invariant suites", proc.returncode == 0, summary)
