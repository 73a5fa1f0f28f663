"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``CRITERION k: PASS|FAIL ...`` line (also collected
into the terminal summary) and then asserts the same verdict.  Tolerances are
pinned constants below and are never relaxed to make a check pass.
"""

import json
import time
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from pbctune.canonical import GyroGenerator, generated_target, to_canonical
from pbctune.cli import main
from pbctune.closedloop import ControllerGains, build_target
from pbctune.lyap import StabilityAnalysis, es_iss_report
from pbctune.model import Region, build_model
from pbctune.sim import Disturbance, SimConfig, closed_loop_rhs, envelope_check, integrate, rise_time, simulate, steady_state_offset
from pbctune.spectral import (
    eigen_circles,
    gershgorin,
    linearize,
    min_damping_for_p5,
    oscillation_free,
    rise_time_bound,
    saddle_form,
)

from conftest import VERDICTS
from instances import (
    CURVED_Q_STAR,
    Q_STAR_MANIP,
    curved_target,
    instance_target,
    manipulator_target,
    p5_instance,
    random_instance,
    scalar_target,
)

CIRCLE_RTOL = 1e-8
CIRCLE_BUDGET_S = 5.0
SPECTRA_TOL = 1e-8
IMAG_TOL = 1e-9
CRITICAL_RTOL = 1e-10
LAMBDA_TR_SLACK = 1e-8
CANONICAL_FACTOR = 10.0
CANONICAL_TOL = 1e-10
GERSHGORIN_SLACK = 1e-12
ORDER_RATIO = 8.0
N_RANDOM = 50
CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def verdict(k, ok, detail):
    line = f"CRITERION {k}: {'PASS' if ok else 'FAIL'} {detail}"
    print(line)
    VERDICTS.append(line)
    assert ok, line


def _random_instances(count, seed, builder):
    rng = np.random.default_rng(seed)
    return [builder(rng, int(rng.integers(1, 6))) for _ in range(count)]


def _spectra_distance(a, b):
    from pbctune.spectral import spectra_match

    return spectra_match(a, b)


def _builtin_targets():
    arm = build_model("two_link_arm")
    chain = build_model("mass_chain", {"n": 3, "dampers": [0.2, 0.2, 0.2]})
    msd = build_model("mass_spring_damper", {"stiffness": 2.0, "damping": 0.3})
    out = {
        "point_mass": scalar_target(c=2.0, k=1.0),
        "mass_spring_damper": build_target(msd, ControllerGains.from_values(msd, 1.0, 0.5), [0.4]),
        "two_link_arm": build_target(arm, ControllerGains.from_values(arm, [2.0, 1.0], [0.5, 0.2]), [0.5, -0.3]),
        "mass_chain": build_target(chain, ControllerGains.from_values(chain, 2.0, 1.0), [0.0, 0.0, 0.0]),
    }
    for case in "DEFG":
        out[f"planar_manipulator_{case}"] = manipulator_target(case)
    return out


def test_criterion_1_eigenvalue_circles():
    start = time.perf_counter()
    worst, count = 0.0, 0
    for inst in _random_instances(N_RANDOM, 101, random_instance):
        for c in eigen_circles(saddle_form(instance_target(inst))).defined():
            worst = max(worst, c.residual())
            count += 1
    elapsed = time.perf_counter() - start
    ok = worst <= CIRCLE_RTOL and elapsed < CIRCLE_BUDGET_S and count > 0
    verdict(1, ok, f"max rel residual {worst:.2e} over {count} eigenvalues (tol {CIRCLE_RTOL:g}), {elapsed:.2f} s (< {CIRCLE_BUDGET_S:g} s)")


def test_criterion_2_similarity_invariant():
    worst_name, worst = None, 0.0
    cases = dict(_builtin_targets())
    for i, inst in enumerate(_random_instances(N_RANDOM, 101, random_instance)):
        cases[f"random_{i}"] = instance_target(inst)
    for name, target in cases.items():
        sf = saddle_form(target)
        err = _spectra_distance(-sf.a_mat, linearize(target)) / max(1.0, np.abs(np.linalg.eigvals(sf.a_mat)).max())
        if err >= worst:
            worst_name, worst = name, err
    verdict(2, worst <= SPECTRA_TOL, f"max spectra mismatch {worst:.2e} (at {worst_name}) over {len(cases)} targets (tol {SPECTRA_TOL:g})")


def test_criterion_3_oscillation_free_rule():
    max_imag, min_real = 0.0, np.inf
    for inst in _random_instances(N_RANDOM, 303, p5_instance):
        target = instance_target(inst)
        assert oscillation_free(target).holds
        ev = np.linalg.eigvals(saddle_form(target).a_mat)
        max_imag = max(max_imag, float(np.abs(ev.imag).max()))
        min_real = min(min_real, float(ev.real.min()))
    rng = np.random.default_rng(7)
    worst_crit = 0.0
    for _ in range(10):
        k, m = rng.uniform(0.1, 20.0, 2)
        cmin = min_damping_for_p5(scalar_target(c=1.0, k=k, mass=m))
        worst_crit = max(worst_crit, abs(cmin - 2.0 * np.sqrt(k * m)) / (2.0 * np.sqrt(k * m)))
    ok = max_imag <= IMAG_TOL and min_real > 0.0 and worst_crit <= CRITICAL_RTOL
    verdict(3, ok, f"max|Im| {max_imag:.2e} (tol {IMAG_TOL:g}), min Re {min_real:.3e} > 0, critical damping rel err {worst_crit:.2e} (tol {CRITICAL_RTOL:g})")


def _rise_case(target, q0):
    sf = saddle_form(target)
    rt = rise_time_bound(sf)
    slowest = float(np.linalg.eigvals(sf.a_mat).real.min())
    t_final = 3.0 * rt.t_rt
    cfg = SimConfig(t_final=t_final, method="rk45_adaptive", abs_tol=1e-11, rel_tol=1e-10)
    x0 = np.concatenate([q0, np.zeros(target.n)])
    times, xs = integrate(closed_loop_rhs(target), x0, cfg, np.linspace(0.0, t_final, 30001))
    err = xs[:, : target.n] - target.q_star
    rises = [rise_time(times, err[:, i], 0.02 * abs(err[0, i])) for i in range(target.n)]
    worst = max(np.inf if r is None else r for r in rises)
    return rt, slowest, worst


def test_criterion_4_rise_time_bound():
    cases = {
        "scalar_critical": scalar_target(c=2.0, k=1.0),
        "scalar_overdamped": scalar_target(c=10.0, k=1.0),
    }
    for i, inst in enumerate(_random_instances(10, 404, p5_instance)):
        cases[f"random_p5_{i}_n{inst['md'].shape[0]}"] = instance_target(inst)
    rate_ok, failures, lines = True, [], []
    for name, target in cases.items():
        q0 = target.q_star + 1.0
        rt, slowest, worst = _rise_case(target, q0)
        rate_ok &= rt.lambda_tr <= slowest + LAMBDA_TR_SLACK
        lines.append(f"{name}: rise {worst:.4g} vs t_rt {rt.t_rt:.4g}")
        if not worst <= rt.t_rt:
            failures.append(f"{name} ({worst:.4g} > {rt.t_rt:.4g})")
    print("\n".join(lines))
    detail = f"lambda_tr <= min Re spec(A) + {LAMBDA_TR_SLACK:g}: {'ok' if rate_ok else 'violated'}; "
    detail += f"simulated 98% rise <= 4/lambda_tr on {len(cases) - len(failures)}/{len(cases)} instances"
    if failures:
        detail += "; exceeded: " + ", ".join(failures)
    verdict(4, rate_ok and not failures, detail)


def _envelope_runs(target, region, starts, p_radius, analysis=None):
    out = []
    for x0 in starts:
        rep = es_iss_report(target, region, x0, p_radius=p_radius, analysis=analysis)
        traj = simulate(target, x0)
        out.append((rep, traj, envelope_check(traj, rep, region)))
    return out


def test_criterion_5_es_envelope():
    scalar = scalar_target(c=2.0, k=1.0)
    s_region = Region([0.0], [1.5], 9)
    s_starts = [[1.0, 0.0], [-1.2, 0.5], [0.5, -1.0], [1.4, 0.3], [-0.3, 1.2]]
    s_runs = _envelope_runs(scalar, s_region, s_starts, 2.0)

    manip = manipulator_target("D")
    m_region = Region(Q_STAR_MANIP, np.full(4, 0.85), 5)
    analysis = StabilityAnalysis(manip, m_region, 1.0)
    offsets = [
        -Q_STAR_MANIP,
        np.full(4, 0.3),
        np.array([0.4, -0.3, 0.4, -0.3]),
        np.array([-0.5, -0.2, -0.5, -0.2]),
        np.array([0.1, -0.1, 0.1, -0.1]),
    ]
    m_starts = [np.concatenate([Q_STAR_MANIP + d, np.zeros(4)]) for d in offsets]
    m_starts[-1][4:] = [0.02, 0.0, 0.0, 0.01]
    m_runs = _envelope_runs(manip, m_region, m_starts, 1.0, analysis)

    runs = s_runs + m_runs
    inconclusive = sum(r.inconclusive for _, _, r in runs)
    state_v = sum(r.violations for _, _, r in runs)
    out_v = sum(r.output_violations for _, _, r in runs)
    worst = max(r.worst_ratio for _, _, r in runs)
    neg_scalar = sum(envelope_check(t, rep, s_region, rate=10.0 * rep.rate_sound).violations for rep, t, _ in s_runs)
    neg_manip = sum(envelope_check(t, rep, m_region, rate=10.0 * rep.rate_sound).violations for rep, t, _ in m_runs)
    print(f"info: x10 rate on Case D gives {neg_manip} violations (rate_sound {m_runs[0][0].rate_sound:.3g} 1/s)")
    ok = inconclusive == 0 and state_v == 0 and out_v == 0 and neg_scalar > 0
    verdict(
        5,
        ok,
        f"{len(runs)} runs (scalar x5, Case D x5): state violations {state_v}, output violations {out_v}, "
        f"worst |x_hat|/envelope {worst:.3f}, inconclusive {inconclusive}; x10 rate control: scalar {neg_scalar} violations, Case D {neg_manip}",
    )


def test_criterion_6_canonical_transformation():
    base = curved_target()
    gens = {
        "zero": GyroGenerator.zero(2),
        "constant": GyroGenerator.constant([0.4, -0.7]),
        "linear_symmetric": GyroGenerator.linear([[0.5, 0.3], [0.3, -0.2]]),
        "linear_antisymmetric": GyroGenerator.linear([[0.0, 0.6], [-0.6, 0.0]]),
    }
    region = Region(CURVED_Q_STAR, [0.5, 0.5], 3)
    cfg = SimConfig(t_final=10.0, method="rk45_adaptive", abs_tol=CANONICAL_TOL, rel_tol=CANONICAL_TOL)
    t_eval = np.linspace(0.0, 10.0, 1001)
    x0 = np.array([0.8, -0.6, 0.5, -0.4])
    ok, parts = True, []
    for name, gen in gens.items():
        target = generated_target(base, gen)
        cf = to_canonical(target, gen, region)
        _, xs = integrate(closed_loop_rhs(target), x0, cfg, t_eval)
        _, xcs = integrate(lambda t, xc: cf.field(xc), cf.to_canonical_state(x0), cfg, t_eval)
        mapped = np.array([cf.to_canonical_state(x) for x in xs])
        err = float(np.abs(mapped - xcs).max())
        tol = CANONICAL_FACTOR * (CANONICAL_TOL + CANONICAL_TOL * float(np.abs(xcs).max()))
        expect_intrinsic = name == "linear_antisymmetric"
        ok &= err <= tol and cf.intrinsic == expect_intrinsic
        parts.append(f"{name}: err {err:.1e}/tol {tol:.1e}, intrinsic={cf.intrinsic}")
    verdict(6, ok, "; ".join(parts))


def test_criterion_7_iss_behavior():
    d = [0.0, 0.0, 0.5, 0.5]
    cfg = SimConfig(t_final=20.0, disturbance=Disturbance("constant", tuple(d)))
    region = Region(Q_STAR_MANIP, np.full(4, 0.85), 5)
    x0 = np.zeros(8)
    offset, peak, rep = {}, {}, {}
    for case in "DE":
        target = manipulator_target(case)
        traj = simulate(target, x0, cfg)
        peak[case] = float(np.abs(traj.states).max())
        offset[case] = steady_state_offset(traj, Q_STAR_MANIP, 2.0)
        rep[case] = es_iss_report(target, region, x0, theta=0.5, disturbance=d)
    common = es_iss_report(manipulator_target("D"), region, x0, theta=0.5, disturbance=d, epsilon=min(rep["D"].epsilon, rep["E"].epsilon))
    print(
        f"info: g_r at a common eps {common.epsilon:.3g}: D {common.gain_margin:.3e} vs E {rep['E'].gain_margin:.3e}; "
        f"sound g_r: D {rep['D'].gain_margin_sound:.4e}, E {rep['E'].gain_margin_sound:.4e}"
    )
    bounded = all(np.isfinite(v) and v < 10.0 for v in peak.values())
    g_d, g_e = rep["D"].gain_margin, rep["E"].gain_margin
    ok = bounded and offset["E"] < offset["D"] and g_e > g_d
    verdict(
        7,
        ok,
        f"bounded {bounded} (peaks D {peak['D']:.3f}, E {peak['E']:.3f}); offset D {offset['D']:.4f} > E {offset['E']:.4f}: "
        f"{offset['E'] < offset['D']}; g_r (theta 0.5) D {g_d:.3e} (eps {rep['D'].epsilon:.2e}) vs E {g_e:.3e} (eps {rep['E'].epsilon:.2e}): E larger {g_e > g_d}",
    )


def test_criterion_8_kint_admissibility():
    from pbctune.closedloop import kint_admissible

    model = build_model("planar_manipulator")
    base = ControllerGains.from_values(model, [12.0, 15.0], [7.0, 5.0], [1.1, 0.43])
    scaled = ControllerGains.from_values(model, [12.0, 15.0], [7.0, 5.0], [1.65, 0.645])
    ok_g, margin_g, _ = kint_admissible(model, base, Q_STAR_MANIP)
    ok_s, margin_s, _ = kint_admissible(model, scaled, Q_STAR_MANIP)
    ok = ok_g and 0.0 < margin_g < 0.1 and not ok_s
    verdict(8, ok, f"Case G margin {margin_g:.5f} (admissible {ok_g}); Kint x1.5 margin {margin_s:.5f} (admissible {ok_s})")


def test_criterion_9_gershgorin():
    rng = np.random.default_rng(909)
    contained, edge_ok = True, True
    for _ in range(100):
        n = int(rng.integers(1, 9))
        a = rng.normal(size=(n, n))
        a = a + a.T
        discs = gershgorin(a)
        lams = np.linalg.eigvalsh(a)
        contained &= all(any(abs(lam - c) <= r + GERSHGORIN_SLACK for c, r in discs) for lam in lams)
        edge_ok &= lams[0] >= min(c - r for c, r in discs) - GERSHGORIN_SLACK
    verdict(9, contained and edge_ok, f"100 symmetric matrices: eigenvalues in disc union {contained}, lambda_min >= left edge {edge_ok}")


def test_criterion_10_integrator_order():
    exact = lambda t: (1.0 + t) * np.exp(-t)
    errs = []
    for dt in (0.1, 0.05, 0.025, 0.0125):
        times, xs = integrate(lambda s, x: np.array([x[1], -x[0] - 2.0 * x[1]]), [1.0, 0.0], SimConfig(t_final=10.0, dt=dt))
        errs.append(float(np.abs(xs[:, 0] - exact(times)).max()))
    ratios = [errs[i] / errs[i + 1] for i in range(len(errs) - 1)]
    verdict(10, min(ratios) >= ORDER_RATIO, "error ratios per halving " + ", ".join(f"{r:.2f}" for r in ratios) + f" (>= {ORDER_RATIO:g})")


def test_criterion_11_determinism(tmp_path, capsys):
    cfg = json.loads((CONFIGS / "manipulator_case_d.json").read_text())
    cfg["sim"]["t_final"] = 3.0
    path = tmp_path / "case_d.json"
    path.write_text(json.dumps(cfg))
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert main(["analyze", "--config", str(path), "--out", str(out), "--seed", "3"]) == 0
        assert main(["simulate", "--config", str(path), "--out", str(out), "--seed", "3"]) == 0
        outs.append(out)
    capsys.readouterr()
    names = ["circles.csv", "trajectory.csv", "analysis.json", "metrics.json"]
    same = {name: (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes() for name in names}
    verdict(11, all(same.values()), "byte-identical across two runs: " + ", ".join(f"{k} {v}" for k, v in same.items()))


def test_rise_time_oracle_is_exact_for_critical_scalar():
    # the 98% rise of (1 + t) e^-t solves (1 + t) e^-t = 0.02
    _, _, worst = _rise_case(scalar_target(c=2.0, k=1.0), np.array([1.0]))
    assert abs(worst - brentq(lambda t: (1 + t) * np.exp(-t) - 0.02, 1.0, 10.0)) < 1e-3
