"""Acceptance criteria, one test each.  Every test prints a single PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``.  The Monte Carlo criteria
take a few minutes in total on one core.
"""

import numpy as np
import pytest
from scipy.stats import norm

from nestediv import (
    Estimand, ObservationTable, adjusted_compliance, eif_swate, estimating_equation, make_folds, one_step,
    projection_test, strata_profile, wald_swate,
)
from nestediv.estimators import fold_pieces
from nestediv.homogeneity import gaussian_max_quantile
from nestediv.nuisance import CrossFitNuisances, Family, LearnerSpec, fit_nuisances
from nestediv.core import substream
from nestediv.sim import (
    ALPHA_SETS, EstimationScenario, TestingScenario, gen_estimation_data, gen_plco_like,
    gen_testing_data, monte_carlo, replicate_points, run_test_study, summarize, true_swate_oracle,
)

from conftest import crossfit

pytestmark = pytest.mark.slow

STATED_TRUTH = dict(zip(ALPHA_SETS, (0.917, 1.019, 1.377, 1.557)))
SW66, SW11 = ALPHA_SETS[3], ALPHA_SETS[0]


def verdict(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
    assert ok, detail


def brute_force_wald(z, y, d):
    ys, ds, ns = [0.0] * 4, [0.0] * 4, [0] * 4
    for zi, yi, di in zip(z, y, d):
        ys[int(zi)] += float(yi)
        ds[int(zi)] += float(di)
        ns[int(zi)] += 1
    ym = [ys[c] / ns[c] for c in range(4)]
    dm = [ds[c] / ns[c] for c in range(4)]
    return ((ym[3] - ym[2]) - (ym[1] - ym[0])) / ((dm[3] - dm[2]) - (dm[1] - dm[0]))


def test_01_truth_oracle(capsys):
    parts, ok = [], True
    for a in ALPHA_SETS:
        r = true_swate_oracle(EstimationScenario(n=1, alpha_params=a), m=1_000_000, seed=2024)
        good = abs(r.value - STATED_TRUTH[a]) <= 0.015
        ok &= good
        parts.append(f"{r.value:.3f} vs {STATED_TRUTH[a]:.3f} (SW share {r.share:.3f})")
    verdict(capsys, 1, ok, "oracle at m=1e6: " + "; ".join(parts))


def test_02_ee_bias_and_coverage(capsys):
    s = EstimationScenario(n=10_000, alpha_params=SW66)
    pts = replicate_points(s, 200, ("EstEq",), seed=202)["EstEq"]
    own = true_swate_oracle(s, m=1_000_000, seed=2024).value
    stated, mine = (summarize(pts[:, 0], pts[:, 1], pts[:, 2], pts[:, 3], t) for t in (1.557, own))
    ok = abs(stated["bias"]) <= 0.03 and 0.92 <= stated["coverage"] <= 0.98
    verdict(capsys, 2, ok, f"mean {stated['mean_estimate']:.4f} (|bias| vs 1.557 = {abs(stated['bias']):.4f}), "
                           f"coverage of 1.557 {stated['coverage']:.3f}; against own oracle {own:.4f}: "
                           f"bias {mine['bias']:+.4f}, coverage {mine['coverage']:.3f}")


def test_03_weak_instrument_signature(capsys):
    s = EstimationScenario(n=1000, alpha_params=SW11)
    truth = true_swate_oracle(s, m=1_000_000, seed=2024).value
    os_row, ee_row = monte_carlo(s, 200, ("OneStep", "EstEq"), seed=303, truth=truth)
    ok = os_row.acceptance_rate < 0.99 and os_row.coverage < 0.93 and ee_row.acceptance_rate >= 0.99
    verdict(capsys, 3, ok, f"one-step acceptance {os_row.acceptance_rate:.3f}, coverage {os_row.coverage:.3f}; "
                           f"EE acceptance {ee_row.acceptance_rate:.3f}, coverage {ee_row.coverage:.3f} "
                           f"(truth {truth:.3f})")


def test_04_one_step_ee_equivalence(capsys):
    gaps = {}
    for n in (2000, 10_000):
        pts = replicate_points(EstimationScenario(n=n, alpha_params=SW66), 50, ("OneStep", "EstEq"), seed=404)
        gaps[n] = float(np.mean(np.abs(pts["OneStep"][:, 0] - pts["EstEq"][:, 0])))
    ok = gaps[2000] <= 0.05 and gaps[10_000] <= 0.02
    verdict(capsys, 4, ok, f"mean |os - ee| = {gaps[2000]:.4f} at n=2000, {gaps[10_000]:.4f} at n=10000")


def test_05_ee_fixed_point(capsys):
    tables = [gen_estimation_data(EstimationScenario(n=3000, alpha_params=a, seed=i))[0]
              for i, a in enumerate(ALPHA_SETS)]
    tables.append(gen_testing_data(TestingScenario(n=3000, switcher_alpha=0.6, seed=9))[0])
    worst = 0.0
    for i, table in enumerate(tables):
        nuis = crossfit(table, seed=i)
        r = estimating_equation(table, nuis)
        fp, _, _ = fold_pieces(table, nuis, Estimand.SWATE)
        f = nuis.folds.fold_of
        for k, psi_k in enumerate(r.fold_estimates):
            rows = np.flatnonzero(f == k)
            sub = CrossFitNuisances(nuis.folds, nuis.pi[rows], nuis.mu_y[rows], nuis.mu_d[rows], nuis.clip_eps)
            worst = max(worst, abs(float(np.mean(eif_swate(table.take(rows), sub, psi_k, fp.omega[k])))))
    verdict(capsys, 5, worst <= 1e-10, f"max fold mean of the influence function at the EE root = {worst:.2e}")


def test_06_wald_brute_force(capsys):
    rng = np.random.default_rng(606)
    mismatches = 0
    for trial in range(300):
        n = int(rng.integers(8, 400))
        z = np.r_[np.arange(4), rng.integers(0, 4, n - 4)]
        d = (rng.random(n) < rng.uniform(0, 1, 4)[z]).astype(float)
        y = rng.standard_t(3, n) * 10.0 ** rng.uniform(-3, 3)
        try:
            expected = brute_force_wald(z, y, d)
        except ZeroDivisionError:
            continue
        mismatches += wald_swate(ObservationTable(z=z, x=np.zeros(n), d=d, y=y)).point != expected
    table, _ = gen_estimation_data(EstimationScenario(n=5000, seed=6))
    mismatches += wald_swate(table).point != brute_force_wald(table.z, table.y, table.d)
    verdict(capsys, 6, mismatches == 0, f"{mismatches} inexact matches over 301 tables")


def test_07_invariances(capsys):
    table, _ = gen_estimation_data(EstimationScenario(n=4000, alpha_params=SW66, seed=7))
    folds = make_folds(table.n, 5, table.z, 7)
    shift, scale = 12.5, -3.0

    def points(t):
        nuis = fit_nuisances(t, folds)
        return np.array([wald_swate(t).point, one_step(t, nuis).point, estimating_equation(t, nuis).point])

    base = points(table)
    d_shift = float(np.max(np.abs(points(table.replace(y=table.y + shift)) - base)))
    d_scale = float(np.max(np.abs(points(table.replace(y=table.y * scale)) - scale * base) / np.abs(scale * base)))

    tt, _ = gen_testing_data(TestingScenario(n=5000, switcher_alpha=0.4, beta_params=(2, 3, 3), seed=7))
    A, b = np.array([[2.0, 0.5], [-1.0, 3.0]]), np.array([10.0, -4.0])
    recoded = tt.replace(x=np.asarray(tt.x) @ A.T + b)
    tf = make_folds(tt.n, 5, tt.z, 8)

    def stats(t, ridge):
        spec = dict(spec_pi=LearnerSpec(Family.BINOMIAL_LOGIT, ridge=ridge),
                    spec_mu_y=LearnerSpec(Family.LINEAR_GAUSSIAN, ridge=ridge),
                    spec_mu_d=LearnerSpec(Family.BINOMIAL_LOGIT, ridge=ridge))
        nuis = fit_nuisances(t, tf, **spec)
        return np.array([projection_test(t, nuis, j).statistic for j in (1, 2, 3)])

    d_affine = float(np.max(np.abs(stats(recoded, 0.0) / stats(tt, 0.0) - 1)))
    d_ridge = float(np.max(np.abs(stats(recoded, 1e-6) / stats(tt, 1e-6) - 1)))
    ok = d_shift <= 1e-10 and d_scale <= 1e-9 and d_affine <= 1e-6
    verdict(capsys, 7, ok, f"shift max change {d_shift:.1e}, scale max rel error {d_scale:.1e}, "
                           f"affine W rel change {d_affine:.1e} (unpenalized learners; ridge 1e-6 gives {d_ridge:.1e})")


def test_08_projection_size(capsys):
    rates = run_test_study(TestingScenario(n=5000, switcher_alpha=0.4, beta_params=(1, 2, 2)), 200, seed=808)
    ok = all(v <= 0.081 for v in rates.values())
    verdict(capsys, 8, ok, "null rejection rates " + ", ".join(f"T{j} {v:.3f}" for j, v in rates.items()))


def test_09_power_ordering(capsys):
    high = run_test_study(TestingScenario(n=5000, switcher_alpha=0.9, beta_params=(2, 3, 3)), 200, seed=909)
    low = run_test_study(TestingScenario(n=5000, switcher_alpha=0.1, beta_params=(2, 3, 3)), 200, seed=910)
    ok = high[3] >= high[1] and low[2] >= low[3]
    fmt = lambda r: ", ".join(f"T{j} {v:.3f}" for j, v in r.items())  # noqa: E731
    verdict(capsys, 9, ok, f"81% SW: {fmt(high)} (need T3 >= T1); 9% SW: {fmt(low)} (need T2 >= T3)")


def test_10_ks_size_and_quantile(capsys):
    rates = run_test_study(TestingScenario(n=2000, switcher_alpha=0.4, beta_params=(1, 2, 2)), 200, kind="ks",
                           M=2000, seed=1010)
    alpha = 0.05
    q, _ = gaussian_max_quantile(np.eye(10), alpha, 20_000, substream(1010, "quantile-oracle"))
    exact = float(norm.ppf(0.5 + 0.5 * (1 - alpha) ** 0.1))
    rel = abs(q / exact - 1)
    ok = all(v <= 0.081 for v in rates.values()) and rel <= 0.03
    verdict(capsys, 10, ok, "KS null rejection " + ", ".join(f"T{j} {v:.3f}" for j, v in rates.items())
            + f"; quantile {q:.4f} vs exact {exact:.4f} (rel {rel:.3%})")


def test_11_known_propensity_intercept_only_outcome(capsys):
    s = EstimationScenario(n=10_000, alpha_params=SW66)
    truth = true_swate_oracle(s, m=1_000_000, seed=2024).value
    learners = {"mu_y": LearnerSpec(Family.LINEAR_GAUSSIAN, intercept_only=True)}
    (row,) = monte_carlo(s, 100, ("EstEq",), seed=1111, truth=truth, learners=learners, known_pi=True)
    verdict(capsys, 11, abs(row.bias) <= 0.05,
            f"mean {row.mean_estimate:.4f} vs oracle {truth:.4f}, bias {row.bias:+.4f}, coverage {row.coverage:.3f}")


def test_12_plco_switcher_mass(capsys):
    table, _ = gen_plco_like(seed=12)
    nuis = fit_nuisances(table, make_folds(table.n, 5, table.z, 12))
    prof = strata_profile(table, nuis)
    comp = adjusted_compliance(nuis)
    gap = abs(prof.mass_sw - (comp["b"] - comp["a"]))
    verdict(capsys, 12, gap <= 1e-10, f"switcher mass {prof.mass_sw:.4f} = {comp['b']:.4f} - {comp['a']:.4f} "
                                      f"(difference {gap:.1e})")

