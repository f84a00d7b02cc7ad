import numpy as np
import pytest

from nestediv.estimators import strata_profile
from nestediv.sim import (
    ACO_STRATUM, ALPHA_SETS, PLCO_NAMES, SW_STRATA, TESTING_ALPHAS, UPTAKE, EstimationScenario, TestingScenario,
    estimation_strata_probs, gen_estimation_data, gen_plco_like, gen_testing_data, monte_carlo, run_test_study,
    strata_shares, summarize, testing_strata_probs, true_swate_oracle, winsorized_mean,
)
from nestediv.core import substream

from conftest import crossfit


def test_uptake_rules():
    assert UPTAKE[ACO_STRATUM].tolist() == [0, 1, 0, 1]
    assert UPTAKE[6].tolist() == [1, 1, 1, 1]
    assert UPTAKE[0].tolist() == [0, 0, 0, 0]
    for s in SW_STRATA:
        assert UPTAKE[s, 0] == UPTAKE[s, 1] and UPTAKE[s, 2] == 0 and UPTAKE[s, 3] == 1


def test_generated_treatment_follows_strata():
    table, lat = gen_estimation_data(EstimationScenario(n=3000, seed=1))
    np.testing.assert_array_equal(table.d, UPTAKE[lat.stratum, table.z])
    np.testing.assert_array_equal(table.y, np.where(table.d == 1, lat.y1, lat.y0))
    aco_0b = (lat.stratum == ACO_STRATUM) & (table.z == 2)
    assert aco_0b.any() and np.all(table.d[aco_0b] == 0)


def test_generation_is_deterministic():
    s = EstimationScenario(n=500, seed=4)
    a, b = gen_estimation_data(s)[0], gen_estimation_data(s)[0]
    np.testing.assert_array_equal(a.y, b.y)
    c = gen_estimation_data(s, substream(5, "data"))[0]
    assert not np.array_equal(a.y, c.y)


def test_estimation_covariates_truncated():
    table, _ = gen_estimation_data(EstimationScenario(n=5000, seed=2))
    x = np.asarray(table.x)
    assert x.shape[1] == 8
    assert np.all(np.abs(x[:, :3] - [0.0, 1.0, -0.5]) <= 4.0 + 1e-12)
    assert set(np.unique(x[:, 7])) <= {0, 1, 2, 3, 4}


def test_switcher_share_grows_with_alpha_set():
    shares = [strata_shares(gen_estimation_data, EstimationScenario(n=10, alpha_params=a), m=100_000)[[1, 2]].sum()
              for a in ALPHA_SETS]
    assert np.all(np.diff(shares) > 0)


@pytest.mark.xfail(strict=True, reason="the printed design gives 8.0% and 59.3% switchers, not 11% and 66%")
def test_switcher_share_matches_stated_levels():
    lo = strata_shares(gen_estimation_data, EstimationScenario(n=10, alpha_params=ALPHA_SETS[0]), m=1_000_000)
    hi = strata_shares(gen_estimation_data, EstimationScenario(n=10, alpha_params=ALPHA_SETS[-1]), m=1_000_000)
    assert abs(lo[[1, 2]].sum() - 0.11) <= 0.01
    assert abs(hi[[1, 2]].sum() - 0.66) <= 0.01


def test_oracle_agrees_with_conditional_expectation():
    """Switcher effect as a probability-weighted average of the conditional effect."""
    s = EstimationScenario(n=10, alpha_params=ALPHA_SETS[2], beta_params=(4.0, 4.0, 4.0), seed=3)
    oracle = true_swate_oracle(s, m=400_000)
    _, lat = gen_estimation_data(s, substream(99, "rb"), n=400_000)
    table, _ = gen_estimation_data(s, substream(99, "rb"), n=400_000)
    x = np.asarray(table.x)
    w = estimation_strata_probs(x, lat.u, s.alpha_params)[:, [1, 2]].sum(axis=1)
    tau = (4 - 1) + (4 - 1) * x[:, 0] + x[:, 1] + (4 - 1) * x[:, 2]
    rb = np.sum(w * tau) / np.sum(w)
    assert abs(oracle.value - rb) < 4 * oracle.mc_se + 0.01


def test_testing_design_split():
    rng = np.random.default_rng(0)
    x, u = rng.normal(size=(1000, 2)), rng.normal(-0.3, 0.5, 1000)
    for a in TESTING_ALPHAS:
        p = testing_strata_probs(x, u, a)
        np.testing.assert_allclose(p.sum(axis=1), 1.0)
        np.testing.assert_allclose((p[:, 1] + p[:, 2]) / (p[:, 1] + p[:, 2] + p[:, 4]), a)
    assert TestingScenario(n=1, switcher_alpha=0.4).switcher_share == pytest.approx(0.36)


@pytest.mark.xfail(strict=True, reason="combined switcher and always-complier mass is about 80.8% under the printed design")
def test_testing_combined_mass_is_ninety_percent():
    sh = strata_shares(gen_testing_data, TestingScenario(n=10, switcher_alpha=0.4), m=1_000_000)
    assert abs(sh[[1, 2, 4]].sum() - 0.9) <= 0.005


def test_testing_null_effects_coincide():
    table, lat = gen_testing_data(TestingScenario(n=5000, switcher_alpha=0.5, beta_params=(1, 2, 2), seed=1))
    x = np.asarray(table.x)
    effect = lat.y1 - lat.y0
    for group in (np.isin(lat.stratum, SW_STRATA), lat.stratum == ACO_STRATUM):
        np.testing.assert_allclose(effect[group], x[group, 0] + x[group, 1], atol=1e-12)


def test_summarize_single_replication():
    m = summarize([1.0], [0.5], [0.2], [1.8], truth=1.5)
    assert m["coverage"] in (0.0, 1.0) and m["acceptance_rate"] == 1.0
    m = summarize([1.0, 900.0, np.nan], [0.5, 1, 1], [0.0, 0, 0], [2.0, 1000, 1], truth=1.5)
    assert m["acceptance_rate"] == pytest.approx(1 / 3)


def test_winsorized_mean_clamps_tails():
    v = np.r_[np.ones(98), 1000.0, -1000.0]
    assert winsorized_mean(v) == pytest.approx(1.0)


def test_monte_carlo_is_reproducible_and_thread_independent():
    s = EstimationScenario(n=600, seed=0)
    a = monte_carlo(s, 3, ("Wald", "OneStep", "EstEq"), seed=2, truth=1.0)
    b = monte_carlo(s, 3, ("Wald", "OneStep", "EstEq"), seed=2, truth=1.0, threads=2)
    assert [r.to_dict() for r in a] == [r.to_dict() for r in b]
    assert {r.method for r in a} == {"Wald", "OneStep", "EstEq"}
    assert all(0 <= r.coverage <= 1 for r in a)


def test_test_study_rates_in_unit_interval():
    rates = run_test_study(TestingScenario(n=800, switcher_alpha=0.6), 2, seed=1)
    assert set(rates) == {1, 2, 3}
    assert all(0 <= v <= 1 for v in rates.values())


def test_plco_like_fixture_shape():
    table, lat = gen_plco_like(seed=1)
    assert table.names == PLCO_NAMES
    assert np.bincount(table.z).tolist() == [4210, 4204, 4970, 4978]
    assert table.offset is not None
    nuis = crossfit(table, spec_mu_y=None)
    prof = strata_profile(table, nuis)
    male = PLCO_NAMES.index("male")
    assert prof.switchers[male] > prof.always_compliers[male]
    assert prof.mass_aco == pytest.approx(0.526, abs=0.04)
    assert prof.mass_sw == pytest.approx(0.32, abs=0.04)
