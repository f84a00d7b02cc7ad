import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nestediv import ObservationTable, make_folds
from nestediv.core import design_matrix
from nestediv.nuisance import (
    Family, LearnerSpec, RankDeficient, clip_probabilities, fit_glm, fit_nuisances, penalized_score,
    predict_nuisance,
)
from nestediv.sim import EstimationScenario, gen_estimation_data

from conftest import crossfit


def test_gaussian_exact_fit():
    x = np.linspace(-2, 2, 50)
    m = fit_glm(design_matrix(x), 3.0 - 2.0 * x, LearnerSpec(Family.LINEAR_GAUSSIAN, ridge=0.0))
    np.testing.assert_allclose(m.coefficients, [3.0, -2.0], atol=1e-10)


def test_logit_separation_stays_finite():
    x = np.linspace(-1, 1, 200)
    m = fit_glm(design_matrix(x), (x > 0).astype(float), LearnerSpec(Family.BINOMIAL_LOGIT, ridge=1e-6))
    assert m.converged
    assert np.all(np.isfinite(m.coefficients))
    assert m.coefficients[1] > 0


def test_poisson_offset_recovers_rate():
    rng = np.random.default_rng(1)
    n = 100_000
    t = rng.uniform(0.5, 3.0, n)
    y = rng.poisson(1.5 * t)
    m = fit_glm(np.ones((n, 1)), y, LearnerSpec(Family.POISSON_LOG), offset=np.log(t))
    assert m.coefficients[0] == pytest.approx(0.405, abs=0.02)
    assert m.predict(np.ones((1, 1)), np.log([2.0]))[0] == pytest.approx(3.0, rel=0.03)


def test_logit_score_is_zero_at_fit():
    rng = np.random.default_rng(2)
    X = design_matrix(rng.normal(size=(500, 3)))
    y = (rng.random(500) < 1 / (1 + np.exp(-X @ [0.2, 1.0, -0.5, 0.3]))).astype(float)
    spec = LearnerSpec(Family.BINOMIAL_LOGIT, ridge=1e-3)
    m = fit_glm(X, y, spec)
    assert np.abs(penalized_score(m, X, y, spec.ridge)).max() < 1e-9


def test_constant_response_gives_finite_intercept():
    X = design_matrix(np.random.default_rng(0).normal(size=(30, 2)))
    m = fit_glm(X, np.zeros(30), LearnerSpec(Family.BINOMIAL_LOGIT))
    assert np.all(np.isfinite(m.coefficients))
    assert np.all(m.predict(X) < 0.05)


def test_rank_deficient_without_ridge():
    X = design_matrix(np.column_stack([np.arange(10.0), np.arange(10.0)]))
    with pytest.raises(RankDeficient):
        fit_glm(X, np.arange(10.0), LearnerSpec(Family.LINEAR_GAUSSIAN, ridge=0.0))


def test_boosting_reduces_training_loss():
    rng = np.random.default_rng(3)
    x = rng.uniform(-2, 2, 800)
    y = np.sin(2 * x) + 0.1 * rng.normal(size=800)
    X = design_matrix(x)
    plain = fit_glm(X, y, LearnerSpec(Family.LINEAR_GAUSSIAN))
    boosted = fit_glm(X, y, LearnerSpec(Family.LINEAR_GAUSSIAN, use_boost=True))
    assert np.mean((y - boosted.predict(X)) ** 2) < 0.5 * np.mean((y - plain.predict(X)) ** 2)


def test_clip_and_renormalize():
    raw = np.array([[0.002, 0.398, 0.3, 0.3]])
    out = clip_probabilities(raw, 0.01)
    assert out.sum() == pytest.approx(1.0)
    assert out[0, 0] == pytest.approx(0.01 / 1.008)
    assert np.all(out >= 0.0099)


@pytest.fixture(scope="module")
def randomized():
    """Codes drawn independently of x with frequencies 0.2, 0.3, 0.15, 0.35."""
    rng = np.random.default_rng(4)
    n = 5000
    x = rng.normal(size=(n, 3))
    z = rng.choice(4, n, p=[0.2, 0.3, 0.15, 0.35])
    d = (rng.random(n) < np.array([0.05, 0.6, 0.05, 0.9])[z]).astype(float)
    y = x @ [1.0, -1.0, 0.5] + 2 * d + rng.normal(size=n)
    return ObservationTable(z=z, x=x, d=d, y=y)


def test_pi_matches_cell_frequencies(randomized):
    nuis = crossfit(randomized)
    freq = np.bincount(randomized.z, minlength=4) / randomized.n
    assert np.abs(nuis.pi - freq).max() < 0.05


def test_crossfit_invariants(randomized):
    for K in (2, 5):
        nuis = crossfit(randomized, K=K, clip_eps=0.02)
        np.testing.assert_allclose(nuis.pi.sum(axis=1), 1.0, atol=1e-12)
        assert nuis.pi.min() >= 0.02 / (1 + 4 * 0.02) - 1e-12
        assert nuis.mu_d.min() >= 0.02 and nuis.mu_d.max() <= 0.98
        assert nuis.pi.shape == nuis.mu_y.shape == nuis.mu_d.shape == (randomized.n, 4)
        assert not nuis.nonconverged


def test_fold_rows_ignore_own_outcomes(randomized):
    folds = make_folds(randomized.n, 5, randomized.z, 1)
    base = fit_nuisances(randomized, folds)
    own = folds.indices(2)
    y = randomized.y.copy()
    y[own] = np.random.default_rng(9).permutation(y[own]) + 100.0
    d = randomized.d.copy()
    d[own] = 1 - d[own]
    moved = fit_nuisances(randomized.replace(y=y, d=d), folds)
    for name in ("pi", "mu_y", "mu_d"):
        np.testing.assert_array_equal(getattr(moved, name)[own], getattr(base, name)[own])
    assert not np.allclose(moved.mu_y[folds.indices(0)], base.mu_y[folds.indices(0)])


def test_predict_nuisance_row(randomized):
    nuis = crossfit(randomized)
    out = predict_nuisance(nuis, 7)
    assert out["fold"] == nuis.folds.fold_of[7]
    assert out["mu_y"]["1b"] == nuis.mu_y[7, 3]
    assert sum(out["pi"].values()) == pytest.approx(1.0)


def test_intercept_only_learner(randomized):
    nuis = crossfit(randomized, spec_mu_y=LearnerSpec(Family.LINEAR_GAUSSIAN, intercept_only=True))
    f = nuis.folds
    for k in range(f.K):
        rows = f.indices(k)
        assert np.ptp(nuis.mu_y[rows], axis=0).max() < 1e-12


def test_known_pi_is_used(randomized):
    known = lambda x: np.tile([0.25, 0.25, 0.25, 0.25], (x.shape[0], 1))  # noqa: E731
    nuis = crossfit(randomized, pi_known=known)
    np.testing.assert_allclose(nuis.pi, 0.25)
    assert not any(name.startswith("pi") for _, name in nuis.models)


def test_poisson_mu_y_uses_row_offset():
    rng = np.random.default_rng(6)
    n = 4000
    z = rng.integers(0, 4, n)
    t = rng.uniform(1, 4, n)
    y = rng.poisson(0.5 * t)
    table = ObservationTable(z=z, x=rng.normal(size=n), d=(z % 2).astype(float), y=y, offset=t)
    folds = make_folds(n, 5, z, 0)
    nuis = fit_nuisances(table, folds)
    rate = nuis.mu_y / t[:, None]
    assert np.mean(np.abs(rate - 0.5)) < 0.03


@settings(max_examples=15, deadline=None)
@given(st.floats(0.2, 5.0), st.floats(-3.0, 3.0), st.integers(0, 1000))
def test_gaussian_predictions_affine_equivariant(scale, shift, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(60, 2))
    y = rng.normal(size=60)
    spec = LearnerSpec(Family.LINEAR_GAUSSIAN, ridge=0.0)
    a = fit_glm(design_matrix(x), y, spec).predict(design_matrix(x))
    x2 = x * scale + shift
    b = fit_glm(design_matrix(x2), y, spec).predict(design_matrix(x2))
    np.testing.assert_allclose(a, b, atol=1e-8)


def test_estimation_design_propensities_reasonable():
    table, _ = gen_estimation_data(EstimationScenario(n=3000, seed=2))
    nuis = crossfit(table)
    from nestediv.sim import estimation_pi
    truth = estimation_pi(np.asarray(table.x))
    assert np.mean(np.abs(nuis.pi - truth)) < 0.03
