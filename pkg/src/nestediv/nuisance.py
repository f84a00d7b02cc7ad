"""Cross-fitted nuisance functions: instrument propensities and outcome/treatment means.

Learners are generalized linear models fit by iteratively reweighted least
squares with a small ridge penalty, optionally followed by a layer of boosted
depth-one trees fit to the GLM residuals.  :func:`fit_nuisances` trains one set
of models per fold on the fold's complement and stores the out-of-fold
predictions that estimators and tests consume.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit, logit

from .core import (
    DegenerateError,
    FoldAssignment,
    NestedIVError,
    ObservationTable,
    design_matrix,
)


class Family(enum.Enum):
    LINEAR_GAUSSIAN = "gaussian"
    BINOMIAL_LOGIT = "binomial"
    POISSON_LOG = "poisson"

    @classmethod
    def parse(cls, value) -> "Family":
        if isinstance(value, Family):
            return value
        aliases = {"lineargaussian": "gaussian", "linear": "gaussian", "binomiallogit": "binomial",
                   "logistic": "binomial", "logit": "binomial", "poissonlog": "poisson"}
        v = str(value).strip().lower().replace("_", "").replace("-", "")
        return cls(aliases.get(v, v))


class RankDeficient(DegenerateError):
    """Unpenalized design matrix is singular."""


class NuisanceFitError(NestedIVError):
    """A learner failed; the message names the fold and cell."""


@dataclass(frozen=True)
class LearnerSpec:
    family: Family = Family.LINEAR_GAUSSIAN
    ridge: float = 1e-6
    max_iter: int = 100
    tol: float = 1e-8
    use_boost: bool = False
    boost_trees: int = 200
    boost_depth: int = 1
    boost_shrinkage: float = 0.1
    intercept_only: bool = False

    def __post_init__(self):
        object.__setattr__(self, "family", Family.parse(self.family))
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")
        if self.boost_depth != 1:
            raise ValueError("only depth-one trees are supported")


@dataclass(frozen=True)
class Stumps:
    """Additive depth-one trees on the linear-predictor scale."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray

    def predict(self, design: np.ndarray) -> np.ndarray:
        out = np.zeros(design.shape[0])
        for f, t, lv, rv in zip(self.feature, self.threshold, self.left, self.right):
            out += np.where(design[:, f] <= t, lv, rv)
        return out


@dataclass(frozen=True)
class GlmModel:
    family: Family
    coefficients: np.ndarray
    converged: bool
    iterations: int
    offset_used: bool
    boost: Stumps | None = None

    def linear_predictor(self, design: np.ndarray, offset: np.ndarray | None = None) -> np.ndarray:
        design = np.asarray(design, dtype=float)
        eta = design[:, : self.coefficients.size] @ self.coefficients
        if self.boost is not None:
            eta = eta + self.boost.predict(design)
        if offset is not None:
            eta = eta + offset
        return eta

    def predict(self, design: np.ndarray, offset: np.ndarray | None = None) -> np.ndarray:
        return _inverse_link(self.family, self.linear_predictor(design, offset))


def _inverse_link(family: Family, eta: np.ndarray) -> np.ndarray:
    if family is Family.BINOMIAL_LOGIT:
        return expit(eta)
    if family is Family.POISSON_LOG:
        return np.exp(np.minimum(eta, 700.0))
    return eta


def _variance(family: Family, mu: np.ndarray) -> np.ndarray:
    if family is Family.BINOMIAL_LOGIT:
        return mu * (1.0 - mu)
    if family is Family.POISSON_LOG:
        return mu
    return np.ones_like(mu)


def _penalized_loglik(family, y, eta, beta, ridge):
    if family is Family.BINOMIAL_LOGIT:
        ll = np.mean(y * eta - np.logaddexp(0.0, eta))
    elif family is Family.POISSON_LOG:
        ll = np.mean(y * eta - np.exp(np.minimum(eta, 700.0)))
    else:
        ll = -0.5 * np.mean((y - eta) ** 2)
    return ll - 0.5 * ridge * float(beta[1:] @ beta[1:])


def penalized_score(model: GlmModel, design, response, ridge: float, offset=None) -> np.ndarray:
    """Mean score of the penalized log-likelihood at the model's coefficients."""
    design = np.asarray(design, dtype=float)
    mu = _inverse_link(model.family, design @ model.coefficients + (0.0 if offset is None else offset))
    pen = ridge * model.coefficients
    pen[0] = 0.0
    return design.T @ (np.asarray(response, float) - mu) / design.shape[0] - pen


def fit_glm(design, response, spec: LearnerSpec, offset=None) -> GlmModel:
    """Penalized IRLS fit.  ``design`` includes the intercept as its first column.

    The penalty ``ridge/2 * ||beta[1:]||^2`` is added to the mean
    log-likelihood, so it does not grow with the sample size and the intercept
    is never shrunk.  ``offset`` enters the linear predictor (use log exposure
    for rates).  Iteration stops when the coefficient step is below
    ``tol * (1 + ||beta||)``; a model that hits ``max_iter`` is returned with
    ``converged=False``.
    """
    X = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float)
    n, p = X.shape
    fam = spec.family
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    if fam is Family.BINOMIAL_LOGIT and np.any((y < 0) | (y > 1)):
        raise ValueError("binomial response must lie in [0, 1]")
    if fam is Family.POISSON_LOG and np.any(y < 0):
        raise ValueError("poisson response must be nonnegative")
    P = np.eye(p)
    P[0, 0] = 0.0
    ridge = spec.ridge
    if ridge == 0 and np.linalg.matrix_rank(X) < p:
        raise RankDeficient("design matrix is rank deficient and ridge is 0")

    if fam is Family.LINEAR_GAUSSIAN:
        A = X.T @ X / n + ridge * P
        beta = _solve(A, X.T @ (y - off) / n)
        model = GlmModel(fam, beta, True, 1, offset is not None)
        return _boost(model, X, y, off, spec) if spec.use_boost else model

    beta = np.zeros(p)
    beta[0] = _start_intercept(fam, y, off)
    if _constant_boundary(fam, y):
        # all-zero (or all-one) response: the MLE is at infinity, keep a finite
        # intercept-only fit on the correct side
        model = GlmModel(fam, beta, True, 0, offset is not None)
        return _boost(model, X, y, off, spec) if spec.use_boost else model

    eta = X @ beta + off
    obj = _penalized_loglik(fam, y, eta, beta, ridge)
    converged = False
    it = 0
    for it in range(1, spec.max_iter + 1):
        mu = _inverse_link(fam, eta)
        w = _variance(fam, mu)
        grad = X.T @ (y - mu) / n - ridge * (P @ beta)
        H = (X * w[:, None]).T @ X / n + ridge * P
        step = _solve(H, grad)
        t = 1.0
        while True:
            cand = beta + t * step
            eta_c = X @ cand + off
            obj_c = _penalized_loglik(fam, y, eta_c, cand, ridge)
            if obj_c >= obj - 1e-12 * abs(obj) or t < 1e-8:
                break
            t *= 0.5
        beta, eta, obj = cand, eta_c, obj_c
        if np.linalg.norm(t * step) <= spec.tol * (1.0 + np.linalg.norm(beta)):
            converged = True
            break
    if not np.all(np.isfinite(beta)):
        raise DegenerateError("GLM coefficients are not finite")
    if not converged:
        warnings.warn(f"IRLS did not converge in {spec.max_iter} iterations", RuntimeWarning, stacklevel=2)
    model = GlmModel(fam, beta, converged, it, offset is not None)
    return _boost(model, X, y, off, spec) if spec.use_boost else model


def _solve(A, b):
    try:
        return np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        raise RankDeficient("normal equations are singular") from None


def _constant_boundary(fam, y):
    if fam is Family.BINOMIAL_LOGIT:
        return bool(np.all(y == 0) or np.all(y == 1))
    if fam is Family.POISSON_LOG:
        return bool(np.all(y == 0))
    return False


def _start_intercept(fam, y, off):
    n = y.size
    if fam is Family.BINOMIAL_LOGIT:
        m = np.clip(y.mean(), 0.5 / (n + 1), 1 - 0.5 / (n + 1))
        return float(logit(m)) - float(np.mean(off))
    if fam is Family.POISSON_LOG:
        m = max(y.sum(), 0.5) / np.exp(off).sum()
        return float(np.log(m))
    return 0.0


def _boost(model: GlmModel, X, y, off, spec: LearnerSpec) -> GlmModel:
    """Gradient boosting with Newton leaf values, starting from the GLM fit."""
    fam = model.family
    n, p = X.shape
    eta = X @ model.coefficients + off
    cols = [j for j in range(1, p) if np.ptp(X[:, j]) > 0]
    bins, cuts = [], []
    for j in cols:
        c = np.unique(np.quantile(X[:, j], np.linspace(0, 1, 34)[1:-1]))
        cuts.append(c)
        bins.append(np.searchsorted(c, X[:, j], side="left"))
    feats, ths, lefts, rights = [], [], [], []
    for _ in range(spec.boost_trees if cols else 0):
        mu = _inverse_link(fam, eta)
        g = y - mu
        h = np.maximum(_variance(fam, mu), 1e-6)
        G, Hs = g.sum(), h.sum()
        best = (0.0, None)
        for j, b, c in zip(cols, bins, cuts):
            gl = np.cumsum(np.bincount(b, weights=g, minlength=c.size + 1))[:-1]
            hl = np.cumsum(np.bincount(b, weights=h, minlength=c.size + 1))[:-1]
            hr = Hs - hl
            ok = (hl > 1e-8) & (hr > 1e-8)
            gain = np.where(ok, gl ** 2 / np.where(ok, hl, 1) + (G - gl) ** 2 / np.where(ok, hr, 1), -np.inf)
            i = int(np.argmax(gain))
            if gain[i] - G ** 2 / Hs > best[0]:
                best = (gain[i] - G ** 2 / Hs, (j, c[i], gl[i] / hl[i], (G - gl[i]) / hr[i]))
        if best[1] is None:
            break
        j, t, lv, rv = best[1]
        lv, rv = spec.boost_shrinkage * lv, spec.boost_shrinkage * rv
        eta = eta + np.where(X[:, j] <= t, lv, rv)
        feats.append(j)
        ths.append(t)
        lefts.append(lv)
        rights.append(rv)
    stumps = Stumps(np.array(feats, dtype=int), np.array(ths), np.array(lefts), np.array(rights))
    return GlmModel(fam, model.coefficients, model.converged, model.iterations, model.offset_used, stumps)


# Cross-fitting

@dataclass(frozen=True)
class CrossFitNuisances:
    """Out-of-fold nuisance predictions for every row.

    ``pi``, ``mu_y`` and ``mu_d`` are ``n x 4`` arrays with columns in code
    order 0a, 1a, 0b, 1b.  ``models`` maps ``(fold, name)`` to fitted models,
    where name is ``"pi_g"``, ``"pi_arm_a"``, ``"pi_arm_b"``, ``"mu_y_<code>"``
    or ``"mu_d_<code>"``.
    """

    folds: FoldAssignment
    pi: np.ndarray
    mu_y: np.ndarray
    mu_d: np.ndarray
    clip_eps: float
    models: dict = field(default_factory=dict, repr=False)
    nonconverged: tuple = ()

    @property
    def n(self) -> int:
        return self.pi.shape[0]


def clip_probabilities(pi: np.ndarray, clip_eps: float) -> np.ndarray:
    """Clip a ``n x 4`` propensity matrix and renormalize its rows."""
    pi = np.clip(pi, clip_eps, 1.0 - clip_eps)
    return pi / pi.sum(axis=1, keepdims=True)


def fit_nuisances(
    table: ObservationTable,
    folds: FoldAssignment,
    spec_pi: LearnerSpec | None = None,
    spec_mu_y: LearnerSpec | None = None,
    spec_mu_d: LearnerSpec | None = None,
    clip_eps: float = 0.01,
    pi_known: Callable[[np.ndarray], np.ndarray] | None = None,
) -> CrossFitNuisances:
    """Cross-fit pi(z|x), mu_Y(z,x) and mu_D(z,x).

    pi(z|x) is P(G|x) * P(arm|G,x) from two logistic fits.  mu_D is a logistic
    fit of D on x within each code's training rows and mu_Y a fit of the
    chosen family within each code's training rows.  When the table has an
    offset, mu_Y uses log(offset) and predicts the expected outcome at each
    row's own offset.  ``pi_known`` replaces the fitted propensities by a known
    function of x (returning ``n x 4``), still subject to clipping.
    """
    if not 0 < clip_eps < 0.5:
        raise ValueError("clip_eps must be in (0, 0.5)")
    spec_pi = spec_pi or LearnerSpec(Family.BINOMIAL_LOGIT)
    spec_mu_d = spec_mu_d or LearnerSpec(Family.BINOMIAL_LOGIT)
    if spec_mu_y is None:
        fam = Family.POISSON_LOG if table.offset is not None else Family.LINEAR_GAUSSIAN
        spec_mu_y = LearnerSpec(fam)
    if spec_pi.family is not Family.BINOMIAL_LOGIT or spec_mu_d.family is not Family.BINOMIAL_LOGIT:
        raise ValueError("pi and mu_d learners must use the binomial family")

    n = table.n
    X = design_matrix(table.x)
    z = table.z
    logoff = None if table.offset is None else np.log(table.offset)
    g_b = (z >= 2).astype(float)
    arm = (z % 2).astype(float)
    pi = np.empty((n, 4))
    mu_y = np.empty((n, 4))
    mu_d = np.empty((n, 4))
    models = {}
    bad = []

    def fit(k, name, rows, resp, spec, use_offset=False):
        Xd = X[rows][:, :1] if spec.intercept_only else X[rows]
        off = logoff[rows] if (use_offset and logoff is not None) else None
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                m = fit_glm(Xd, resp[rows], spec, offset=off)
        except NestedIVError as exc:
            raise NuisanceFitError(f"fold {k}, {name}: {exc}") from exc
        models[(k, name)] = m
        if not m.converged:
            bad.append((k, name))
        return m

    for k in range(folds.K):
        test = folds.indices(k)
        train = folds.train_indices(k)
        Xt = X[test]
        if pi_known is None:
            pg = fit(k, "pi_g", train, g_b, spec_pi).predict(_cols(Xt, spec_pi))
            pa = fit(k, "pi_arm_a", train[z[train] < 2], arm, spec_pi).predict(_cols(Xt, spec_pi))
            pb = fit(k, "pi_arm_b", train[z[train] >= 2], arm, spec_pi).predict(_cols(Xt, spec_pi))
            raw = np.column_stack([(1 - pg) * (1 - pa), (1 - pg) * pa, pg * (1 - pb), pg * pb])
        else:
            raw = np.asarray(pi_known(table.x[test]), dtype=float)
        pi[test] = clip_probabilities(raw, clip_eps)
        for c, tok in enumerate(("0a", "1a", "0b", "1b")):
            rows = train[z[train] == c]
            md = fit(k, f"mu_d_{tok}", rows, table.d, spec_mu_d)
            mu_d[test, c] = np.clip(md.predict(_cols(Xt, spec_mu_d)), clip_eps, 1 - clip_eps)
            my = fit(k, f"mu_y_{tok}", rows, table.y, spec_mu_y, use_offset=True)
            off_t = None if logoff is None else logoff[test]
            mu_y[test, c] = my.predict(_cols(Xt, spec_mu_y), off_t)
    for a in (pi, mu_y, mu_d):
        a.setflags(write=False)
    return CrossFitNuisances(folds, pi, mu_y, mu_d, clip_eps, models, tuple(bad))


def _cols(X, spec):
    return X[:, :1] if spec.intercept_only else X


def predict_nuisance(nuis: CrossFitNuisances, i: int) -> dict:
    """Out-of-fold predictions for row ``i`` keyed by ``pi``, ``mu_y``, ``mu_d``.

    Each entry maps code tokens to values.
    """
    toks = ("0a", "1a", "0b", "1b")
    return {
        "fold": int(nuis.folds.fold_of[i]),
        "pi": dict(zip(toks, map(float, nuis.pi[i]))),
        "mu_y": dict(zip(toks, map(float, nuis.mu_y[i]))),
        "mu_d": dict(zip(toks, map(float, nuis.mu_d[i]))),
    }
