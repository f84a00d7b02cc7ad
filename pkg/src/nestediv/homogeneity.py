"""Tests of effect homogeneity across always-compliers, switchers and compliers.

Contrast j compares two conditional effects:

* j=1: theta_ACO(x) - theta_SW(x)
* j=2: theta_ACO(x) - theta_CO(x)
* j=3: theta_SW(x) - theta_CO(x)

with theta_ACO = delta_a/eta_a, theta_SW = (delta_b - delta_a)/(eta_b - eta_a)
and theta_CO = delta_b/eta_b.  Two tests are offered: a Wald test on the best
linear projection of the contrast onto (1, x) and a Kolmogorov-Smirnov type
test on Omega(c) = E[theta(X) 1{X <= c}] with a Gaussian-process critical
value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import chi2

from .core import DegenerateError, NestedIVError, ObservationTable, chol_jitter, design_matrix, substream
from .estimators import SIGNS, Estimand, conditional_contrasts, ipw_residuals
from .nuisance import CrossFitNuisances

CONTRASTS = {
    1: (Estimand.ACOATE, Estimand.SWATE),
    2: (Estimand.ACOATE, Estimand.COATE),
    3: (Estimand.SWATE, Estimand.COATE),
}

# gradient component k in the pointwise ratio gradients
COMPONENT = {1: Estimand.ACOATE, 2: Estimand.SWATE, 3: Estimand.COATE}


class SingularGram(DegenerateError):
    pass


class DegenerateCovariance(DegenerateError):
    pass


class GridEmpty(NestedIVError):
    pass


def contrast_id(j) -> int:
    j = int(j)
    if j not in CONTRASTS:
        raise ValueError(f"contrast must be 1, 2 or 3, got {j}")
    return j


@dataclass(frozen=True)
class TestReport:
    __test__ = False  # keep pytest from collecting this class

    contrast: int
    kind: str
    statistic: float
    critical: float
    alpha: float
    reject: bool
    df: int | None = None
    p_value: float | None = None
    beta_hat: np.ndarray | None = None
    q_alpha: float | None = None
    M: int | None = None
    n_used: int = 0
    n_excluded: int = 0
    extras: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        out = {
            "contrast": self.contrast, "kind": self.kind, "statistic": self.statistic,
            "critical": self.critical, "alpha": self.alpha, "reject": self.reject,
            "n_used": self.n_used, "n_excluded": self.n_excluded,
        }
        if self.df is not None:
            out["df"] = self.df
        if self.p_value is not None:
            out["p_value"] = self.p_value
        if self.beta_hat is not None:
            out["beta_hat"] = [float(b) for b in self.beta_hat]
        if self.q_alpha is not None:
            out["q_alpha"] = self.q_alpha
            out["M"] = self.M
        return out


@dataclass(frozen=True)
class PointwiseContrast:
    """Per-row contrast theta^(j)(x_i), its gradient pair D_first - D_second and a keep mask."""

    theta: np.ndarray
    gradient: np.ndarray
    keep: np.ndarray


def _ratio_parts(table, nuis, component: Estimand):
    cc = conditional_contrasts(nuis)
    num, den = cc.numerator(component), cc.denominator(component)
    ry, rd = ipw_residuals(table, nuis, SIGNS[component])
    return num, den, ry, rd


def gradient_D(k: int, table: ObservationTable, nuis: CrossFitNuisances, denom_point_tol: float = 0.01):
    """Pointwise ratio gradient D^(k) for every row, with a keep mask.

    k=1 is the stratum-a ratio, k=2 the switcher ratio, k=3 the stratum-b
    ratio: D = R_Y/eta - delta/eta^2 R_D with R the signed inverse-propensity
    residual sums.  Rows with |eta| below ``denom_point_tol`` are excluded
    (their value is set to 0 and ``keep`` is False).
    """
    num, den, ry, rd = _ratio_parts(table, nuis, COMPONENT[int(k)])
    keep = np.abs(den) >= denom_point_tol
    safe = np.where(keep, den, 1.0)
    D = np.where(keep, ry / safe - num / safe ** 2 * rd, 0.0)
    theta = np.where(keep, num / safe, 0.0)
    return D, theta, keep


def pointwise_contrast(table, nuis, j, denom_point_tol: float = 0.01) -> PointwiseContrast:
    j = contrast_id(j)
    first, second = CONTRASTS[j]
    inv = {v: k for k, v in COMPONENT.items()}
    d1, t1, k1 = gradient_D(inv[first], table, nuis, denom_point_tol)
    d2, t2, k2 = gradient_D(inv[second], table, nuis, denom_point_tol)
    return PointwiseContrast(theta=t1 - t2, gradient=d1 - d2, keep=k1 & k2)


def _default_basis(x):
    return x


def projection_test(table: ObservationTable, nuis: CrossFitNuisances, j, alpha: float = 0.05,
                    basis: Callable[[np.ndarray], np.ndarray] | None = None,
                    denom_point_tol: float = 0.01, min_eig: float = 1e-8) -> TestReport:
    """Wald test that the best linear projection of theta^(j) on (1, basis(x)) is zero.

    Per fold k: C_k = (P_k xx')^{-1}, beta_plug = C_k P_k[x theta],
    phi = C_k x (D_pair + theta - x'beta) and beta_os,k = beta_plug + P_k phi.
    beta is the fold average, Sigma the size-weighted average of P_k[phi phi']
    with phi evaluated at beta_os,k, and W = n beta' Sigma^{-1} beta is
    referred to chi-square with dim(basis)+1 degrees of freedom.
    """
    j = contrast_id(j)
    pc = pointwise_contrast(table, nuis, j, denom_point_tol)
    Xb = design_matrix((basis or _default_basis)(np.asarray(table.x)))
    p = Xb.shape[1]
    keep = pc.keep
    fold_of = nuis.folds.fold_of
    n_used = int(keep.sum())
    gram = Xb[keep].T @ Xb[keep] / max(n_used, 1)
    if n_used <= p or np.linalg.eigvalsh(gram).min() <= min_eig:
        raise SingularGram("projection Gram matrix is singular")
    betas, Sigma = [], np.zeros((p, p))
    sizes = []
    for k in range(nuis.folds.K):
        rows = np.flatnonzero((fold_of == k) & keep)
        if rows.size <= p:
            raise SingularGram(f"fold {k} has too few usable rows")
        Xk = Xb[rows]
        G = Xk.T @ Xk / rows.size
        try:
            C = np.linalg.inv(G)
        except np.linalg.LinAlgError:
            raise SingularGram(f"fold {k} Gram matrix is singular") from None
        pseudo = pc.gradient[rows] + pc.theta[rows]
        beta_os = C @ (Xk.T @ pseudo) / rows.size
        phi = (Xk @ C) * (pseudo - Xk @ beta_os)[:, None]
        betas.append(beta_os)
        Sigma += phi.T @ phi
        sizes.append(rows.size)
    beta = np.mean(betas, axis=0)
    Sigma /= n_used
    try:
        W = float(n_used * beta @ np.linalg.solve(Sigma, beta))
    except np.linalg.LinAlgError:
        raise DegenerateCovariance("projection covariance is singular") from None
    if not math.isfinite(W):
        raise DegenerateCovariance("projection statistic is not finite")
    crit = float(chi2.ppf(1 - alpha, p))
    return TestReport(
        contrast=j, kind="ProjectionWald", statistic=W, critical=crit, alpha=alpha, reject=W > crit,
        df=p, p_value=float(chi2.sf(W, p)), beta_hat=beta, n_used=n_used,
        n_excluded=table.n - n_used, extras={"sigma": Sigma, "fold_betas": np.array(betas)},
    )


# Kolmogorov-Smirnov type test

def _below(x: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Indicator matrix 1{x_i <= c_m componentwise}, rows i, columns m."""
    out = np.ones((x.shape[0], grid.shape[0]), dtype=bool)
    for col in range(x.shape[1]):
        out &= x[:, col][:, None] <= grid[:, col][None, :]
    return out


def omega_curve(table, nuis, j, grid, denom_point_tol: float = 0.01):
    """Cross-fitted one-step Omega^(j)(c) at each grid row, plus pieces for the covariance.

    In fold k the estimate is P_k[(theta + D_pair) 1_c]: the plug-in
    P_k[theta 1_c] plus the mean of the gradient correction.
    """
    pc = pointwise_contrast(table, nuis, j, denom_point_tol)
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    x = np.asarray(table.x)
    keep = pc.keep
    fold_of = nuis.folds.fold_of
    K = nuis.folds.K
    pseudo = pc.theta + pc.gradient
    fold_omega = []
    fold_rows = []
    for k in range(K):
        rows = np.flatnonzero((fold_of == k) & keep)
        if rows.size == 0:
            raise DegenerateError(f"fold {k} has no usable rows")
        ind = _below(x[rows], grid)
        fold_omega.append(pseudo[rows] @ ind / rows.size)
        fold_rows.append(rows)
    return np.mean(fold_omega, axis=0), fold_omega, fold_rows, pseudo, pc


def omega_hat(table, nuis, j, c, denom_point_tol: float = 0.01) -> float:
    """One-step estimate of Omega^(j)(c) = E[theta^(j)(X) 1{X <= c}]."""
    return float(omega_curve(table, nuis, j, np.atleast_2d(c), denom_point_tol)[0][0])


def gaussian_max_quantile(Sigma, alpha: float, M: int, rng: np.random.Generator, jitter0: float = 1e-10):
    """(1 - alpha) quantile of max_m |H_m| for H ~ N(0, Sigma), from M draws."""
    L, eps = chol_jitter(Sigma, jitter0)
    H = rng.standard_normal((M, L.shape[0])) @ L.T
    return float(np.quantile(np.abs(H).max(axis=1), 1 - alpha)), eps


def ks_grid(table: ObservationTable, grid_max: int, seed: int) -> np.ndarray:
    """Observed covariate rows used as thresholds; a seeded subsample when n > grid_max."""
    x = np.asarray(table.x)
    if x.shape[0] == 0:
        raise GridEmpty("no covariate rows for the grid")
    if x.shape[0] <= grid_max:
        return x.copy()
    idx = np.sort(substream(seed, "ks-grid").choice(x.shape[0], grid_max, replace=False))
    return x[idx]


def ks_test(table: ObservationTable, nuis: CrossFitNuisances, j, alpha: float = 0.05, M: int = 2000,
            seed: int = 0, grid_max: int = 500, grid: np.ndarray | None = None,
            jitter0: float = 1e-10, denom_point_tol: float = 0.01) -> TestReport:
    """Supremum test of Omega^(j) = 0 over observed covariate thresholds.

    Statistic sqrt(n) max_c |Omega(c)|.  The critical value is the (1-alpha)
    quantile of max_c |H(c)| with H Gaussian with covariance
    (1/K) sum_k P_k[D*(s) D*(t)], D*(c) = (theta + D_pair) 1_c - Omega_k(c).
    """
    j = contrast_id(j)
    if grid is None:
        grid = ks_grid(table, grid_max, seed)
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    if grid.shape[0] == 0:
        raise GridEmpty("empty threshold grid")
    omega, fold_omega, fold_rows, pseudo, pc = omega_curve(table, nuis, j, grid, denom_point_tol)
    x = np.asarray(table.x)
    m = grid.shape[0]
    Sigma = np.zeros((m, m))
    for om, rows in zip(fold_omega, fold_rows):
        Dstar = pseudo[rows][:, None] * _below(x[rows], grid) - om[None, :]
        Sigma += Dstar.T @ Dstar / rows.size
    Sigma /= len(fold_rows)
    Sigma = (Sigma + Sigma.T) / 2
    n_used = int(pc.keep.sum())
    stat = float(math.sqrt(n_used) * np.abs(omega).max())
    q, eps = gaussian_max_quantile(Sigma, alpha, M, substream(seed, "ks-draws", j), jitter0)
    return TestReport(
        contrast=j, kind="KS", statistic=stat, critical=q, alpha=alpha, reject=stat > q,
        q_alpha=q, M=M, n_used=n_used, n_excluded=table.n - n_used,
        extras={"grid": grid, "omega": omega, "jitter": eps},
    )
