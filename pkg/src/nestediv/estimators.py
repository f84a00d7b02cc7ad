"""Point and interval estimators for switcher and always-complier effects.

Every target is a ratio of instrument contrasts.  With signs ``s_z`` over the
codes (0a, 1a, 0b, 1b):

* SWATE uses ``(+1, -1, -1, +1)``: (delta_b - delta_a) / (eta_b - eta_a)
* ACOATE uses ``(-1, +1, 0, 0)``: delta_a / eta_a
* COATE uses ``(0, 0, -1, +1)``: delta_b / eta_b

where delta_g and eta_g are the outcome and treatment contrasts between arms
One and Zero of stratum g.  The Wald estimators use raw cell means; the
one-step and estimating-equation estimators use cross-fitted nuisances and the
augmented (AIPW) numerator and denominator

    A = sum_z s_z [1{Z=z}/pi_z(X) (Y - mu_Y(z,X)) + mu_Y(z,X)]
    B = sum_z s_z [1{Z=z}/pi_z(X) (D - mu_D(z,X)) + mu_D(z,X)]

so that the efficient influence function at (psi, omega) is (A - psi*B)/omega.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import norm

from .core import (
    DegenerateError,
    EmptyCellError,
    ObservationTable,
    substream,
)
from .nuisance import CrossFitNuisances


class Estimand(enum.Enum):
    SWATE = "SWATE"
    ACOATE = "ACOATE"
    COATE = "COATE"

    @classmethod
    def parse(cls, value) -> "Estimand":
        if isinstance(value, Estimand):
            return value
        return cls(str(value).strip().upper())


class Method(enum.Enum):
    WALD = "Wald"
    ONE_STEP = "OneStep"
    EST_EQ = "EstEq"

    @classmethod
    def parse(cls, value) -> "Method":
        if isinstance(value, Method):
            return value
        key = str(value).strip().lower().replace("-", "").replace("_", "")
        table = {"wald": cls.WALD, "onestep": cls.ONE_STEP, "os": cls.ONE_STEP,
                 "esteq": cls.EST_EQ, "ee": cls.EST_EQ, "estimatingequation": cls.EST_EQ}
        try:
            return table[key]
        except KeyError:
            raise ValueError(f"unknown method {value!r}") from None


SIGNS = {
    Estimand.SWATE: np.array([1.0, -1.0, -1.0, 1.0]),
    Estimand.ACOATE: np.array([-1.0, 1.0, 0.0, 0.0]),
    Estimand.COATE: np.array([0.0, 0.0, -1.0, 1.0]),
}

WEAK_FLAG = {Estimand.SWATE: "WeakNestedIV", Estimand.ACOATE: "WeakIV", Estimand.COATE: "WeakIV"}

TRUNCATION_LIMIT = 500.0


@dataclass(frozen=True)
class EstimateReport:
    estimand: Estimand
    method: Method
    point: float
    se: float
    ci_lo: float
    ci_hi: float
    denom: float
    fold_estimates: tuple[float, ...] = ()
    flags: frozenset[str] = frozenset()
    level: float = 0.95
    n: int = 0
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "estimand": self.estimand.value,
            "method": self.method.value,
            "point": self.point,
            "se": self.se,
            "ci": [self.ci_lo, self.ci_hi],
            "level": self.level,
            "denom": self.denom,
            "fold_estimates": list(self.fold_estimates),
            "flags": sorted(self.flags),
            "n": self.n,
        }
        out.update(self.extras)
        return out


def _report(estimand, method, point, se, denom, level, n, folds=(), flags=(), denom_tol=0.02, extras=None):
    flags = set(flags)
    if abs(denom) < denom_tol:
        flags.add(WEAK_FLAG[estimand])
    if not math.isfinite(point) or abs(point) > TRUNCATION_LIMIT:
        flags.add("Truncated")
    q = norm.ppf(0.5 + level / 2)
    return EstimateReport(
        estimand=estimand, method=method, point=float(point), se=float(se),
        ci_lo=float(point - q * se), ci_hi=float(point + q * se), denom=float(denom),
        fold_estimates=tuple(float(v) for v in folds), flags=frozenset(flags),
        level=level, n=n, extras=dict(extras or {}),
    )


# Wald estimators

def cell_means(table: ObservationTable) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Counts and means of Y and D per code (order 0a, 1a, 0b, 1b)."""
    counts = np.bincount(table.z, minlength=4).astype(float)
    if np.any(counts == 0):
        raise EmptyCellError("every instrument code needs at least one row")
    ybar = np.bincount(table.z, weights=table.y, minlength=4) / counts
    dbar = np.bincount(table.z, weights=table.d, minlength=4) / counts
    return counts, ybar, dbar


def cell_contrast(estimand, m) -> float:
    """Signed combination of four cell values, evaluated as a difference of differences."""
    estimand = Estimand.parse(estimand)
    if estimand is Estimand.SWATE:
        return float((m[3] - m[2]) - (m[1] - m[0]))
    if estimand is Estimand.ACOATE:
        return float(m[1] - m[0])
    return float(m[3] - m[2])


def _wald_point(z, y, d, estimand):
    counts = np.bincount(z, minlength=4).astype(float)
    if np.any(counts[SIGNS[estimand] != 0] == 0):
        return np.nan, np.nan
    with np.errstate(invalid="ignore", divide="ignore"):
        ybar = np.bincount(z, weights=y, minlength=4) / counts
        dbar = np.bincount(z, weights=d, minlength=4) / counts
    den = cell_contrast(estimand, dbar)
    return cell_contrast(estimand, ybar) / den if den != 0 else np.nan, den


def wald_influence(table: ObservationTable, estimand=Estimand.SWATE) -> np.ndarray:
    """Per-row influence values of the Wald estimator (delta method over cell moments).

    For the ratio of sum_z s_z E[Y 1{Z=z}]/P(Z=z) over the same with D, the
    delta method gives (1/den) sum_z s_z 1{Z=z}/p_z [(Y - ybar_z) - psi (D - dbar_z)].
    """
    estimand = Estimand.parse(estimand)
    s = SIGNS[estimand]
    counts, ybar, dbar = cell_means(table)
    den = cell_contrast(estimand, dbar)
    if den == 0:
        raise DegenerateError("Wald denominator is exactly zero")
    psi = cell_contrast(estimand, ybar) / den
    p = counts / table.n
    z = table.z
    w = s[z] / p[z]
    return w * ((table.y - ybar[z]) - psi * (table.d - dbar[z])) / den


def wald_bootstrap(table: ObservationTable, estimand=Estimand.SWATE, B: int = 500, seed: int = 0):
    """Nonparametric bootstrap replicates of the Wald point (rows resampled i.i.d.)."""
    estimand = Estimand.parse(estimand)
    rng = substream(seed, "wald-bootstrap")
    out = np.empty(B)
    n = table.n
    for b in range(B):
        idx = rng.integers(0, n, n)
        out[b] = _wald_point(table.z[idx], table.y[idx], table.d[idx], estimand)[0]
    return out


def wald(table: ObservationTable, estimand=Estimand.SWATE, se_method: str = "delta", B: int = 500,
         seed: int = 0, level: float = 0.95, denom_tol: float = 0.02) -> EstimateReport:
    """Wald ratio from the eight cell means.

    ``se_method`` is ``"delta"`` (influence-function sandwich) or
    ``"bootstrap"``.  When the denominator is below ``denom_tol`` the weak
    flag is set and the bootstrap is used whatever ``se_method`` says.
    """
    estimand = Estimand.parse(estimand)
    counts, ybar, dbar = cell_means(table)
    den = cell_contrast(estimand, dbar)
    num = cell_contrast(estimand, ybar)
    if den == 0:
        point = math.copysign(math.inf, num) if num != 0 else math.nan
    else:
        point = num / den
    weak = abs(den) < denom_tol
    extras = {"se_method": "bootstrap" if (weak or se_method == "bootstrap") else "delta"}
    if extras["se_method"] == "bootstrap":
        reps = wald_bootstrap(table, estimand, B, seed)
        ok = np.isfinite(reps)
        se = float(np.std(reps[ok], ddof=1)) if ok.sum() > 1 else math.nan
        extras["bootstrap_failed"] = int((~ok).sum())
    elif se_method == "delta":
        phi = wald_influence(table, estimand)
        se = float(np.sqrt(np.sum(phi ** 2)) / table.n)
    else:
        raise ValueError(f"unknown se_method {se_method!r}")
    return _report(estimand, Method.WALD, point, se, den, level, table.n, denom_tol=denom_tol, extras=extras)


def wald_swate(table, **kw) -> EstimateReport:
    return wald(table, Estimand.SWATE, **kw)


def wald_acoate(table, **kw) -> EstimateReport:
    return wald(table, Estimand.ACOATE, **kw)


# Cross-fitted estimators

@dataclass(frozen=True)
class ConditionalContrasts:
    delta_a: np.ndarray
    delta_b: np.ndarray
    eta_a: np.ndarray
    eta_b: np.ndarray

    def numerator(self, estimand) -> np.ndarray:
        return {Estimand.SWATE: self.delta_b - self.delta_a, Estimand.ACOATE: self.delta_a,
                Estimand.COATE: self.delta_b}[Estimand.parse(estimand)]

    def denominator(self, estimand) -> np.ndarray:
        return {Estimand.SWATE: self.eta_b - self.eta_a, Estimand.ACOATE: self.eta_a,
                Estimand.COATE: self.eta_b}[Estimand.parse(estimand)]


def conditional_contrasts(nuis: CrossFitNuisances, table: ObservationTable | None = None) -> ConditionalContrasts:
    """delta_g(x_i) and eta_g(x_i) from the out-of-fold nuisance predictions."""
    my, md = nuis.mu_y, nuis.mu_d
    return ConditionalContrasts(my[:, 1] - my[:, 0], my[:, 3] - my[:, 2], md[:, 1] - md[:, 0], md[:, 3] - md[:, 2])


def ipw_residuals(table: ObservationTable, nuis: CrossFitNuisances, signs) -> tuple[np.ndarray, np.ndarray]:
    """sum_z s_z 1{Z=z}/pi_z (Y - mu_Y(z)) and the same with D, per row."""
    z = table.z
    rows = np.arange(table.n)
    w = np.asarray(signs, dtype=float)[z] / nuis.pi[rows, z]
    return w * (table.y - nuis.mu_y[rows, z]), w * (table.d - nuis.mu_d[rows, z])


def augmented_terms(table: ObservationTable, nuis: CrossFitNuisances, estimand=Estimand.SWATE):
    """Per-row augmented numerator A and denominator B."""
    s = SIGNS[Estimand.parse(estimand)]
    ry, rd = ipw_residuals(table, nuis, s)
    return ry + nuis.mu_y @ s, rd + nuis.mu_d @ s


def eif_values(table, nuis, psi, omega, estimand=Estimand.SWATE) -> np.ndarray:
    """Efficient influence function (A - psi B)/omega for every row.

    ``psi`` and ``omega`` may be scalars or per-row arrays (e.g. fold values).
    """
    A, B = augmented_terms(table, nuis, estimand)
    omega = np.asarray(omega, dtype=float)
    if np.any(omega == 0):
        raise DegenerateError("influence function denominator is zero")
    return (A - psi * B) / omega


def eif_swate(table, nuis, psi, omega2) -> np.ndarray:
    """Switcher-effect influence function with omega2 = E[eta_b - eta_a]."""
    return eif_values(table, nuis, psi, omega2, Estimand.SWATE)


@dataclass(frozen=True)
class FoldPieces:
    """Fold-level means used by the cross-fitted estimators."""

    plug_in: np.ndarray
    omega: np.ndarray
    mean_a: np.ndarray
    mean_b: np.ndarray
    sizes: np.ndarray


def fold_pieces(table, nuis, estimand) -> tuple[FoldPieces, np.ndarray, np.ndarray]:
    s = SIGNS[Estimand.parse(estimand)]
    A, B = augmented_terms(table, nuis, estimand)
    num = nuis.mu_y @ s
    den = nuis.mu_d @ s
    K = nuis.folds.K
    f = nuis.folds.fold_of
    sizes = np.bincount(f, minlength=K).astype(float)
    mean = lambda v: np.bincount(f, weights=v, minlength=K) / sizes  # noqa: E731
    omega = mean(den)
    if np.any(omega == 0):
        raise DegenerateError("fold plug-in denominator is exactly zero")
    return FoldPieces(mean(num) / omega, omega, mean(A), mean(B), sizes), A, B


def _crossfit(table, nuis, estimand, method, level, denom_tol) -> EstimateReport:
    estimand = Estimand.parse(estimand)
    fp, A, B = fold_pieces(table, nuis, estimand)
    if method is Method.ONE_STEP:
        folds = fp.plug_in + (fp.mean_a - fp.plug_in * fp.mean_b) / fp.omega
    else:
        if np.any(np.abs(fp.mean_b) < 1e-12):
            raise DegenerateError("estimating-equation denominator mean(B) is zero in some fold")
        folds = fp.mean_a / fp.mean_b
    point = float(np.mean(folds))
    f = nuis.folds.fold_of
    # one-step: influence function at each fold's plug-in; EE: at the final estimate
    center = fp.plug_in[f] if method is Method.ONE_STEP else point
    phi = (A - center * B) / fp.omega[f]
    se = float(np.std(phi, ddof=1) / math.sqrt(table.n))
    denom = float(np.mean(nuis.mu_d @ SIGNS[estimand]))
    return _report(estimand, method, point, se, denom, level, table.n, folds=folds, denom_tol=denom_tol,
                   extras={"K": int(nuis.folds.K)})


def one_step(table, nuis, estimand=Estimand.SWATE, level=0.95, denom_tol=0.02) -> EstimateReport:
    """Cross-fitted one-step estimator.

    In fold k the plug-in is mean_k(numerator contrast)/mean_k(denominator
    contrast); the fold estimate adds mean_k of the influence function at that
    plug-in; the reported point averages folds.  SE is the pooled standard
    deviation over all rows of the influence values at the fold plug-ins,
    divided by sqrt(n).
    """
    return _crossfit(table, nuis, estimand, Method.ONE_STEP, level, denom_tol)


def estimating_equation(table, nuis, estimand=Estimand.SWATE, level=0.95, denom_tol=0.02) -> EstimateReport:
    """Cross-fitted estimating-equation estimator: fold means mean_k(A)/mean_k(B), averaged.

    SE is the pooled standard deviation of (A - psi B)/omega_k at the final
    estimate psi, divided by sqrt(n).
    """
    return _crossfit(table, nuis, estimand, Method.EST_EQ, level, denom_tol)


def onestep_swate(table, nuis, **kw):
    return one_step(table, nuis, Estimand.SWATE, **kw)


def ee_swate(table, nuis, **kw):
    return estimating_equation(table, nuis, Estimand.SWATE, **kw)


def onestep_acoate(table, nuis, **kw):
    return one_step(table, nuis, Estimand.ACOATE, **kw)


def ee_acoate(table, nuis, **kw):
    return estimating_equation(table, nuis, Estimand.ACOATE, **kw)


def estimate(table, nuis, estimand, method, **kw) -> EstimateReport:
    """Dispatch on method; Wald ignores ``nuis``."""
    method = Method.parse(method)
    if method is Method.WALD:
        return wald(table, estimand, **kw)
    if method is Method.ONE_STEP:
        return one_step(table, nuis, estimand, **kw)
    return estimating_equation(table, nuis, estimand, **kw)


# Strata profiles

def adjusted_compliance(nuis: CrossFitNuisances) -> dict[str, float]:
    """Covariate-adjusted compliance rates mean(eta_a) and mean(eta_b)."""
    cc = conditional_contrasts(nuis)
    return {"a": float(np.mean(cc.eta_a)), "b": float(np.mean(cc.eta_b))}


@dataclass(frozen=True)
class StrataProfile:
    names: tuple[str, ...]
    switchers: np.ndarray
    always_compliers: np.ndarray
    overall: np.ndarray
    mass_sw: float
    mass_aco: float
    flags: frozenset[str] = frozenset()

    def to_dict(self) -> dict:
        return {
            "mass_sw": self.mass_sw,
            "mass_aco": self.mass_aco,
            "flags": sorted(self.flags),
            "covariates": [
                {"name": nm, "switchers": float(s), "always_compliers": float(a), "overall": float(o)}
                for nm, s, a, o in zip(self.names, self.switchers, self.always_compliers, self.overall)
            ],
        }


def strata_profile(table: ObservationTable, nuis: CrossFitNuisances,
                   g: Sequence[Callable[[np.ndarray], np.ndarray]] | None = None,
                   names: Sequence[str] | None = None) -> StrataProfile:
    """Covariate means among switchers and always-compliers.

    E[g(X) | SW] = mean(g(X) (eta_b - eta_a)) / mean(eta_b - eta_a), and the
    always-complier analogue weights by eta_a.  ``g`` defaults to the raw
    covariate columns.
    """
    cc = conditional_contrasts(nuis)
    w_sw = cc.eta_b - cc.eta_a
    w_aco = cc.eta_a
    m_sw, m_aco = float(np.mean(w_sw)), float(np.mean(w_aco))
    if m_sw == 0 or m_aco == 0:
        raise DegenerateError("a stratum mass is exactly zero")
    if g is None:
        G = table.x
        names = table.names
    else:
        G = np.column_stack([np.asarray(fn(table.x), dtype=float) for fn in g])
        names = tuple(names) if names is not None else tuple(f"g{j + 1}" for j in range(G.shape[1]))
    flags = set()
    if m_sw < 0 or m_aco < 0:
        flags.add("NegativeMass")
    if m_sw + m_aco > 1.05:
        flags.add("MassExceedsOne")
    return StrataProfile(
        names=tuple(names),
        switchers=np.mean(G * w_sw[:, None], axis=0) / m_sw,
        always_compliers=np.mean(G * w_aco[:, None], axis=0) / m_aco,
        overall=G.mean(axis=0),
        mass_sw=m_sw,
        mass_aco=m_aco,
        flags=frozenset(flags),
    )
