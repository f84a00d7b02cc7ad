"""Simulation designs, truth oracles and Monte Carlo drivers.

Two designs are provided.  The estimation design has eight covariates, seven
latent strata with multinomial-logit probabilities and a continuous or binary
outcome; its ``alpha_params`` tune the share of switchers.  The testing design
has two covariates and an outcome model under which the switcher and
always-complier conditional effects coincide when ``beta = (1, 2, 2)``.

Generators return the observed :class:`ObservationTable` together with a
:class:`Latent` record (strata and potential outcomes).  Only the oracles read
the latent record; estimators see the table alone.

A third generator, :func:`gen_plco_like`, produces a screening-trial style
dataset with a count outcome and follow-up time offset.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .core import NestedIVError, ObservationTable, make_folds, substream
from .estimators import Estimand, Method, estimate
from .homogeneity import ks_test, projection_test
from .nuisance import Family, LearnerSpec, fit_nuisances

STRATA = ("ANT", "SW1", "SW2", "AT-NT", "ACO", "NT-AT", "AAT")
SW_STRATA = (1, 2)
ACO_STRATUM = 4

# treatment received under codes 0a, 1a, 0b, 1b for each stratum
UPTAKE = np.array([
    [0, 0, 0, 0],  # ANT: never-taker under both versions
    [1, 1, 0, 1],  # SW1: always-taker under a, complier under b
    [0, 0, 0, 1],  # SW2: never-taker under a, complier under b
    [1, 1, 0, 0],  # AT-NT
    [0, 1, 0, 1],  # ACO
    [0, 0, 1, 1],  # NT-AT
    [1, 1, 1, 1],  # AAT
], dtype=float)

ALPHA_SETS = ((-0.2, 0.1, 0.0005), (0.5, 0.2, 0.05), (0.3, 0.5, 0.1), (1.0, 1.0, 1.0))
NOMINAL_SW_SHARE = dict(zip(ALPHA_SETS, (0.11, 0.22, 0.32, 0.66)))
BETA_CONTINUOUS = ((2.0, 2.0, 2.0), (4.0, 4.0, 4.0))
BETA_BINARY = ((0.0, 1.0, -1.0), (0.0, 2.0, -3.0))

TESTING_ALPHAS = (0.1, 0.2, 0.4, 0.6, 0.8, 0.9)
TESTING_BETAS = ((1.0, 2.0, 2.0), (1.0, 2.5, 2.5), (2.0, 3.0, 3.0))
TESTING_MASS = 0.9

MU_X = np.array([0.0, 1.0, -0.5])
SIGMA_X = np.array([[1.0, 0.2, -0.3], [0.2, 1.0, 0.1], [-0.3, 0.1, 1.0]])

# the confounder scales are variances
U_SD_ESTIMATION = math.sqrt(0.6)
U_MEAN_TESTING, U_SD_TESTING = -0.3, math.sqrt(0.3)


@dataclass(frozen=True)
class Latent:
    stratum: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    u: np.ndarray


@dataclass(frozen=True)
class EstimationScenario:
    n: int
    alpha_params: tuple = ALPHA_SETS[-1]
    beta_params: tuple = BETA_CONTINUOUS[0]
    outcome_kind: str = "continuous"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "alpha_params", tuple(float(a) for a in self.alpha_params))
        object.__setattr__(self, "beta_params", tuple(float(b) for b in self.beta_params))
        if self.outcome_kind not in ("continuous", "binary"):
            raise ValueError("outcome_kind must be 'continuous' or 'binary'")
        if len(self.alpha_params) != 3 or len(self.beta_params) != 3:
            raise ValueError("alpha_params and beta_params need three entries")

    @property
    def is_custom(self) -> bool:
        betas = BETA_CONTINUOUS if self.outcome_kind == "continuous" else BETA_BINARY
        return self.alpha_params not in ALPHA_SETS or self.beta_params not in betas

    @property
    def label(self) -> str:
        share = NOMINAL_SW_SHARE.get(self.alpha_params)
        sw = f"{round(100 * share)}%SW" if share is not None else f"alpha={self.alpha_params}"
        return f"n={self.n},{sw},beta={self.beta_params},{self.outcome_kind}"


@dataclass(frozen=True)
class TestingScenario:
    __test__ = False

    n: int
    switcher_alpha: float = 0.4
    beta_params: tuple = TESTING_BETAS[0]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "beta_params", tuple(float(b) for b in self.beta_params))
        if not 0 <= self.switcher_alpha <= 1:
            raise ValueError("switcher_alpha must be in [0, 1]")

    @property
    def switcher_share(self) -> float:
        """Nominal switcher share: alpha times the combined switcher/always-complier mass."""
        return self.switcher_alpha * TESTING_MASS

    @property
    def is_null(self) -> bool:
        return self.beta_params == (1.0, 2.0, 2.0)

    @property
    def label(self) -> str:
        return f"n={self.n},{round(100 * self.switcher_share)}%SW,beta={self.beta_params}"


def _sample_strata(rng, probs):
    cum = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])[:, None] * cum[:, -1:]
    return np.minimum((u > cum).sum(axis=1), probs.shape[1] - 1)


def _truncated_mvn(rng, n, mu, sigma, bound=4.0):
    out = np.empty((n, mu.size))
    filled = 0
    while filled < n:
        need = n - filled
        draw = rng.multivariate_normal(mu, sigma, size=need + need // 20 + 10)
        draw = draw[np.all(np.abs(draw) <= bound, axis=1)][:need]
        out[filled:filled + draw.shape[0]] = draw
        filled += draw.shape[0]
    return out


def _codes_from(rng, p_b, p1a, p1b):
    n = p_b.shape[0]
    g_b = rng.random(n) < p_b
    arm = np.where(g_b, rng.random(n) < p1b, rng.random(n) < p1a)
    return 2 * g_b.astype(int) + arm.astype(int)


def _pi_matrix(p_b, p1a, p1b):
    return np.column_stack([(1 - p_b) * (1 - p1a), (1 - p_b) * p1a, p_b * (1 - p1b), p_b * p1b])


# Estimation design

def estimation_pi(x: np.ndarray) -> np.ndarray:
    """True instrument propensities (columns 0a, 1a, 0b, 1b) of the estimation design."""
    x1, x2, x3 = x[:, 0], x[:, 1], x[:, 2]
    p_b = expit(1 + 0.2 * x1 - 0.1 * x2 + 0.3 * x3)
    p1a = expit(1 + 0.5 * x1 - x2 + 0.7 * x3)
    p1b = expit(0.5 + 0.6 * x1 + 0.3 * x2 + 0.4 * x3)
    return _pi_matrix(p_b, p1a, p1b)


def estimation_strata_probs(x: np.ndarray, u: np.ndarray, alpha_params) -> np.ndarray:
    a1, a2, a3 = alpha_params
    x1, x2, x3 = x[:, 0], x[:, 1], x[:, 2]
    lg = np.column_stack([
        1 - x2 + 0.7 * x3 + 0.3 * u,
        a1 + a2 * (x1 + 2 * x2 - x3) + a3 * u,
        a1 + a2 * (-x1 - 2 * x2) + a3 * u,
        1 + 0.5 * x1 + x2 + 0.5 * x3 + 0.5 * u,
        1 + 0.8 * x1 - 2 * x2 - 2 * x3 + 0.5 * u,
        1 - 0.5 * x1 - x2 - 0.5 * x3 - 0.5 * u,
        1 + 2 * x1 + 2 * x3 - u,
    ])
    lg -= lg.max(axis=1, keepdims=True)
    g = np.exp(lg)
    return g / g.sum(axis=1, keepdims=True)


def gen_estimation_data(s: EstimationScenario, rng: np.random.Generator | None = None, n: int | None = None):
    """Draw one dataset from the estimation design.  Returns ``(table, latent)``."""
    rng = rng if rng is not None else substream(s.seed, "data")
    n = s.n if n is None else n
    x = np.empty((n, 8))
    x[:, :3] = _truncated_mvn(rng, n, MU_X, SIGMA_X)
    x[:, 3:6] = rng.binomial(1, 0.5, (n, 3))
    x[:, 6] = rng.uniform(-3, 3, n)
    x[:, 7] = rng.binomial(4, 0.5, n)
    pi = estimation_pi(x)
    p_b = pi[:, 2] + pi[:, 3]
    z = _codes_from(rng, p_b, pi[:, 1] / (1 - p_b), pi[:, 3] / p_b)
    u = rng.normal(0.0, U_SD_ESTIMATION, n)
    st = _sample_strata(rng, estimation_strata_probs(x, u, s.alpha_params))
    d = UPTAKE[st, z]
    x1, x2, x3, x4, x5, x6, x7, x8 = x.T
    b1, b2, b3 = s.beta_params
    sw = np.isin(st, SW_STRATA)
    if s.outcome_kind == "continuous":
        eps = rng.normal(0.0, 1.0, n)
        y0 = 1 + x1 + x2 + x3 + x4 + u + eps
        y1 = np.select(
            [np.isin(st, (0, 6)), np.isin(st, (3, 5)), sw, st == ACO_STRATUM],
            [1 + x1 + 2 * x2 + 2 * x3 + x4 + u,
             1 + x1 + x2 + 2 * x3 + x4 + u,
             b1 + b2 * x1 + 2 * x2 + b3 * x3 + x4 + u,
             1 + x1 + 2 * x2 + 0.2 * x2 ** 2 + x3 + x4 + u],
        ) + eps
    else:
        common = x4 + x5 - x6 - x7 + x8 + u
        p0 = expit(np.select(
            [np.isin(st, (0, 6)), np.isin(st, (3, 5)), sw, st == ACO_STRATUM],
            [1 + x1 + 2 * x2 + 2 * x3 + common,
             1 + x1 + x2 + 2 * x3 + common,
             b1 + b2 * x1 + 2 * x2 + x3 + b3 * x6 - x7 + 2 * x8 + u,
             1 + x1 + 2 * x2 + 0.2 * x2 ** 2 + x3 + common],
        ))
        p1 = expit(1 + x1 + x2 + x3 + u)
        y0 = (rng.random(n) < p0).astype(float)
        y1 = (rng.random(n) < p1).astype(float)
    y = np.where(d == 1, y1, y0)
    return ObservationTable(z=z, x=x, d=d, y=y), Latent(st, y0, y1, u)


# Testing design

def testing_pi(x: np.ndarray) -> np.ndarray:
    p_a = expit(0.1 * (x[:, 0] > 0) - 0.1 * (x[:, 1] > 0))
    half = np.full(x.shape[0], 0.5)
    return _pi_matrix(1 - p_a, half, half)


def testing_strata_probs(x: np.ndarray, u: np.ndarray, switcher_alpha: float) -> np.ndarray:
    x1, x2 = x[:, 0], x[:, 1]
    up = (u > 0).astype(float)
    lg = np.column_stack([
        1 - x2 + 0.3 * up,
        3.5 + 0.5 * x1 + x2 + 0.1 * up,
        3.5 + 0.5 * x1 + x2 + 0.1 * up,
        1 + 0.5 * x1 + x2 + 0.5 * up,
        1 + 0.8 * x1 - 2 * x2 + 0.5 * up,
        1 - 0.5 * x1 - x2 - 0.5 * up,
        1 + 2 * x1 - up,
    ])
    g = np.exp(lg)
    p = g / g.sum(axis=1, keepdims=True)
    pool = p[:, 1] + p[:, 2] + p[:, 4]
    p[:, 1] = p[:, 2] = switcher_alpha * pool / 2
    p[:, 4] = (1 - switcher_alpha) * pool
    return p


def gen_testing_data(s: TestingScenario, rng: np.random.Generator | None = None, n: int | None = None):
    """Draw one dataset from the testing design.  Returns ``(table, latent)``."""
    rng = rng if rng is not None else substream(s.seed, "data")
    n = s.n if n is None else n
    x = rng.standard_normal((n, 2))
    pi = testing_pi(x)
    p_b = pi[:, 2] + pi[:, 3]
    z = _codes_from(rng, p_b, pi[:, 1] / (1 - p_b), pi[:, 3] / p_b)
    u = rng.normal(U_MEAN_TESTING, U_SD_TESTING, n)
    st = _sample_strata(rng, testing_strata_probs(x, u, s.switcher_alpha))
    d = UPTAKE[st, z]
    x1, x2 = x.T
    b1, b2, b3 = s.beta_params
    eps = rng.normal(0.0, 1.0, n)
    y0 = 1 + x1 + x2 + u + eps
    y1 = np.select(
        [np.isin(st, SW_STRATA), st == ACO_STRATUM],
        [b1 + b2 * x1 + b3 * x2 + u, 1 + 2 * x1 + 2 * x2 + u],
        default=1 + x1 + x2 + u,
    ) + eps
    y = np.where(d == 1, y1, y0)
    return ObservationTable(z=z, x=x, d=d, y=y), Latent(st, y0, y1, u)


# Oracles

@dataclass(frozen=True)
class OracleResult:
    value: float
    mc_se: float
    share: float
    m: int


def _oracle(gen, s, strata, m, seed, chunk=250_000):
    total, total_sq, count = 0.0, 0.0, 0
    done = 0
    part = 0
    while done < m:
        size = min(chunk, m - done)
        _, lat = gen(s, substream(seed, "oracle", part), n=size)
        mask = np.isin(lat.stratum, strata)
        diff = (lat.y1 - lat.y0)[mask]
        total += diff.sum()
        total_sq += (diff ** 2).sum()
        count += mask.sum()
        done += size
        part += 1
    mean = total / count
    var = total_sq / count - mean ** 2
    return OracleResult(float(mean), float(math.sqrt(max(var, 0.0) / count)), count / m, m)


def true_swate_oracle(s: EstimationScenario, m: int = 1_000_000, seed: int | None = None) -> OracleResult:
    """Monte Carlo mean of Y(1) - Y(0) among simulated switchers."""
    return _oracle(gen_estimation_data, s, SW_STRATA, m, s.seed if seed is None else seed)


def true_acoate_oracle(s: EstimationScenario, m: int = 1_000_000, seed: int | None = None) -> OracleResult:
    return _oracle(gen_estimation_data, s, (ACO_STRATUM,), m, s.seed if seed is None else seed)


def testing_oracle(s: TestingScenario, strata=SW_STRATA, m: int = 1_000_000, seed: int | None = None) -> OracleResult:
    """Effect oracle for the testing design (switchers by default)."""
    return _oracle(gen_testing_data, s, tuple(strata), m, s.seed if seed is None else seed)


def strata_shares(gen, s, m: int = 1_000_000, seed: int = 0) -> np.ndarray:
    """Empirical frequencies of the seven strata."""
    _, lat = gen(s, substream(seed, "shares"), n=m)
    return np.bincount(lat.stratum, minlength=len(STRATA)) / m


# Screening-trial fixture

PLCO_NAMES = ("age", "male", "minority", "edu_hs", "edu_college", "smoke_current", "smoke_former", "bmi_over25")
PLCO_CELLS = (4210, 4204, 4970, 4978)
_PLCO_STAGE = {
    # age mean/sd, male, minority, education (none, hs, college), smoking (never, current, former), bmi>25
    "a": dict(age=(64.7, 5.1), male=0.373, minority=0.21, edu=(0.143, 0.406, 0.451),
              smoke=(0.428, 0.135, 0.437), bmi=0.657, follow=(12.0, 3.9)),
    "b": dict(age=(60.4, 5.3), male=0.437, minority=0.141, edu=(0.072, 0.319, 0.609),
              smoke=(0.420, 0.144, 0.436), bmi=0.706, follow=(9.6, 2.4)),
}
# multinomial logits (relative to never-taker) for always-compliers and switchers
_PLCO_ACO = dict(const=1.66, male=-1.6, minority=0.45, edu_college=0.25, bmi_under25=-0.35, age=0.0)
_PLCO_SW = dict(const=0.886, male=-0.593, minority=-0.45, edu_college=-0.2, bmi_under25=0.45, age=0.02)


def gen_plco_like(seed: int = 0, cells: Sequence[int] = PLCO_CELLS, rate_per_1000=1.4,
                  effect_ratio=(0.97, 1.0)):
    """Screening-trial style dataset with a count outcome and follow-up offset.

    Two enrollment stages (a, b) with a weaker and a stronger encouragement,
    no uptake in the control arms and three latent strata: never-takers,
    always-compliers and switchers (never-takers under a, compliers under b).
    Outcomes are Poisson counts with mean rate * follow-up; ``effect_ratio``
    gives the rate ratio under treatment for always-compliers and switchers.
    """
    rng = substream(seed, "plco")
    parts, codes = [], []
    for c, size in enumerate(cells):
        p = _PLCO_STAGE["a" if c < 2 else "b"]
        age = np.clip(rng.normal(*p["age"], size), 55, 74)
        edu = rng.choice(3, size, p=p["edu"])
        smoke = rng.choice(3, size, p=p["smoke"])
        follow = np.clip(rng.normal(*p["follow"], size), 0.5, 19.0)
        parts.append(np.column_stack([
            np.round(age, 1), rng.random(size) < p["male"], rng.random(size) < p["minority"],
            edu == 1, edu == 2, smoke == 1, smoke == 2, rng.random(size) < p["bmi"], follow,
        ]).astype(float))
        codes.append(np.full(size, c))
    data = np.vstack(parts)
    z = np.concatenate(codes)
    x, follow = data[:, :8], data[:, 8]
    age, male, minority, college, under25 = x[:, 0], x[:, 1], x[:, 2], x[:, 4], 1 - x[:, 7]

    def lin(cf):
        return (cf["const"] + cf["male"] * male + cf["minority"] * minority + cf["edu_college"] * college
                + cf["bmi_under25"] * under25 + cf["age"] * (age - 62))

    lg = np.column_stack([np.zeros(z.size), lin(_PLCO_SW), lin(_PLCO_ACO)])
    probs = np.exp(lg - lg.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    kind = _sample_strata(rng, probs)  # 0 never-taker, 1 switcher, 2 always-complier
    stratum = np.array([0, 2, ACO_STRATUM])[kind]
    d = UPTAKE[stratum, z]
    base = rate_per_1000 / 1000 * np.exp(0.04 * (age - 62) + 0.2 * male + 0.1 * x[:, 5])
    ratio = np.array([1.0, effect_ratio[1], effect_ratio[0]])[kind]
    y0 = rng.poisson(base * follow).astype(float)
    y1 = rng.poisson(base * ratio * follow).astype(float)
    y = np.where(d == 1, y1, y0)
    table = ObservationTable(z=z, x=x, d=d, y=y, offset=follow, names=PLCO_NAMES)
    return table, Latent(stratum, y0, y1, np.zeros(z.size))


# Monte Carlo

@dataclass(frozen=True)
class MetricsRow:
    scenario: str
    method: str
    estimand: str
    n: int
    R: int
    truth: float
    mean_estimate: float
    bias: float
    relative_bias: float
    se_winsorized_mean: float
    coverage: float
    acceptance_rate: float
    n_failed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


CSV_COLUMNS = ("scenario", "method", "estimand", "n", "R", "truth", "mean_estimate", "bias", "relative_bias",
               "se_winsorized_mean", "coverage", "acceptance_rate", "n_failed")


def winsorized_mean(v: np.ndarray, lower: float = 0.05, upper: float = 0.95) -> float:
    """Mean after clamping below the lower and above the upper percentile."""
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        return math.nan
    lo, hi = np.quantile(v, [lower, upper])
    return float(np.mean(np.clip(v, lo, hi)))


def summarize(points, ses, lo, hi, truth: float, truncation: float = 500.0) -> dict:
    """Reporting metrics over replications; non-finite or |point| > truncation are dropped."""
    points, ses, lo, hi = (np.asarray(a, dtype=float) for a in (points, ses, lo, hi))
    ok = np.isfinite(points) & (np.abs(np.nan_to_num(points, nan=np.inf)) <= truncation) & np.isfinite(ses)
    R = points.size
    if not ok.any():
        return dict(mean_estimate=math.nan, bias=math.nan, relative_bias=math.nan,
                    se_winsorized_mean=math.nan, coverage=math.nan, acceptance_rate=0.0)
    mean = float(points[ok].mean())
    return dict(
        mean_estimate=mean,
        bias=mean - truth,
        relative_bias=(mean - truth) / truth if truth != 0 else math.nan,
        se_winsorized_mean=winsorized_mean(ses[ok]),
        coverage=float(np.mean((lo[ok] <= truth) & (truth <= hi[ok]))),
        acceptance_rate=float(ok.sum() / R),
    )


def default_learners(outcome_kind: str = "continuous") -> dict:
    fam = Family.BINOMIAL_LOGIT if outcome_kind == "binary" else Family.LINEAR_GAUSSIAN
    return {"pi": LearnerSpec(Family.BINOMIAL_LOGIT), "mu_y": LearnerSpec(fam),
            "mu_d": LearnerSpec(Family.BINOMIAL_LOGIT)}


@dataclass(frozen=True)
class _RepJob:
    scenario: object
    rep: int
    seed: int
    methods: tuple
    estimand: str
    K: int
    learners: dict
    clip_eps: float
    known_pi: bool
    extra: dict = field(default_factory=dict)


def _fold_seed(seed, rep):
    return int(substream(seed, "mc", rep, "folds").integers(2 ** 31))


def _estimation_rep(job: _RepJob):
    s = job.scenario
    table, _ = gen_estimation_data(s, substream(job.seed, "mc", job.rep))
    out = {}
    try:
        nuis = None
        if any(Method.parse(m) is not Method.WALD for m in job.methods):
            folds = make_folds(table.n, job.K, table.z, _fold_seed(job.seed, job.rep))
            nuis = fit_nuisances(table, folds, job.learners["pi"], job.learners["mu_y"], job.learners["mu_d"],
                                 job.clip_eps, pi_known=estimation_pi if job.known_pi else None)
    except NestedIVError:
        return {m: (math.nan,) * 4 for m in job.methods}
    for m in job.methods:
        try:
            kw = {"seed": _fold_seed(job.seed, job.rep)} if Method.parse(m) is Method.WALD else {}
            r = estimate(table, nuis, job.estimand, m, **kw)
            out[m] = (r.point, r.se, r.ci_lo, r.ci_hi)
        except NestedIVError:
            out[m] = (math.nan,) * 4
    return out


def _run_jobs(fn, jobs, threads):
    threads = threads or 1
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * threads))))


def monte_carlo(s: EstimationScenario, R: int, methods: Sequence[str] = ("EstEq",), estimand="SWATE",
                seed: int = 0, K: int = 5, learners: dict | None = None, clip_eps: float = 0.01,
                truth: float | None = None, oracle_m: int = 1_000_000, known_pi: bool = False,
                threads: int = 1) -> list[MetricsRow]:
    """Replicate estimation on fresh datasets and summarize each method.

    Replication ``r`` draws its data from substream ``(seed, "mc", r)``.  All
    methods share the same datasets and cross-fitted nuisances.
    """
    if R < 1:
        raise ValueError("R must be positive")
    estimand = Estimand.parse(estimand)
    methods = tuple(Method.parse(m).value for m in methods)
    learners = {**default_learners(s.outcome_kind), **(learners or {})}
    if truth is None:
        oracle = true_swate_oracle if estimand is Estimand.SWATE else true_acoate_oracle
        if estimand is Estimand.COATE:
            raise ValueError("pass truth explicitly for COATE")
        truth = oracle(s, oracle_m).value
    jobs = [_RepJob(s, r, seed, methods, estimand.value, K, learners, clip_eps, known_pi) for r in range(R)]
    results = _run_jobs(_estimation_rep, jobs, threads)
    rows = []
    for m in methods:
        arr = np.array([res[m] for res in results], dtype=float)
        failed = int(np.sum(~np.isfinite(arr[:, 0])))
        rows.append(MetricsRow(scenario=s.label, method=m, estimand=estimand.value, n=s.n, R=R, truth=float(truth),
                               n_failed=failed, **summarize(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], truth)))
    return rows


def run_monte_carlo(s: EstimationScenario, R: int, estimator="EstEq", estimand="SWATE", seed: int = 0,
                    **kw) -> MetricsRow:
    """Metrics for a single (method, estimand) pair; see :func:`monte_carlo`."""
    return monte_carlo(s, R, (estimator,), estimand, seed, **kw)[0]


def replicate_points(s: EstimationScenario, R: int, methods=("OneStep", "EstEq"), estimand="SWATE",
                     seed: int = 0, K: int = 5, learners: dict | None = None, clip_eps: float = 0.01,
                     known_pi: bool = False, threads: int = 1) -> dict[str, np.ndarray]:
    """Raw per-replication (point, se, ci_lo, ci_hi) arrays for each method."""
    methods = tuple(Method.parse(m).value for m in methods)
    learners = {**default_learners(s.outcome_kind), **(learners or {})}
    jobs = [_RepJob(s, r, seed, methods, Estimand.parse(estimand).value, K, learners, clip_eps, known_pi)
            for r in range(R)]
    results = _run_jobs(_estimation_rep, jobs, threads)
    return {m: np.array([res[m] for res in results], dtype=float) for m in methods}


def _testing_rep(job: _RepJob):
    s = job.scenario
    table, _ = gen_testing_data(s, substream(job.seed, "mc", job.rep))
    out = {}
    try:
        folds = make_folds(table.n, job.K, table.z, _fold_seed(job.seed, job.rep))
        nuis = fit_nuisances(table, folds, job.learners["pi"], job.learners["mu_y"], job.learners["mu_d"],
                             job.clip_eps)
    except NestedIVError:
        return {j: math.nan for j in job.extra["contrasts"]}
    for j in job.extra["contrasts"]:
        try:
            if job.extra["kind"] == "ks":
                r = ks_test(table, nuis, j, job.extra["alpha"], M=job.extra["M"],
                            seed=_fold_seed(job.seed, job.rep), grid_max=job.extra["grid_max"])
            else:
                r = projection_test(table, nuis, j, job.extra["alpha"])
            out[j] = float(r.reject)
        except NestedIVError:
            out[j] = math.nan
    return out


def run_test_study(s: TestingScenario, R: int, kind: str = "projection", j=(1, 2, 3), alpha: float = 0.05,
                   seed: int = 0, K: int = 5, M: int = 2000, grid_max: int = 500, clip_eps: float = 0.01,
                   learners: dict | None = None, threads: int = 1) -> dict[int, float]:
    """Rejection fraction of each requested contrast over R replications.

    All contrasts share the same datasets and nuisances.  Replications where
    a test is degenerate are left out of that contrast's denominator.
    """
    if kind not in ("projection", "ks"):
        raise ValueError("kind must be 'projection' or 'ks'")
    contrasts = (int(j),) if np.isscalar(j) else tuple(int(v) for v in j)
    learners = {**default_learners(), **(learners or {})}
    extra = dict(kind=kind, contrasts=contrasts, alpha=alpha, M=M, grid_max=grid_max)
    jobs = [_RepJob(s, r, seed, (), "", K, learners, clip_eps, False, extra) for r in range(R)]
    results = _run_jobs(_testing_rep, jobs, threads)
    rates = {}
    for c in contrasts:
        v = np.array([res[c] for res in results], dtype=float)
        rates[c] = float(np.nanmean(v)) if np.isfinite(v).any() else math.nan
    return rates


def available_threads() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
