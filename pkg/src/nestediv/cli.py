"""Command-line interface.

Subcommands: ``estimate``, ``test``, ``profile``, ``simulate`` and
``generate``.  Settings come from an optional INI file (``--config``) whose
sections are ``[estimate]``, ``[test]``, ``[profile]``, ``[simulate]``,
``[nuisance]`` (``k``, ``clip_eps``) and ``[nuisance.pi]``,
``[nuisance.mu_y]``, ``[nuisance.mu_d]`` (``LearnerSpec`` fields such as
``family``, ``ridge``, ``use_boost``).  Command-line flags override the file.

Exit codes: 0 success, 2 input or usage error, 3 degenerate estimation,
4 internal error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import math
import sys
from dataclasses import fields

import numpy as np

from . import __version__
from .core import DegenerateError, EmptyCellError, InputError, ObservationTable, TooFewRowsPerCell, make_folds, validate
from .estimators import Estimand, Method, estimate, strata_profile
from .homogeneity import ks_test, projection_test
from .nuisance import LearnerSpec, NuisanceFitError, fit_nuisances
from .sim import (
    ALPHA_SETS,
    CSV_COLUMNS,
    EstimationScenario,
    TestingScenario,
    available_threads,
    gen_estimation_data,
    gen_plco_like,
    gen_testing_data,
    monte_carlo,
    run_test_study,
    testing_oracle,
    true_acoate_oracle,
    true_swate_oracle,
)

EXIT_OK, EXIT_INPUT, EXIT_DEGENERATE, EXIT_INTERNAL = 0, 2, 3, 4

SW_SHARE_TO_ALPHA = {"11": ALPHA_SETS[0], "22": ALPHA_SETS[1], "32": ALPHA_SETS[2], "66": ALPHA_SETS[3]}


class UsageError(InputError):
    pass


# Configuration

class Settings:
    """Flag values layered over an INI file and built-in defaults."""

    def __init__(self, args: argparse.Namespace, section: str):
        self.args = args
        self.section = section
        self.cfg = configparser.ConfigParser()
        path = getattr(args, "config", None)
        if path:
            try:
                with open(path) as fh:
                    self.cfg.read_file(fh)
            except OSError as exc:
                raise InputError(f"cannot read config {path}: {exc}") from None
            except configparser.Error as exc:
                raise InputError(f"malformed config {path}: {exc}") from None

    def get(self, key, default=None, cast=str, section=None):
        val = getattr(self.args, key, None)
        if val is not None:
            return val
        sec = section or self.section
        if self.cfg.has_option(sec, key):
            raw = self.cfg.get(sec, key)
            try:
                return _cast(raw, cast)
            except ValueError:
                raise InputError(f"config [{sec}] {key}: cannot parse {raw!r}") from None
        return default

    def learner(self, name: str, default: LearnerSpec) -> LearnerSpec:
        sec = f"nuisance.{name}"
        if not self.cfg.has_section(sec):
            return default
        kw = {}
        types = {f.name: f.type for f in fields(LearnerSpec)}
        for key, raw in self.cfg.items(sec):
            if key not in types:
                raise InputError(f"config [{sec}]: unknown key {key!r}")
            t = types[key]
            cast = {"bool": bool, "int": int, "float": float}.get(t, str)
            kw[key] = _cast(raw, cast)
        try:
            return LearnerSpec(**{**default.__dict__, **kw})
        except ValueError as exc:
            raise InputError(f"config [{sec}]: {exc}") from None


def _cast(raw, cast):
    if cast is bool:
        v = str(raw).strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    if cast in (list, "floats"):
        return [float(t) for t in str(raw).replace(",", " ").split()]
    return cast(raw)


def _require_seed(st: Settings) -> int:
    seed = st.get("seed", None, int)
    if seed is None:
        raise UsageError("a seed is required (--seed or 'seed' in the config file)")
    return int(seed)


def _load(path, min_cell) -> tuple[ObservationTable, dict]:
    try:
        table = ObservationTable.from_csv(path)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    rep = validate(table, min_cell=min_cell)
    rep.raise_if_fatal()
    return table, rep.to_dict()


def _nuisances(st: Settings, table: ObservationTable, seed: int):
    from .nuisance import Family

    k = st.get("k", 5, int, section="nuisance")
    clip = st.get("clip_eps", 0.01, float, section="nuisance")
    y_family = Family.POISSON_LOG if table.offset is not None else Family.LINEAR_GAUSSIAN
    if table.offset is None and np.all((table.y == 0) | (table.y == 1)):
        y_family = Family.BINOMIAL_LOGIT
    folds = make_folds(table.n, k, table.z, seed)
    return fit_nuisances(
        table, folds,
        st.learner("pi", LearnerSpec("binomial")),
        st.learner("mu_y", LearnerSpec(y_family)),
        st.learner("mu_d", LearnerSpec("binomial")),
        clip,
    )


# Output helpers

def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    raise TypeError(type(o))


def _clean(o):
    if isinstance(o, float) and not math.isfinite(o):
        return None if math.isnan(o) else ("inf" if o > 0 else "-inf")
    if isinstance(o, dict):
        return {k: _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    return o


def _emit(text: str, path: str | None):
    if path:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _json(payload) -> str:
    return json.dumps(_clean(json.loads(json.dumps(payload, default=_json_default))), indent=2, sort_keys=True) + "\n"


def _csv(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (json.dumps(v) if isinstance(v, (list, dict)) else v) for k, v in r.items()})
    return buf.getvalue()


def _choices(values, allowed, what):
    out = []
    for v in values:
        for part in str(v).split(","):
            part = part.strip().lower()
            if part == "all":
                out.extend(allowed)
            elif part in allowed:
                out.append(part)
            elif part:
                raise UsageError(f"unknown {what} {part!r}; choose from {', '.join(allowed)}")
    return list(dict.fromkeys(out))


# Subcommands

def cmd_estimate(args) -> int:
    st = Settings(args, "estimate")
    seed = _require_seed(st)
    methods = _choices(st.get("method", ["ee"], lambda r: r.split()), ["wald", "os", "ee"], "method")
    estimands = _choices(st.get("estimand", ["swate"], lambda r: r.split()), ["swate", "acoate", "coate"], "estimand")
    level = st.get("level", 0.95, float)
    table, val = _load(args.input, st.get("min_cell", 10, int))
    nuis = _nuisances(st, table, seed) if any(m != "wald" for m in methods) else None
    reports = []
    for e in estimands:
        for m in methods:
            kw = {"level": level}
            if m == "wald":
                kw.update(se_method=st.get("se_method", "delta"), B=st.get("bootstrap", 500, int), seed=seed)
            reports.append(estimate(table, nuis, Estimand.parse(e), Method.parse(m), **kw).to_dict())
    if st.get("format", "json") == "csv":
        cols = ["estimand", "method", "point", "se", "ci", "level", "denom", "flags", "n", "fold_estimates"]
        _emit(_csv(reports, cols), args.output)
    else:
        _emit(_json({"version": __version__, "seed": seed, "command": "estimate", "input": str(args.input),
                     "validation": val, "reports": reports}), args.output)
    return EXIT_OK


def cmd_test(args) -> int:
    st = Settings(args, "test")
    seed = _require_seed(st)
    kinds = _choices(st.get("kind", ["projection"], lambda r: r.split()), ["projection", "ks"], "test kind")
    contrasts = st.get("contrast", [1, 2, 3], lambda r: [int(t) for t in r.replace(",", " ").split()])
    if any(j not in (1, 2, 3) for j in contrasts):
        raise UsageError("contrast must be 1, 2 or 3")
    alpha = st.get("alpha", 0.05, float)
    table, val = _load(args.input, st.get("min_cell", 10, int))
    nuis = _nuisances(st, table, seed)
    reports, omega_rows = [], []
    for kind in kinds:
        for j in contrasts:
            if kind == "projection":
                r = projection_test(table, nuis, j, alpha)
            else:
                r = ks_test(table, nuis, j, alpha, M=st.get("draws", 2000, int), seed=seed,
                            grid_max=st.get("grid_max", 500, int))
                for c, om in zip(r.extras["grid"], r.extras["omega"]):
                    omega_rows.append({"contrast": j, **{f"c_{nm}": v for nm, v in zip(table.names, c)}, "omega": om})
            reports.append(r.to_dict())
    if args.dump_omega:
        if not omega_rows:
            raise UsageError("--dump-omega needs a KS run (--kind ks)")
        cols = ["contrast", *(f"c_{nm}" for nm in table.names), "omega"]
        _emit(_csv(omega_rows, cols), args.dump_omega)
    if st.get("format", "json") == "csv":
        cols = ["contrast", "kind", "statistic", "critical", "alpha", "reject", "df", "p_value", "n_used", "n_excluded"]
        _emit(_csv(reports, cols), args.output)
    else:
        _emit(_json({"version": __version__, "seed": seed, "command": "test", "input": str(args.input),
                     "validation": val, "reports": reports}), args.output)
    return EXIT_OK


def cmd_profile(args) -> int:
    st = Settings(args, "profile")
    seed = _require_seed(st)
    table, val = _load(args.input, st.get("min_cell", 10, int))
    prof = strata_profile(table, _nuisances(st, table, seed)).to_dict()
    if st.get("format", "json") == "csv":
        _emit(_csv(prof["covariates"], ["name", "switchers", "always_compliers", "overall"]), args.output)
    else:
        _emit(_json({"version": __version__, "seed": seed, "command": "profile", "input": str(args.input),
                     "validation": val, "profile": prof}), args.output)
    return EXIT_OK


def cmd_simulate(args) -> int:
    st = Settings(args, "simulate")
    seed = _require_seed(st)
    design = st.get("design", "estimation")
    n = st.get("n", 1000, int)
    reps = st.get("reps", 200, int)
    threads = args.threads or available_threads()
    oracle_m = st.get("oracle_draws", 1_000_000, int)
    if design == "estimation":
        alpha = st.get("alpha_params", None, "floats")
        share = st.get("sw_share", None)
        if alpha is None:
            if share is not None and str(share) not in SW_SHARE_TO_ALPHA:
                raise UsageError(f"--sw-share must be one of {', '.join(SW_SHARE_TO_ALPHA)}")
            alpha = SW_SHARE_TO_ALPHA[str(share)] if share is not None else ALPHA_SETS[-1]
        outcome = st.get("outcome", "continuous")
        beta = st.get("beta", None, "floats") or ((2, 2, 2) if outcome == "continuous" else (0, 1, -1))
        s = EstimationScenario(n, tuple(alpha), tuple(beta), outcome, seed)
        estimand = Estimand.parse(st.get("estimand", "SWATE"))
        oracle = true_swate_oracle if estimand is Estimand.SWATE else true_acoate_oracle
        if st.get("oracle_only", False, bool):
            o = oracle(s, oracle_m)
            rows = [{"scenario": s.label, "estimand": estimand.value, "truth": o.value, "mc_se": o.mc_se,
                     "stratum_share": o.share, "m": o.m}]
            _emit(_csv(rows, rows[0].keys()), args.output)
            return EXIT_OK
        methods = [Method.parse(m).value for m in
                   _choices(st.get("method", ["ee"], lambda r: r.split()), ["wald", "os", "ee"], "method")]
        out = monte_carlo(s, reps, methods, estimand, seed, K=st.get("k", 5, int, section="nuisance"),
                          clip_eps=st.get("clip_eps", 0.01, float, section="nuisance"),
                          oracle_m=oracle_m, threads=threads)
        _emit(_csv([r.to_dict() for r in out], CSV_COLUMNS), args.output)
        return EXIT_OK
    if design == "testing":
        s = TestingScenario(n, st.get("switcher_alpha", 0.4, float), tuple(st.get("beta", None, "floats") or (1, 2, 2)),
                            seed)
        if st.get("oracle_only", False, bool):
            rows = []
            for name, strata in (("SWATE", (1, 2)), ("ACOATE", (4,))):
                o = testing_oracle(s, strata, oracle_m)
                rows.append({"scenario": s.label, "estimand": name, "truth": o.value, "mc_se": o.mc_se,
                             "stratum_share": o.share, "m": o.m})
            _emit(_csv(rows, rows[0].keys()), args.output)
            return EXIT_OK
        kind = st.get("kind", "projection")
        contrasts = st.get("contrast", [1, 2, 3], lambda r: [int(t) for t in r.replace(",", " ").split()])
        if any(j not in (1, 2, 3) for j in contrasts):
            raise UsageError("contrast must be 1, 2 or 3")
        rates = run_test_study(s, reps, kind, contrasts, st.get("alpha", 0.05, float), seed,
                               M=st.get("draws", 2000, int), threads=threads)
        rows = [{"scenario": s.label, "kind": kind, "contrast": j, "R": reps, "rejection_rate": r}
                for j, r in rates.items()]
        _emit(_csv(rows, ["scenario", "kind", "contrast", "R", "rejection_rate"]), args.output)
        return EXIT_OK
    raise UsageError("design must be 'estimation' or 'testing'")


def cmd_generate(args) -> int:
    st = Settings(args, "generate")
    seed = _require_seed(st)
    design = st.get("design", "plco")
    if design == "plco":
        table, _ = gen_plco_like(seed)
    elif design == "estimation":
        table, _ = gen_estimation_data(EstimationScenario(st.get("n", 1000, int), seed=seed))
    elif design == "testing":
        table, _ = gen_testing_data(TestingScenario(st.get("n", 2000, int), seed=seed))
    else:
        raise UsageError("design must be plco, estimation or testing")
    table.to_csv(args.output_csv)
    return EXIT_OK


# Parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nestediv", description="Nested instrumental-variable analysis.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=None, help="worker processes (default: available cores)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        if data:
            sp.add_argument("input", help="CSV with header z,<covariates>,d,y[,offset]")
        sp.add_argument("--config", help="INI configuration file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--output", "-o", help="write the report here instead of stdout")
        sp.add_argument("--format", choices=["json", "csv"])
        sp.add_argument("--k", type=int, help="number of cross-fitting folds")
        sp.add_argument("--clip-eps", dest="clip_eps", type=float)
        sp.add_argument("--min-cell", dest="min_cell", type=int)

    e = sub.add_parser("estimate", help="point estimates, standard errors and intervals")
    common(e)
    e.add_argument("--method", nargs="+", help="wald, os, ee or all")
    e.add_argument("--estimand", nargs="+", help="swate, acoate, coate or all")
    e.add_argument("--level", type=float)
    e.add_argument("--se-method", dest="se_method", choices=["delta", "bootstrap"])
    e.add_argument("--bootstrap", type=int, help="bootstrap replicates for Wald")
    e.set_defaults(func=cmd_estimate)

    t = sub.add_parser("test", help="effect-homogeneity tests")
    common(t)
    t.add_argument("--kind", nargs="+", help="projection, ks or all")
    t.add_argument("--contrast", type=int, nargs="+", choices=[1, 2, 3])
    t.add_argument("--alpha", type=float)
    t.add_argument("--draws", type=int, help="Gaussian draws for the KS critical value")
    t.add_argument("--grid-max", dest="grid_max", type=int)
    t.add_argument("--dump-omega", dest="dump_omega", help="write (c, Omega(c)) pairs of KS runs as CSV")
    t.set_defaults(func=cmd_test)

    pr = sub.add_parser("profile", help="covariate means among switchers and always-compliers")
    common(pr)
    pr.set_defaults(func=cmd_profile)

    s = sub.add_parser("simulate", help="Monte Carlo studies of the simulation designs")
    common(s, data=False)
    s.add_argument("--design", choices=["estimation", "testing"])
    s.add_argument("--n", type=int)
    s.add_argument("--reps", type=int)
    s.add_argument("--sw-share", dest="sw_share", choices=sorted(SW_SHARE_TO_ALPHA))
    s.add_argument("--alpha-params", dest="alpha_params", type=float, nargs=3)
    s.add_argument("--beta", type=float, nargs=3)
    s.add_argument("--outcome", choices=["continuous", "binary"])
    s.add_argument("--method", nargs="+")
    s.add_argument("--estimand", choices=["SWATE", "ACOATE", "swate", "acoate"])
    s.add_argument("--switcher-alpha", dest="switcher_alpha", type=float)
    s.add_argument("--kind", choices=["projection", "ks"])
    s.add_argument("--contrast", type=int, nargs="+", choices=[1, 2, 3])
    s.add_argument("--alpha", type=float)
    s.add_argument("--draws", type=int)
    s.add_argument("--oracle-only", dest="oracle_only", action="store_true", default=None)
    s.add_argument("--oracle-draws", dest="oracle_draws", type=int)
    s.set_defaults(func=cmd_simulate)

    g = sub.add_parser("generate", help="write a synthetic dataset to CSV")
    g.add_argument("output_csv")
    g.add_argument("--design", choices=["plco", "estimation", "testing"])
    g.add_argument("--n", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--config")
    g.set_defaults(func=cmd_generate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"nestediv: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, EmptyCellError, TooFewRowsPerCell) as exc:
        print(f"nestediv: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (DegenerateError, NuisanceFitError) as exc:
        print(f"nestediv: degenerate estimation: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except Exception as exc:  # noqa: BLE001
        print(f"nestediv: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
