"""Data model and shared numeric utilities for nested-IV analyses.

The analysis dataset is an :class:`ObservationTable` whose instrument column
takes one of four codes ``0a, 1a, 0b, 1b``: two versions (``a`` and ``b``) of
a binary encouragement.  Everything random in the package draws from
:func:`substream`, which derives independent generators from one root seed and
a tuple of names, so results do not depend on execution order.
"""

from __future__ import annotations

import csv
import enum
import zlib
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class NestedIVError(Exception):
    """Base class for all package errors."""


class InputError(NestedIVError):
    """Malformed input file or arguments."""


class EmptyCellError(NestedIVError):
    """An instrument cell is missing or below the minimum size."""


class TooFewRowsPerCell(NestedIVError):
    """A cell has fewer rows than folds."""


class DegenerateError(NestedIVError):
    """Estimation is numerically degenerate (zero denominator, singular matrix, ...)."""


class NotFactorizable(DegenerateError):
    """Cholesky failed at every jitter level."""


class Stratum(enum.Enum):
    A = "a"
    B = "b"


class Arm(enum.IntEnum):
    ZERO = 0
    ONE = 1


class InstrumentCode(enum.Enum):
    """The four instrument values, indexed 0..3 in the order 0a, 1a, 0b, 1b."""

    Z0A = 0
    Z1A = 1
    Z0B = 2
    Z1B = 3

    @property
    def stratum(self) -> Stratum:
        return Stratum.A if self.value < 2 else Stratum.B

    @property
    def arm(self) -> Arm:
        return Arm(self.value % 2)

    @property
    def token(self) -> str:
        return f"{int(self.arm)}{self.stratum.value}"

    @classmethod
    def from_token(cls, token: str) -> "InstrumentCode":
        try:
            return _TOKENS[token.strip()]
        except KeyError:
            raise InputError(f"unknown instrument code {token!r}; expected one of 0a,1a,0b,1b") from None

    @classmethod
    def from_parts(cls, stratum: Stratum, arm: Arm) -> "InstrumentCode":
        return cls(2 * (stratum is Stratum.B) + int(arm))


_TOKENS = {c.token: c for c in InstrumentCode}
CODE_TOKENS = tuple(c.token for c in InstrumentCode)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ObservationTable:
    """Rows of (instrument code, covariates, treatment, outcome[, offset]).

    ``z`` holds code indices 0..3 (see :class:`InstrumentCode`).  ``x`` has no
    intercept column.  Arrays are copied and made read-only on construction.
    """

    z: np.ndarray
    x: np.ndarray
    d: np.ndarray
    y: np.ndarray
    offset: np.ndarray | None = None
    names: tuple[str, ...] = ()

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.int64).ravel()
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        d = np.asarray(self.d, dtype=float).ravel()
        y = np.asarray(self.y, dtype=float).ravel()
        n = z.shape[0]
        if not (x.shape[0] == d.shape[0] == y.shape[0] == n):
            raise InputError("columns have different lengths")
        if np.any((z < 0) | (z > 3)):
            raise InputError("instrument codes must be in 0..3")
        if not np.all((d == 0) | (d == 1)):
            raise InputError("treatment must be 0 or 1")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise InputError("outcome and covariates must be finite")
        off = None
        if self.offset is not None:
            off = np.asarray(self.offset, dtype=float).ravel()
            if off.shape[0] != n or not np.all(np.isfinite(off)) or np.any(off <= 0):
                raise InputError("offset must be finite and positive")
            off = _readonly(off)
        names = tuple(self.names) if self.names else tuple(f"x{j + 1}" for j in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise InputError("number of covariate names does not match x")
        object.__setattr__(self, "z", _readonly(z))
        object.__setattr__(self, "x", _readonly(x))
        object.__setattr__(self, "d", _readonly(d))
        object.__setattr__(self, "y", _readonly(y))
        object.__setattr__(self, "offset", off)
        object.__setattr__(self, "names", names)

    @property
    def n(self) -> int:
        return self.z.shape[0]

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    def codes(self) -> list[InstrumentCode]:
        return [InstrumentCode(int(v)) for v in self.z]

    def replace(self, **changes) -> "ObservationTable":
        fields = dict(z=self.z, x=self.x, d=self.d, y=self.y, offset=self.offset, names=self.names)
        fields.update(changes)
        return ObservationTable(**fields)

    def take(self, idx) -> "ObservationTable":
        idx = np.asarray(idx)
        off = None if self.offset is None else self.offset[idx]
        return ObservationTable(self.z[idx], self.x[idx], self.d[idx], self.y[idx], off, self.names)

    # CSV input/output

    @classmethod
    def from_csv(cls, path) -> "ObservationTable":
        with open(path, newline="") as fh:
            return cls.from_rows(csv.reader(fh), source=str(path))

    @classmethod
    def from_rows(cls, rows: Iterable[Sequence[str]], source: str = "<input>") -> "ObservationTable":
        it = iter(rows)
        try:
            header = [h.strip() for h in next(it)]
        except StopIteration:
            raise InputError(f"{source}: empty file") from None
        has_offset = bool(header) and header[-1] == "offset"
        core = header[:-1] if has_offset else header
        if len(core) < 3 or core[0] != "z" or core[-2:] != ["d", "y"]:
            raise InputError(f"{source}:1: header must be z,<covariates>,d,y[,offset]; got {','.join(header)}")
        names = tuple(core[1:-2])
        width = len(header)
        z, vals = [], []
        for lineno, row in enumerate(it, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != width:
                raise InputError(f"{source}:{lineno}: expected {width} fields, got {len(row)}")
            try:
                z.append(InstrumentCode.from_token(row[0]).value)
            except InputError as exc:
                raise InputError(f"{source}:{lineno}: {exc}") from None
            try:
                vals.append([float(c) for c in row[1:]])
            except ValueError as exc:
                raise InputError(f"{source}:{lineno}: {exc}") from None
        if not z:
            raise InputError(f"{source}: no data rows")
        v = np.array(vals, dtype=float)
        k = len(names)
        try:
            return cls(
                z=np.array(z),
                x=v[:, :k].reshape(len(z), k),
                d=v[:, k],
                y=v[:, k + 1],
                offset=v[:, k + 2] if has_offset else None,
                names=names,
            )
        except InputError as exc:
            raise InputError(f"{source}: {exc}") from None

    def to_csv(self, path) -> None:
        header = ["z", *self.names, "d", "y"] + (["offset"] if self.offset is not None else [])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i in range(self.n):
                row = [CODE_TOKENS[self.z[i]], *(repr(float(v)) for v in self.x[i]),
                       repr(float(self.d[i])), repr(float(self.y[i]))]
                if self.offset is not None:
                    row.append(repr(float(self.offset[i])))
                w.writerow(row)


def design_matrix(x: np.ndarray) -> np.ndarray:
    """Prepend an intercept column."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return np.column_stack([np.ones(x.shape[0]), x])


# Validation

@dataclass(frozen=True)
class ValidationReport:
    counts: dict[str, int]
    compliance: dict[str, float]
    gap: float
    flags: frozenset[str]
    min_cell: int

    @property
    def fatal(self) -> bool:
        return "EmptyCell" in self.flags

    def raise_if_fatal(self) -> None:
        if self.fatal:
            small = {k: v for k, v in self.counts.items() if v < self.min_cell}
            raise EmptyCellError(f"instrument cells below min_cell={self.min_cell}: {small}")

    def to_dict(self) -> dict:
        return {"counts": dict(self.counts), "compliance": dict(self.compliance),
                "gap": self.gap, "flags": sorted(self.flags), "min_cell": self.min_cell}


def validate(table: ObservationTable, min_cell: int = 10, gap_tol: float = 0.02) -> ValidationReport:
    """Cell counts, raw per-stratum compliance rates and data-quality flags.

    Compliance for stratum g is mean(D | 1g) - mean(D | 0g).  Flags:
    ``EmptyCell`` (fatal) when a cell has fewer than ``min_cell`` rows,
    ``NonEqualComplianceViolated`` when the two rates differ by less than
    ``gap_tol`` and ``NegativeComplianceGap`` when either rate is negative.
    """
    counts = np.bincount(table.z, minlength=4)
    sums = np.bincount(table.z, weights=table.d, minlength=4)
    flags = set()
    if np.any(counts < min_cell):
        flags.add("EmptyCell")
    with np.errstate(invalid="ignore", divide="ignore"):
        means = sums / counts
    comp = {"a": float(means[1] - means[0]), "b": float(means[3] - means[2])}
    gap = comp["b"] - comp["a"]
    if np.all(counts > 0):
        if abs(gap) < gap_tol:
            flags.add("NonEqualComplianceViolated")
        if comp["a"] < 0 or comp["b"] < 0:
            flags.add("NegativeComplianceGap")
    return ValidationReport(
        counts={t: int(c) for t, c in zip(CODE_TOKENS, counts)},
        compliance=comp,
        gap=float(gap),
        flags=frozenset(flags),
        min_cell=min_cell,
    )


# Randomness

def _name_key(name) -> int:
    if isinstance(name, (int, np.integer)):
        if name < 0:
            raise ValueError("substream counters must be nonnegative")
        return int(name)
    return zlib.crc32(str(name).encode("utf-8"))


def substream(seed: int, *names) -> np.random.Generator:
    """Independent generator for the stream ``names`` under root ``seed``.

    ``substream(7, "mc", 3)`` always returns the same stream regardless of
    which other streams were used before, so parallel replications are
    reproducible.
    """
    key = tuple(_name_key(n) for n in names)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))


# Folds

@dataclass(frozen=True)
class FoldAssignment:
    K: int
    fold_of: np.ndarray
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "fold_of", _readonly(np.asarray(self.fold_of, dtype=np.int64)))

    def indices(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == k)

    def train_indices(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != k)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.fold_of, minlength=self.K)


def make_folds(n: int, K: int, strata, seed: int) -> FoldAssignment:
    """Stratified K-fold split.

    Rows of each cell are shuffled, the cells are laid end to end and fold
    labels are dealt cyclically along that order.  Fold sizes therefore differ
    by at most one overall and within every cell.
    """
    strata = np.asarray(strata, dtype=np.int64).ravel()
    if strata.shape[0] != n:
        raise ValueError("strata must have length n")
    if K < 2:
        raise ValueError("K must be at least 2")
    order = []
    for c in range(4):
        rows = np.flatnonzero(strata == c)
        if rows.size < K:
            raise TooFewRowsPerCell(f"cell {CODE_TOKENS[c]} has {rows.size} rows, fewer than K={K}")
        order.append(substream(seed, "folds", c).permutation(rows))
    order = np.concatenate(order)
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[order] = np.arange(n) % K
    return FoldAssignment(K=K, fold_of=fold_of, seed=seed)


# Linear algebra

def chol_jitter(M, jitter0: float = 1e-10, max_power: int = 6) -> tuple[np.ndarray, float]:
    """Cholesky factor of ``M + eps*I`` with the smallest workable ``eps``.

    ``eps`` runs through 0, jitter0, 10*jitter0, ..., 10**max_power * jitter0.
    Returns ``(L, eps)``.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("M must be square")
    if not np.allclose(M, M.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(M).max(initial=0.0))):
        raise ValueError("M must be symmetric")
    eye = np.eye(M.shape[0])
    for eps in [0.0] + [jitter0 * 10.0 ** p for p in range(max_power + 1)]:
        try:
            return np.linalg.cholesky(M + eps * eye), eps
        except np.linalg.LinAlgError:
            continue
    raise NotFactorizable(f"matrix not factorizable with jitter up to {jitter0 * 10.0 ** max_power:g}")
