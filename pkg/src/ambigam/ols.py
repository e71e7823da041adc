"""Parametric design matrices, least squares fits and two-way ANOVA."""

from __future__ import annotations

import itertools
import re
import warnings
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
import scipy.linalg as sla

from .data import Dataset, DegenerateFactor, NotNumeric

T_THRESHOLD = 2.0


class DesignError(ValueError):
    pass


class UnknownCovariate(DesignError):
    def __init__(self, name):
        super().__init__(f"unknown covariate {name!r}")
        self.name = name


class Underdetermined(DesignError):
    pass


class SingularDesign(DesignError):
    pass


class EmptyCell(DesignError):
    pass


class RankWarning(UserWarning):
    pass


# ------------------------------------------------------------------ #
# Terms
# ------------------------------------------------------------------ #


@dataclass(frozen=True)
class Power:
    covariate: str
    degree: int = 1

    def __post_init__(self):
        if self.degree < 1:
            raise DesignError("power degree must be >= 1")

    @property
    def name(self) -> str:
        return self.covariate if self.degree == 1 else f"{self.covariate}^{self.degree}"


@dataclass(frozen=True)
class Product:
    factors: tuple[Power, ...]

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        covs = [f.covariate for f in self.factors]
        if len(covs) < 2:
            raise DesignError("a product needs at least two factors")
        if len(set(covs)) != len(covs):
            raise DesignError(f"product factors must reference distinct covariates: {covs}")

    @property
    def name(self) -> str:
        return ":".join(f.name for f in self.factors)

    @property
    def covariates(self) -> tuple[str, ...]:
        return tuple(f.covariate for f in self.factors)


@dataclass(frozen=True)
class FactorMain:
    factor: str

    @property
    def name(self) -> str:
        return self.factor


@dataclass(frozen=True)
class FactorInteraction:
    first: str
    second: str

    @property
    def name(self) -> str:
        return f"{self.first}:{self.second}"


Term = Union[Power, Product, FactorMain, FactorInteraction]


def term_covariates(term: Term) -> tuple[str, ...]:
    if isinstance(term, Power):
        return (term.covariate,)
    if isinstance(term, Product):
        return term.covariates
    if isinstance(term, FactorMain):
        return (term.factor,)
    return (term.first, term.second)


@dataclass(frozen=True)
class DesignSpec:
    terms: tuple[Term, ...] = ()
    intercept: bool = True

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        names = [t.name for t in self.terms]
        if len(set(names)) != len(names):
            raise DesignError(f"duplicate terms in design: {names}")

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.terms]

    def extend(self, terms: Sequence[Term]) -> "DesignSpec":
        have = set(self.names)
        extra = [t for t in terms if t.name not in have]
        return DesignSpec(self.terms + tuple(extra), self.intercept)

    def covariates(self) -> set[str]:
        return {c for t in self.terms for c in term_covariates(t)}


_POWER = re.compile(r"^\s*([A-Za-z_][\w.]*)\s*(?:\^\s*(\d+))?\s*$")


def parse_term(text: str, factors: Sequence[str] = ()) -> Term:
    """Parse ``x``, ``x^2``, ``x:z`` or ``a^2:lw:ls``; names in ``factors``
    become factor terms."""
    parts = text.split(":")
    powers = []
    for part in parts:
        m = _POWER.match(part)
        if not m:
            raise DesignError(f"cannot parse term {text!r}")
        powers.append(Power(m.group(1), int(m.group(2) or 1)))
    if any(p.covariate in factors for p in powers):
        if len(powers) == 1 and powers[0].degree == 1:
            return FactorMain(powers[0].covariate)
        if len(powers) == 2 and all(p.degree == 1 for p in powers):
            return FactorInteraction(powers[0].covariate, powers[1].covariate)
        raise DesignError(f"unsupported factor term {text!r}")
    if len(powers) == 1:
        return powers[0]
    return Product(tuple(powers))


def crossed_terms(groups: Sequence[Sequence[Power]]) -> list[Term]:
    """All main effects and interactions of crossed term groups.

    ``[[a, a^2], [lw], [ls]]`` gives the eleven terms of ``(a + a^2) * lw * ls``.
    """
    out: list[Term] = []
    for size in range(1, len(groups) + 1):
        for combo in itertools.combinations(groups, size):
            for picks in itertools.product(*combo):
                out.append(picks[0] if size == 1 else Product(tuple(picks)))
    return out


def parse_formula(text: str, factors: Sequence[str] = ()) -> list[Term]:
    """Comma separated terms; a term may be a crossing like ``(a+a^2)*lw*ls``."""
    terms: list[Term] = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        if "*" in chunk:
            groups = []
            for part in chunk.split("*"):
                items = part.strip().strip("()").split("+")
                groups.append([parse_term(i, factors) for i in items])
            terms.extend(crossed_terms(groups))
        else:
            terms.append(parse_term(chunk, factors))
    seen, unique = set(), []
    for t in terms:
        if t.name not in seen:
            seen.add(t.name)
            unique.append(t)
    return unique


# ------------------------------------------------------------------ #
# Design matrices
# ------------------------------------------------------------------ #


@dataclass(frozen=True)
class DesignMatrix:
    X: np.ndarray
    names: list[str]
    spec: DesignSpec
    levels: dict = field(default_factory=dict)
    rank: int = 0

    @property
    def shape(self):
        return self.X.shape

    def column(self, name: str) -> np.ndarray:
        return self.X[:, self.names.index(name)]


def _sum_to_zero(labels: np.ndarray, levels: Sequence[str]) -> tuple[np.ndarray, list[str]]:
    """Deviation coding: the first level is coded -1 in every column."""
    levels = list(levels)
    if len(levels) < 2:
        raise DegenerateFactor(f"factor needs at least two levels, has {levels}")
    cols = np.zeros((len(labels), len(levels) - 1))
    for j, lev in enumerate(levels[1:]):
        cols[:, j] = (labels == lev).astype(float)
    cols[labels == levels[0], :] = -1.0
    return cols, [str(lev) for lev in levels[1:]]


def _covariate(ds: Dataset, name: str) -> np.ndarray:
    if name not in ds:
        raise UnknownCovariate(name)
    if ds.is_factor(name):
        raise NotNumeric(name)
    return ds[name]


def _factor_block(ds: Dataset, name: str, levels: dict):
    if name not in ds:
        raise UnknownCovariate(name)
    if not ds.is_factor(name):
        raise DesignError(f"column {name!r} is not a factor")
    if name not in levels:
        # levels pinned by a previous fit may legitimately be unobserved here
        if len(set(ds[name].tolist())) < 2:
            raise DegenerateFactor(f"factor {name!r} has a single observed level")
        levels[name] = tuple(ds.levels[name])
    return _sum_to_zero(ds[name], levels[name])


def build_design(spec: DesignSpec, ds: Dataset, levels: dict | None = None) -> DesignMatrix:
    """Realize ``spec`` on ``ds``.

    ``levels`` pins factor level orders (used when evaluating a fitted design
    on new data); otherwise the dataset's own level order is used.
    """
    levels = dict(levels or {})
    cols, names = [], []
    if spec.intercept:
        cols.append(np.ones(ds.n))
        names.append("(Intercept)")
    for term in spec.terms:
        if isinstance(term, Power):
            cols.append(_covariate(ds, term.covariate) ** term.degree)
            names.append(term.name)
        elif isinstance(term, Product):
            v = np.ones(ds.n)
            for p in term.factors:
                v = v * _covariate(ds, p.covariate) ** p.degree
            cols.append(v)
            names.append(term.name)
        elif isinstance(term, FactorMain):
            block, labs = _factor_block(ds, term.factor, levels)
            cols.extend(block.T)
            names.extend(f"{term.factor}[{lab}]" for lab in labs)
        elif isinstance(term, FactorInteraction):
            b1, l1 = _factor_block(ds, term.first, levels)
            b2, l2 = _factor_block(ds, term.second, levels)
            for i, j in itertools.product(range(b1.shape[1]), range(b2.shape[1])):
                cols.append(b1[:, i] * b2[:, j])
                names.append(f"{term.first}[{l1[i]}]:{term.second}[{l2[j]}]")
        else:
            raise DesignError(f"unknown term {term!r}")
    X = np.column_stack(cols) if cols else np.empty((ds.n, 0))
    rank = int(np.linalg.matrix_rank(X)) if X.size else 0
    if rank < X.shape[1]:
        warnings.warn(f"design has rank {rank} < {X.shape[1]} columns", RankWarning, stacklevel=2)
    return DesignMatrix(X, names, spec, levels, rank)


# ------------------------------------------------------------------ #
# Least squares
# ------------------------------------------------------------------ #


@dataclass(frozen=True)
class OlsFit:
    names: list[str]
    coefficients: dict[str, float]
    standard_errors: dict[str, float]
    t_values: dict[str, float]
    residuals: np.ndarray
    fitted: np.ndarray
    rss: float
    tss: float
    r_squared: float
    dof_residual: int
    sigma2_hat: float
    n: int
    cov_unscaled: np.ndarray = field(repr=False, default=None)

    def significant(self, name: str, threshold: float = T_THRESHOLD) -> bool:
        return abs(self.t_values[name]) > threshold

    def to_dict(self) -> dict:
        return {
            "coefficients": dict(self.coefficients),
            "se": dict(self.standard_errors),
            "t": dict(self.t_values),
            "r2": self.r_squared,
            "n": self.n,
            "dof": self.dof_residual,
        }


def r_squared(rss: float, y: np.ndarray) -> float:
    tss = float(np.sum((y - y.mean()) ** 2))
    return 1.0 - rss / tss if tss > 0 else float("nan")


def fit_ols(X, y, names: Sequence[str] | None = None) -> OlsFit:
    """Least squares via column-pivoted QR.

    ``X`` is a :class:`DesignMatrix` or a plain 2-d array (with ``names``).
    Standard errors are ``sqrt(sigma2_hat * diag((X'X)^-1))`` with
    ``sigma2_hat = rss / (n - p)``.
    """
    if isinstance(X, DesignMatrix):
        names = list(X.names)
        X = X.X
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if names is None:
        names = [f"x{j}" for j in range(p)]
    if len(y) != n:
        raise DesignError(f"response has length {len(y)}, design has {n} rows")
    if not np.all(np.isfinite(y)):
        raise DesignError("response contains non-finite values")
    if n <= p:
        raise Underdetermined(f"n={n} observations for p={p} columns")

    Q, R, piv = sla.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = 1e-10 * np.linalg.norm(X, 2)
    if p and diag.min() <= tol:
        raise SingularDesign(f"design is rank deficient ({int(np.sum(diag > tol))} < {p})")

    qty = Q.T @ y
    beta = np.empty(p)
    beta[piv] = sla.solve_triangular(R, qty)
    fitted = X @ beta
    resid = y - fitted
    rss = float(resid @ resid)
    dof = n - p
    sigma2 = rss / dof
    Rinv = sla.solve_triangular(R, np.eye(p))
    cov = np.empty((p, p))
    cov[np.ix_(piv, piv)] = Rinv @ Rinv.T
    se = np.sqrt(sigma2 * np.diag(cov))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, beta / se, np.nan)
    tss = float(np.sum((y - y.mean()) ** 2))
    return OlsFit(
        names=list(names),
        coefficients=dict(zip(names, beta.tolist())),
        standard_errors=dict(zip(names, se.tolist())),
        t_values=dict(zip(names, t.tolist())),
        residuals=resid,
        fitted=fitted,
        rss=rss,
        tss=tss,
        r_squared=1.0 - rss / tss if tss > 0 else float("nan"),
        dof_residual=dof,
        sigma2_hat=sigma2,
        n=n,
        cov_unscaled=cov,
    )


def fit_lm(spec: DesignSpec, ds: Dataset, response: str) -> OlsFit:
    return fit_ols(build_design(spec, ds), ds.numeric(response))


def residualize(ds: Dataset, target: str, predictors: DesignSpec) -> Dataset:
    """Add ``<target>_resid``: residuals of ``target`` regressed on ``predictors``."""
    fit = fit_ols(build_design(predictors, ds), ds.numeric(target))
    return ds.replace(columns={f"{target}_resid": fit.residuals})


# ------------------------------------------------------------------ #
# Two-way ANOVA
# ------------------------------------------------------------------ #


@dataclass(frozen=True)
class AnovaRow:
    name: str
    sum_sq: float
    dof: int
    mean_sq: float
    f_value: float


@dataclass(frozen=True)
class AnovaTable:
    rows: list[AnovaRow]

    def __getitem__(self, name: str) -> AnovaRow:
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {r.name: {"sum_sq": r.sum_sq, "df": r.dof, "mean_sq": r.mean_sq, "F": r.f_value}
                for r in self.rows}


def _rss(X: np.ndarray, y: np.ndarray) -> float:
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    r = y - X @ beta
    return float(r @ r)


def anova_two_way(ds: Dataset, y: str, fx: str, fz: str) -> AnovaTable:
    """Type-II two-way ANOVA by nested model comparison.

    Each main effect is adjusted for the other main effect; the interaction
    is adjusted for both mains.  Rows are named ``fx``, ``fz``, ``fx:fz`` and
    ``Residual``.
    """
    resp = ds.numeric(y)
    for f in (fx, fz):
        if not ds.is_factor(f):
            raise DesignError(f"column {f!r} is not a factor")
        if len(set(ds[f].tolist())) < 2:
            raise DegenerateFactor(f"factor {f!r} has a single observed level")
    for a, b in itertools.product(ds.levels[fx], ds.levels[fz]):
        if not np.any((ds[fx] == a) & (ds[fz] == b)):
            raise EmptyCell(f"no observations in cell {fx}={a}, {fz}={b}")

    ones = np.ones((ds.n, 1))
    bx, _ = _sum_to_zero(ds[fx], ds.levels[fx])
    bz, _ = _sum_to_zero(ds[fz], ds.levels[fz])
    bxz = np.column_stack([bx[:, i] * bz[:, j]
                           for i in range(bx.shape[1]) for j in range(bz.shape[1])])

    rss_z = _rss(np.hstack([ones, bz]), resp)
    rss_x = _rss(np.hstack([ones, bx]), resp)
    rss_add = _rss(np.hstack([ones, bx, bz]), resp)
    rss_full = _rss(np.hstack([ones, bx, bz, bxz]), resp)

    dof_res = ds.n - 1 - bx.shape[1] - bz.shape[1] - bxz.shape[1]
    if dof_res < 1:
        raise Underdetermined("no residual degrees of freedom")
    ms_res = rss_full / dof_res
    entries = [
        (fx, rss_z - rss_add, bx.shape[1]),
        (fz, rss_x - rss_add, bz.shape[1]),
        (f"{fx}:{fz}", rss_add - rss_full, bxz.shape[1]),
    ]
    rows = []
    with np.errstate(divide="ignore", invalid="ignore"):
        for name, ss, df in entries:
            ss = max(ss, 0.0)
            ms = ss / df
            rows.append(AnovaRow(name, ss, df, ms, float(np.divide(ms, ms_res))))
    rows.append(AnovaRow("Residual", rss_full, dof_res, ms_res, float("nan")))
    return AnovaTable(rows)
