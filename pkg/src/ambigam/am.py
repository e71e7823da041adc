"""Additive (mixed) models fitted as one penalized least-squares problem.

Smooth blocks, unpenalized parametric columns and random-intercept indicator
blocks share a single solver: a random intercept is a ridge-penalized block
whose penalty weight is the variance ratio ``sigma^2 / sigma_b^2``, exactly
as a spline's coefficients are penalized by ``lambda * S``.  All penalty
weights are chosen by REML, one coordinate at a time.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .data import Dataset, MissingColumn
from .ols import DesignSpec, build_design, T_THRESHOLD
from .smooth import (DEFAULT_K, LOG10_BOUNDS, NULL_DIM, XTOL, SmoothBasis, line_search,
                     reml_criterion, tps_basis)

MAX_OUTER = 50


class NonConvergence(UserWarning):
    pass


@dataclass(frozen=True)
class AmSpec:
    response: str
    smooths: tuple[tuple[str, int], ...] = ()
    parametric: DesignSpec | None = None
    random_intercepts: tuple[str, ...] = ()
    include_intercept: bool = True

    def __post_init__(self):
        smooths = tuple((s, DEFAULT_K) if isinstance(s, str) else (s[0], int(s[1]))
                        for s in self.smooths)
        object.__setattr__(self, "smooths", smooths)
        object.__setattr__(self, "random_intercepts", tuple(self.random_intercepts))
        covs = [c for c, _ in smooths]
        if len(set(covs)) != len(covs):
            raise ValueError(f"smooth covariates must be distinct: {covs}")
        if len(set(self.random_intercepts)) != len(self.random_intercepts):
            raise ValueError("random-intercept factors must be distinct")

    @property
    def smooth_covariates(self) -> list[str]:
        return [c for c, _ in self.smooths]

    def covariates(self) -> set[str]:
        out = set(self.smooth_covariates)
        if self.parametric is not None:
            out |= self.parametric.covariates()
        return out


def smooth_label(covariate: str) -> str:
    return f"s({covariate})"


def random_label(factor: str) -> str:
    return f"(1|{factor})"


# ------------------------------------------------------------------ #
# Fitted model
# ------------------------------------------------------------------ #


@dataclass(frozen=True)
class SmoothBlock:
    """One centered smooth: ``s(x) = (B(x)[:, 1:] - means) @ coef``.

    The constant basis column is dropped (the model intercept replaces it);
    the remaining ``k - 1`` columns are centered over the training sample.
    """

    basis: SmoothBasis
    means: np.ndarray
    coef: np.ndarray
    lam: float
    edf: float

    @property
    def covariate(self) -> str:
        return self.basis.covariate

    def design(self, x) -> np.ndarray:
        B = self.basis.evaluate(x)
        return np.delete(B, self.basis.k - NULL_DIM, axis=1) - self.means

    def __call__(self, x) -> np.ndarray:
        return self.design(x) @ self.coef

    def to_dict(self) -> dict:
        return {
            "covariate": self.covariate,
            "k": self.basis.k,
            "lambda": self.lam,
            "edf": self.edf,
            "basis": self.basis.to_dict(),
            "column_means": self.means.tolist(),
            "coef": self.coef.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SmoothBlock":
        return cls(SmoothBasis.from_dict(d["basis"]), np.array(d["column_means"]),
                   np.array(d["coef"]), float(d["lambda"]), float(d["edf"]))


@dataclass(frozen=True)
class RandomIntercept:
    factor: str
    levels: tuple[str, ...]
    values: np.ndarray
    ratio: float
    sigma_b2: float

    def lookup(self, labels) -> np.ndarray:
        index = {lev: i for i, lev in enumerate(self.levels)}
        return np.array([self.values[index[str(v)]] if str(v) in index else 0.0
                         for v in labels])

    def to_dict(self) -> dict:
        return {
            "factor": self.factor,
            "sigma_b2": self.sigma_b2,
            "ratio": self.ratio,
            "intercepts": dict(zip(self.levels, self.values.tolist())),
        }


@dataclass(frozen=True)
class AmFit:
    spec: AmSpec
    intercept: float
    parametric_names: list[str]
    coefficients: dict[str, float]
    standard_errors: dict[str, float]
    t_values: dict[str, float]
    blocks: list[SmoothBlock]
    random_effects: list[RandomIntercept]
    sigma2: float
    fitted: np.ndarray
    residuals: np.ndarray
    r_squared: float
    reml_score: float
    log10_params: dict[str, float]
    converged: bool
    n_outer: int
    history: list[float] = field(default_factory=list)
    design_levels: dict = field(default_factory=dict)

    def block(self, covariate: str) -> SmoothBlock:
        for b in self.blocks:
            if b.covariate == covariate:
                return b
        raise KeyError(covariate)

    def random_effect(self, factor: str) -> RandomIntercept:
        for r in self.random_effects:
            if r.factor == factor:
                return r
        raise KeyError(factor)

    def significant(self, name: str, threshold: float = T_THRESHOLD) -> bool:
        return abs(self.t_values[name]) > threshold

    def summary(self) -> dict:
        return {
            "r2": self.r_squared,
            "edf": {smooth_label(b.covariate): b.edf for b in self.blocks},
            "reml_score": self.reml_score,
            "converged": self.converged,
        }

    def to_dict(self) -> dict:
        return {
            "response": self.spec.response,
            "intercept": self.intercept,
            "parametric": {
                "terms": [t.name for t in self.spec.parametric.terms] if self.spec.parametric else [],
                "coefficients": self.coefficients,
                "se": self.standard_errors,
                "t": self.t_values,
                "levels": {k: list(v) for k, v in self.design_levels.items()},
            },
            "blocks": [b.to_dict() for b in self.blocks],
            "variance_components": {
                "sigma2": self.sigma2,
                **{random_label(r.factor): r.sigma_b2 for r in self.random_effects},
            },
            "random_effects": [r.to_dict() for r in self.random_effects],
            "log10_params": self.log10_params,
            "r2": self.r_squared,
            "reml_score": self.reml_score,
            "converged": self.converged,
            "outer_iterations": self.n_outer,
            "n": int(len(self.fitted)),
        }


# ------------------------------------------------------------------ #
# Assembly
# ------------------------------------------------------------------ #


@dataclass
class _Group:
    label: str
    index: np.ndarray
    base: np.ndarray
    rank: int

    @property
    def log_base(self) -> float:
        return float(np.sum(np.log(self.base)))


class _System:
    """Normal equations of the joint model with per-group penalty weights."""

    def __init__(self, dense: np.ndarray, sparse_part, y: np.ndarray, groups: list[_Group],
                 n_unpenalized: int):
        self.dense = dense
        self.sparse = sparse_part
        self.y = y
        self.groups = groups
        self.n_unpenalized = n_unpenalized
        self.n = len(y)
        pd_ = dense.shape[1]
        if sparse_part is not None:
            ZtZ = (sparse_part.T @ sparse_part).toarray()
            ZtD = np.asarray(sparse_part.T @ dense)
            self.XtX = np.block([[dense.T @ dense, ZtD.T], [ZtD, ZtZ]])
            self.Xty = np.concatenate([dense.T @ y, sparse_part.T @ y])
        else:
            self.XtX = dense.T @ dense
            self.Xty = dense.T @ y
        self.p = self.XtX.shape[0]
        self.pd = pd_

    def weights(self, rho: np.ndarray) -> np.ndarray:
        w = np.zeros(self.p)
        for g, r in zip(self.groups, rho):
            w[g.index] = 10.0 ** r * g.base
        return w

    def predict(self, beta: np.ndarray) -> np.ndarray:
        out = self.dense @ beta[: self.pd]
        if self.sparse is not None:
            out = out + self.sparse @ beta[self.pd:]
        return out

    def solve(self, rho: np.ndarray):
        w = self.weights(rho)
        M = self.XtX + np.diag(w)
        try:
            cf = sla.cho_factor(M, lower=False, check_finite=False)
        except np.linalg.LinAlgError:
            return None
        beta = sla.cho_solve(cf, self.Xty, check_finite=False)
        resid = self.y - self.predict(beta)
        rss = float(resid @ resid)
        logdet = 2.0 * float(np.sum(np.log(np.abs(np.diag(cf[0])))))
        return beta, rss, float(beta @ (w * beta)), logdet, cf

    def reml(self, rho: np.ndarray) -> float:
        out = self.solve(rho)
        if out is None:
            return math.inf
        _, rss, pen, logdet, _ = out
        log_s = sum(g.rank * r * math.log(10.0) + g.log_base for g, r in zip(self.groups, rho))
        return reml_criterion(rss, pen, logdet, log_s, self.n, self.n_unpenalized)


def _indicator(labels: np.ndarray, levels: Sequence[str]):
    index = {lev: i for i, lev in enumerate(levels)}
    cols = np.array([index[str(v)] for v in labels])
    n = len(labels)
    return sp.csr_matrix((np.ones(n), (np.arange(n), cols)), shape=(n, len(levels)))


def _assemble(spec: AmSpec, ds: Dataset):
    y = ds.numeric(spec.response)
    n = ds.n
    dense_cols: list[np.ndarray] = []
    names: list[str] = []
    if spec.include_intercept:
        dense_cols.append(np.ones((n, 1)))
        names.append("(Intercept)")
    design_levels = {}
    if spec.parametric is not None and spec.parametric.terms:
        dm = build_design(DesignSpec(spec.parametric.terms, intercept=False), ds)
        dense_cols.append(dm.X)
        names.extend(dm.names)
        design_levels = dm.levels
    n_param = sum(c.shape[1] for c in dense_cols)

    groups: list[_Group] = []
    smooth_info = []
    offset = n_param
    n_unpen = n_param
    for cov, k in spec.smooths:
        if cov not in ds:
            raise MissingColumn(cov)
        basis = tps_basis(ds.numeric(cov), k, covariate=cov)
        B = np.delete(basis.basis_matrix, k - NULL_DIM, axis=1)
        means = B.mean(axis=0)
        dense_cols.append(B - means)
        npen = k - NULL_DIM
        groups.append(_Group(smooth_label(cov), np.arange(offset, offset + npen),
                             basis.penalty_diag.copy(), npen))
        smooth_info.append((basis, means, slice(offset, offset + k - 1)))
        offset += k - 1
        n_unpen += 1
    dense = np.hstack(dense_cols) if dense_cols else np.empty((n, 0))

    re_info = []
    sparse_blocks = []
    for fac in spec.random_intercepts:
        if fac not in ds:
            raise MissingColumn(fac)
        if not ds.is_factor(fac):
            raise ValueError(f"random-intercept column {fac!r} must be a factor")
        levels = tuple(ds.levels[fac])
        Z = _indicator(ds[fac], levels)
        sparse_blocks.append(Z)
        groups.append(_Group(random_label(fac), np.arange(offset, offset + len(levels)),
                             np.ones(len(levels)), len(levels)))
        re_info.append((fac, levels, slice(offset, offset + len(levels))))
        offset += len(levels)
    sparse_part = sp.hstack(sparse_blocks, format="csr") if sparse_blocks else None
    if n <= n_unpen:
        raise ValueError(f"n={n} does not exceed the {n_unpen} unpenalized columns")
    system = _System(dense, sparse_part, y, groups, n_unpen)
    return system, names, smooth_info, re_info, design_levels


def _canonical(name: str, spec: AmSpec) -> str:
    if name in spec.smooth_covariates:
        return smooth_label(name)
    if name in spec.random_intercepts:
        return random_label(name)
    return name


# ------------------------------------------------------------------ #
# Fitting
# ------------------------------------------------------------------ #


def _coordinate_descent(system: _System, fixed: Mapping[str, float], max_outer: int):
    labels = [g.label for g in system.groups]
    rho = np.array([fixed.get(lab, 0.0) for lab in labels], dtype=float)
    free = [j for j, lab in enumerate(labels) if lab not in fixed]
    lo, hi = LOG10_BOUNDS
    best = system.reml(rho)
    history = [best]
    converged = True
    n_outer = 0
    if not free:
        return rho, best, history, converged, n_outer

    def coord(j):
        def f(r):
            trial = rho.copy()
            trial[j] = r
            return system.reml(trial)
        return f

    converged = False
    for outer in range(max_outer):
        n_outer = outer + 1
        moves = []
        for j in free:
            if outer == 0:
                r_new, f_new = line_search(coord(j), lo, hi)
            else:
                a, b = max(lo, rho[j] - 1.0), min(hi, rho[j] + 1.0)
                r_new, f_new = line_search(coord(j), a, b, n_grid=5)
            if f_new < best - 1e-9 * max(1.0, abs(best)):
                moves.append(abs(r_new - rho[j]))
                rho[j] = r_new
                best = f_new
            else:
                moves.append(0.0)
        history.append(best)
        # a single free coordinate is optimal after one exact line search
        if len(free) == 1 or max(moves) < XTOL:
            converged = True
            break
    return rho, best, history, converged, n_outer


def fit_am(spec: AmSpec, ds: Dataset, fixed: Mapping[str, float] | None = None,
           max_outer: int = MAX_OUTER) -> AmFit:
    """Fit an additive (mixed) model.

    Parameters
    ----------
    spec : AmSpec
        Response, smooths ``(covariate, k)``, optional parametric design and
        random-intercept factors.
    ds : Dataset
    fixed : mapping, optional
        Clamp log10 penalty parameters instead of estimating them.  Keys are
        covariate or factor names (or ``s(x)`` / ``(1|g)`` labels).
    max_outer : int
        Cap on coordinate-descent sweeps; hitting it issues
        :class:`NonConvergence` and returns the best fit found.
    """
    system, names, smooth_info, re_info, design_levels = _assemble(spec, ds)
    fixed = {_canonical(k, spec): float(v) for k, v in (fixed or {}).items()}
    rho, best, history, converged, n_outer = _coordinate_descent(system, fixed, max_outer)
    if not converged:
        warnings.warn(f"REML coordinate descent did not converge in {max_outer} sweeps",
                      NonConvergence, stacklevel=2)

    out = system.solve(rho)
    if out is None:
        raise np.linalg.LinAlgError("penalized normal equations are not positive definite")
    beta, rss, pen, _, cf = out
    y = system.y
    fitted = system.predict(beta)
    resid = y - fitted
    sigma2 = (rss + pen) / (system.n - system.n_unpenalized)

    n_param = len(names)
    cov_param = sla.cho_solve(cf, np.eye(system.p)[:, :n_param], check_finite=False)[:n_param]
    se = np.sqrt(np.maximum(np.diag(cov_param), 0.0) * sigma2)
    coefs = beta[:n_param]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, coefs / se, np.nan)

    influence = sla.cho_solve(cf, system.XtX, check_finite=False)
    blocks = []
    for (basis, means, sl), g in zip(smooth_info, system.groups):
        blocks.append(SmoothBlock(basis, means, beta[sl].copy(), 10.0 ** rho[system.groups.index(g)],
                                  float(np.trace(influence[sl, sl]))))
    res = []
    for fac, levels, sl in re_info:
        j = [g.label for g in system.groups].index(random_label(fac))
        ratio = 10.0 ** rho[j]
        res.append(RandomIntercept(fac, levels, beta[sl].copy(), ratio, sigma2 / ratio))

    tss = float(np.sum((y - y.mean()) ** 2))
    intercept = float(beta[0]) if spec.include_intercept else 0.0
    return AmFit(
        spec=spec,
        intercept=intercept,
        parametric_names=names,
        coefficients=dict(zip(names, coefs.tolist())),
        standard_errors=dict(zip(names, se.tolist())),
        t_values=dict(zip(names, t.tolist())),
        blocks=blocks,
        random_effects=res,
        sigma2=float(sigma2),
        fitted=fitted,
        residuals=resid,
        r_squared=1.0 - float(resid @ resid) / tss if tss > 0 else float("nan"),
        reml_score=float(best) if system.groups else float(system.reml(rho)),
        log10_params={g.label: float(r) for g, r in zip(system.groups, rho)},
        converged=converged,
        n_outer=n_outer,
        history=history,
        design_levels=dict(design_levels),
    )


def predict(fit: AmFit, ds_new: Dataset) -> np.ndarray:
    """Evaluate a fitted model on new rows; unseen factor levels contribute 0."""
    n = ds_new.n
    out = np.full(n, fit.intercept)
    spec = fit.spec
    if spec.parametric is not None and spec.parametric.terms:
        dm = build_design(DesignSpec(spec.parametric.terms, intercept=False), ds_new,
                          levels=fit.design_levels)
        coef = np.array([fit.coefficients[nm] for nm in dm.names])
        out = out + dm.X @ coef
    for block in fit.blocks:
        if block.covariate not in ds_new:
            raise MissingColumn(block.covariate)
        out = out + block(ds_new.numeric(block.covariate))
    for re in fit.random_effects:
        if re.factor not in ds_new:
            raise MissingColumn(re.factor)
        out = out + re.lookup(ds_new[re.factor])
    return out
