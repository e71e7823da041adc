"""Low-rank thin-plate regression splines in one covariate.

The basis follows the truncated-eigenbasis construction: the cubic
thin-plate kernel ``|r|^3 / 12`` is evaluated on the distinct (rescaled)
covariate values, its ``k`` leading eigenvectors are kept, the side
constraint that makes the kernel part orthogonal to lines is absorbed, and
the two penalty-free columns ``1`` and ``u`` are appended.  The penalty is
then rotated to be diagonal, so ``alpha' S alpha`` is exactly the integrated
squared second derivative of the fitted function (in rescaled units).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize_scalar
from scipy.sparse.linalg import eigsh

NULL_DIM = 2
DEFAULT_K = 10
MAX_KNOTS = 2000
LOG10_BOUNDS = (-8.0, 12.0)
XTOL = 1e-3
_CHUNK = 4096


class SmoothError(ValueError):
    pass


class TooFewDistinctValues(SmoothError):
    pass


class RankTooSmall(SmoothError):
    pass


class NumericalFailure(SmoothError):
    pass


class CannotDouble(SmoothError):
    pass


class BoundaryWarning(UserWarning):
    pass


def tps_kernel(u: np.ndarray, knots: np.ndarray) -> np.ndarray:
    return np.abs(u[:, None] - knots[None, :]) ** 3 / 12.0


def _leading_eigen(E: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """The ``k`` eigenpairs of largest magnitude, sorted by |eigenvalue|."""
    m = E.shape[0]
    if k >= m or m <= 400:
        d, U = np.linalg.eigh(E)
    else:
        d, U = eigsh(E, k=k, which="LM", v0=np.ones(m), tol=1e-12)
    order = np.argsort(-np.abs(d), kind="stable")[:k]
    U = U[:, order]
    # fix the sign of each eigenvector so the basis is reproducible
    signs = np.sign(U[np.argmax(np.abs(U), axis=0), np.arange(k)])
    return d[order], U * signs


def select_knots(x: np.ndarray, max_knots: int = MAX_KNOTS) -> np.ndarray:
    distinct = np.unique(x)
    if len(distinct) > max_knots:
        idx = np.round(np.linspace(0, len(distinct) - 1, max_knots)).astype(int)
        distinct = distinct[idx]
    return distinct


@dataclass(frozen=True)
class SmoothBasis:
    """Rank-``k`` thin-plate basis for one covariate.

    Columns ``0 .. k-3`` are penalized with diagonal weights
    ``penalty_diag``; the final two columns are the constant and the
    rescaled covariate ``u = (x - shift) / scale``.
    """

    covariate: str
    k: int
    knots: np.ndarray
    shift: float
    scale: float
    transform: np.ndarray
    penalty_diag: np.ndarray
    basis_matrix: np.ndarray = field(repr=False, default=None)

    null_dim = NULL_DIM

    @property
    def penalty_matrix(self) -> np.ndarray:
        return np.diag(np.concatenate([self.penalty_diag, np.zeros(NULL_DIM)]))

    @property
    def penalty_weights(self) -> np.ndarray:
        return np.concatenate([self.penalty_diag, np.zeros(NULL_DIM)])

    def rescale(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.shift) / self.scale

    def evaluate(self, x) -> np.ndarray:
        """Basis matrix at new covariate values."""
        u = self.rescale(x)
        uk = self.rescale(self.knots)
        out = np.empty((len(u), self.k))
        for start in range(0, len(u), _CHUNK):
            sl = slice(start, start + _CHUNK)
            out[sl, : self.k - NULL_DIM] = tps_kernel(u[sl], uk) @ self.transform
        out[:, -2] = 1.0
        out[:, -1] = u
        return out

    def to_dict(self) -> dict:
        return {
            "covariate": self.covariate,
            "k": self.k,
            "knots": self.knots.tolist(),
            "shift": self.shift,
            "scale": self.scale,
            "transform": self.transform.tolist(),
            "penalty_diag": self.penalty_diag.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SmoothBasis":
        return cls(d["covariate"], int(d["k"]), np.array(d["knots"], dtype=float),
                   float(d["shift"]), float(d["scale"]),
                   np.array(d["transform"], dtype=float).reshape(-1, int(d["k"]) - NULL_DIM),
                   np.array(d["penalty_diag"], dtype=float))


def tps_basis(x, k: int = DEFAULT_K, covariate: str = "x",
              max_knots: int = MAX_KNOTS) -> SmoothBasis:
    """Build a rank-``k`` thin-plate regression spline basis for ``x``.

    When ``x`` has more than ``max_knots`` distinct values the kernel is
    built on an evenly spaced (by rank) subset of them.
    """
    x = np.asarray(x, dtype=float)
    if k < 3:
        raise RankTooSmall(f"k={k}; need k >= 3")
    if k > len(x):
        raise TooFewDistinctValues(f"k={k} exceeds n={len(x)}")
    knots = select_knots(x, max(max_knots, k))
    if len(knots) < k:
        raise TooFewDistinctValues(f"{len(knots)} distinct values for k={k}")

    shift = float(knots[0])
    scale = float(knots[-1] - knots[0])
    uk = (knots - shift) / scale
    d, U = _leading_eigen(tps_kernel(uk, uk), k)
    T = np.column_stack([np.ones_like(uk), uk])
    Q, _ = np.linalg.qr(U.T @ T, mode="complete")
    Z = Q[:, NULL_DIM:]
    P = Z.T @ (d[:, None] * Z)
    lam, V = np.linalg.eigh((P + P.T) / 2)
    order = np.argsort(-lam)
    lam, V = lam[order], V[:, order]
    if lam[-1] <= 0:
        # can only happen through rounding on nearly coincident knots
        lam = np.maximum(lam, 1e-12 * lam[0])
    W = U @ Z @ V
    basis = SmoothBasis(covariate, k, knots, shift, scale, W, lam)
    object.__setattr__(basis, "basis_matrix", basis.evaluate(x))
    return basis


# ------------------------------------------------------------------ #
# Penalized least squares for a single smooth
# ------------------------------------------------------------------ #


@dataclass
class _Solution:
    alpha: np.ndarray
    rss: float
    penalty: float
    edf: float
    logdet: float


class PenalizedProblem:
    """Reduced form of ``||y - B a||^2 + a' diag(w) a`` for repeated solves.

    ``B = Q R`` once; each solve is a QR of the small stacked system
    ``[R; sqrt(w)]``.
    """

    def __init__(self, B: np.ndarray, y: np.ndarray):
        self.B = np.asarray(B, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.n, self.p = self.B.shape
        Q, self.R = np.linalg.qr(self.B)
        self.f = Q.T @ self.y
        self.rss0 = max(float(self.y @ self.y - self.f @ self.f), 0.0)

    def solve(self, weights: np.ndarray) -> _Solution:
        A = np.vstack([self.R, np.diag(np.sqrt(weights))])
        Qa, Ra = np.linalg.qr(A)
        diag = np.abs(np.diag(Ra))
        if diag.min() <= 1e-13 * diag.max():
            raise NumericalFailure("penalized system is singular")
        alpha = sla.solve_triangular(Ra, Qa[: self.p].T @ self.f)
        r = self.f - self.R @ alpha
        rss = self.rss0 + float(r @ r)
        # trace of the influence matrix B (B'B + S)^-1 B'
        edf = float(np.sum(Qa[: self.p] ** 2))
        return _Solution(alpha, rss, float(alpha @ (weights * alpha)), edf,
                         2.0 * float(np.sum(np.log(diag))))


def reml_criterion(rss: float, penalty: float, logdet_xtx_s: float,
                   logdet_s_plus: float, n: int, n_unpenalized: int) -> float:
    """Negative restricted log-likelihood with the scale profiled out."""
    dof = n - n_unpenalized
    phi = (rss + penalty) / dof
    return 0.5 * (dof * (1.0 + math.log(2.0 * math.pi * phi)) + logdet_xtx_s - logdet_s_plus)


def line_search(objective, lo: float = LOG10_BOUNDS[0], hi: float = LOG10_BOUNDS[1],
                xtol: float = XTOL, n_grid: int = 21) -> tuple[float, float]:
    """Minimize a function of one log10 smoothing parameter on ``[lo, hi]``.

    A coarse grid locates the basin; bounded Brent (golden section with
    parabolic steps) refines it to ``xtol``.
    """
    grid = np.linspace(lo, hi, n_grid)
    values = [objective(g) for g in grid]
    i = int(np.argmin(values))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, n_grid - 1)]
    best_x, best_f = float(grid[i]), float(values[i])
    res = minimize_scalar(objective, bounds=(a, b), method="bounded",
                          options={"xatol": xtol})
    if res.fun < best_f:
        best_x, best_f = float(res.x), float(res.fun)
    return best_x, best_f


@dataclass(frozen=True)
class SmoothFit:
    basis: SmoothBasis
    lam: float
    alpha: np.ndarray
    fitted: np.ndarray
    edf: float
    reml_score: float
    rss: float
    at_boundary: bool = False

    @property
    def covariate(self) -> str:
        return self.basis.covariate

    @property
    def log10_lambda(self) -> float:
        return math.log10(self.lam) if self.lam > 0 else -math.inf

    def __call__(self, x) -> np.ndarray:
        return self.basis.evaluate(x) @ self.alpha

    def to_dict(self) -> dict:
        return {
            "covariate": self.covariate,
            "k": self.basis.k,
            "lambda": self.lam,
            "edf": self.edf,
            "reml_score": self.reml_score,
            "knots": self.basis.knots.tolist(),
            "alpha": self.alpha.tolist(),
            "basis": self.basis.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SmoothFit":
        basis = SmoothBasis.from_dict(d["basis"])
        return cls(basis, float(d["lambda"]), np.array(d["alpha"]), np.empty(0),
                   float(d["edf"]), float(d["reml_score"]), float("nan"))


def _reml_for(problem: PenalizedProblem, basis: SmoothBasis, lam: float, sol: _Solution) -> float:
    if lam <= 0:
        return float("nan")
    logdet_s = float(np.sum(np.log(lam * basis.penalty_diag)))
    return reml_criterion(sol.rss, sol.penalty, sol.logdet, logdet_s, problem.n, NULL_DIM)


def _finish(problem: PenalizedProblem, basis: SmoothBasis, lam: float,
            at_boundary: bool = False) -> SmoothFit:
    sol = problem.solve(lam * basis.penalty_weights)
    fitted = problem.B @ sol.alpha
    resid = problem.y - fitted
    return SmoothFit(basis, lam, sol.alpha, fitted, sol.edf,
                     _reml_for(problem, basis, lam, sol), float(resid @ resid), at_boundary)


def fit_fixed_lambda(basis: SmoothBasis, y, lam: float) -> SmoothFit:
    """Minimize ``||y - B alpha||^2 + lam * alpha' S alpha`` by augmented QR."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    y = np.asarray(y, dtype=float)
    if len(y) != basis.basis_matrix.shape[0]:
        raise ValueError("response length does not match the basis")
    return _finish(PenalizedProblem(basis.basis_matrix, y), basis, float(lam))


def reml_profile(basis: SmoothBasis, y):
    """Return ``f(log10_lambda) -> REML score`` for one smooth."""
    problem = PenalizedProblem(basis.basis_matrix, np.asarray(y, dtype=float))

    def score(rho: float) -> float:
        lam = 10.0 ** rho
        return _reml_for(problem, basis, lam, problem.solve(lam * basis.penalty_weights))

    return score


def select_lambda(basis: SmoothBasis, y) -> SmoothFit:
    """Fit with lambda chosen by REML over ``log10(lambda)`` in [-8, 12]."""
    y = np.asarray(y, dtype=float)
    problem = PenalizedProblem(basis.basis_matrix, y)

    def score(rho):
        lam = 10.0 ** rho
        return _reml_for(problem, basis, lam, problem.solve(lam * basis.penalty_weights))

    rho, _ = line_search(score)
    lo, hi = LOG10_BOUNDS
    at_bound = rho - lo < 2 * XTOL or hi - rho < 2 * XTOL
    if at_bound:
        warnings.warn(f"REML optimum for {basis.covariate!r} at log10(lambda)={rho:.3f} "
                      "is on the search boundary", BoundaryWarning, stacklevel=2)
    return _finish(problem, basis, 10.0 ** rho, at_bound)


# ------------------------------------------------------------------ #
# Basis-dimension check
# ------------------------------------------------------------------ #


@dataclass(frozen=True)
class RankCheckStep:
    k: int
    residual_k: int
    residual_edf: float
    f_statistic: float
    significant: bool


@dataclass(frozen=True)
class RankCheckReport:
    """Outcome of the residual-spline basis check.

    ``sufficient`` is True when a rank ``2k`` spline fitted to the residuals
    of the final fit found no significant structure.  The residual spline
    counts as significant when its edf exceeds the null-space dimension by
    more than 0.5 and ``F > 4`` (the square of the ``|t| > 2`` rule), with
    ``F = ((rss0 - rss1) / (edf - 2)) / (rss1 / (n - edf))``.
    """

    sufficient: bool
    k_initial: int
    k_final: int
    recommended_k: int
    steps: list[RankCheckStep]
    fit: SmoothFit
    cannot_double: bool = False

    def to_dict(self) -> dict:
        return {
            "sufficient": self.sufficient,
            "k_initial": self.k_initial,
            "k_final": self.k_final,
            "recommended_k": self.recommended_k,
            "cannot_double": self.cannot_double,
            "test": "F > 4 and edf - 2 > 0.5 for a rank-2k spline on the residuals",
            "steps": [vars(s) for s in self.steps],
        }


def _residual_step(x, resid, k) -> RankCheckStep:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BoundaryWarning)
        rfit = select_lambda(tps_basis(x, 2 * k), resid)
    n = len(resid)
    rss0 = float(resid @ resid)
    extra = rfit.edf - NULL_DIM
    if extra > 1e-8:
        f = ((rss0 - rfit.rss) / extra) / (rfit.rss / (n - rfit.edf))
    else:
        f = 0.0
    return RankCheckStep(k, 2 * k, rfit.edf, f, bool(extra > 0.5 and f > 4.0))


def rank_check(basis: SmoothBasis, fit: SmoothFit, y, x=None, max_doublings: int = 4) -> RankCheckReport:
    """Check whether rank ``k`` suffices; double it (up to 4 times) if not.

    The covariate values are recovered from the linear basis column unless
    ``x`` is given.
    """
    y = np.asarray(y, dtype=float)
    if x is None:
        x = basis.shift + basis.scale * basis.basis_matrix[:, -1]
    x = np.asarray(x, dtype=float)
    n_distinct = len(np.unique(x))
    k = basis.k
    if 2 * k > len(y) or 2 * k > n_distinct:
        raise CannotDouble(f"2k={2 * k} exceeds the available data")

    steps = []
    current = fit
    for doubling in range(max_doublings + 1):
        step = _residual_step(x, y - current.fitted, k)
        steps.append(step)
        if not step.significant:
            return RankCheckReport(True, basis.k, k, k, steps, current)
        if doubling == max_doublings:
            break
        if 4 * k > len(y) or 4 * k > n_distinct:
            # the refit at 2k could not itself be checked
            return RankCheckReport(False, basis.k, k, 2 * k, steps, current, cannot_double=True)
        k *= 2
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BoundaryWarning)
            current = select_lambda(tps_basis(x, k, basis.covariate), y)
    return RankCheckReport(False, basis.k, k, 2 * k, steps, current)
