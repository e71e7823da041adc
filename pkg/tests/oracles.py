"""Independent reference computations used by the tests.

Nothing here imports the package; each oracle is a direct dense solve.
"""

import mpmath
import numpy as np


def _reinsch(u, y, lam, dense, solve):
    """Cubic smoothing spline at the data points, minimizing
    ``||y - g||^2 + lam * int g''^2`` (Reinsch band-matrix form).

    Uses ``g = y - lam Q gamma`` with ``(R + lam Q'Q) gamma = Q'y``, which
    stays accurate for small ``lam``.
    """
    order = np.argsort(u)
    u, ys = [u[i] for i in order], [y[i] for i in order]
    n = len(u)
    h = [u[i + 1] - u[i] for i in range(n - 1)]
    Q, R = dense(n, n - 2), dense(n - 2, n - 2)
    for j in range(1, n - 1):
        Q[j - 1, j - 1] = 1 / h[j - 1]
        Q[j, j - 1] = -1 / h[j - 1] - 1 / h[j]
        Q[j + 1, j - 1] = 1 / h[j]
        R[j - 1, j - 1] = (h[j - 1] + h[j]) / 3
        if j < n - 2:
            R[j - 1, j] = R[j, j - 1] = h[j] / 6
    g = solve(Q, R, ys, lam)
    out = np.empty(n)
    out[order] = [float(v) for v in g]
    return out


def _solve_float(Q, R, ys, lam):
    ys = np.asarray(ys)
    return ys - lam * Q @ np.linalg.solve(R + lam * Q.T @ Q, Q.T @ ys)


def natural_spline_smoother(u, y, lam):
    """Reinsch smoother in float64; loses digits when knots nearly coincide."""
    u, y = np.asarray(u, float), np.asarray(y, float)
    return _reinsch(u, y, lam, lambda r, c: np.zeros((r, c)), _solve_float)


def natural_spline_smoother_exact(u, y, lam, dps=50):
    """The same smoother carried out in ``dps``-digit arithmetic.

    Float inputs convert to mpf exactly, so this is a reference solution
    for the float data as given, immune to near-tied knots.
    """
    def solve(Q, R, ys, lam):
        ys = mpmath.matrix(ys)
        gamma = mpmath.lu_solve(R + lam * Q.T * Q, Q.T * ys)
        return ys - lam * Q * gamma

    with mpmath.workdps(dps):
        u = [mpmath.mpf(float(v)) for v in u]
        y = [mpmath.mpf(float(v)) for v in y]
        return _reinsch(u, y, mpmath.mpf(lam), mpmath.zeros, solve)


def generalized_ridge(B, S, y, lam):
    """``B (B'B + lam S)^-1 B'y`` by a plain dense solve."""
    return B @ np.linalg.solve(B.T @ B + lam * S, B.T @ y)


def ols_line(x, y):
    X = np.column_stack([np.ones_like(x), x])
    return X @ np.linalg.lstsq(X, y, rcond=None)[0]


def reml_direct(B, S, y, lam, null_dim=2):
    """Restricted likelihood score (to be minimized), recomputed from scratch."""
    n = len(y)
    A = B.T @ B + lam * S
    beta = np.linalg.solve(A, B.T @ y)
    resid = y - B @ beta
    rss, pen = resid @ resid, lam * beta @ S @ beta
    dof = n - null_dim
    phi = (rss + pen) / dof
    ev = np.linalg.eigvalsh(lam * S)
    logdet_s = np.sum(np.log(ev[ev > 1e-12 * ev.max()]))
    logdet_a = np.linalg.slogdet(A)[1]
    return 0.5 * (dof * (1 + np.log(2 * np.pi * phi)) + logdet_a - logdet_s)


def sequential_ss(y, blocks):
    """Sequential sums of squares for a list of column blocks after an intercept."""
    n = len(y)
    X = np.ones((n, 1))
    prev = np.sum((y - y.mean()) ** 2)
    out = []
    for block in blocks:
        X = np.column_stack([X, block])
        r = y - X @ np.linalg.lstsq(X, y, rcond=None)[0]
        out.append(prev - r @ r)
        prev = r @ r
    return out
