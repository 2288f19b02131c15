"""Independent float64 references used by several test files."""
import numpy as np


def clip_surrogate(x, alpha, beta, alpha0, beta0, signed):
    """alpha * (Clip(u) + stopgrad(code(u0) - Clip(u0))), u = (x - beta)/alpha.

    The straight-through surrogate of the elastic binarizer: its forward value
    equals the rounded output at (alpha0, beta0) while its derivatives are those
    of the clip.  The signed binarizer is alpha * sign(x - beta) with the clip
    window on the shift only: alpha * code0 + alpha0 * (Clip(v) - Clip(v0)),
    v = (x - beta)/alpha0, so d/dalpha is the sign itself.
    """
    u = (x - beta) / alpha
    u0 = (x - beta0) / alpha0
    if signed:
        code0 = np.where(x - beta0 >= 0, 1.0, -1.0)
        v = (x - beta) / alpha0
        return alpha * code0 + alpha0 * (np.clip(v, -1, 1) - np.clip(u0, -1, 1))
    code0 = np.floor(np.clip(u0, 0, 1) + 0.5)
    return alpha * (np.clip(u, 0, 1) + (code0 - np.clip(u0, 0, 1)))


def fd_alpha_beta(x, alpha, beta, signed, h=1e-6):
    """Central differences of the surrogate in alpha and in beta, elementwise."""
    da = (clip_surrogate(x, alpha + h, beta, alpha, beta, signed)
          - clip_surrogate(x, alpha - h, beta, alpha, beta, signed)) / (2 * h)
    db = (clip_surrogate(x, alpha, beta + h, alpha, beta, signed)
          - clip_surrogate(x, alpha, beta - h, alpha, beta, signed)) / (2 * h)
    return da, db


def literal_piecewise_grads(x, alpha, beta):
    """Four-case d/dalpha and two-case d/dbeta of the unsigned elastic binarizer, branch by branch."""
    da, db = [], []
    for v in np.ravel(x):
        if v < beta:
            a = 0.0
        elif v < alpha / 2 + beta:
            a = (beta - v) / alpha
        elif v < alpha + beta:
            a = 1 - (v - beta) / alpha
        else:
            a = 1.0
        da.append(a)
        db.append(-1.0 if beta <= v < alpha + beta else 0.0)
    return np.array(da), np.array(db)


def boundary_distance(x, alpha, beta, signed):
    if signed:
        edges = [beta - alpha, beta, beta + alpha]
    else:
        edges = [beta, beta + alpha / 2, beta + alpha]
    return min(abs(x - e) for e in edges)


def grid_argmin_J(x, codes, step=1e-3):
    """Grid search of J(a) = ||x - a*codes||^2 over a in (0, 3 max|x|]."""
    hi = 3 * max(np.abs(x).max(), 1e-3)
    grid = np.arange(step, hi + step, step)
    r = x[None, :] - grid[:, None] * codes[None, :]
    J = (r * r).sum(axis=1)
    k = int(J.argmin())
    return grid[k], J[k]
