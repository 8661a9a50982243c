"""Covariance-update coordinate descent for the lasso path (numba kernels)."""

import numpy as np
from numba import njit


@njit(cache=True)
def _sweep(G, c, b, g, lam, active_only):
    max_delta = 0.0
    p = b.shape[0]
    for j in range(p):
        gjj = G[j, j]
        if gjj <= 0.0:
            continue
        old = b[j]
        if active_only and old == 0.0:
            continue
        rho = c[j] - g[j] + gjj * old
        if rho > lam:
            new = (rho - lam) / gjj
        elif rho < -lam:
            new = (rho + lam) / gjj
        else:
            new = 0.0
        if new != old:
            delta = new - old
            for k in range(p):
                g[k] += delta * G[k, j]
            b[j] = new
            step = gjj * delta * delta
            if step > max_delta:
                max_delta = step
    return max_delta


@njit(cache=True)
def lasso_path_gram(G, c, var_y, lambdas, thresh, max_sweeps, fdev, devmax):
    """Solve min_b 1/2 b'Gb - c'b + lam*|b|_1 along ``lambdas`` with warm starts.

    ``G = X'X/n`` and ``c = X'y/n`` for centered data (``var_y = y'y/n``), so
    each row minimizes ``1/(2n)||y - Xb||^2 + lam*|b|_1``. Sweeps stop once
    every coordinate step satisfies ``G_jj * delta^2 < thresh * var_y``.
    The path stops early when the fraction of variance explained exceeds
    ``devmax`` or improves by less than ``fdev``; later rows repeat the
    last solution.

    Returns (coefficients of shape (L, p), sweeps used per lambda).
    """
    p = c.shape[0]
    L = lambdas.shape[0]
    B = np.zeros((L, p))
    sweeps = np.zeros(L, dtype=np.int64)
    b = np.zeros(p)
    g = np.zeros(p)
    tol = thresh * var_y
    prev_r2 = 0.0
    stopped = -1
    for l in range(L):
        if stopped >= 0:
            B[l, :] = b
            continue
        lam = lambdas[l]
        used = 0
        while used < max_sweeps:
            delta = _sweep(G, c, b, g, lam, False)
            used += 1
            if delta < tol:
                break
            while used < max_sweeps:
                d_act = _sweep(G, c, b, g, lam, True)
                used += 1
                if d_act < tol:
                    break
        B[l, :] = b
        sweeps[l] = used
        if var_y > 0.0:
            rss = var_y - 2.0 * np.dot(c, b) + np.dot(b, g)
            r2 = 1.0 - rss / var_y
            if l > 0 and (r2 > devmax or r2 - prev_r2 < fdev * r2):
                stopped = l
            prev_r2 = r2
    return B, sweeps
