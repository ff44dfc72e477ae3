"""Hot numeric loops, compiled with numba when available.

Every kernel has a pure-numpy twin. Set ``METAVI_DISABLE_NUMBA=1`` to force
the numpy path (useful for debugging and for environments without numba).
Both paths are importable explicitly as ``<name>_numba`` / ``<name>_numpy``
so the test-suite and the benchmark can compare them in one process.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is an optional extra
    numba = None

HAVE_NUMBA = numba is not None
USING_NUMBA = HAVE_NUMBA and os.environ.get("METAVI_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


def _njit(fn):
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# -- segment sums -----------------------------------------------------------


def _segment_sum_loop(values, seg, n_seg):
    # Neumaier-compensated accumulation, one running (sum, carry) per cell.
    n, d = values.shape
    out = np.zeros((n_seg, d))
    carry = np.zeros((n_seg, d))
    for i in range(n):
        s = seg[i]
        for j in range(d):
            v = values[i, j]
            t = out[s, j] + v
            if abs(out[s, j]) >= abs(v):
                carry[s, j] += (out[s, j] - t) + v
            else:
                carry[s, j] += (v - t) + out[s, j]
            out[s, j] = t
    return out + carry


segment_sum_numba = _njit(_segment_sum_loop)


def segment_sum_numpy(values, seg, n_seg):
    values = np.asarray(values, dtype=np.float64)
    out = np.zeros((n_seg, values.shape[1]))
    order = np.argsort(seg, kind="stable")
    seg_sorted = seg[order]
    bounds = np.searchsorted(seg_sorted, np.arange(n_seg + 1))
    for s in range(n_seg):
        lo, hi = bounds[s], bounds[s + 1]
        if hi > lo:
            # contiguous fast axis -> numpy's pairwise summation
            block = np.ascontiguousarray(values[order[lo:hi]].T)
            out[s] = block.sum(axis=1)
    return out


def segment_sum(values: np.ndarray, seg: np.ndarray, n_seg: int) -> np.ndarray:
    """Sum rows of ``values`` into ``n_seg`` groups given by ``seg``."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    seg = np.ascontiguousarray(seg, dtype=np.int64)
    if USING_NUMBA:
        return segment_sum_numba(values, seg, int(n_seg))
    return segment_sum_numpy(values, seg, int(n_seg))


# -- incline ODE oracle -----------------------------------------------------


def _rk4_descent_loop(length, accel, dt):
    n = length.shape[0]
    out = np.empty(n)
    for k in range(n):
        a = accel[k]
        x = 0.0
        v = 0.0
        t = 0.0
        while True:
            # x' = v, v' = a
            k1x = v
            k1v = a
            k2x = v + 0.5 * dt * k1v
            k2v = a
            k3x = v + 0.5 * dt * k2v
            k3v = a
            k4x = v + dt * k3v
            k4v = a
            xn = x + dt / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
            vn = v + dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
            if xn >= length[k]:
                out[k] = t + dt * (length[k] - x) / (xn - x)
                break
            x = xn
            v = vn
            t += dt
    return out


rk4_descent_numba = _njit(_rk4_descent_loop)


def rk4_descent_numpy(length, accel, dt):
    length = np.asarray(length, dtype=np.float64)
    a = np.asarray(accel, dtype=np.float64)
    x = np.zeros_like(length)
    v = np.zeros_like(length)
    t = 0.0
    out = np.full(length.shape, np.nan)
    active = np.ones(length.shape, dtype=bool)
    while active.any():
        k1x, k1v = v, a
        k2x = v + 0.5 * dt * k1v
        k3x = v + 0.5 * dt * a
        k4x = v + dt * a
        xn = x + dt / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
        vn = v + dt * a
        crossed = active & (xn >= length)
        out[crossed] = t + dt * (length[crossed] - x[crossed]) / (xn[crossed] - x[crossed])
        active &= ~crossed
        x, v = xn, vn
        t += dt
    return out


def rk4_descent_time(length, accel, dt=1e-4):
    """Integrate x'' = accel from rest with RK4 until x reaches ``length``.

    The crossing time inside the final step is linearly interpolated.
    """
    length = np.ascontiguousarray(length, dtype=np.float64).ravel()
    accel = np.ascontiguousarray(accel, dtype=np.float64).ravel()
    if np.any(accel <= 0):
        raise ValueError("acceleration must be positive for the box to slide")
    if USING_NUMBA:
        return rk4_descent_numba(length, accel, float(dt))
    return rk4_descent_numpy(length, accel, float(dt))


# -- logistic regression fit -------------------------------------------------


def _logreg_fit_loop(X, y, lam, lr, max_iter, tol):
    n, d = X.shape
    w = np.zeros(d)
    b = 0.0
    gw = np.zeros(d)
    it = 0
    for it in range(max_iter):
        gw[:] = 0.0
        gb = 0.0
        for i in range(n):
            s = b
            for j in range(d):
                s += X[i, j] * w[j]
            if s >= 0:
                p = 1.0 / (1.0 + np.exp(-s))
            else:
                e = np.exp(s)
                p = e / (1.0 + e)
            r = p - y[i]
            gb += r
            for j in range(d):
                gw[j] += r * X[i, j]
        norm2 = (gb / n) ** 2
        for j in range(d):
            gw[j] = gw[j] / n + lam * w[j]
            norm2 += gw[j] * gw[j]
        if np.sqrt(norm2) < tol:
            break
        for j in range(d):
            w[j] -= lr * gw[j]
        b -= lr * gb / n
    return w, b, it + 1


logreg_fit_numba = _njit(_logreg_fit_loop)


def _sigmoid(s):
    e = np.exp(-np.abs(s))
    return np.where(s >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def logreg_fit_numpy(X, y, lam, lr, max_iter, tol):
    n, d = X.shape
    w = np.zeros(d)
    b = 0.0
    it = 0
    for it in range(max_iter):
        r = _sigmoid(X @ w + b) - y
        gw = X.T @ r / n + lam * w
        gb = r.mean()
        if np.sqrt(gw @ gw + gb * gb) < tol:
            break
        w -= lr * gw
        b -= lr * gb
    return w, b, it + 1


def logreg_fit(X, y, lam=1e-4, lr=0.5, max_iter=5000, tol=1e-6):
    """Full-batch gradient descent on L2-penalised mean logistic loss.

    Returns ``(w, b, iterations)``.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if USING_NUMBA:
        return logreg_fit_numba(X, y, float(lam), float(lr), int(max_iter), float(tol))
    return logreg_fit_numpy(X, y, float(lam), float(lr), int(max_iter), float(tol))
