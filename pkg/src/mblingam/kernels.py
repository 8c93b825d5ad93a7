"""Hot numeric kernels: resample-gather, whitening and symmetric FastICA.

Every kernel exists twice, a numba-compiled loop version (``*_nb``) and a
vectorised numpy version (``*_np``). The public names are bound to one of the
two at import time according to :data:`mblingam._accel.USE_NUMBA`. Both paths
consume the same random initial matrices, so they agree up to floating point
summation order.
"""
import math

import numpy as np

from mblingam._accel import USE_NUMBA, njit

TANH = 0
CUBE = 1

STATUS_OK = 0
STATUS_RANK_DEFICIENT = 1

# eigenvalues below this fraction of the largest one count as rank deficiency
EIG_REL_TOL = 1e-12


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------


@njit(fastmath=True)
def _gather_center_nb(values, idx):
    m = values.shape[0]
    n = idx.shape[0]
    x = np.empty((m, n))
    for i in range(m):
        src = values[i]
        row = x[i]
        tot = 0.0
        for j in range(n):
            v = src[idx[j]]
            row[j] = v
            tot += v
        mu = tot / n
        for j in range(n):
            row[j] -= mu
    return x


@njit(fastmath=True)
def _whiten_nb(x):
    m, n = x.shape
    cov = np.empty((m, m))
    for a in range(m):
        xa = x[a]
        for b in range(a + 1):
            xb = x[b]
            acc = 0.0
            for j in range(n):
                acc += xa[j] * xb[j]
            cov[a, b] = acc / n
            cov[b, a] = cov[a, b]
    ev, vec = np.linalg.eigh(cov)
    top = ev.max()
    if not top > 0.0 or ev.min() < EIG_REL_TOL * top:
        return STATUS_RANK_DEFICIENT, np.zeros((m, m)), np.zeros((m, n))
    k = np.empty((m, m))
    for a in range(m):
        s = 1.0 / np.sqrt(ev[a])
        for b in range(m):
            k[a, b] = s * vec[b, a]
    z = np.zeros((m, n))
    for a in range(m):
        za = z[a]
        for b in range(m):
            kab = k[a, b]
            xb = x[b]
            for j in range(n):
                za[j] += kab * xb[j]
    return STATUS_OK, k, z


@njit
def _sym_decorrelate_nb(w):
    s, u = np.linalg.eigh(w @ w.T)
    m = w.shape[0]
    d = np.empty((m, m))
    for a in range(m):
        for b in range(m):
            acc = 0.0
            for c in range(m):
                acc += u[a, c] * u[b, c] / np.sqrt(s[c])
            d[a, b] = acc
    return d @ w


# Elementwise helpers written as straight-line arithmetic so LLVM can
# vectorise the loops that call them; libm exp/tanh/log1p calls cannot be
# vectorised without SVML and dominate the runtime otherwise.

# beyond this, exp(-a) < 5e-18 and tanh saturates to 1.0 in double precision
EXP_ARG_CAP = 40.0


@njit(fastmath=True, inline="always")
def _expneg(a):
    # exp(-a) for 0 <= a: Taylor polynomial on a/64 followed by six squarings;
    # relative error below 1e-13 on [0, EXP_ARG_CAP]
    x = -min(a, EXP_ARG_CAP) * 0.015625
    p = 1.0 / 87178291200.0
    p = p * x + 1.0 / 6227020800.0
    p = p * x + 1.0 / 479001600.0
    p = p * x + 1.0 / 39916800.0
    p = p * x + 1.0 / 3628800.0
    p = p * x + 1.0 / 362880.0
    p = p * x + 1.0 / 40320.0
    p = p * x + 1.0 / 5040.0
    p = p * x + 1.0 / 720.0
    p = p * x + 1.0 / 120.0
    p = p * x + 1.0 / 24.0
    p = p * x + 1.0 / 6.0
    p = p * x + 0.5
    p = p * x + 1.0
    p = p * x + 1.0
    p = p * p
    p = p * p
    p = p * p
    p = p * p
    p = p * p
    p = p * p
    return p


@njit(fastmath=True, inline="always")
def _log1p_unit(e):
    # log(1 + e) for 0 <= e <= 1 via 2 atanh(u), u = e / (2 + e) <= 1/3
    u = e / (2.0 + e)
    v = u * u
    p = 1.0 / 37.0
    p = p * v + 1.0 / 35.0
    p = p * v + 1.0 / 33.0
    p = p * v + 1.0 / 31.0
    p = p * v + 1.0 / 29.0
    p = p * v + 1.0 / 27.0
    p = p * v + 1.0 / 25.0
    p = p * v + 1.0 / 23.0
    p = p * v + 1.0 / 21.0
    p = p * v + 1.0 / 19.0
    p = p * v + 1.0 / 17.0
    p = p * v + 1.0 / 15.0
    p = p * v + 1.0 / 13.0
    p = p * v + 1.0 / 11.0
    p = p * v + 1.0 / 9.0
    p = p * v + 1.0 / 7.0
    p = p * v + 1.0 / 5.0
    p = p * v + 1.0 / 3.0
    p = p * v + 1.0
    return 2.0 * u * p


@njit(fastmath=True)
def expneg_nb(a):
    """Vectorised ``exp(-a)`` used by the tanh kernels (exposed for tests)."""
    out = np.empty_like(a)
    for j in range(a.size):
        out[j] = _expneg(a[j])
    return out


@njit(fastmath=True)
def log1p_unit_nb(e):
    """Vectorised ``log1p`` on [0, 1] (exposed for tests)."""
    out = np.empty_like(e)
    for j in range(e.size):
        out[j] = _log1p_unit(e[j])
    return out


@njit(fastmath=True)
def _project_row(w, i, z, y):
    m, n = z.shape
    y[:] = 0.0
    for k in range(m):
        wk = w[i, k]
        zk = z[k]
        for j in range(n):
            y[j] += wk * zk[j]


@njit(fastmath=True)
def _ica_update_nb(w, z, nonlin):
    m, n = z.shape
    out = np.empty((m, m))
    y = np.empty(n)
    g = np.empty(n)
    for i in range(m):
        _project_row(w, i, z, y)
        gp = 0.0
        if nonlin == TANH:
            for j in range(n):
                g[j] = _expneg(2.0 * abs(y[j]))
            for j in range(n):
                e = g[j]
                r = 1.0 / (1.0 + e)
                gp += 4.0 * e * r * r
                g[j] = math.copysign((1.0 - e) * r, y[j])
        else:
            for j in range(n):
                t = y[j]
                g[j] = t * t * t
                gp += 3.0 * t * t
        for k in range(m):
            zk = z[k]
            acc = 0.0
            for j in range(n):
                acc += g[j] * zk[j]
            out[i, k] = acc / n - gp / n * w[i, k]
    return out


@njit(fastmath=True)
def _objective_nb(w, z, nonlin, gauss_ref):
    m, n = z.shape
    y = np.empty(n)
    g = np.empty(n)
    log2 = math.log(2.0)
    obj = 0.0
    for i in range(m):
        _project_row(w, i, z, y)
        tot = 0.0
        if nonlin == TANH:
            for j in range(n):
                g[j] = _expneg(2.0 * abs(y[j]))
            for j in range(n):
                tot += abs(y[j]) + _log1p_unit(g[j])
            tot -= n * log2
        else:
            for j in range(n):
                t = y[j]
                tot += 0.25 * t * t * t * t
        d = tot / n - gauss_ref
        obj += d * d
    return obj


@njit
def _fastica_restarts_nb(z, inits, max_iter, tol, nonlin, gauss_ref):
    r, m, _ = inits.shape
    best_w = np.eye(m)
    best_obj = -1.0
    best_conv = False
    best_r = 0
    for rr in range(r):
        w = _sym_decorrelate_nb(inits[rr].copy())
        conv = False
        for _ in range(max_iter):
            wn = _sym_decorrelate_nb(_ica_update_nb(w, z, nonlin))
            lim = 0.0
            for i in range(m):
                dot = 0.0
                for k in range(m):
                    dot += wn[i, k] * w[i, k]
                lim = max(lim, abs(abs(dot) - 1.0))
            w = wn
            if lim < tol:
                conv = True
                break
        obj = _objective_nb(w, z, nonlin, gauss_ref)
        if obj > best_obj:
            best_obj = obj
            best_w = w
            best_conv = conv
            best_r = rr
    return best_w, best_obj, best_conv, best_r


@njit
def fit_unmixing_nb(values, idx, inits, max_iter, tol, nonlin, gauss_ref):
    x = _gather_center_nb(values, idx)
    status, k, z = _whiten_nb(x)
    m = values.shape[0]
    if status != STATUS_OK:
        return status, np.zeros((m, m)), 0.0, False, -1
    w, obj, conv, r = _fastica_restarts_nb(z, inits, max_iter, tol, nonlin, gauss_ref)
    return status, w @ k, obj, conv, r


# --------------------------------------------------------------------------
# numpy path
# --------------------------------------------------------------------------


def _whiten_np(x):
    n = x.shape[1]
    cov = x @ x.T / n
    ev, vec = np.linalg.eigh(cov)
    top = ev.max()
    if not top > 0.0 or ev.min() < EIG_REL_TOL * top:
        return STATUS_RANK_DEFICIENT, None, None
    k = vec.T / np.sqrt(ev)[:, None]
    return STATUS_OK, k, k @ x


def _sym_decorrelate_np(w):
    s, u = np.linalg.eigh(w @ w.T)
    return (u / np.sqrt(s)) @ u.T @ w


def _ica_update_np(w, z, nonlin):
    n = z.shape[1]
    y = w @ z
    if nonlin == TANH:
        g = np.tanh(y)
        gp = (1.0 - g * g).mean(axis=1)
    else:
        g = y**3
        gp = (3.0 * y * y).mean(axis=1)
    return g @ z.T / n - gp[:, None] * w


def _objective_np(w, z, nonlin, gauss_ref):
    y = w @ z
    if nonlin == TANH:
        a = np.abs(y)
        gy = a + np.log1p(np.exp(-2.0 * a)) - np.log(2.0)
    else:
        gy = 0.25 * y**4
    return float(((gy.mean(axis=1) - gauss_ref) ** 2).sum())


def fit_unmixing_np(values, idx, inits, max_iter, tol, nonlin, gauss_ref):
    x = values[:, idx]
    x = x - x.mean(axis=1, keepdims=True)
    status, k, z = _whiten_np(x)
    m = values.shape[0]
    if status != STATUS_OK:
        return status, np.zeros((m, m)), 0.0, False, -1

    best = (np.eye(m), -1.0, False, 0)
    for rr in range(inits.shape[0]):
        w = _sym_decorrelate_np(inits[rr])
        conv = False
        for _ in range(max_iter):
            wn = _sym_decorrelate_np(_ica_update_np(w, z, nonlin))
            lim = np.max(np.abs(np.abs(np.sum(wn * w, axis=1)) - 1.0))
            w = wn
            if lim < tol:
                conv = True
                break
        obj = _objective_np(w, z, nonlin, gauss_ref)
        if obj > best[1]:
            best = (w, obj, conv, rr)
    w, obj, conv, rr = best
    return status, w @ k, obj, conv, rr


# (status, unmixing, objective, converged, restart_index); unmixing maps the
# centred columns values[:, idx] to the best restart's components
fit_unmixing = fit_unmixing_nb if USE_NUMBA else fit_unmixing_np
