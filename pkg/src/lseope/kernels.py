"""Row-wise numerical kernels with numba and numpy implementations.

Each kernel exists twice: a ``*_numba`` version compiled with ``@njit`` and a
``*_numpy`` version. The public name dispatches on the backend chosen in
:mod:`lseope._accel`. Both versions are importable so tests can compare them.

Separable estimator codes
-------------------------
0 IPS, 1 IPS_TR, 2 PM, 3 ES, 4 IX, 5 OS, 6 LS, 7 LS_LIN, 8 SNIPS.
"""
import numpy as np

from ._accel import USE_NUMBA, njit

IPS, IPS_TR, PM, ES, IX, OS, LS, LS_LIN, SNIPS = range(9)

KIND_CODES = {
    "IPS": IPS,
    "IPS_TR": IPS_TR,
    "PM": PM,
    "ES": ES,
    "IX": IX,
    "OS": OS,
    "LS": LS,
    "LS_LIN": LS_LIN,
    "SNIPS": SNIPS,
}


# --------------------------------------------------------------------------
# log-sum-exp estimator, one value per row
# --------------------------------------------------------------------------

def lse_rows_numpy(z, magnitude):
    """``(1/lam) log mean exp(lam z)`` per row with ``lam = -magnitude``.

    Shifted by the row minimum so every exponent is non-positive, and
    accumulated as ``log1p(mean(expm1(.)))`` to stay accurate as
    ``magnitude -> 0``. Constant rows come back exactly.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    lam = -float(magnitude)
    zmin = z.min(axis=1)
    s = np.expm1(lam * (z - zmin[:, None])).mean(axis=1)
    return zmin + np.log1p(s) / lam


@njit(nogil=True, cache=True)
def lse_rows_numba(z, magnitude):
    lam = -magnitude
    m, n = z.shape
    out = np.empty(m)
    for i in range(m):
        zmin = np.inf
        for j in range(n):
            if z[i, j] < zmin:
                zmin = z[i, j]
        s = 0.0
        for j in range(n):
            s += np.expm1(lam * (z[i, j] - zmin))
        out[i] = zmin + np.log1p(s / n) / lam
    return out


def lse_rows(z, magnitude):
    z = np.ascontiguousarray(np.atleast_2d(z), dtype=np.float64)
    if USE_NUMBA:
        return lse_rows_numba(z, float(magnitude))
    return lse_rows_numpy(z, magnitude)


# --------------------------------------------------------------------------
# separable estimators
# --------------------------------------------------------------------------

def separable_terms(code, w, r, pt, p0, param, extra=0.0):
    """Per-sample terms ``g(r, w)`` of a separable estimator (numpy).

    SNIPS is not separable; for it the terms are ``w r`` and the caller
    normalises by the weight sum.
    """
    w = np.asarray(w, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if code == IPS or code == SNIPS:
        return w * r
    if code == IPS_TR:
        return r * np.minimum(w, param)
    if code == PM:
        s = extra
        lh = param
        if lh == 0.0:
            return w * r
        if s == 0.0:
            return r * w ** (1.0 - lh)
        return r * ((1.0 - lh) * w ** s + lh) ** (1.0 / s)
    if code == ES:
        return r * (np.asarray(pt) / np.asarray(p0) ** param)
    if code == IX:
        return r * np.asarray(pt) / (np.asarray(p0) + param)
    if code == OS:
        return r * param * w / (w * w + param)
    if code == LS:
        return np.log1p(param * w * r) / param
    if code == LS_LIN:
        return np.asarray(pt) * np.log1p(param * r / np.asarray(p0)) / param
    raise ValueError(f"unknown estimator code {code}")


def separable_rows_numpy(code, w, r, pt, p0, param, extra=0.0):
    w = np.atleast_2d(w)
    r = np.atleast_2d(r)
    pt = np.atleast_2d(pt)
    p0 = np.atleast_2d(p0)
    terms = separable_terms(code, w, r, pt, p0, param, extra)
    if code == SNIPS:
        return terms.sum(axis=1) / w.sum(axis=1)
    return terms.mean(axis=1)


@njit(nogil=True, cache=True)
def separable_rows_numba(code, w, r, pt, p0, param, extra):
    m, n = w.shape
    out = np.empty(m)
    for i in range(m):
        acc = 0.0
        wsum = 0.0
        for j in range(n):
            wi = w[i, j]
            ri = r[i, j]
            if code == 0 or code == 8:
                g = wi * ri
            elif code == 1:
                g = ri * min(wi, param)
            elif code == 2:
                if param == 0.0:
                    g = wi * ri
                elif extra == 0.0:
                    g = ri * wi ** (1.0 - param)
                elif extra == -1.0:
                    # same rounding as numpy's reciprocal fast path
                    g = ri * (1.0 / ((1.0 - param) * (1.0 / wi) + param))
                else:
                    g = ri * ((1.0 - param) * wi ** extra + param) ** (1.0 / extra)
            elif code == 3:
                g = ri * (pt[i, j] / p0[i, j] ** param)
            elif code == 4:
                g = ri * pt[i, j] / (p0[i, j] + param)
            elif code == 5:
                g = ri * param * wi / (wi * wi + param)
            elif code == 6:
                g = np.log1p(param * wi * ri) / param
            else:
                g = pt[i, j] * np.log1p(param * ri / p0[i, j]) / param
            acc += g
            wsum += wi
        if code == 8:
            out[i] = acc / wsum
        else:
            out[i] = acc / n
    return out


def separable_rows(code, w, r, pt, p0, param, extra=0.0):
    """Estimator value per row of ``(trials, n)`` arrays."""
    if USE_NUMBA:
        w = np.atleast_2d(np.asarray(w, dtype=np.float64))
        arrs = [np.ascontiguousarray(np.broadcast_to(np.asarray(a, dtype=np.float64), w.shape))
                for a in (w, r, pt, p0)]
        return separable_rows_numba(int(code), *arrs, float(param), float(extra))
    return separable_rows_numpy(code, w, r, pt, p0, param, extra)
