"""Periodic Schur decomposition of a matrix-factor cycle.

Computes unitary Z_j and upper-triangular S_j with S_j = Z_{j+1}^H A_j Z_j
(indices cyclic), so the eigenvalues of the product A_{m-1} ... A_0 are the
products of corresponding diagonal entries of the S_j. The product itself
is never formed, which keeps multiplier sets spanning many orders of
magnitude (1e-80 .. 1e80 in stiff costate problems) computable: magnitudes
are accumulated as sums of logs and the QR shifts carry an explicit
exponent.

The leading k columns of Z_0 span the invariant subspace of the product
(anchored at slot 0) belonging to the first k diagonal eigenvalue chains;
with sort=True those are the k largest in modulus.

The reduction, bulge chasing, and reordering sweeps are the hot loops; they
are compiled with numba when available. Set OCC_NUMBA=0 to select the
interpreted pure-numpy path (same source, slice-vectorized).
"""

import os
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, NoConvergenceError

_EPS = np.finfo(float).eps
_FLOOR = 1e-300


def _numba_enabled():
    flag = os.environ.get("OCC_NUMBA", "1").strip().lower()
    if flag in ("0", "false", "no", "off"):
        return False
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


USE_NUMBA = _numba_enabled()

if USE_NUMBA:
    from numba import njit as _jit
else:

    def _jit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn


# ----------------------------------------------------------------------
# elementary unitary U = [[c, s], [-conj(s), c]] with real c:
#   column action (X <- X U):   col1' = c*col1 - conj(s)*col2,  col2' = s*col1 + c*col2
#   row action    (X <- U^H X): row1' = c*row1 - s*row2,        row2' = conj(s)*row1 + c*row2


@_jit(cache=True)
def _rot_left(f, g):
    """(c, s) whose row action zeroes the second entry of column [f, g]."""
    ag = abs(g)
    if ag < _FLOOR:
        return 1.0, 0.0 + 0.0j
    af = abs(f)
    nrm = np.sqrt(af * af + ag * ag)
    if af < _FLOOR:
        return 0.0, -np.conj(g) / ag
    c = af / nrm
    s = -c * np.conj(g) / np.conj(f)
    return c, s


@_jit(cache=True)
def _rot_right_zero_first(f, g):
    """(c, s) whose column action zeroes entry f in row pair [f, g]."""
    af = abs(f)
    if af < _FLOOR:
        return 1.0, 0.0 + 0.0j
    ag = abs(g)
    nrm = np.sqrt(af * af + ag * ag)
    if ag < _FLOOR:
        return 0.0, np.conj(f) / af
    c = ag / nrm
    s = c * np.conj(f) / np.conj(g)
    return c, s


@_jit(cache=True)
def _apply_slot(S, Z, slot, i1, i2, c, s, zall):
    """Apply U at index pair (i1, i2) of a slot: S[slot] from the right,
    S[slot-1] from the left, accumulate into Z."""
    m = S.shape[0]
    prev = slot - 1 if slot > 0 else m - 1
    A = S[slot]
    x = A[:, i1].copy()
    y = A[:, i2].copy()
    A[:, i1] = c * x - np.conj(s) * y
    A[:, i2] = s * x + c * y
    B = S[prev]
    x = B[i1, :].copy()
    y = B[i2, :].copy()
    B[i1, :] = c * x - s * y
    B[i2, :] = np.conj(s) * x + c * y
    if zall or slot == 0:
        Q = Z[slot] if zall else Z[0]
        x = Q[:, i1].copy()
        y = Q[:, i2].copy()
        Q[:, i1] = c * x - np.conj(s) * y
        Q[:, i2] = s * x + c * y


@_jit(cache=True)
def _hess_cycle(S, Z, zall):
    """Reduce S[0] to upper Hessenberg keeping S[1..m-1] triangular."""
    m, n, _ = S.shape
    for k in range(n - 2):
        for i in range(n - 1, k + 1, -1):
            g = S[0][i, k]
            if abs(g) < _FLOOR:
                S[0][i, k] = 0.0
                continue
            c, s = _rot_left(S[0][i - 1, k], g)
            _apply_slot(S, Z, 1 % m, i - 1, i, c, s, zall)
            S[0][i, k] = 0.0
            if m == 1:
                continue
            # the slot-j column action filled S[j][i, i-1]; clean forward
            for j in range(1, m):
                fill = S[j][i, i - 1]
                if abs(fill) >= _FLOOR:
                    c, s = _rot_left(S[j][i - 1, i - 1], fill)
                    _apply_slot(S, Z, (j + 1) % m, i - 1, i, c, s, zall)
                S[j][i, i - 1] = 0.0


@_jit(cache=True)
def _window_shift(S, hi):
    """Wilkinson shift from the cycle product restricted to (hi-1, hi).

    Returns (shift_scaled, expo): shift = shift_scaled * exp(expo).
    """
    m = S.shape[0]
    t00 = 1.0 + 0.0j
    t01 = 0.0 + 0.0j
    t10 = 0.0 + 0.0j
    t11 = 1.0 + 0.0j
    expo = 0.0
    for j in range(m):
        a = S[j][hi - 1, hi - 1]
        b = S[j][hi - 1, hi]
        cc = S[j][hi, hi - 1]  # nonzero only for j == 0
        d = S[j][hi, hi]
        n00 = a * t00 + b * t10
        n01 = a * t01 + b * t11
        n10 = cc * t00 + d * t10
        n11 = cc * t01 + d * t11
        sc = max(abs(n00), abs(n01), abs(n10), abs(n11))
        if sc > _FLOOR:
            n00 /= sc
            n01 /= sc
            n10 /= sc
            n11 /= sc
            expo += np.log(sc)
        t00, t01, t10, t11 = n00, n01, n10, n11
    tr = 0.5 * (t00 + t11)
    disc = np.sqrt(tr * tr - (t00 * t11 - t01 * t10))
    e1 = tr + disc
    e2 = tr - disc
    sig = e1 if abs(e1 - t11) <= abs(e2 - t11) else e2
    return sig, expo


@_jit(cache=True)
def _leading_column(S, lo):
    """First column of the window cycle product, scaled: (y0, y1, expo)."""
    m = S.shape[0]
    y0 = 1.0 + 0.0j
    y1 = 0.0 + 0.0j
    expo = 0.0
    for j in range(m):
        n0 = S[j][lo, lo] * y0 + S[j][lo, lo + 1] * y1
        n1 = S[j][lo + 1, lo] * y0 + S[j][lo + 1, lo + 1] * y1
        sc = max(abs(n0), abs(n1))
        if sc > _FLOOR:
            n0 /= sc
            n1 /= sc
            expo += np.log(sc)
        y0, y1 = n0, n1
    return y0, y1, expo


@_jit(cache=True)
def _sweep(S, Z, lo, hi, sig, sexpo, zall):
    """One implicit single-shift QR sweep on the window [lo, hi]."""
    m = S.shape[0]
    y0, y1, yexpo = _leading_column(S, lo)
    top = yexpo if yexpo > sexpo else sexpo
    f = y0 * np.exp(yexpo - top) - sig * np.exp(sexpo - top)
    g = y1 * np.exp(yexpo - top)
    if abs(f) < _FLOOR and abs(g) < _FLOOR:
        f = 1.0 + 0.0j
    c, s = _rot_left(f, g)
    # intro at slot 0: bulges S[0](lo+2, lo) and S[m-1](lo+1, lo)
    _apply_slot(S, Z, 0, lo, lo + 1, c, s, zall)
    if m > 1:
        for j in range(m - 1, 0, -1):
            fill = S[j][lo + 1, lo]
            if abs(fill) >= _FLOOR:
                c, s = _rot_right_zero_first(fill, S[j][lo + 1, lo + 1])
                _apply_slot(S, Z, j, lo, lo + 1, c, s, zall)
            S[j][lo + 1, lo] = 0.0
    # chase the Hessenberg bulge down the window
    for k in range(lo, hi - 1):
        c, s = _rot_left(S[0][k + 1, k], S[0][k + 2, k])
        _apply_slot(S, Z, 1 % m, k + 1, k + 2, c, s, zall)
        S[0][k + 2, k] = 0.0
        if m > 1:
            for j in range(1, m):
                fill = S[j][k + 2, k + 1]
                if abs(fill) >= _FLOOR:
                    c, s = _rot_left(S[j][k + 1, k + 1], fill)
                    _apply_slot(S, Z, (j + 1) % m, k + 1, k + 2, c, s, zall)
                S[j][k + 2, k + 1] = 0.0


@_jit(cache=True)
def _qr_iterate(S, Z, zall, maxiter_per_eig):
    """Deflation loop; returns 0 on success, 1 on convergence failure."""
    m, n, _ = S.shape
    hi = n - 1
    total = 0
    budget = maxiter_per_eig * n + 10
    stuck = 0
    while hi > 0:
        lo = 0
        for i in range(hi, 0, -1):
            tol = _EPS * (abs(S[0][i - 1, i - 1]) + abs(S[0][i, i])) + _FLOOR
            if abs(S[0][i, i - 1]) <= tol:
                S[0][i, i - 1] = 0.0
                lo = i
                break
        if lo == hi:
            hi -= 1
            stuck = 0
            continue
        if total >= budget:
            return 1
        sig, sexpo = _window_shift(S, hi)
        if stuck > 0 and stuck % 8 == 0:
            sig = 0.75 * sig.real + 0.3 * abs(sig.imag) - 0.25j * sig.imag
        _sweep(S, Z, lo, hi, sig, sexpo, zall)
        total += 1
        stuck += 1
        tol = _EPS * (abs(S[0][hi - 1, hi - 1]) + abs(S[0][hi, hi])) + _FLOOR
        if abs(S[0][hi, hi - 1]) <= tol:
            S[0][hi, hi - 1] = 0.0
            hi -= 1
            stuck = 0
    return 0


@_jit(cache=True)
def _apply_swap_rot(S, Z, slot, i, x, zall):
    """Right-multiply S[slot] by V = t*[[x, -1], [1, conj(x)]] at (i, i+1),
    left-multiply S[slot-1] by V^H, accumulate into Z."""
    m = S.shape[0]
    t = 1.0 / np.sqrt(1.0 + abs(x) * abs(x))
    v00 = t * x
    v01 = -t + 0.0j
    v10 = t + 0.0j
    v11 = t * np.conj(x)
    prev = slot - 1 if slot > 0 else m - 1
    A = S[slot]
    p = A[:, i].copy()
    q = A[:, i + 1].copy()
    A[:, i] = p * v00 + q * v10
    A[:, i + 1] = p * v01 + q * v11
    B = S[prev]
    p = B[i, :].copy()
    q = B[i + 1, :].copy()
    B[i, :] = np.conj(v00) * p + np.conj(v10) * q
    B[i + 1, :] = np.conj(v01) * p + np.conj(v11) * q
    if zall or slot == 0:
        Q = Z[slot] if zall else Z[0]
        p = Q[:, i].copy()
        q = Q[:, i + 1].copy()
        Q[:, i] = p * v00 + q * v10
        Q[:, i + 1] = p * v01 + q * v11


@_jit(cache=True)
def _swap_adjacent(S, Z, i, xs, zall, forward):
    """Swap diagonal chains i and i+1 of the triangular cycle.

    Solves the cyclic Sylvester a_j x_j + c_j = b_j x_{j+1} in whichever
    direction contracts: forward when |prod a| < |prod b|, backward
    otherwise (the caller knows the log-magnitude gap). Returns False if
    the solve degenerates.
    """
    m = S.shape[0]
    P = 1.0 + 0.0j
    Q = 0.0 + 0.0j
    if forward:
        # x_{j+1} = (a_j x_j + c_j) / b_j around the cycle
        for j in range(m):
            b = S[j][i + 1, i + 1]
            if abs(b) < _FLOOR:
                return False
            p = S[j][i, i] / b
            q = S[j][i, i + 1] / b
            Q = p * Q + q
            P = p * P
            if not (np.isfinite(P.real) and np.isfinite(P.imag)
                    and np.isfinite(Q.real) and np.isfinite(Q.imag)):
                return False
        if abs(1.0 - P) < 1e-14:
            return False
        x = Q / (1.0 - P)
        for j in range(m):
            xs[j] = x
            x = (S[j][i, i] * x + S[j][i, i + 1]) / S[j][i + 1, i + 1]
            if not (np.isfinite(x.real) and np.isfinite(x.imag)):
                return False
    else:
        # x_j = (b_j x_{j+1} - c_j) / a_j, composed from the inside out
        for j in range(m - 1, -1, -1):
            a = S[j][i, i]
            if abs(a) < _FLOOR:
                return False
            p = S[j][i + 1, i + 1] / a
            q = -S[j][i, i + 1] / a
            P = p * P
            Q = p * Q + q
            if not (np.isfinite(P.real) and np.isfinite(P.imag)
                    and np.isfinite(Q.real) and np.isfinite(Q.imag)):
                return False
        if abs(1.0 - P) < 1e-14:
            return False
        x0 = Q / (1.0 - P)
        xs[0] = x0
        x = x0
        for j in range(m - 1, 0, -1):
            x = (S[j][i + 1, i + 1] * x - S[j][i, i + 1]) / S[j][i, i]
            xs[j] = x
            if not (np.isfinite(x.real) and np.isfinite(x.imag)):
                return False
    for j in range(m):
        _apply_swap_rot(S, Z, j, i, xs[j], zall)
    for j in range(m):
        S[j][i + 1, i] = 0.0
    return True


@_jit(cache=True)
def _sort_cycle(S, Z, log_abs, zall, tol, descending):
    """Bubble-sort diagonal chains by log-magnitude (direction selectable)."""
    m, n, _ = S.shape
    xs = np.zeros(m, dtype=np.complex128)
    skipped = 0
    swapped = True
    while swapped:
        swapped = False
        for i in range(n - 1):
            if descending:
                want = log_abs[i] < log_abs[i + 1] - tol
            else:
                want = log_abs[i] > log_abs[i + 1] + tol
            if want:
                forward = log_abs[i] < log_abs[i + 1]
                if _swap_adjacent(S, Z, i, xs, zall, forward):
                    la = log_abs[i]
                    log_abs[i] = log_abs[i + 1]
                    log_abs[i + 1] = la
                    swapped = True
                else:
                    skipped += 1
    return skipped


# ----------------------------------------------------------------------


@dataclass
class PeriodicSchur:
    """Triangular factors, slot-0 unitary, and eigenvalue data of a cycle."""

    S: np.ndarray          # (m, n, n) complex, upper triangular
    Z0: np.ndarray         # (n, n) complex unitary at slot 0
    gamma: np.ndarray      # (n,) complex eigenvalues of the cycle product
    log_abs: np.ndarray    # (n,) float log|gamma|, safe for huge spreads
    Z: np.ndarray | None = None  # (m, n, n) all slot unitaries when requested

    def subspace(self, k):
        """Orthonormal basis (columns) of the invariant subspace of the first
        k diagonal chains of the product anchored at slot 0."""
        return self.Z0[:, :k].copy()


def _extract_eigs(S):
    m, n, _ = S.shape
    idx = np.arange(n)
    d = S[:, idx, idx]  # (m, n) diagonals
    ad = np.abs(d)
    with np.errstate(divide="ignore"):
        log_abs = np.where(np.all(ad > 0.0, axis=0),
                           np.sum(np.log(np.maximum(ad, _FLOOR)), axis=0),
                           -np.inf)
    args = np.sum(np.angle(d), axis=0)
    mag = np.exp(np.clip(log_abs, -745.0, 709.0))
    gamma = mag * np.exp(1j * args)
    return gamma, log_abs


def periodic_schur(factors, sort=True, want_all_z=False, maxiter_per_eig=40,
                   sort_tol=1e-8):
    """Periodic Schur decomposition of a factor cycle.

    factors: (m, n, n) array or sequence of square matrices, real or complex.
    The eigenvalues are those of factors[m-1] @ ... @ factors[0].
    sort: True or "desc" orders chains by descending modulus, "asc" by
    ascending modulus, False leaves the iteration order.
    """
    A = np.asarray(factors)
    if A.ndim != 3 or A.shape[1] != A.shape[2]:
        raise InvalidArgumentError("factors must be an (m, n, n) stack of square matrices")
    if not np.all(np.isfinite(A)):
        raise InvalidArgumentError("factor sequence contains non-finite entries")
    m, n, _ = A.shape
    S = np.ascontiguousarray(A, dtype=np.complex128).copy()
    zall = bool(want_all_z)
    Z = np.zeros((m if zall else 1, n, n), dtype=np.complex128)
    for j in range(Z.shape[0]):
        Z[j] = np.eye(n)

    if n > 1:
        # triangularize slots 1..m-1 with dense QR, pushing Q to the next slot
        for j in range(1, m):
            Q, R = np.linalg.qr(S[j])
            S[j] = R
            nxt = (j + 1) % m
            S[nxt] = S[nxt] @ Q
            if zall:
                Z[nxt] = Z[nxt] @ Q
            elif nxt == 0:
                Z[0] = Z[0] @ Q
        _hess_cycle(S, Z, zall)
        status = _qr_iterate(S, Z, zall, maxiter_per_eig)
        if status != 0:
            raise NoConvergenceError("periodic QR iteration did not converge")

    gamma, log_abs = _extract_eigs(S)
    if sort and n > 1:
        if sort not in (True, "desc", "asc"):
            raise InvalidArgumentError("sort must be True, False, 'desc', or 'asc'")
        _sort_cycle(S, Z, log_abs, zall, sort_tol, sort != "asc")
        gamma, log_abs = _extract_eigs(S)

    return PeriodicSchur(S=S, Z0=Z[0], gamma=gamma, log_abs=log_abs,
                         Z=Z if zall else None)


def product_eigvals_dense(factors):
    """Oracle: eigenvalues of the explicitly formed product. Fine for
    well-conditioned sequences; loses the small multipliers for extreme
    spreads, which is the reason periodic_schur exists."""
    A = np.asarray(factors)
    P = np.eye(A.shape[1], dtype=A.dtype)
    for j in range(A.shape[0]):
        P = A[j] @ P
    return np.linalg.eigvals(P)
