"""Skiba (indifference) points between two saddle targets.

A Skiba point is an initial state whose canonical paths to two different
targets carry the same value. The scan walks the homotopy history of the
A-leg and recomputes paths to target B from the same initial states; the
bisection then narrows the value crossing in the homotopy parameter.
"""

from dataclasses import dataclass

import numpy as np

from .cpath import (
    CpSettings,
    constant_path,
    free_T_policy,
    init_T,
    solve_cp_bvp,
    target_kind,
    target_state,
)
from .errors import InvalidArgumentError, NoConvergenceError, NoSkibaError
from .value import path_value


@dataclass
class SkibaResult:
    alpha_star: float
    J_A: float
    J_B: float
    path_A: object
    path_B: object
    bracket: tuple


class _Leg:
    """Warm-startable canonical-path solver toward one fixed target."""

    def __init__(self, model, fem, target, settings):
        self.model = model
        self.fem = fem
        self.target = target
        self.settings = settings
        self.path = None

    def _solve_from(self, path, v0):
        new_path, _ = solve_cp_bvp(
            self.model, self.fem, self.target, v0, path, path.T,
            freeT=self.settings.freeT and target_kind(self.target) == "css",
            settings=self.settings, alpha=path.alpha)
        new_path, _ = free_T_policy(self.model, self.fem, new_path,
                                    self.target, self.settings)
        return new_path

    def solve(self, v0):
        """Path from v0, warm-starting at the last solved initial states and
        blending toward v0 in as many substeps as convergence demands."""
        v0 = np.asarray(v0, dtype=float)
        if self.path is None:
            T0 = init_T(self.target, self.settings)
            base = constant_path(self.target, T0, self.settings)
            v_hat = target_state(self.target)[: v0.size]
            v_prev = v_hat
        else:
            base = self.path
            v_prev = self.path.u[0, : v0.size]
        path = base
        lo, span = 0.0, 1.0
        while lo < 1.0:
            frac = min(1.0, lo + span)
            vv = (1 - frac) * v_prev + frac * v0
            try:
                path = self._solve_from(path, vv)
            except NoConvergenceError:
                span *= 0.5
                if span < 1e-3:
                    raise
                continue
            lo = frac
            span = min(1.0, 2 * span)
        self.path = path
        return path

    def value(self, v0):
        return path_value(self.model, self.fem, self.solve(v0))


def skiba_scan(model, fem, history_to_A, target_B, settings=None):
    """Values to target B from every initial state stored in the A-leg's
    continuation history. Returns a list of (alpha, J_A, J_B); probes whose
    solve fails carry J_B = nan and are skipped by the bisection."""
    if settings is None:
        settings = CpSettings()
    if not history_to_A.alphas or not history_to_A.v0s:
        raise InvalidArgumentError("A-leg history is empty; rerun with retsw=1")
    leg = _Leg(model, fem, target_B, settings)
    table = []
    for a, JA, v0 in zip(history_to_A.alphas, history_to_A.values,
                         history_to_A.v0s):
        try:
            JB = leg.value(v0)
        except NoConvergenceError:
            table.append((a, JA, np.nan))
            continue
        table.append((a, JA, JB))
    return table


def skiba_bisect(model, fem, history_to_A, target_A, target_B, scan,
                 value_tol=1e-4, alpha_tol=1e-3, settings=None):
    """Bisect the value crossing J_A = J_B in the homotopy parameter.

    scan: output of skiba_scan. Both probe legs are warm-started; the probe
    initial states interpolate the stored history linearly in alpha.
    """
    if settings is None:
        settings = CpSettings()
    rows = [(a, JA, JB) for a, JA, JB in scan if np.isfinite(JB)]
    bracket = None
    for (a0, JA0, JB0), (a1, JA1, JB1) in zip(rows[:-1], rows[1:]):
        if (JA0 - JB0) * (JA1 - JB1) < 0:
            bracket = (a0, a1)
            break
    if bracket is None:
        raise NoSkibaError("no sign change of J_A - J_B in the scanned range")

    v0s = {a: v for a, v in zip(history_to_A.alphas, history_to_A.v0s)}
    a_lo, a_hi = bracket
    v_lo, v_hi = v0s[a_lo], v0s[a_hi]

    leg_A = _Leg(model, fem, target_A, settings)
    leg_B = _Leg(model, fem, target_B, settings)

    def probe(a):
        w = (a - a_lo) / (a_hi - a_lo) if a_hi != a_lo else 0.0
        v0 = (1 - w) * v_lo + w * v_hi
        pa = leg_A.solve(v0)
        pb = leg_B.solve(v0)
        return path_value(model, fem, pa), path_value(model, fem, pb), pa, pb

    JA_lo, JB_lo, _, _ = probe(a_lo)
    sign_lo = np.sign(JA_lo - JB_lo)
    lo, hi = a_lo, a_hi
    best = None
    while hi - lo > alpha_tol:
        mid = 0.5 * (lo + hi)
        JA, JB, pa, pb = probe(mid)
        best = SkibaResult(alpha_star=mid, J_A=JA, J_B=JB, path_A=pa,
                           path_B=pb, bracket=(lo, hi))
        if abs(JA - JB) < value_tol:
            return best
        if np.sign(JA - JB) == sign_lo:
            lo = mid
        else:
            hi = mid
    if best is None:
        JA, JB, pa, pb = probe(0.5 * (lo + hi))
        best = SkibaResult(alpha_star=0.5 * (lo + hi), J_A=JA, J_B=JB,
                           path_A=pa, path_B=pb, bracket=(lo, hi))
    return best
