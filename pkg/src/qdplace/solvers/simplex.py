"""
Dense two phase simplex, the LP engine beneath the branch and bound.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericalError
from ..utils import config_value

logger = logging.getLogger('qdplace.solvers')

# primal feasibility residual accepted on an optimal solution, relative to max(1, |b|)
FEASIBILITY_TOLERANCE = 1e-8


@dataclass
class LinearProgram:
    """
    minimize c @ x subject to A_ub @ x <= b_ub, A_eq @ x == b_eq, lb <= x <= ub.

    `lb` must be finite (default 0), `ub` may be infinite (default).
    """
    c: np.ndarray
    A_ub: np.ndarray = None
    b_ub: np.ndarray = None
    A_eq: np.ndarray = None
    b_eq: np.ndarray = None
    lb: np.ndarray = None
    ub: np.ndarray = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.float64).reshape(-1)
        n = self.c.size
        self.A_ub, self.b_ub = self._rows(self.A_ub, self.b_ub, n)
        self.A_eq, self.b_eq = self._rows(self.A_eq, self.b_eq, n)
        self.lb = np.zeros(n) if self.lb is None else np.array(self.lb, dtype=np.float64).reshape(-1)
        self.ub = np.full(n, np.inf) if self.ub is None else np.array(self.ub, dtype=np.float64).reshape(-1)
        if self.lb.size != n or self.ub.size != n:
            raise ValueError("bounds must have %d entries" % n)
        if not np.all(np.isfinite(self.lb)):
            raise ValueError("lower bounds must be finite")
        if not np.all(np.isfinite(self.c)):
            raise ValueError("objective coefficients must be finite")

    @staticmethod
    def _rows(a, b, n):
        if a is None:
            return np.zeros((0, n)), np.zeros(0)
        a = np.asarray(a, dtype=np.float64).reshape(-1, n)
        b = np.asarray(b, dtype=np.float64).reshape(-1)
        if a.shape[0] != b.size:
            raise ValueError("%d constraint rows for %d right hand sides" % (a.shape[0], b.size))
        return a, b

    @property
    def n(self):
        return self.c.size

    def residual(self, x):
        """largest violation of the constraints and bounds by `x`"""
        res = [0.]
        if self.b_ub.size:
            res.append(float(np.max(self.A_ub @ x - self.b_ub)))
        if self.b_eq.size:
            res.append(float(np.max(np.abs(self.A_eq @ x - self.b_eq))))
        res.append(float(np.max(self.lb - x)))
        finite = np.isfinite(self.ub)
        if finite.any():
            res.append(float(np.max(x[finite] - self.ub[finite])))
        return max(res)


@dataclass
class LpSolution:
    """
    Solution of a :class:`LinearProgram`.

    `duals_ub` and `duals_eq` are the constraint multipliers, `reduced_costs` the reduced costs of the variables.
    They are nan unless `status` is 'optimal'.
    """
    x: np.ndarray
    objective: float
    status: str
    duals_ub: np.ndarray = None
    duals_eq: np.ndarray = None
    reduced_costs: np.ndarray = None
    iterations: int = 0
    sos2_flagged: tuple = field(default=())

    @property
    def optimal(self):
        return self.status == 'optimal'


class _Tableau:

    def __init__(self, A, b, basis, tol, max_pivots, degenerate_streak):
        self.T = np.hstack([A, b[:, np.newaxis]])
        self.basis = list(basis)
        self.tol = tol
        self.max_pivots = max_pivots
        self.degenerate_streak = degenerate_streak
        self.pivots = 0

    def pivot(self, r, q):
        T = self.T
        T[r] /= T[r, q]
        col = T[:, q].copy()
        col[r] = 0.
        T -= np.outer(col, T[r])
        self.basis[r] = q

    def run(self, cost, allowed):
        """minimize cost over the current basis. Returns 'optimal' or 'unbounded'"""
        T, tol = self.T, self.tol
        z = cost - cost[self.basis] @ T[:, :-1]
        degenerate = 0
        bland = False
        while True:
            candidates = np.flatnonzero((z < -tol) & allowed)
            if not candidates.size:
                return 'optimal'
            if bland:
                q = int(candidates[0])
            else:
                q = int(candidates[np.argmin(z[candidates])])
            col = T[:, q]
            rows = np.flatnonzero(col > tol)
            if not rows.size:
                return 'unbounded'
            ratios = T[rows, -1] / col[rows]
            best = ratios.min()
            ties = rows[ratios <= best + tol * max(1., abs(best))]
            r = int(ties[np.argmin([self.basis[i] for i in ties])])
            self.pivot(r, q)
            z = z - z[q] * T[r, :-1]
            self.pivots += 1
            degenerate = degenerate + 1 if best <= tol else 0
            if not bland and degenerate >= self.degenerate_streak:
                logger.debug('simplex: %d degenerate pivots, switching to Bland rule' % degenerate)
                bland = True
            if self.pivots > self.max_pivots:
                raise NumericalError("simplex pivot limit %d reached" % self.max_pivots)

    def drop_row(self, r):
        self.T = np.delete(self.T, r, axis=0)
        del self.basis[r]


def solve_lp(lp, tolerance=None, max_pivots=None, degenerate_streak=None):
    """
    Solve a linear program with the two phase simplex method.

    Dantzig pricing is used until a streak of degenerate pivots, then Bland's rule prevents cycling.
    The final basic solution is recomputed from the basis matrix, and checked against the constraints.

    Parameters
    ----------
    lp: LinearProgram
    tolerance: float or None
        pivoting tolerance. Default from config 'lp.tolerance'
    max_pivots: int or None
        Default from config 'lp.max_pivots'
    degenerate_streak: int or None
        Default from config 'lp.degenerate_streak'

    Returns
    -------
    LpSolution
        with status 'optimal', 'infeasible' or 'unbounded'

    Raises
    ------
    NumericalError
        if the solution violates the constraints by more than 1e-8 (relative), with the condition number
        of the final basis
    """
    tol = config_value('lp.tolerance', tolerance)
    max_pivots = config_value('lp.max_pivots', max_pivots)
    degenerate_streak = config_value('lp.degenerate_streak', degenerate_streak)
    n = lp.n

    if np.any(lp.lb > lp.ub):
        return LpSolution(np.full(n, np.nan), np.nan, 'infeasible')

    # shift to x = lb + x', eliminate fixed variables, add rows for finite upper bounds
    fixed = lp.lb == lp.ub
    free = np.flatnonzero(~fixed)
    nf = free.size
    bounded = free[np.isfinite(lp.ub[free])]
    bound_rows = np.zeros((bounded.size, nf))
    bound_rows[np.arange(bounded.size), np.searchsorted(free, bounded)] = 1.
    a_ub = np.vstack([lp.A_ub[:, free], bound_rows])
    b_ub = np.concatenate([lp.b_ub - lp.A_ub @ lp.lb, lp.ub[bounded] - lp.lb[bounded]])
    a_eq = lp.A_eq[:, free]
    b_eq = lp.b_eq - lp.A_eq @ lp.lb
    m_ub, m_eq = b_ub.size, b_eq.size
    m = m_ub + m_eq

    # standard form with slacks, rows signed so that b >= 0
    A = np.zeros((m, nf + m_ub))
    A[:m_ub, :nf] = a_ub
    A[:m_ub, nf:] = np.eye(m_ub)
    A[m_ub:, :nf] = a_eq
    b = np.concatenate([b_ub, b_eq])
    sign = np.where(b < 0, -1., 1.)
    A *= sign[:, np.newaxis]
    b = b * sign
    b_scale = max(1., float(np.abs(b).max())) if m else 1.

    # initial basis: slacks of rows kept positive, artificials elsewhere
    n_std = nf + m_ub
    artificial_rows = [i for i in range(m) if i >= m_ub or sign[i] < 0]
    art = np.zeros((m, len(artificial_rows)))
    basis = [nf + i for i in range(m)]
    for k, i in enumerate(artificial_rows):
        art[i, k] = 1.
        basis[i] = n_std + k
    tableau = _Tableau(np.hstack([A, art]), b, basis, tol, max_pivots, degenerate_streak)
    n_total = n_std + len(artificial_rows)
    rows = list(range(m))

    if artificial_rows:
        cost1 = np.zeros(n_total)
        cost1[n_std:] = 1.
        tableau.run(cost1, np.ones(n_total, dtype=bool))
        infeasibility = float(cost1[tableau.basis] @ tableau.T[:, -1])
        if infeasibility > FEASIBILITY_TOLERANCE * b_scale:
            logger.debug('lp infeasible: phase 1 ends at %g' % infeasibility)
            return LpSolution(np.full(n, np.nan), np.nan, 'infeasible', iterations=tableau.pivots)
        # drive artificials out of the basis, dropping redundant rows
        r = 0
        while r < len(tableau.basis):
            if tableau.basis[r] >= n_std:
                candidates = np.flatnonzero(np.abs(tableau.T[r, :n_std]) > tol)
                if candidates.size:
                    tableau.pivot(r, int(candidates[0]))
                else:
                    tableau.drop_row(r)
                    del rows[r]
                    continue
            r += 1

    c_scale = float(np.abs(lp.c[free]).max()) if nf else 0.
    c_scale = c_scale if c_scale > 0 else 1.
    cost = np.zeros(n_total)
    cost[:nf] = lp.c[free] / c_scale
    allowed = np.zeros(n_total, dtype=bool)
    allowed[:n_std] = True
    status = tableau.run(cost, allowed)
    if status == 'unbounded':
        return LpSolution(np.full(n, np.nan), -np.inf, 'unbounded', iterations=tableau.pivots)

    # recompute the basic solution from the basis matrix
    A_rows = A[rows]
    B = A_rows[:, tableau.basis]
    try:
        x_basic = np.linalg.solve(B, b[rows])
    except np.linalg.LinAlgError:
        raise NumericalError("singular final basis", condition=np.inf)
    x_std = np.zeros(n_total)
    x_std[tableau.basis] = np.maximum(x_basic, 0.)
    x = lp.lb.copy()
    x[free] += x_std[:nf]

    residual = lp.residual(x)
    if residual > FEASIBILITY_TOLERANCE * b_scale:
        condition = float(np.linalg.cond(B))
        raise NumericalError("lp solution violates constraints by %g (basis condition number %g)" % (
            residual, condition), condition=condition)

    # multipliers, back in the original row signs
    c_std = np.zeros(n_std)
    c_std[:nf] = lp.c[free]
    c_basic = np.array([c_std[j] if j < n_std else 0. for j in tableau.basis])
    y_rows = np.linalg.solve(B.T, c_basic)
    y = np.zeros(m)
    y[rows] = y_rows
    y = y * sign
    duals_ub = y[:lp.b_ub.size]
    duals_eq = y[m_ub:]
    reduced = lp.c - lp.A_ub.T @ duals_ub - lp.A_eq.T @ duals_eq
    if bounded.size:
        reduced[bounded] -= y[lp.b_ub.size:m_ub]
    return LpSolution(x, float(lp.c @ x), 'optimal', duals_ub=duals_ub, duals_eq=duals_eq, reduced_costs=reduced,
                      iterations=tableau.pivots)
