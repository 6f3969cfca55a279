"""
Exact queue-aware solver: enumeration of open facility subsets, each solved as a convex program (PQP)
by a primal barrier Newton method.
"""
import time
import logging
from dataclasses import dataclass
from itertools import combinations

import dask
import numpy as np

from ..errors import DomainError, InfeasibleError, InstanceError, NoConvergenceError
from ..queueing import Assignment
from ..utils import config_value, timing
from .report import SolveReport

logger = logging.getLogger('qdplace.solvers')

# objectives closer than that are tied, the lexicographically smaller subset wins
TIE_TOLERANCE = 1e-9

_ARMIJO = 1e-4
_BACKTRACK = 0.5
_BARRIER_FACTOR = 10.
_NEWTON_TOLERANCE = 1e-10
_NOISE = 1e-14


@dataclass(frozen=True, eq=False)
class PqpProblem:
    """
    Convex sub-problem of an instance with a fixed set of open facilities.

    Parameters
    ----------
    instance: Instance
    subset: sequence of int
        open facility indexes (columns of `instance.rtt`)
    tau: float, array-like or None
        capacity margin in req/s: loads must stay below mu - tau. Default to config 'convex.tau_rel' * mu.
    """
    instance: object
    subset: tuple
    tau: np.ndarray = None

    def __post_init__(self):
        subset = tuple(sorted(int(j) for j in self.subset))
        if len(set(subset)) != len(subset) or not subset:
            raise InstanceError("invalid facility subset %s" % (self.subset,))
        if subset[0] < 0 or subset[-1] >= self.instance.n_facilities:
            raise InstanceError("facility subset %s out of range" % (subset,))
        mu = self.instance.service[list(subset)]
        if self.tau is None:
            tau = config_value('convex.tau_rel') * mu
        else:
            tau = np.broadcast_to(np.asarray(self.tau, dtype=np.float64), mu.shape).copy()
        if np.any(tau <= 0) or np.any(tau >= mu):
            raise InstanceError("tau must be in (0, mu). Got %s" % tau)
        if self.instance.total_arrival <= 0:
            raise InstanceError("empty instance: total arrival rate is 0")
        object.__setattr__(self, 'subset', subset)
        object.__setattr__(self, 'tau', tau)

    @property
    def mu(self):
        return self.instance.service[list(self.subset)]

    @property
    def rtt(self):
        return self.instance.rtt[:, list(self.subset)]

    @property
    def capacity_sum(self):
        """sum of the usable capacities mu - tau"""
        return float((self.mu - self.tau).sum())

    def is_feasible(self):
        return self.instance.total_arrival < self.capacity_sum

    def check_feasible(self):
        if not self.is_feasible():
            raise InfeasibleError("demand %r does not fit below the capacity %r of facilities %s" % (
                self.instance.total_arrival, self.capacity_sum, self.facility_ids),
                capacity_sum=self.capacity_sum, demand_sum=self.instance.total_arrival)

    @property
    def facility_ids(self):
        return tuple(self.instance.facilities[j] for j in self.subset)


def _as_matrix(problem, x):
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(problem.instance.n_clients, len(problem.subset))


def _loads(problem, x):
    if np.any(x < 0):
        raise DomainError("x must be >= 0")
    loads = x.sum(axis=0)
    bad = loads >= problem.mu - problem.tau
    if bad.any():
        j = int(np.argmax(bad))
        raise DomainError("load %r of facility %d is not below mu - tau = %r" % (
            loads[j], problem.facility_ids[j], problem.mu[j] - problem.tau[j]))
    return loads


def pqp_objective(problem, x):
    """
    average response time of the demand split `x` over the open facilities

    Parameters
    ----------
    problem: PqpProblem
    x: array-like
        shape (|C|, |F'|), or flattened in row major order

    Returns
    -------
    float
        seconds
    """
    x = _as_matrix(problem, x)
    loads = _loads(problem, x)
    mu = problem.mu
    return float(((x * problem.rtt).sum() + (loads / (mu - loads)).sum()) / problem.instance.total_arrival)


def pqp_gradient(problem, x):
    """
    gradient of :func:`pqp_objective`:
    rtt_cf / Λ + (1 / (mu_f - Λ_f) + Λ_f / (mu_f - Λ_f) ** 2) / Λ

    Returns
    -------
    numpy.ndarray
        shape (|C| * |F'|,), row major
    """
    x = _as_matrix(problem, x)
    loads = _loads(problem, x)
    mu = problem.mu
    total = problem.instance.total_arrival
    queue = 1. / (mu - loads) + loads / (mu - loads) ** 2
    return ((problem.rtt + queue[np.newaxis, :]) / total).ravel()


def _hessian_diagonal(problem, loads):
    mu = problem.mu
    return (2. / (mu - loads) ** 2 + 2. * loads / (mu - loads) ** 3) / problem.instance.total_arrival


def pqp_hessian(problem, x):
    """
    hessian of :func:`pqp_objective`. Entry ((c, f), (d, e)) is zero unless f == e,
    and then (2 / (mu_f - Λ_f) ** 2 + 2 Λ_f / (mu_f - Λ_f) ** 3) / Λ.

    Returns
    -------
    numpy.ndarray
        shape (|C| * |F'|, |C| * |F'|), row major
    """
    x = _as_matrix(problem, x)
    loads = _loads(problem, x)
    n_clients = x.shape[0]
    return np.kron(np.ones((n_clients, n_clients)), np.diag(_hessian_diagonal(problem, loads)))


class _Barrier:
    # log barrier for x > 0 and loads < mu - tau, restricted to clients with demand

    def __init__(self, problem, active):
        self.problem = problem
        self.rtt = problem.rtt[active]
        self.arrival = problem.instance.arrival[active]
        self.mu = problem.mu
        self.cap = problem.mu - problem.tau
        self.total = problem.instance.total_arrival
        n, p = self.rtt.shape
        self.n_terms = n * p + p
        self.constraints = np.kron(np.eye(n), np.ones((1, p)))

    def start(self):
        return np.outer(self.arrival, self.cap / self.cap.sum())

    def objective(self, x):
        loads = x.sum(axis=0)
        return ((x * self.rtt).sum() + (loads / (self.mu - loads)).sum()) / self.total

    def value(self, x, t):
        loads = x.sum(axis=0)
        slack = self.cap - loads
        if np.any(x <= 0) or np.any(slack <= 0):
            return np.inf
        return t * self.objective(x) - np.log(x).sum() - np.log(slack).sum()

    def gradient_parts(self, x):
        loads = x.sum(axis=0)
        slack = self.cap - loads
        grad_f = (self.rtt + (self.mu / (self.mu - loads) ** 2)[np.newaxis, :]) / self.total
        return grad_f, 1. / x, 1. / slack

    def newton_step(self, x, t):
        n, p = x.shape
        grad_f, inv_x, inv_slack = self.gradient_parts(x)
        grad = (t * grad_f - inv_x + inv_slack[np.newaxis, :]).ravel()
        loads = x.sum(axis=0)
        block = t * (2. * self.mu / (self.mu - loads) ** 3) / self.total + inv_slack ** 2
        hess = np.kron(np.ones((n, n)), np.diag(block))
        hess[np.diag_indices_from(hess)] += (inv_x ** 2).ravel()
        # symmetric diagonal scaling keeps the KKT system well conditioned when some x vanish
        scale = 1. / np.sqrt(np.diag(hess))
        hess_s = hess * np.outer(scale, scale)
        cons_s = self.constraints * scale[np.newaxis, :]
        kkt = np.block([[hess_s, cons_s.T], [cons_s, np.zeros((n, n))]])
        rhs = np.concatenate([-grad * scale, np.zeros(n)])
        sol = np.linalg.solve(kkt, rhs)
        step = (sol[:n * p] * scale).reshape(n, p)
        return step, grad

    def max_step(self, x, step):
        with np.errstate(divide='ignore', invalid='ignore'):
            bounds = [1.]
            neg = step < 0
            if neg.any():
                bounds.append((-x[neg] / step[neg]).min())
            dloads = step.sum(axis=0)
            pos = dloads > 0
            if pos.any():
                bounds.append(((self.cap - x.sum(axis=0))[pos] / dloads[pos]).min())
        return min(bounds)

    def kkt_residual(self, x, t):
        grad_f, inv_x, inv_slack = self.gradient_parts(x)
        reduced = grad_f - inv_x / t + inv_slack[np.newaxis, :] / t
        # demand multipliers by least squares over each client row
        reduced = reduced - reduced.mean(axis=1, keepdims=True)
        return max(float(np.abs(reduced).max()), self.n_terms / t)


@timing(logger.debug)
def solve_pqp(problem, tolerance=None, max_newton=None, max_outer=None):
    """
    Solve a :class:`PqpProblem` with a primal barrier method.

    Demand equalities are kept by the Newton steps of the equality constrained barrier problem,
    started from the proportional split of the demand. Positivity of `x` and strict capacities
    mu - tau are log barriers. Steps are damped by an Armijo backtracking line search, and the
    barrier parameter grows 10 fold until the duality measure is below `tolerance`, relative to the
    objective when the objective exceeds 1. A level ends on a small Newton decrement or when the line
    search only gains rounding noise.

    Parameters
    ----------
    problem: PqpProblem
    tolerance: float or None
        Default from config 'convex.tolerance'
    max_newton: int or None
        Newton steps allowed per barrier level. Default from config 'convex.max_newton'
    max_outer: int or None
        barrier levels allowed. Default from config 'convex.max_outer'

    Returns
    -------
    SolveReport

    Raises
    ------
    InfeasibleError
        if the demand does not fit below the capacities
    NoConvergenceError
        if the barrier levels run out. `best` holds the last iterate.
    """
    tolerance = config_value('convex.tolerance', tolerance)
    max_newton = config_value('convex.max_newton', max_newton)
    max_outer = config_value('convex.max_outer', max_outer)
    problem.check_feasible()
    start_time = time.time()

    instance = problem.instance
    active = np.flatnonzero(instance.arrival > 0)
    barrier = _Barrier(problem, active)
    x = barrier.start()
    t = barrier.n_terms / max(barrier.objective(x), 1e-12)
    iterations = 0
    converged = False
    for _ in range(max_outer):
        for _ in range(max_newton):
            step, grad = barrier.newton_step(x, t)
            decrement = -float(grad @ step.ravel())
            if decrement / 2 <= _NEWTON_TOLERANCE:
                break
            iterations += 1
            current = barrier.value(x, t)
            length = min(1., 0.99 * barrier.max_step(x, step))
            while length > 1e-16:
                candidate = barrier.value(x + length * step, t)
                if candidate <= current - _ARMIJO * length * decrement:
                    break
                length *= _BACKTRACK
            else:
                # no decrease left at this barrier level
                break
            x = x + length * step
            if current - candidate <= _NOISE * max(1., abs(current)):
                # decrease at rounding level, the center is reached
                break
        if barrier.n_terms / t <= tolerance * max(1., abs(barrier.objective(x))):
            converged = True
            break
        t *= _BARRIER_FACTOR

    # restore the demand equalities exactly
    x = x * (barrier.arrival / x.sum(axis=1))[:, np.newaxis]
    full = np.zeros(instance.rtt.shape)
    full[np.ix_(active, list(problem.subset))] = x
    y = np.zeros(instance.n_facilities, dtype=int)
    y[list(problem.subset)] = 1
    report = SolveReport.from_assignment(
        instance, Assignment(full, y), 'pqp', kkt_residual=barrier.kkt_residual(x, t), iterations=iterations,
        wall_time=time.time() - start_time, subset=problem.facility_ids)
    if not converged:
        raise NoConvergenceError("barrier method did not converge in %d newton steps (duality measure %g)" % (
            iterations, barrier.n_terms / t), best=report, residual=report.kkt_residual)
    logger.debug('pqp %s: objective %.12g in %d newton steps' % (problem.facility_ids, report.objective, iterations))
    return report


def _solve_subset(problem, tolerance):
    return solve_pqp(problem, tolerance=tolerance)


@timing()
def solve_qp_exact(instance, p=None, tau=None, tolerance=None, workers=None):
    """
    Solve the queue-aware problem exactly by solving :func:`solve_pqp` on every subset of `p` facilities.

    Parameters
    ----------
    instance: Instance
    p: int or None
        number of open facilities. Default to `instance.p`
    tau: float or None
        capacity margin in req/s. Default to config 'convex.tau_rel' * mu
    tolerance: float or None
        see :func:`solve_pqp`
    workers: int or None
        subsets solved in parallel (dask threads). Default from config 'experiment.workers'

    Returns
    -------
    SolveReport
        of the best subset; on ties (objectives within 1e-9) the lexicographically smallest subset.

    Raises
    ------
    InfeasibleError
        if no subset can serve the demand
    """
    p = instance.p if p is None else int(p)
    workers = config_value('experiment.workers', workers)
    if not 1 <= p <= instance.n_facilities:
        raise InstanceError("p must be in [1, %d]. Got %d" % (instance.n_facilities, p))
    start_time = time.time()
    problems = [PqpProblem(instance, subset, tau) for subset in combinations(range(instance.n_facilities), p)]
    feasible = [problem for problem in problems if problem.is_feasible()]
    if not feasible:
        best_capacity = max(problem.capacity_sum for problem in problems)
        raise InfeasibleError("no subset of %d facilities can serve the demand %r (largest capacity %r)" % (
            p, instance.total_arrival, best_capacity), capacity_sum=best_capacity, demand_sum=instance.total_arrival)
    tasks = [dask.delayed(_solve_subset)(problem, tolerance) for problem in feasible]
    if workers > 1:
        reports = dask.compute(*tasks, scheduler='threads', num_workers=workers)
    else:
        reports = dask.compute(*tasks, scheduler='sync')
    best = None
    for report in reports:
        if best is None or report.objective < best.objective - TIE_TOLERANCE:
            best = report
    logger.debug('qp-exact p=%d: best subset %s among %d' % (p, best.subset, len(feasible)))
    return SolveReport(
        'qp-exact', best.assignment, best.objective, status=best.status, kkt_residual=best.kkt_residual,
        iterations=sum(report.iterations for report in reports), wall_time=time.time() - start_time,
        subset=best.subset, extra={'subsets': len(feasible)})
