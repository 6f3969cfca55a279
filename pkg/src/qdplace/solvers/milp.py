"""
Mixed integer models of the placement problem, and their branch and bound solver.

Two models are built on the same variables layout (assignments `x`, then optional PWL weights `z`, then
open facility binaries `y`):

* 'qp-lin', the linearized queue-aware model, where each facility time in system is a SOS2
  convex combination of basepoints.
* 'p', the classic capacitated p-median, blind to queuing delays.
"""
import heapq
import logging
import time
from dataclasses import dataclass, field, replace

import fsspec
import numpy as np

from ..errors import InfeasibleError, ModelError, NoConvergenceError
from ..pwl import BasepointSet, linearize_preset, rescale
from ..queueing import Assignment, capped_nearest_assignment
from ..utils import config_value, timing
from .report import SolveReport
from .simplex import FEASIBILITY_TOLERANCE, LinearProgram, LpSolution, solve_lp

logger = logging.getLogger('qdplace.solvers')

# terms per line in LP text dumps
_LP_TERMS_PER_LINE = 8


@dataclass(eq=False)
class MilpModel:
    """
    A mixed integer linear program over an instance.

    Attributes
    ----------
    kind: str
        'qp-lin' or 'p'
    instance: Instance
    names: list of str
        variable names
    c, A_ub, b_ub, A_eq, b_eq, lb, ub: numpy.ndarray
        objective, constraints and bounds, as in :class:`LinearProgram`
    row_names_ub, row_names_eq: list of str
    binaries: numpy.ndarray
        indexes of the binary variables, one per facility
    sos2: tuple
        (indexes, weights) per facility, the z variables whose nonzeros must be adjacent
    basepoints: tuple of BasepointSet
        per facility basepoints, in req/s ('qp-lin' only)
    """
    kind: str
    instance: object
    names: list
    c: np.ndarray
    A_ub: np.ndarray
    b_ub: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    row_names_ub: list
    row_names_eq: list
    binaries: np.ndarray
    sos2: tuple = ()
    basepoints: tuple = ()
    presolved: dict = field(default_factory=dict)

    @property
    def n_variables(self):
        return self.c.size

    @property
    def n_binary(self):
        return self.binaries.size

    @property
    def n_continuous(self):
        return self.n_variables - self.n_binary

    @property
    def n_rows(self):
        return self.b_ub.size + self.b_eq.size

    def x_index(self, ic, jf):
        return ic * self.instance.n_facilities + jf

    def relaxation(self, lb=None, ub=None):
        """LP relaxation, binaries in [0, 1], with optional node bounds"""
        return LinearProgram(self.c, self.A_ub, self.b_ub, self.A_eq, self.b_eq,
                             self.lb if lb is None else lb, self.ub if ub is None else ub)

    def assignment(self, values):
        """Assignment from a solution vector with integral binaries"""
        n_c, n_f = self.instance.n_clients, self.instance.n_facilities
        y = np.rint(values[self.binaries]).astype(np.int64)
        x = np.clip(values[:n_c * n_f].reshape(n_c, n_f), 0., None)
        x[:, y == 0] = 0.
        return Assignment(x, y)

    def solution_vector(self, assignment):
        """
        Solution vector of an assignment, the inverse of :meth:`assignment`.

        PWL weights are the two adjacent basepoints spanning each facility load.
        """
        values = np.zeros(self.n_variables)
        values[:self.instance.n_clients * self.instance.n_facilities] = assignment.x.reshape(-1)
        values[self.binaries] = assignment.y
        for (idx, alpha), load in zip(self.sos2, assignment.loads):
            values[idx] = _adjacent_weights(alpha, load)
        return values

    def to_lp(self, path):
        """
        Dump the model in the LP text format, readable by most MILP solvers.

        SOS2 groups are written with the basepoint rank as weight.
        """
        def expr(coefs, lead=' '):
            nz = np.flatnonzero(coefs)
            terms = ['%s %r %s' % ('-' if coefs[j] < 0 else '+', abs(float(coefs[j])), self.names[j]) for j in nz]
            if not terms:
                terms = ['0 %s' % self.names[0]]
            lines = [' '.join(terms[i:i + _LP_TERMS_PER_LINE]) for i in range(0, len(terms), _LP_TERMS_PER_LINE)]
            return ('\n' + lead + '  ').join(lines)

        out = ['\\ qdplace %s model, %r' % (self.kind, self.instance), 'Minimize', ' obj: ' + expr(self.c)]
        out.append('Subject To')
        for name, row, rhs in zip(self.row_names_eq, self.A_eq, self.b_eq):
            out.append(' %s: %s = %r' % (name, expr(row), float(rhs)))
        for name, row, rhs in zip(self.row_names_ub, self.A_ub, self.b_ub):
            out.append(' %s: %s <= %r' % (name, expr(row), float(rhs)))
        out.append('Bounds')
        for j, name in enumerate(self.names):
            lo, hi = float(self.lb[j]), float(self.ub[j])
            if lo == hi:
                out.append(' %s = %r' % (name, lo))
            elif np.isfinite(hi):
                out.append(' %r <= %s <= %r' % (lo, name, hi))
            elif lo != 0:
                out.append(' %s >= %r' % (name, lo))
        out.append('Binaries')
        out.append(' ' + ' '.join(self.names[j] for j in self.binaries))
        if self.sos2:
            out.append('SOS')
            for k, (idx, _) in enumerate(self.sos2):
                pairs = ' '.join('%s:%d' % (self.names[j], s + 1) for s, j in enumerate(idx))
                out.append(' s2_%d: S2:: %s' % (self.instance.facilities[k], pairs))
        out.append('End')
        with fsspec.open(path, 'w', encoding='utf-8') as f:
            f.write('\n'.join(out) + '\n')


def _per_facility_basepoints(instance, basepoints):
    if basepoints is None:
        basepoints = linearize_preset()
    if isinstance(basepoints, BasepointSet):
        return tuple(rescale(basepoints, mu / basepoints.mu) for mu in instance.service)
    basepoints = tuple(basepoints)
    if len(basepoints) != instance.n_facilities:
        raise ModelError("%d basepoint sets for %d facilities" % (len(basepoints), instance.n_facilities))
    return basepoints


def _x_block(instance):
    """names, demand rows and per facility load rows of the assignment variables"""
    n_c, n_f = instance.n_clients, instance.n_facilities
    names = ['x_%d_%d' % (c, f) for c in instance.clients for f in instance.facilities]
    demand = np.kron(np.eye(n_c), np.ones(n_f))
    load = np.kron(np.ones(n_c), np.eye(n_f))
    return names, demand, load


def _link_rows(instance, n, y_index):
    """rows x_cf - λ_c y_f <= 0 over `n` variables, with their names"""
    n_c, n_f = instance.n_clients, instance.n_facilities
    k = np.arange(n_c * n_f)
    rows = np.zeros((k.size, n))
    rows[k, k] = 1.
    rows[k, np.tile(y_index, n_c)] = -np.repeat(instance.arrival, n_f)
    return rows, ['link_%d_%d' % (c, f) for c in instance.clients for f in instance.facilities]


def _check_budget(instance, capacities, what):
    top = float(np.sort(capacities)[::-1][:instance.p].sum())
    if instance.total_arrival > top:
        raise InfeasibleError("demand %g req/s exceeds the %s of the %d largest facilities (%g req/s)" % (
            instance.total_arrival, what, instance.p, top), capacity_sum=top, demand_sum=instance.total_arrival)


def build_qp_lin_model(instance, basepoints=None, tight=True):
    """
    Build the linearized queue-aware model.

    Facility f serves Σ_c x_cf = Σ_s α_fs z_fs, with z_f a SOS2 convex combination of its basepoints,
    and its weighted time in system costs Σ_s β_fs z_fs. The activation row Σ_c x_cf <= α_f,m-1 y_f
    closes facilities with y_f = 0.

    With `tight`, the relaxation is strengthened by the valid rows x_cf <= λ_c y_f and Σ_{s>0} z_fs <= y_f,
    which leave the integer solutions unchanged.

    Parameters
    ----------
    instance: Instance
    basepoints: BasepointSet, sequence of BasepointSet or None
        a single utilization set is rescaled by each service rate. A sequence gives one set per facility,
        in req/s. Default to the 'default' preset.
    tight: bool
        add the client-facility linking rows and the basepoint activation rows

    Returns
    -------
    MilpModel

    Raises
    ------
    ModelError
        if a basepoint set does not start at zero load
    InfeasibleError
        if the demand exceeds the linearized capacity of the p largest facilities
    """
    bps = _per_facility_basepoints(instance, basepoints)
    for jf, bp in enumerate(bps):
        if bp.alpha[0] != 0:
            raise ModelError("basepoints of facility %d must start at 0 load. Got alpha_0=%r" % (
                instance.facilities[jf], bp.alpha[0]))
    _check_budget(instance, np.array([bp.alpha[-1] for bp in bps]), 'linearized capacity')

    n_c, n_f = instance.n_clients, instance.n_facilities
    ms = [bp.m for bp in bps]
    n_x, n_z = n_c * n_f, sum(ms)
    n = n_x + n_z + n_f
    x_names, demand, load = _x_block(instance)
    z_start = n_x + np.concatenate([[0], np.cumsum(ms)[:-1]]).astype(int)
    names = x_names + ['z_%d_%d' % (f, s) for f, m in zip(instance.facilities, ms) for s in range(m)]
    names += ['y_%d' % f for f in instance.facilities]
    y_index = np.arange(n_x + n_z, n)

    Lambda = instance.total_arrival
    c = np.zeros(n)
    c[:n_x] = instance.rtt.reshape(-1) / Lambda
    for jf, bp in enumerate(bps):
        c[z_start[jf]:z_start[jf] + ms[jf]] = bp.beta / Lambda

    A_eq = np.zeros((n_c + 2 * n_f + 1, n))
    b_eq = np.zeros(n_c + 2 * n_f + 1)
    A_eq[:n_c, :n_x] = demand
    b_eq[:n_c] = instance.arrival
    A_ub = np.zeros((n_f, n))
    sos2 = []
    for jf, bp in enumerate(bps):
        idx = np.arange(z_start[jf], z_start[jf] + ms[jf])
        A_eq[n_c + jf, :n_x] = load[jf]
        A_eq[n_c + jf, idx] = -bp.alpha
        A_eq[n_c + n_f + jf, idx] = 1.
        b_eq[n_c + n_f + jf] = 1.
        A_ub[jf, :n_x] = load[jf]
        A_ub[jf, y_index[jf]] = -bp.alpha[-1]
        sos2.append((idx, bp.alpha))
    A_eq[-1, y_index] = 1.
    b_eq[-1] = instance.p
    row_names_eq = (['demand_%d' % c_ for c_ in instance.clients] + ['load_%d' % f for f in instance.facilities]
                    + ['convex_%d' % f for f in instance.facilities] + ['budget'])
    row_names_ub = ['open_%d' % f for f in instance.facilities]
    if tight:
        link, link_names = _link_rows(instance, n, y_index)
        active = np.zeros((n_f, n))
        for jf, (idx, _) in enumerate(sos2):
            active[jf, idx[1:]] = 1.
            active[jf, y_index[jf]] = -1.
        A_ub = np.vstack([A_ub, link, active])
        row_names_ub += link_names + ['zopen_%d' % f for f in instance.facilities]

    lb = np.zeros(n)
    ub = np.full(n, np.inf)
    ub[y_index] = 1.
    presolved = _presolve(instance, lb, y_index)
    return MilpModel('qp-lin', instance, names, c, A_ub, np.zeros(A_ub.shape[0]), A_eq, b_eq, lb, ub,
                     row_names_ub, row_names_eq, y_index, sos2=tuple(sos2), basepoints=bps, presolved=presolved)


def build_p_model(instance, tight=True):
    """
    Build the classic capacitated p-median model: minimize the average round trip time,
    with Σ_c x_cf <= μ_f y_f and exactly p open facilities. With `tight`, the linking rows
    x_cf <= λ_c y_f strengthen the relaxation.

    Returns
    -------
    MilpModel

    Raises
    ------
    InfeasibleError
        if the demand exceeds the capacity of the p largest facilities
    """
    _check_budget(instance, instance.service, 'capacity')
    n_c, n_f = instance.n_clients, instance.n_facilities
    n_x = n_c * n_f
    n = n_x + n_f
    x_names, demand, load = _x_block(instance)
    names = x_names + ['y_%d' % f for f in instance.facilities]
    y_index = np.arange(n_x, n)

    c = np.zeros(n)
    c[:n_x] = instance.rtt.reshape(-1) / instance.total_arrival
    A_eq = np.zeros((n_c + 1, n))
    A_eq[:n_c, :n_x] = demand
    A_eq[-1, y_index] = 1.
    b_eq = np.append(instance.arrival, instance.p)
    A_ub = np.zeros((n_f, n))
    A_ub[:, :n_x] = load
    A_ub[np.arange(n_f), y_index] = -instance.service
    row_names_ub = ['capacity_%d' % f for f in instance.facilities]
    if tight:
        link, link_names = _link_rows(instance, n, y_index)
        A_ub = np.vstack([A_ub, link])
        row_names_ub += link_names
    lb = np.zeros(n)
    ub = np.full(n, np.inf)
    ub[y_index] = 1.
    presolved = _presolve(instance, lb, y_index)
    return MilpModel('p', instance, names, c, A_ub, np.zeros(A_ub.shape[0]), A_eq, b_eq, lb, ub, row_names_ub,
                     ['demand_%d' % c_ for c_ in instance.clients] + ['budget'], y_index, presolved=presolved)


def _presolve(instance, lb, y_index):
    # the budget leaves no choice when p == |F|
    if instance.p == instance.n_facilities:
        lb[y_index] = 1.
        return {'fixed_open': instance.n_facilities}
    return {}


def _adjacent_weights(alpha, load):
    # convex combination of the two basepoints around `load`
    s = int(np.clip(np.searchsorted(alpha, load, side='right') - 1, 0, alpha.size - 2))
    t = float(np.clip((load - alpha[s]) / (alpha[s + 1] - alpha[s]), 0., 1.))
    weights = np.zeros(alpha.size)
    weights[s], weights[s + 1] = 1. - t, t
    return weights


def sos2_check_repair(solution, model, tolerance=None):
    """
    Check SOS2 adjacency of the z variables of a solution, and repair violations when possible.

    A group with nonzeros that are not two adjacent entries is re-expressed as the adjacent pair of
    basepoints spanning the same load. The repair is kept when it does not increase the objective, which
    always holds for convex curves. Otherwise the group is flagged for SOS2 branching.

    Parameters
    ----------
    solution: LpSolution
    model: MilpModel
    tolerance: float or None
        values below are zeros. Default from config 'milp.integrality_tol'

    Returns
    -------
    LpSolution
        with repaired values, and `sos2_flagged` the indexes of the groups left violated
    """
    tol = config_value('milp.integrality_tol', tolerance)
    values = solution.x.copy()
    flagged = []
    for k, (idx, alpha) in enumerate(model.sos2):
        z = values[idx]
        nz = np.flatnonzero(z > tol)
        if nz.size <= 1 or (nz.size == 2 and nz[1] - nz[0] == 1):
            continue
        costs = model.c[idx]
        load = float(alpha @ z)
        cost = float(costs @ z)
        adjacent = _adjacent_weights(alpha, load)
        if costs @ adjacent <= cost + 1e-12 * max(1., abs(cost)):
            logger.debug('sos2 group %d repaired: %s -> %s' % (k, z, adjacent))
            values[idx] = adjacent
        else:
            flagged.append(k)
    return replace(solution, x=values, objective=float(model.c @ values), sos2_flagged=tuple(flagged))


def _prunable(bound, incumbent, gap):
    return incumbent is not None and bound >= incumbent.objective - gap * max(abs(incumbent.objective), 1e-12)


def _greedy_open(instance):
    """p facilities added one at a time, each the one lowering most the demand weighted nearest rtt"""
    chosen = []
    nearest = np.full(instance.n_clients, np.inf)
    for _ in range(instance.p):
        costs = instance.arrival @ np.minimum(nearest[:, np.newaxis], instance.rtt)
        costs[chosen] = np.inf
        j = int(np.argmin(costs))
        chosen.append(j)
        nearest = np.minimum(nearest, instance.rtt[:, j])
    return sorted(chosen)


def heuristic_incumbent(model):
    """
    Feasible solution of `model` from the greedy open set and the capacity capped closest assignment.

    Returns
    -------
    LpSolution or None
        None when the greedy facilities cannot hold the demand
    """
    instance = model.instance
    if model.kind == 'qp-lin':
        capacity = np.array([bp.alpha[-1] for bp in model.basepoints])
    else:
        capacity = instance.service
    try:
        assignment = capped_nearest_assignment(instance, _greedy_open(instance), capacity=capacity)
    except InfeasibleError:
        return None
    values = model.solution_vector(assignment)
    if model.relaxation().residual(values) > FEASIBILITY_TOLERANCE * max(1., instance.total_arrival):
        return None
    return LpSolution(values, float(model.c @ values), 'optimal')


def _rounded(model, sol, lb, ub, tol):
    # open the p largest y of a fractional relaxation, and solve the remaining LP
    y = sol.x[model.binaries]
    top = np.lexsort((np.arange(y.size), -y))[:model.instance.p]
    lb, ub = lb.copy(), ub.copy()
    lb[model.binaries] = ub[model.binaries] = 0.
    lb[model.binaries[top]] = ub[model.binaries[top]] = 1.
    rounded = solve_lp(model.relaxation(lb, ub))
    if not rounded.optimal:
        return None, rounded.iterations
    rounded = sos2_check_repair(rounded, model, tolerance=tol)
    return (None if rounded.sos2_flagged else rounded), rounded.iterations


@timing(logger.debug)
def solve_milp(model, gap=None, node_limit=None, integrality_tol=None):
    """
    Solve a :class:`MilpModel` by best-first branch and bound.

    The search starts from :func:`heuristic_incumbent`, and a fractional root relaxation is rounded once to its
    p largest binaries. Node bounds are LP relaxations with binaries in [0, 1]. The most fractional binary is
    branched on first (ties to the smallest facility index). Integral leaves go through
    :func:`sos2_check_repair`, and flagged SOS2 groups are branched on at the middle of their nonzeros.

    Parameters
    ----------
    model: MilpModel
    gap: float or None
        relative optimality gap. Default from config 'milp.gap'
    node_limit: int or None
        Default from config 'milp.node_limit'
    integrality_tol: float or None
        Default from config 'milp.integrality_tol'

    Returns
    -------
    SolveReport
        solver is `model.kind`, objective the exact response time of the incumbent. `extra` holds the model
        objective, the node count, the final gap and the heuristic model objective (nan without one).

    Raises
    ------
    InfeasibleError
        if no binary assignment is feasible
    NoConvergenceError
        if the node limit is reached with a gap above `gap`. `best` is the incumbent report, if any.
    """
    start = time.time()
    gap_tol = config_value('milp.gap', gap)
    node_limit = config_value('milp.node_limit', node_limit)
    tol = config_value('milp.integrality_tol', integrality_tol)

    incumbent = heuristic_incumbent(model)
    seed = np.nan if incumbent is None else incumbent.objective
    logger.debug('%s heuristic incumbent %.9g' % (model.kind, seed))
    heap = [(-np.inf, 0, model.lb.copy(), model.ub.copy())]
    seq = 1
    nodes = 0
    pivots = 0
    limit_hit = False
    while heap:
        bound, _, lb, ub = heap[0]
        if _prunable(bound, incumbent, gap_tol):
            # best-first: every remaining node is worse
            heap = []
            break
        if nodes >= node_limit:
            limit_hit = True
            break
        heapq.heappop(heap)
        nodes += 1
        sol = solve_lp(model.relaxation(lb, ub))
        pivots += sol.iterations
        if sol.status == 'unbounded':
            raise ModelError("%s relaxation is unbounded" % model.kind)
        if not sol.optimal or _prunable(sol.objective, incumbent, gap_tol):
            continue

        y = sol.x[model.binaries]
        fractionality = np.abs(y - np.rint(y))
        if fractionality.max(initial=0.) > tol:
            if nodes == 1:
                rounded, iterations = _rounded(model, sol, lb, ub, tol)
                pivots += iterations
                if rounded is not None and (incumbent is None or rounded.objective < incumbent.objective):
                    logger.debug('%s root rounding: new incumbent %.9g' % (model.kind, rounded.objective))
                    incumbent = rounded
            j = int(model.binaries[np.argmax(fractionality)])
            for side in (0., 1.):
                child_lb, child_ub = lb.copy(), ub.copy()
                child_lb[j] = child_ub[j] = side
                heapq.heappush(heap, (sol.objective, seq, child_lb, child_ub))
                seq += 1
            continue

        values = sol.x.copy()
        values[model.binaries] = np.rint(y)
        sol = sos2_check_repair(replace(sol, x=values), model, tolerance=tol)
        if sol.sos2_flagged:
            idx, _ = model.sos2[sol.sos2_flagged[0]]
            nz = np.flatnonzero(sol.x[idx] > tol)
            r = (int(nz[0]) + int(nz[-1])) // 2
            for zeroed in (idx[r + 1:], idx[:r]):
                child_ub = ub.copy()
                child_ub[zeroed] = 0.
                heapq.heappush(heap, (sol.objective, seq, lb.copy(), child_ub))
                seq += 1
            continue
        if incumbent is None or sol.objective < incumbent.objective:
            logger.debug('%s node %d: new incumbent %.9g' % (model.kind, nodes, sol.objective))
            incumbent = sol

    if incumbent is None:
        if limit_hit:
            raise NoConvergenceError("%s: node limit %d reached without a feasible solution" % (
                model.kind, node_limit))
        raise InfeasibleError("%s: no feasible binary assignment" % model.kind)

    lower = min(heap[0][0], incumbent.objective) if heap else incumbent.objective
    final_gap = (incumbent.objective - lower) / max(abs(incumbent.objective), 1e-12)
    report = SolveReport.from_assignment(
        model.instance, model.assignment(incumbent.x), model.kind, iterations=nodes,
        wall_time=time.time() - start,
        extra={'model_objective': incumbent.objective, 'nodes': nodes, 'gap': final_gap, 'lp_pivots': pivots,
               'heuristic_objective': seed})
    if limit_hit and final_gap > gap_tol:
        raise NoConvergenceError("%s: node limit %d reached, gap %g" % (model.kind, node_limit, final_gap),
                                 best=report, gap=final_gap)
    logger.info('%s solved: %d nodes, model objective %.9g, response time %.9g s' % (
        model.kind, nodes, incumbent.objective, report.objective))
    return report


def solve_qp_lin(instance, basepoints=None, tight=None, **kwargs):
    """build and solve the linearized queue-aware model. kwargs go to :func:`solve_milp`"""
    tight = config_value('milp.tight', tight)
    return solve_milp(build_qp_lin_model(instance, basepoints=basepoints, tight=tight), **kwargs)


def solve_p(instance, tight=None, **kwargs):
    """build and solve the classic p-median model. `tight` defaults to config 'milp.tight'"""
    return solve_milp(build_p_model(instance, tight=config_value('milp.tight', tight)), **kwargs)
