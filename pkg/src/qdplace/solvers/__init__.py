"""
solvers module, for queue-aware (exact and linearized) and classic placement.
"""
__all__ = ['SOLVERS', 'solve', 'SolveReport', 'write_report', 'PqpProblem', 'pqp_objective', 'pqp_gradient',
           'pqp_hessian', 'solve_pqp', 'solve_qp_exact', 'LinearProgram', 'LpSolution', 'solve_lp', 'MilpModel',
           'build_qp_lin_model', 'build_p_model', 'solve_milp', 'sos2_check_repair', 'heuristic_incumbent',
           'solve_qp_lin', 'solve_p']
from .report import SolveReport, write_report
from .convex import PqpProblem, pqp_objective, pqp_gradient, pqp_hessian, solve_pqp, solve_qp_exact
from .simplex import LinearProgram, LpSolution, solve_lp
from .milp import (MilpModel, build_qp_lin_model, build_p_model, heuristic_incumbent, solve_milp, sos2_check_repair,
                   solve_qp_lin, solve_p)

SOLVERS = ('p', 'qp-lin', 'qp-exact')


def solve(instance, solver='qp-lin', basepoints=None, **kwargs):
    """
    Solve an instance with a named solver.

    Parameters
    ----------
    instance: Instance
    solver: str
        'p' (classic p-median), 'qp-lin' (linearized queue-aware model) or 'qp-exact'
        (subset enumeration with convex sub-problems)
    basepoints: BasepointSet, sequence of BasepointSet or None
        'qp-lin' only
    kwargs:
        passed to the solver

    Returns
    -------
    SolveReport
    """
    if solver == 'p':
        return solve_p(instance, **kwargs)
    if solver == 'qp-lin':
        return solve_qp_lin(instance, basepoints=basepoints, **kwargs)
    if solver == 'qp-exact':
        return solve_qp_exact(instance, **kwargs)
    raise KeyError('solver %s not found. Available: %s' % (solver, ', '.join(SOLVERS)))
