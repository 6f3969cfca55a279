import json
import logging
from dataclasses import dataclass, field

import fsspec
import numpy as np

from ..errors import SteadyStateError
from ..queueing import facility_table, response_time

logger = logging.getLogger('qdplace.solvers')


@dataclass(frozen=True)
class SolveReport:
    """
    Outcome of a solver.

    `objective` is always the exact response time of `assignment` (seconds), whatever the solver optimized.
    It is infinite, with status 'unstable', when a facility is loaded at its service rate.
    """
    solver: str
    assignment: object
    objective: float
    status: str = 'optimal'
    kkt_residual: float = np.nan
    iterations: int = 0
    wall_time: float = 0.
    subset: tuple = ()
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_assignment(cls, instance, assignment, solver, **kwargs):
        """build a report whose objective is the exact response time of `assignment`"""
        try:
            objective = response_time(instance, assignment)
            status = kwargs.pop('status', 'optimal')
        except SteadyStateError as e:
            logger.info('%s solution is not steady: %s' % (solver, e))
            objective = np.inf
            kwargs.pop('status', None)
            status = 'unstable'
        subset = kwargs.pop('subset', None)
        if subset is None:
            subset = tuple(instance.facilities[j] for j in assignment.open_facilities)
        return cls(solver, assignment, objective, status=status, subset=tuple(subset), **kwargs)

    def to_dict(self, instance, timings=True):
        table = facility_table(instance, self.assignment)
        opened = table[table['open']]
        return {
            'solver': self.solver,
            'status': self.status,
            'objective_s': None if not np.isfinite(self.objective) else self.objective,
            'subset': list(self.subset),
            'load_rps': {str(k): float(v) for k, v in opened['load_rps'].items()},
            'utilization': {str(k): float(v) for k, v in opened['utilization'].items()},
            'kkt_residual': None if not np.isfinite(self.kkt_residual) else self.kkt_residual,
            'iterations': self.iterations,
            'wall_s': self.wall_time if timings else 0.,
            'extra': {k: _jsonable(v) for k, v in self.extra.items()},
        }


def _jsonable(value):
    if isinstance(value, (np.floating, float)):
        return float(value) if np.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    return value


def write_report(report, instance, path, timings=True):
    """
    write a solve report json file: objective, subset, per facility load and utilization,
    kkt residual, iterations and wall time.

    Parameters
    ----------
    report: SolveReport
    instance: Instance
    path: str
    timings: bool
        if False, `wall_s` is written as 0 so that the file only depends on the inputs
    """
    with fsspec.open(path, 'w', encoding='utf-8') as f:
        json.dump(report.to_dict(instance, timings=timings), f, indent=1)
        f.write('\n')
