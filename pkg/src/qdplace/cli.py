"""
qdplace command line: instance generation, linearization, solving and experiments.

Exit codes: 0 success, 2 usage or validation error, 3 infeasible, 4 no convergence, 5 dominance violation.
"""
import logging
import os
from contextlib import contextmanager
from typing import Optional

import typer

from .errors import (DominanceViolation, DomainError, InfeasibleError, InstanceError, ModelError,
                     NoConvergenceError, NumericalError, ParameterError, AssignmentError)
from .experiment import (check_dominance, compare_records, load_topology, read_grid, read_records, records_to_frame,
                         run_grid, write_records, write_summary)
from .instance import DemandSpec, Instance, build_bipartite, generate_demand, read_instance, write_instance
from .pwl import imamoto_extended, linearize, uniform_basepoints, write_basepoints
from .queueing import write_assignment
from .solvers import SOLVERS, build_p_model, build_qp_lin_model, solve, write_report
from .utils import available_samples, config_value, get_sample_file

logger = logging.getLogger('qdplace')

EXIT_VALIDATION = 2
EXIT_INFEASIBLE = 3
EXIT_NO_CONVERGENCE = 4
EXIT_VIOLATION = 5

app = typer.Typer(help='queue-aware capacitated p-median placement')
state = {'verbose': False}


@contextmanager
def _exit_codes():
    try:
        yield
    except (InstanceError, ParameterError, ModelError, DomainError, AssignmentError, FileNotFoundError,
            KeyError) as e:
        typer.echo('Error: %s' % e, err=True)
        raise typer.Exit(code=EXIT_VALIDATION)
    except InfeasibleError as e:
        typer.echo('Infeasible: %s' % e, err=True)
        raise typer.Exit(code=EXIT_INFEASIBLE)
    except NoConvergenceError as e:
        typer.echo('No convergence: %s (gap %s)' % (e, e.gap), err=True)
        raise typer.Exit(code=EXIT_NO_CONVERGENCE)
    except NumericalError as e:
        typer.echo('Numerical failure: %s (condition number %s)' % (e, e.condition), err=True)
        raise typer.Exit(code=EXIT_NO_CONVERGENCE)
    except DominanceViolation as e:
        typer.echo('Dominance violation: %s' % e, err=True)
        raise typer.Exit(code=EXIT_VIOLATION)


def _echo_flags(**flags):
    if state['verbose']:
        for name, value in flags.items():
            typer.echo('%s=%r' % (name, value), err=True)


@app.callback()
def main(verbose: bool = typer.Option(False, '--verbose', '-v', help='debug logging, echo parsed numeric flags')):
    state['verbose'] = verbose
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING,
                        format='%(asctime)s %(name)s %(levelname)s %(message)s')


@app.command('gen-instance')
def gen_instance(
        topology: str = typer.Argument(..., help='topology json file, or sample name (%s)' % ', '.join(
            available_samples('topologies'))),
        out: str = typer.Option(..., '--out', '-o', help='instance json file to write'),
        facilities: int = typer.Option(10, help='number of candidate facilities (highest degree nodes)'),
        demand: str = typer.Option('uniform-normalized',
                                   help='uniform-normalized, normal-narrow, normal-wide or exponential'),
        target: float = typer.Option(470., help='total arrival rate (uniform-normalized) or mean per client, req/s'),
        mu: float = typer.Option(100., help='service rate of every facility, req/s'),
        p: int = typer.Option(5, help='number of facilities to open'),
        seed: int = typer.Option(0, help='random seed of the demand draw'),
        local_loop_ms: Optional[float] = typer.Option(None, help='rtt of co-located client and facility, ms')):
    """draw an instance from a topology"""
    _echo_flags(facilities=facilities, target=target, mu=mu, p=p, seed=seed, local_loop_ms=local_loop_ms)
    with _exit_codes():
        topo = load_topology(topology)
        local_loop = None if local_loop_ms is None else local_loop_ms / 1000.
        skeleton = build_bipartite(topo, facilities, local_loop_latency=local_loop)
        arrival = generate_demand(skeleton, DemandSpec(demand, target, seed))
        instance = Instance.from_skeleton(skeleton, arrival, mu, p)
        write_instance(instance, out)
    typer.echo('clients=%d facilities=%d total_arrival=%.6g req/s feasible=%s' % (
        instance.n_clients, instance.n_facilities, instance.total_arrival, instance.is_feasible()))


@app.command('linearize')
def linearize_cmd(
        out: Optional[str] = typer.Option(None, '--out', '-o', help='basepoints csv file to write'),
        m: int = typer.Option(6, min=3, help='number of basepoints'),
        interval_end: float = typer.Option(0.96, help='last basepoint, utilization in (0, 1)'),
        curve: str = typer.Option('weighted_tis', help='registered curve name'),
        uniform: bool = typer.Option(False, help='evenly spaced basepoints instead of equal errors')):
    """compute PWL basepoints and print their maximal error"""
    _echo_flags(m=m, interval_end=interval_end)
    with _exit_codes():
        if not 0 < interval_end < 1:
            raise ParameterError("interval_end must be in (0, 1). Got %r" % interval_end)
        if uniform:
            bp = uniform_basepoints(curve, m=m, interval_end=interval_end)
        else:
            bp = imamoto_extended(curve, m=m, interval_end=interval_end)
        if out is not None:
            write_basepoints(bp, out)
    typer.echo('epsilon=%.6f' % bp.epsilon)


@app.command('solve')
def solve_cmd(
        instance_path: str = typer.Argument(..., metavar='INSTANCE', help='instance json file'),
        solver: str = typer.Option('qp-lin', help='one of %s' % ', '.join(SOLVERS)),
        out: Optional[str] = typer.Option(None, '--out', '-o', help='report json file to write'),
        assignment: Optional[str] = typer.Option(None, help='assignment json file to write'),
        dump_lp: Optional[str] = typer.Option(None, help='write the MILP model in LP text format (p, qp-lin)'),
        p: Optional[int] = typer.Option(None, help='number of facilities to open, overrides the instance'),
        m: Optional[int] = typer.Option(None, min=3, help='qp-lin basepoints count'),
        interval_end: Optional[float] = typer.Option(None, help='qp-lin last basepoint, utilization in (0, 1)'),
        jobs: int = typer.Option(1, min=1, help='qp-exact subsets solved in parallel'),
        no_timings: bool = typer.Option(False, '--no-timings', help='write wall times as 0')):
    """solve an instance"""
    _echo_flags(p=p, m=m, interval_end=interval_end, jobs=jobs)
    with _exit_codes():
        if solver not in SOLVERS:
            raise ParameterError("unknown solver '%s'. Allowed are %s" % (solver, ', '.join(SOLVERS)))
        instance = read_instance(instance_path)
        if p is not None:
            instance = instance.with_p(p)
        basepoints = None
        if m is not None or interval_end is not None:
            basepoints = linearize('weighted_tis', m=m, interval_end=interval_end)
        if dump_lp is not None:
            if solver == 'qp-exact':
                raise ParameterError("qp-exact has no linear model to dump")
            tight = config_value('milp.tight')
            if solver == 'p':
                model = build_p_model(instance, tight=tight)
            else:
                model = build_qp_lin_model(instance, basepoints, tight=tight)
            model.to_lp(dump_lp)
        kwargs = {'workers': jobs} if solver == 'qp-exact' else {}
        if solver == 'qp-lin':
            kwargs['basepoints'] = basepoints
        report = solve(instance, solver, **kwargs)
        if out is not None:
            write_report(report, instance, out, timings=not no_timings)
        if assignment is not None:
            write_assignment(instance, report.assignment, assignment)
    typer.echo('solver=%s objective=%.9f s p=%d wall=%.3f s status=%s subset=%s' % (
        report.solver, report.objective, report.assignment.p, 0. if no_timings else report.wall_time,
        report.status, list(report.subset)))


@app.command('experiment')
def experiment_cmd(
        grid: str = typer.Argument(..., help='grid yaml file, or sample name (%s)' % ', '.join(
            available_samples('grids'))),
        out_dir: str = typer.Option('.', help='directory of records.csv and summary.csv'),
        jobs: int = typer.Option(1, min=1, help='configurations solved in parallel'),
        no_timings: bool = typer.Option(False, '--no-timings', help='write wall times as 0')):
    """run a campaign, write records and summary csv files"""
    _echo_flags(jobs=jobs)
    with _exit_codes():
        if grid in available_samples('grids'):
            grid = get_sample_file(grid, 'grids')
        factors = read_grid(grid)
        records = run_grid(factors, workers=jobs)
        os.makedirs(out_dir, exist_ok=True)
        write_records(records, os.path.join(out_dir, 'records.csv'), timings=not no_timings)
        baseline, candidate = factors.solvers
        summary = compare_records(records_to_frame(records, timings=not no_timings), baseline=baseline,
                                  candidate=candidate)
        write_summary(summary, os.path.join(out_dir, 'summary.csv'))
        typer.echo('%d records, %d factor combinations written to %s' % (len(records), len(summary), out_dir))
        check_dominance(summary)


@app.command('compare')
def compare_cmd(
        records: str = typer.Argument(..., help='records csv file'),
        out: str = typer.Option('summary.csv', '--out', '-o', help='summary csv file to write'),
        baseline: str = typer.Option('p', help='baseline solver'),
        candidate: str = typer.Option('qp-lin', help='candidate solver'),
        tie_threshold: Optional[float] = typer.Option(None, help='response time difference counted as tie, s')):
    """summarize paired records"""
    _echo_flags(tie_threshold=tie_threshold)
    with _exit_codes():
        summary = compare_records(read_records(records), baseline=baseline, candidate=candidate,
                                  tie_threshold=tie_threshold)
        write_summary(summary, out)
        typer.echo('%d factor combinations written to %s' % (len(summary), out))
        check_dominance(summary)
