"""
Evaluation campaigns: linearized versus exact queue-aware placement over a range of facility budgets
(campaign 1), and queue-aware versus classic placement over a factor grid (campaign 2).
"""
import itertools
import logging
import math
from dataclasses import dataclass, field, fields

import dask
import fsspec
import numpy as np
import pandas as pd
import yaml
from scipy import stats

from .errors import DominanceViolation, InfeasibleError, NoConvergenceError, ParameterError
from .instance import DEMAND_KINDS, DemandSpec, Instance, build_bipartite, generate_demand, read_topology
from .solvers import SOLVERS, solve
from .utils import available_samples, config_value, derive_seed, get_sample_file, timing

logger = logging.getLogger('qdplace.experiment')

RECORD_COLUMNS = ['topology', 'mu_hat', 'dist', 'rho_hat', 'p', 'realization', 'solver', 'rt_s', 'wall_s', 'status']
GROUP_COLUMNS = ['topology', 'mu_hat', 'dist', 'rho_hat', 'p']

# share of the candidate facilities needed at full utilization
_P_MIN_SHARE = 0.3


@dataclass(frozen=True)
class CampaignParams:
    """quantities derived from a topology and a (mu_hat, rho_hat) factor pair"""
    n_nodes: int
    n_facilities: int
    p_min: int
    lambda_hat: float
    p_hat: int
    multiplier: float

    @property
    def utilization(self):
        """expected utilization of the p_hat open facilities"""
        return self.p_min / self.p_hat


def utilization_multiplier(rho_hat):
    """share `a` of the candidate facilities to open to target utilization `rho_hat`"""
    if not 0 < rho_hat <= 1:
        raise ParameterError("rho_hat must be in (0, 1]. Got %r" % rho_hat)
    return round(_P_MIN_SHARE / rho_hat, 2)


def derive_campaign_params(topology, mu_hat, rho_hat, facility_cap=None):
    """
    Derive the instance sizes of a campaign 2 configuration.

    |F| = min(|N|, facility_cap), p_min = floor(0.3 |F|), lambda_hat = mu_hat p_min / |N| and
    p_hat = floor(a |F|) with a = round(0.3 / rho_hat, 2).

    Parameters
    ----------
    topology: Topology or int
        a topology, or its node count
    mu_hat: float
        service rate, req/s
    rho_hat: float
        target utilization, in (0, 1]
    facility_cap: int or None
        Default from config 'experiment.facility_cap'

    Returns
    -------
    CampaignParams

    Raises
    ------
    ParameterError
        if p_min is 0 (topology too small) or p_hat is not in [1, |F|]
    """
    facility_cap = config_value('experiment.facility_cap', facility_cap)
    n_nodes = topology if isinstance(topology, (int, np.integer)) else len(topology)
    if not (np.isfinite(mu_hat) and mu_hat > 0):
        raise ParameterError("mu_hat must be > 0. Got %r" % mu_hat)
    multiplier = utilization_multiplier(rho_hat)
    n_facilities = min(n_nodes, facility_cap)
    p_min = math.floor(_P_MIN_SHARE * n_facilities + 1e-9)
    if p_min == 0:
        raise ParameterError("%d nodes are too few: p_min = floor(%g * %d) is 0" % (
            n_nodes, _P_MIN_SHARE, n_facilities))
    p_hat = math.floor(multiplier * n_facilities + 1e-9)
    if not 1 <= p_hat <= n_facilities:
        raise ParameterError("rho_hat %r needs p = %d facilities, out of [1, %d]" % (rho_hat, p_hat, n_facilities))
    return CampaignParams(n_nodes, n_facilities, p_min, mu_hat * p_min / n_nodes, p_hat, multiplier)


def _as_count(value, name):
    try:
        count = int(value)
    except (TypeError, ValueError):
        count = None
    if isinstance(value, bool) or count is None or count != value:
        raise ParameterError("grid %s must be an integer. Got %r" % (name, value))
    return count


def _as_rates(values, name):
    try:
        rates = tuple(float(v) for v in values)
    except (TypeError, ValueError):
        raise ParameterError("grid %s must be numbers. Got %r" % (name, values))
    if any(not r > 0 for r in rates):
        raise ParameterError("grid %s must be > 0. Got %r" % (name, values))
    return rates


def _as_tuple(value):
    if isinstance(value, (list, tuple)):
        return tuple(value)
    return (value,)


@dataclass(frozen=True)
class FactorGrid:
    """
    Campaign 2 grid: every (topology, mu_hat, distribution, rho_hat) combination, `realizations` times.

    `topologies` are topology files or sample names (see :func:`qdplace.utils.available_samples`).
    """
    mu_levels: tuple
    distributions: tuple
    rho_levels: tuple
    topologies: tuple
    realizations: int
    seed: int = 0
    solvers: tuple = ('p', 'qp-lin')
    facility_cap: int = None

    def __post_init__(self):
        for name in ('mu_levels', 'distributions', 'rho_levels', 'topologies', 'solvers'):
            value = _as_tuple(getattr(self, name))
            if not value:
                raise ParameterError("grid %s must not be empty" % name)
            object.__setattr__(self, name, value)
        for name in ('mu_levels', 'rho_levels'):
            object.__setattr__(self, name, _as_rates(getattr(self, name), name))
        for name in ('realizations', 'seed'):
            object.__setattr__(self, name, _as_count(getattr(self, name), name))
        if self.facility_cap is not None:
            object.__setattr__(self, 'facility_cap', _as_count(self.facility_cap, 'facility_cap'))
        if self.realizations < 2:
            raise ParameterError("at least 2 realizations needed. Got %r" % self.realizations)
        for kind in self.distributions:
            if kind not in DEMAND_KINDS:
                raise ParameterError("unknown distribution '%s'. Allowed are %s" % (kind, DEMAND_KINDS))
        for rho in self.rho_levels:
            utilization_multiplier(rho)
        _check_solvers(self.solvers)

    @property
    def n_combinations(self):
        return len(self.mu_levels) * len(self.distributions) * len(self.rho_levels) * len(self.topologies)


@dataclass(frozen=True)
class SweepGrid:
    """
    Campaign 1 grid: `realizations` uniform demand draws of `total_arrival` req/s per topology,
    each solved for every budget in `p_values`.
    """
    topologies: tuple
    realizations: int
    p_values: tuple = (5, 6, 7, 8, 9, 10)
    facility_count: int = 10
    mu: float = 100.
    total_arrival: float = 470.
    seed: int = 0
    solvers: tuple = ('qp-lin', 'qp-exact')

    def __post_init__(self):
        for name in ('topologies', 'p_values', 'solvers'):
            value = _as_tuple(getattr(self, name))
            if not value:
                raise ParameterError("grid %s must not be empty" % name)
            object.__setattr__(self, name, value)
        for name in ('realizations', 'seed', 'facility_count'):
            object.__setattr__(self, name, _as_count(getattr(self, name), name))
        object.__setattr__(self, 'p_values', tuple(_as_count(p, 'p_values') for p in self.p_values))
        object.__setattr__(self, 'mu', _as_rates([self.mu], 'mu')[0])
        object.__setattr__(self, 'total_arrival', _as_rates([self.total_arrival], 'total_arrival')[0])
        if self.realizations < 1:
            raise ParameterError("at least 1 realization needed. Got %r" % self.realizations)
        if any(not 1 <= p <= self.facility_count for p in self.p_values):
            raise ParameterError("p values %s out of [1, %d]" % (self.p_values, self.facility_count))
        _check_solvers(self.solvers)


def _check_solvers(solvers):
    if len(solvers) != 2 or solvers[0] == solvers[1]:
        raise ParameterError("a grid compares 2 distinct solvers, baseline first. Got %s" % (solvers,))
    for solver in solvers:
        if solver not in SOLVERS:
            raise ParameterError("unknown solver '%s'. Allowed are %s" % (solver, SOLVERS))


def read_grid(path):
    """
    read a grid yaml file. The 'campaign' key (1 or 2) selects :class:`SweepGrid` or :class:`FactorGrid`,
    the other keys are the grid fields.

    Raises
    ------
    ParameterError
        on malformed files, unknown keys or invalid values
    """
    with fsspec.open(path, 'r', encoding='utf-8') as f:
        try:
            doc = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ParameterError("malformed grid file %s: %s" % (path, e))
    if not isinstance(doc, dict):
        raise ParameterError("grid file %s must be a mapping" % path)
    doc = dict(doc)
    campaign = doc.pop('campaign', None)
    cls = {1: SweepGrid, 2: FactorGrid}.get(campaign)
    if cls is None:
        raise ParameterError("grid file %s: 'campaign' must be 1 or 2. Got %r" % (path, campaign))
    allowed = {f.name for f in fields(cls)}
    unknown = set(doc) - allowed
    if unknown:
        raise ParameterError("grid file %s: unknown keys %s" % (path, sorted(unknown)))
    try:
        return cls(**doc)
    except (TypeError, ValueError) as e:
        raise ParameterError("grid file %s: %s" % (path, e))


def load_topology(ref):
    """topology from a file path or url, or from a sample name"""
    if ref in available_samples('topologies'):
        ref = get_sample_file(ref, 'topologies')
    return read_topology(ref)


@dataclass(frozen=True)
class ExperimentRecord:
    """
    Outcome of one solver on one configuration.

    `rt_s` is the exact response time of the solution (nan if infeasible, inf if a facility is saturated).
    The instance and the assignment are kept for audit, but not exported.
    """
    topology: str
    mu_hat: float
    dist: str
    rho_hat: float
    p: int
    realization: int
    solver: str
    rt_s: float
    wall_s: float
    status: str
    instance: Instance = field(default=None, repr=False, compare=False)
    assignment: object = field(default=None, repr=False, compare=False)

    @property
    def sort_key(self):
        return (self.topology, self.mu_hat, self.dist, self.rho_hat, self.p, self.realization, self.solver)


def _solve_record(instance, solver, labels):
    try:
        # subsets are solved sequentially: configurations are already parallel
        kwargs = {'workers': 1} if solver == 'qp-exact' else {}
        report = solve(instance, solver, **kwargs)
        return ExperimentRecord(solver=solver, rt_s=report.objective, wall_s=report.wall_time, status=report.status,
                                instance=instance, assignment=report.assignment, **labels)
    except InfeasibleError as e:
        logger.info('%s infeasible on %s: %s' % (solver, labels, e))
        return ExperimentRecord(solver=solver, rt_s=np.nan, wall_s=0., status='infeasible', instance=instance,
                                **labels)
    except NoConvergenceError as e:
        logger.warning('%s did not converge on %s: %s' % (solver, labels, e))
        best = e.best
        return ExperimentRecord(solver=solver, rt_s=np.nan if best is None else best.objective,
                                wall_s=0. if best is None else best.wall_time, status='no-convergence',
                                instance=instance, assignment=None if best is None else best.assignment, **labels)


def _run_factor_configuration(skeleton, name, grid, mu_hat, dist, rho_hat, realization, seed):
    params = derive_campaign_params(len(skeleton.topology), mu_hat, rho_hat, facility_cap=grid.facility_cap)
    arrival = generate_demand(skeleton, DemandSpec(dist, params.lambda_hat, seed))
    instance = Instance.from_skeleton(skeleton, arrival, mu_hat, params.p_hat)
    labels = dict(topology=name, mu_hat=float(mu_hat), dist=dist, rho_hat=float(rho_hat), p=params.p_hat,
                  realization=realization)
    return [_solve_record(instance, solver, labels) for solver in grid.solvers]


def _run_sweep_configuration(skeleton, name, grid, realization, seed):
    arrival = generate_demand(skeleton, DemandSpec('uniform-normalized', grid.total_arrival, seed))
    records = []
    for p in grid.p_values:
        instance = Instance.from_skeleton(skeleton, arrival, grid.mu, p)
        labels = dict(topology=name, mu_hat=float(grid.mu), dist='uniform-normalized',
                      rho_hat=grid.total_arrival / (p * grid.mu), p=p, realization=realization)
        records.extend(_solve_record(instance, solver, labels) for solver in grid.solvers)
    return records


def _compute(tasks, workers):
    if workers > 1:
        results = dask.compute(*tasks, scheduler='threads', num_workers=workers)
    else:
        results = dask.compute(*tasks, scheduler='sync')
    records = [record for result in results for record in result]
    return sorted(records, key=lambda r: r.sort_key)


@timing(logger.info)
def run_campaign_1(grid, workers=None):
    """
    Run every solver of a :class:`SweepGrid` on every (topology, realization, p).

    Demand realizations are shared by all budgets of a topology, so that records of a realization form
    a response time versus p curve.

    Returns
    -------
    list of ExperimentRecord
        sorted by configuration, realization and solver
    """
    workers = config_value('experiment.workers', workers)
    tasks = []
    for it, ref in enumerate(grid.topologies):
        topology = load_topology(ref)
        skeleton = build_bipartite(topology, grid.facility_count)
        for realization in range(grid.realizations):
            seed = derive_seed(grid.seed, 1, it, realization)
            tasks.append(dask.delayed(_run_sweep_configuration)(skeleton, topology.name, grid, realization, seed))
    return _compute(tasks, workers)


@timing(logger.info)
def run_campaign_2(grid, workers=None):
    """
    Run every solver of a :class:`FactorGrid` on every factor combination and realization.

    A realization draws the same demand for all `rho_levels`, only the budget p_hat changes.

    Returns
    -------
    list of ExperimentRecord
        sorted by configuration, realization and solver
    """
    workers = config_value('experiment.workers', workers)
    tasks = []
    for it, ref in enumerate(grid.topologies):
        topology = load_topology(ref)
        n_facilities = derive_campaign_params(topology, grid.mu_levels[0], grid.rho_levels[0],
                                              facility_cap=grid.facility_cap).n_facilities
        skeleton = build_bipartite(topology, n_facilities)
        for (im, mu_hat), (idist, dist), rho_hat in itertools.product(
                enumerate(grid.mu_levels), enumerate(grid.distributions), grid.rho_levels):
            for realization in range(grid.realizations):
                seed = derive_seed(grid.seed, 2, it, im, idist, realization)
                tasks.append(dask.delayed(_run_factor_configuration)(
                    skeleton, topology.name, grid, mu_hat, dist, rho_hat, realization, seed))
    return _compute(tasks, workers)


def run_grid(grid, workers=None):
    """run the campaign of a :class:`SweepGrid` or a :class:`FactorGrid`"""
    if isinstance(grid, SweepGrid):
        return run_campaign_1(grid, workers=workers)
    return run_campaign_2(grid, workers=workers)


def sweep_p(instance, p_values, solver='qp-lin'):
    """
    Response time of `instance` solved for each budget in `p_values`.

    Returns
    -------
    pandas.DataFrame
        indexed by p, with columns rt_s, status, wall_s and subset. Infeasible budgets have rt_s nan.
    """
    rows = []
    for p in p_values:
        try:
            report = solve(instance.with_p(p), solver)
            rows.append({'p': p, 'rt_s': report.objective, 'status': report.status, 'wall_s': report.wall_time,
                         'subset': report.subset})
        except InfeasibleError:
            rows.append({'p': p, 'rt_s': np.nan, 'status': 'infeasible', 'wall_s': 0., 'subset': ()})
    return pd.DataFrame(rows).set_index('p')


def confidence_interval(samples, level=0.95):
    """
    Student t confidence interval of the mean.

    Parameters
    ----------
    samples: array-like
    level: float
        confidence level

    Returns
    -------
    tuple
        (mean, half_width)

    Raises
    ------
    ParameterError
        if fewer than 2 samples
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size < 2:
        raise ParameterError("at least 2 samples needed for a confidence interval. Got %d" % samples.size)
    mean = float(samples.mean())
    half_width = float(stats.t.ppf((1 + level) / 2, df=samples.size - 1) * stats.sem(samples))
    return mean, half_width


def records_to_frame(records, timings=True):
    """records as a DataFrame with columns `RECORD_COLUMNS`. Without `timings`, wall_s is 0"""
    if isinstance(records, pd.DataFrame):
        df = records[RECORD_COLUMNS].copy()
    else:
        df = pd.DataFrame([{c: getattr(r, c) for c in RECORD_COLUMNS} for r in records], columns=RECORD_COLUMNS)
    if not timings:
        df['wall_s'] = 0.
    return df


def _write_csv(df, path):
    with fsspec.open(path, 'w', encoding='utf-8', newline='') as f:
        df.to_csv(f, index=False, lineterminator='\n')


def write_records(records, path, timings=True):
    """write records csv, header `topology,mu_hat,dist,rho_hat,p,realization,solver,rt_s,wall_s,status`"""
    _write_csv(records_to_frame(records, timings=timings), path)


def read_records(path):
    """read a records csv written by :func:`write_records`"""
    with fsspec.open(path, 'r', encoding='utf-8') as f:
        return pd.read_csv(f, float_precision='round_trip')


def _interval(values, level):
    values = values[np.isfinite(values)]
    if values.size == 0:
        return np.nan, np.nan
    if values.size == 1:
        return float(values[0]), np.nan
    return confidence_interval(values, level=level)


def compare_records(records, baseline='p', candidate='qp-lin', tie_threshold=None, level=0.95):
    """
    Pair baseline and candidate records of each configuration and summarize them per factor combination.

    Δ = rt(baseline) - rt(candidate). Pairs with |Δ| below `tie_threshold` are ties. When the baseline
    is the classic 'p' solver, Δ below -`tie_threshold` contradicts the queue-aware optimality and is
    counted as a violation. The relative improvement is Δ / rt(baseline), and 1 when the baseline
    saturates a facility (infinite response time).

    Parameters
    ----------
    records: list of ExperimentRecord or pandas.DataFrame
    baseline: str
    candidate: str
    tie_threshold: float or None
        Default from config 'experiment.tie_threshold'
    level: float
        confidence level of the half widths

    Returns
    -------
    pandas.DataFrame
        one row per factor combination, sorted

    Raises
    ------
    ParameterError
        if there are no records, or a configuration lacks one of the two solvers
    """
    tie_threshold = config_value('experiment.tie_threshold', tie_threshold)
    df = records_to_frame(records)
    df = df[df['solver'].isin([baseline, candidate])]
    if df.empty:
        raise ParameterError("no %s/%s records to compare" % (baseline, candidate))
    key = GROUP_COLUMNS + ['realization']
    counts = df.groupby(key + ['solver']).size().unstack('solver').reindex(columns=[baseline, candidate])
    unpaired = (counts.isna() | (counts != 1)).any(axis=1).to_numpy()
    if unpaired.any():
        raise ParameterError("unpaired record for configuration %s" % dict(zip(key, counts.index[unpaired][0])))
    paired = df.set_index(key + ['solver'])[['rt_s', 'wall_s']].unstack('solver')

    rows = []
    for group, sub in paired.groupby(level=GROUP_COLUMNS, sort=True):
        rt_b = sub[('rt_s', baseline)].to_numpy(dtype=np.float64)
        rt_c = sub[('rt_s', candidate)].to_numpy(dtype=np.float64)
        feasible = ~np.isnan(rt_b) & ~np.isnan(rt_c)
        both_finite = feasible & np.isfinite(rt_b) & np.isfinite(rt_c)
        delta = rt_b[both_finite] - rt_c[both_finite]
        rb, rc = rt_b[feasible], rt_c[feasible]
        with np.errstate(invalid='ignore', divide='ignore'):
            relative = np.where(np.isinf(rb), np.where(np.isinf(rc), 0., 1.), (rb - rc) / rb)
        rt_b_mean, rt_b_hw = _interval(rt_b, level)
        rt_c_mean, rt_c_hw = _interval(rt_c, level)
        delta_mean, delta_hw = _interval(delta, level)
        rel_mean, _ = _interval(relative, level)
        row = dict(zip(GROUP_COLUMNS, group))
        row.update({
            'pairs': int(len(sub)),
            'infeasible': int((~feasible).sum()),
            'unstable_%s' % baseline: int(np.isinf(rt_b).sum()),
            'rt_%s_mean' % baseline: rt_b_mean,
            'rt_%s_hw' % baseline: rt_b_hw,
            'rt_%s_mean' % candidate: rt_c_mean,
            'rt_%s_hw' % candidate: rt_c_hw,
            'delta_mean': delta_mean,
            'delta_hw': delta_hw,
            'rel_improvement_mean': rel_mean,
            'ties': int((np.abs(delta) < tie_threshold).sum()),
            'violations': int((delta < -tie_threshold).sum()) if baseline == 'p' else 0,
            'wall_%s_mean' % baseline: float(np.mean(sub[('wall_s', baseline)])),
            'wall_%s_mean' % candidate: float(np.mean(sub[('wall_s', candidate)])),
        })
        rows.append(row)
    return pd.DataFrame(rows)


def check_dominance(summary):
    """
    raise :class:`DominanceViolation` if a summary row counts violations

    Raises
    ------
    DominanceViolation
        with `violations` the offending rows as dicts
    """
    bad = summary[summary['violations'] > 0]
    if not bad.empty:
        violations = bad[GROUP_COLUMNS + ['violations']].to_dict('records')
        raise DominanceViolation("%d factor combinations have classic solutions better than queue-aware ones: %s" % (
            len(violations), violations), violations=violations)


def write_summary(summary, path):
    """write a :func:`compare_records` summary csv"""
    _write_csv(summary, path)
