"""
M/M/1 time in system and the exact average response time of an assignment.

Every solver is scored with :func:`response_time`.
"""
import json
import logging
from collections import namedtuple
from dataclasses import dataclass

import fsspec
import numpy as np
import pandas as pd

from .errors import (AssignmentError, DemandMismatchError, DomainError, InfeasibleError, InstanceError,
                     SteadyStateError)
from .utils import config_value

logger = logging.getLogger('qdplace.queueing')

ResponseTime = namedtuple('ResponseTime', ['total', 'rtt', 'tis'])

# relative demand tolerance of response_time (solver gap threshold)
DEMAND_RTOL = 1e-6


@dataclass(frozen=True)
class Mm1:
    """M/M/1 queue with service rate `mu` (req/s)"""
    mu: float

    def __post_init__(self):
        mu = float(self.mu)
        if not (np.isfinite(mu) and mu > 0):
            raise InstanceError("service rate must be finite and > 0. Got %r" % self.mu)
        object.__setattr__(self, 'mu', mu)

    def utilization(self, lam):
        return np.asarray(lam) / self.mu


def _mu(mm1):
    return mm1.mu if isinstance(mm1, Mm1) else Mm1(mm1).mu


def _check_steady(mu, lam):
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam < 0):
        raise DomainError("arrival rate must be >= 0. Got %r" % lam)
    if np.any(lam >= mu):
        raise SteadyStateError("steady state violated: lambda=%r >= mu=%r" % (lam, mu), load=lam, mu=mu)
    return lam


def tis(mm1, lam):
    """
    time in system 1 / (mu - lambda), in seconds

    Parameters
    ----------
    mm1: Mm1 or float
        queue, or its service rate
    lam: float or array-like
        arrival rate(s), 0 <= lam < mu

    Returns
    -------
    float or numpy.ndarray
    """
    mu = _mu(mm1)
    lam = _check_steady(mu, lam)
    res = 1. / (mu - lam)
    return float(res) if res.ndim == 0 else res


def weighted_tis(mm1, lam):
    """
    time in system weighted by the arrival rate: lambda / (mu - lambda)

    This is the load dependant part of the total response time of a facility.
    """
    mu = _mu(mm1)
    lam = _check_steady(mu, lam)
    res = lam / (mu - lam)
    return float(res) if res.ndim == 0 else res


@dataclass(frozen=True, eq=False)
class Assignment:
    """
    Demand split `x` (req/s, clients x facilities) and open facilities `y` (0/1 per facility).
    """
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.array(self.x, dtype=np.float64)
        y = np.array(self.y).reshape(-1)
        if x.ndim != 2 or x.shape[1] != y.size:
            raise AssignmentError("x shape %s does not match %d facilities" % (x.shape, y.size))
        if not np.all(np.isfinite(x)) or np.any(x < 0):
            raise AssignmentError("x must be finite and >= 0")
        if not np.all((y == 0) | (y == 1)):
            raise AssignmentError("y must be binary. Got %s" % y)
        y = y.astype(np.int64)
        served_closed = (x > 0).any(axis=0) & (y == 0)
        if served_closed.any():
            raise AssignmentError("facility index %d is closed but receives demand" % int(np.argmax(served_closed)))
        for arr in (x, y):
            arr.setflags(write=False)
        object.__setattr__(self, 'x', x)
        object.__setattr__(self, 'y', y)

    @property
    def loads(self):
        """Λ_f, total arrival rate served per facility"""
        return self.x.sum(axis=0)

    @property
    def open_facilities(self):
        """indexes of open facilities"""
        return tuple(int(j) for j in np.flatnonzero(self.y))

    @property
    def p(self):
        return int(self.y.sum())

    def __eq__(self, other):
        if not isinstance(other, Assignment):
            return NotImplemented
        return np.array_equal(self.x, other.x) and np.array_equal(self.y, other.y)

    __hash__ = None


def check_assignment(instance, assignment, rtol=DEMAND_RTOL):
    """
    Check demand satisfaction and steady state of `assignment` on `instance`.

    Raises
    ------
    DemandMismatchError
        if a client is not served within `rtol` of its arrival rate
    SteadyStateError
        if a facility load reaches its service rate
    """
    if assignment.x.shape != instance.rtt.shape:
        raise AssignmentError("assignment shape %s does not match instance %s" %
                              (assignment.x.shape, instance.rtt.shape))
    served = assignment.x.sum(axis=1)
    mismatch = np.abs(served - instance.arrival) > rtol * instance.arrival + 1e-12
    if mismatch.any():
        ic = int(np.argmax(mismatch))
        raise DemandMismatchError("client %d is served %r req/s instead of %r" %
                                  (instance.clients[ic], served[ic], instance.arrival[ic]),
                                  client=instance.clients[ic])
    loads = assignment.loads
    unstable = loads >= instance.service
    if unstable.any():
        jf = int(np.argmax(unstable))
        raise SteadyStateError("facility %d is loaded with %r req/s, not below its service rate %r" %
                               (instance.facilities[jf], loads[jf], instance.service[jf]),
                               facility=instance.facilities[jf], load=loads[jf], mu=instance.service[jf])
    return loads


def response_time_parts(instance, assignment):
    """
    exact average response time and its split into round trip and time in system parts

    Parameters
    ----------
    instance: Instance
    assignment: Assignment

    Returns
    -------
    ResponseTime
        (total, rtt, tis) in seconds, with total == rtt + tis
    """
    total_arrival = instance.total_arrival
    if total_arrival <= 0:
        raise InstanceError("empty instance: total arrival rate is 0")
    loads = check_assignment(instance, assignment)
    rtt_part = float((assignment.x * instance.rtt).sum() / total_arrival)
    tis_part = float((loads / (instance.service - loads)).sum() / total_arrival)
    return ResponseTime(rtt_part + tis_part, rtt_part, tis_part)


def response_time(instance, assignment):
    """
    Exact average response time (seconds) of `assignment`:
    (sum of x_cf * rtt_cf + sum of Λ_f / (mu_f - Λ_f)) / Λ.
    """
    return response_time_parts(instance, assignment).total


def facility_table(instance, assignment):
    """
    per facility load, utilization and time in system

    Returns
    -------
    pandas.DataFrame
        indexed by facility id
    """
    loads = assignment.loads
    utilization = loads / instance.service
    with np.errstate(divide='ignore'):
        facility_tis = np.where(loads < instance.service, 1. / (instance.service - loads), np.inf)
    return pd.DataFrame({
        'open': assignment.y.astype(bool),
        'load_rps': loads,
        'mu_rps': instance.service,
        'utilization': utilization,
        'tis_s': facility_tis,
    }, index=pd.Index(instance.facilities, name='facility'))


def proportional_assignment(instance, open_facilities):
    """
    Split every client demand over `open_facilities` proportionally to their service rates.

    All open facilities then share the same utilization.

    Parameters
    ----------
    instance: Instance
    open_facilities: sequence of int
        facility indexes (columns of `instance.rtt`)

    Returns
    -------
    Assignment
    """
    cols = np.asarray(sorted(open_facilities), dtype=int)
    y = np.zeros(instance.n_facilities, dtype=int)
    y[cols] = 1
    share = instance.service[cols] / instance.service[cols].sum()
    x = np.zeros(instance.rtt.shape)
    x[:, cols] = np.outer(instance.arrival, share)
    return Assignment(x, y)


def capped_nearest_assignment(instance, open_facilities, rho_cap=None, capacity=None):
    """
    Greedy assignment: every client, in order, fills its nearest open facility up to `rho_cap` * mu,
    then the next nearest.

    `rho_cap` = 1 is the classic nearest assignment, which queues ignore.

    Parameters
    ----------
    instance: Instance
    open_facilities: sequence of int
        facility indexes
    rho_cap: float or None
        utilization cap in (0, 1]. Default to the linearization interval end.
    capacity: array-like or None
        per facility caps in req/s, over all facilities. Replaces `rho_cap` * mu when given.

    Returns
    -------
    Assignment

    Raises
    ------
    InfeasibleError
        if the capped capacity cannot absorb the demand
    """
    rho_cap = config_value('pwl.interval_end', rho_cap)
    if not 0 < rho_cap <= 1:
        raise InstanceError("rho_cap must be in (0, 1]. Got %r" % rho_cap)
    cols = sorted(open_facilities)
    y = np.zeros(instance.n_facilities, dtype=int)
    y[cols] = 1
    if capacity is None:
        capacity = rho_cap * instance.service
    remaining = {j: float(capacity[j]) for j in cols}
    total = sum(remaining.values())
    if instance.total_arrival > total:
        raise InfeasibleError("demand %r exceeds capped capacity %r" % (instance.total_arrival, total),
                              capacity_sum=total, demand_sum=instance.total_arrival)
    x = np.zeros(instance.rtt.shape)
    for ic in range(instance.n_clients):
        demand = instance.arrival[ic]
        for j in sorted(cols, key=lambda j: (instance.rtt[ic, j], j)):
            if demand <= 0:
                break
            take = min(demand, remaining[j])
            x[ic, j] += take
            remaining[j] -= take
            demand -= take
    return Assignment(x, y)


def write_assignment(instance, assignment, path):
    """
    write an assignment json file with `x_rps`, `y` and its `evaluated_rt_s`.

    `evaluated_rt_s` is null when the assignment is not steady.
    """
    try:
        rt = response_time(instance, assignment)
    except SteadyStateError:
        rt = None
    doc = {
        'clients': list(instance.clients),
        'facilities': list(instance.facilities),
        'x_rps': assignment.x.tolist(),
        'y': assignment.y.tolist(),
        'evaluated_rt_s': rt,
    }
    with fsspec.open(path, 'w', encoding='utf-8') as f:
        json.dump(doc, f, indent=1)
        f.write('\n')


def read_assignment(path):
    """
    read an assignment json file written by :func:`write_assignment`

    Returns
    -------
    Assignment
    """
    with fsspec.open(path, 'r', encoding='utf-8') as f:
        doc = json.load(f)
    try:
        return Assignment(doc['x_rps'], doc['y'])
    except KeyError as e:
        raise AssignmentError("missing field %s in %s" % (e, path))
