import numpy as np
import pytest

from qdplace.errors import AssignmentError, DemandMismatchError, InfeasibleError, InstanceError, SteadyStateError
from qdplace.instance import Instance
from qdplace.queueing import (Assignment, Mm1, capped_nearest_assignment, facility_table, proportional_assignment,
                              read_assignment, response_time, response_time_parts, tis, weighted_tis,
                              write_assignment)


def _pair(lam, rtt=(0.060, 0.070), mu=100.):
    """one client, two facilities a and b"""
    return Instance((0,), (0, 1), [list(rtt)], [lam], [mu, mu], 2)


def _random_instance(seed, n_clients=6, n_facilities=4):
    generator = np.random.default_rng(seed)
    return Instance(tuple(range(n_clients)), tuple(range(n_facilities)),
                    generator.uniform(0.005, 0.080, (n_clients, n_facilities)),
                    generator.uniform(1., 20., n_clients), generator.uniform(100., 200., n_facilities), 2)


def test_tis():
    assert tis(100., 0.) == pytest.approx(0.01)
    assert tis(Mm1(100.), 50.) == pytest.approx(0.02)
    assert np.allclose(tis(100., [0., 50.]), [0.01, 0.02])
    with pytest.raises(SteadyStateError):
        tis(100., 100.)
    with pytest.raises(InstanceError):
        Mm1(0.)


def test_weighted_tis():
    assert weighted_tis(1., 0.5) == pytest.approx(1.)
    assert weighted_tis(100., 96.) == pytest.approx(24.)
    assert weighted_tis(100., 0.) == 0.
    lam = np.linspace(0., 99., 50)
    assert np.allclose(weighted_tis(100., lam), lam * tis(100., lam))
    # convex and increasing
    values = weighted_tis(100., lam)
    assert np.all(np.diff(values) > 0)
    assert np.all(np.diff(values, 2) > 0)


def test_response_time_split():
    instance = _pair(40.)
    assignment = Assignment([[20., 20.]], [1, 1])
    # (20 * 0.06 + 20 * 0.07 + 2 * 20 / 80) / 40
    assert response_time(instance, assignment) == pytest.approx(0.0775, abs=1e-12)
    assert proportional_assignment(instance, [0, 1]) == assignment


def test_response_time_single():
    instance = _pair(80.)
    assignment = Assignment([[80., 0.]], [1, 0])
    assert response_time(instance, assignment) == pytest.approx(0.110, abs=1e-12)
    parts = response_time_parts(instance, assignment)
    assert parts.rtt == pytest.approx(0.060)
    assert parts.tis == pytest.approx(0.050)
    assert parts.total == parts.rtt + parts.tis


def test_response_time_errors():
    instance = _pair(40.)
    with pytest.raises(DemandMismatchError, match='client 0'):
        response_time(instance, Assignment([[20., 10.]], [1, 1]))
    with pytest.raises(SteadyStateError):
        response_time(_pair(100.), Assignment([[100., 0.]], [1, 0]))
    with pytest.raises(AssignmentError):
        response_time(instance, Assignment([[20., 20., 0.]], [1, 1, 0]))
    with pytest.raises(InstanceError, match='empty instance'):
        response_time(_pair(0.), Assignment([[0., 0.]], [1, 0]))


def test_assignment_validation():
    with pytest.raises(AssignmentError, match='closed'):
        Assignment([[20., 20.]], [1, 0])
    with pytest.raises(AssignmentError):
        Assignment([[-1., 41.]], [1, 1])
    with pytest.raises(AssignmentError):
        Assignment([[20., 20.]], [1, 2])
    assignment = Assignment([[20., 20.], [5., 0.]], [1, 1])
    assert np.array_equal(assignment.loads, [25., 20.])
    assert assignment.open_facilities == (0, 1)
    assert assignment.p == 2


def test_response_time_decomposition():
    for seed in range(5):
        instance = _random_instance(seed)
        assignment = proportional_assignment(instance, [0, 1, 2, 3])
        parts = response_time_parts(instance, assignment)
        loads = assignment.loads
        tis_part = (loads / (instance.service - loads)).sum() / instance.total_arrival
        rtt_part = (assignment.x * instance.rtt).sum() / instance.total_arrival
        assert parts.tis == pytest.approx(tis_part, rel=1e-12)
        assert parts.rtt == pytest.approx(rtt_part, rel=1e-12)


def test_response_time_scaling():
    # scaling arrival and service rates by k scales the time in system part by 1/k
    instance = _random_instance(1)
    assignment = proportional_assignment(instance, [0, 2])
    base = response_time_parts(instance, assignment)
    for k in (0.5, 3.):
        scaled = Instance(instance.clients, instance.facilities, instance.rtt, instance.arrival * k,
                          instance.service * k, instance.p)
        parts = response_time_parts(scaled, Assignment(assignment.x * k, assignment.y))
        assert parts.rtt == pytest.approx(base.rtt, rel=1e-12)
        assert parts.tis == pytest.approx(base.tis / k, rel=1e-12)


def test_capped_nearest_assignment():
    instance = _pair(80.)
    nearest = capped_nearest_assignment(instance, [0, 1], rho_cap=1.)
    assert response_time(instance, nearest) == pytest.approx(0.110)
    capped = capped_nearest_assignment(instance, [0, 1], rho_cap=0.5)
    assert np.allclose(capped.x, [[50., 30.]])
    expected = (50 * 0.060 + 30 * 0.070 + 50 / 50 + 30 / 70) / 80
    assert response_time(instance, capped) == pytest.approx(expected, rel=1e-12)
    with pytest.raises(InstanceError):
        capped_nearest_assignment(instance, [0, 1], rho_cap=1.5)
    with pytest.raises(InfeasibleError):
        capped_nearest_assignment(instance, [0], rho_cap=0.5)
    # per facility caps in req/s
    explicit = capped_nearest_assignment(instance, [0, 1], capacity=[20., 100.])
    assert np.allclose(explicit.x, [[20., 60.]])


def test_facility_table():
    instance = _pair(40.)
    table = facility_table(instance, Assignment([[40., 0.]], [1, 0]))
    assert list(table.index) == [0, 1]
    assert table.loc[0, 'utilization'] == pytest.approx(0.4)
    assert table.loc[0, 'tis_s'] == pytest.approx(1 / 60.)
    assert not table.loc[1, 'open']


def test_assignment_io(tmp_path):
    instance = _random_instance(2)
    assignment = proportional_assignment(instance, [1, 3])
    path = str(tmp_path / 'assignment.json')
    write_assignment(instance, assignment, path)
    again = read_assignment(path)
    assert again == assignment
    assert response_time(instance, again) == response_time(instance, assignment)
