import itertools

import numpy as np
import pytest
from scipy.optimize import minimize

from qdplace.errors import DomainError, InfeasibleError, InstanceError
from qdplace.instance import Instance
from qdplace.queueing import response_time
from qdplace.solvers import PqpProblem, pqp_gradient, pqp_hessian, pqp_objective, solve_pqp, solve_qp_exact


def _pair(lam, rtt=(0.060, 0.070), mu=100., p=2):
    return Instance((0,), (0, 1), [list(rtt)], [lam], [mu, mu], p)


def _random_instance(seed, n_clients=6, n_facilities=4, p=2, load=0.4):
    generator = np.random.default_rng(seed)
    service = generator.uniform(80., 120., n_facilities)
    arrival = generator.uniform(0.5, 1.5, n_clients)
    # total demand at `load` of the p smallest facilities
    arrival *= load * np.sort(service)[:p].sum() / arrival.sum()
    return Instance(tuple(range(n_clients)), tuple(range(n_facilities)),
                    generator.uniform(0.005, 0.080, (n_clients, n_facilities)), arrival, service, p)


def _grid_oracle(lam, rtt=(0.060, 0.070), mu=100.):
    # one client split between two facilities
    low, high = max(0., lam - mu + 1e-6), min(lam, mu - 1e-6)
    share = np.linspace(low, high, 200001)
    rest = lam - share
    values = (share * rtt[0] + rest * rtt[1] + share / (mu - share) + rest / (mu - rest)) / lam
    return values.min()


def test_objective():
    problem = PqpProblem(_pair(10.), (0, 1))
    assert pqp_objective(problem, [10., 0.]) == pytest.approx(0.06 + 1 / 90., rel=1e-12)
    assert pqp_objective(problem, [[5., 5.]]) == pytest.approx((0.3 + 0.35 + 2 * 5 / 95.) / 10, rel=1e-12)
    with pytest.raises(DomainError):
        pqp_objective(problem, [-1., 11.])
    with pytest.raises(DomainError):
        pqp_objective(PqpProblem(_pair(150.), (0, 1)), [100., 50.])


def test_gradient():
    problem = PqpProblem(_pair(10.), (0, 1))
    grad = pqp_gradient(problem, [10., 0.])
    # 0.06 / 10 + 100 / 90 ** 2 / 10
    assert grad[0] == pytest.approx(0.00723457, abs=1e-8)
    assert grad[1] == pytest.approx(0.008, abs=1e-12)


def test_hessian():
    problem = PqpProblem(_pair(10.), (0, 1))
    hess = pqp_hessian(problem, [10., 0.])
    assert hess.shape == (2, 2)
    # 2 * 100 / 90 ** 3 / 10
    assert hess[0, 0] == pytest.approx(2.74348e-5, rel=1e-5)
    assert hess[1, 1] == pytest.approx(2e-5, rel=1e-12)
    assert hess[0, 1] == 0.


def test_derivatives_finite_differences():
    generator = np.random.default_rng(7)
    h = 1e-5
    for seed in range(20):
        n_clients, n_facilities = generator.integers(2, 9), generator.integers(2, 5)
        instance = _random_instance(seed, n_clients=n_clients, n_facilities=n_facilities, p=n_facilities)
        problem = PqpProblem(instance, tuple(range(n_facilities)))
        for _ in range(50):
            # loads stay below 8 * 5 = 40 req/s, well under the 80 req/s capacities
            x = generator.uniform(0.1, 1., instance.rtt.shape).ravel() * 5
            grad = pqp_gradient(problem, x)
            hess = pqp_hessian(problem, x)
            steps = np.eye(x.size) * h
            fd_grad = np.array([pqp_objective(problem, x + s) - pqp_objective(problem, x - s) for s in steps]) / (2 * h)
            assert np.allclose(fd_grad, grad, rtol=1e-5, atol=0.)
            fd_hess = np.array([pqp_gradient(problem, x + s) - pqp_gradient(problem, x - s) for s in steps]) / (2 * h)
            assert np.allclose(fd_hess, hess, rtol=1e-4, atol=1e-12)
            # positive semi definite
            assert np.linalg.eigvalsh(hess).min() > -1e-12


def test_problem_validation():
    instance = _pair(10.)
    with pytest.raises(InstanceError):
        PqpProblem(instance, (0, 0))
    with pytest.raises(InstanceError):
        PqpProblem(instance, (0, 2))
    with pytest.raises(InstanceError):
        PqpProblem(instance, (0,), tau=100.)
    with pytest.raises(InstanceError, match='empty instance'):
        PqpProblem(_pair(0.), (0, 1))
    # subsets are sorted
    assert PqpProblem(instance, (1, 0)).subset == (0, 1)


@pytest.mark.parametrize('lam', [10., 80., 160.])
def test_solve_pqp_pair(lam):
    instance = _pair(lam)
    report = solve_pqp(PqpProblem(instance, (0, 1)))
    assert report.objective == pytest.approx(_grid_oracle(lam), abs=1e-6)
    assert report.objective == pytest.approx(response_time(instance, report.assignment))
    loads = report.assignment.loads
    # the nearer facility takes at least half of the demand
    assert loads[0] >= lam / 2 - 1e-6
    assert loads.sum() == pytest.approx(lam)
    assert report.kkt_residual < 1e-6


def test_solve_pqp_even_split():
    # equal round trip times: the demand splits evenly
    report = solve_pqp(PqpProblem(_pair(80., rtt=(0.060, 0.060)), (0, 1)))
    assert report.assignment.loads == pytest.approx([40., 40.], abs=1e-4)
    assert report.objective == pytest.approx(0.06 + 2 * (40 / 60.) / 80., abs=1e-9)


def test_solve_pqp_permutation():
    instance = _random_instance(5, n_clients=6, n_facilities=4, p=4)
    order = [2, 0, 3, 1]
    shuffled = Instance(instance.clients, tuple(instance.facilities[j] for j in order), instance.rtt[:, order],
                        instance.arrival, instance.service[order], instance.p)
    report = solve_pqp(PqpProblem(instance, range(4)))
    other = solve_pqp(PqpProblem(shuffled, range(4)))
    assert other.objective == pytest.approx(report.objective, abs=2e-9)
    assert other.assignment.loads == pytest.approx(report.assignment.loads[order], abs=1e-4)


def test_solve_pqp_near_capacity():
    # 150 req/s over 3 or 4 facilities of 60 req/s
    generator = np.random.default_rng(2)
    instance = Instance(tuple(range(5)), tuple(range(4)), generator.uniform(0.005, 0.05, (5, 4)), [30.] * 5,
                        [60.] * 4, 4)
    for subset in itertools.combinations(range(4), 3):
        report = solve_pqp(PqpProblem(instance, subset))
        assert report.kkt_residual < 1e-6
        assert (report.assignment.loads < 60.).all()
    assert solve_pqp(PqpProblem(instance, range(4))).objective < report.objective


def test_solve_pqp_infeasible():
    with pytest.raises(InfeasibleError) as info:
        solve_pqp(PqpProblem(_pair(250.), (0, 1)))
    assert info.value.demand_sum == 250.


def test_qp_exact_single_facility():
    report = solve_qp_exact(_pair(10., p=1))
    assert report.solver == 'qp-exact'
    assert report.objective == pytest.approx(0.06 + 1 / 90., abs=1e-9)
    assert report.subset == (0,)
    assert report.extra['subsets'] == 2


def test_qp_exact_ties():
    # identical facilities: the smaller subset wins
    instance = _pair(10., rtt=(0.060, 0.060), p=1)
    assert solve_qp_exact(instance).subset == (0,)


def test_qp_exact_infeasible():
    with pytest.raises(InfeasibleError):
        solve_qp_exact(_pair(120., p=1))
    # the other subset sizes still work
    assert solve_qp_exact(_pair(120., p=1), p=2).subset == (0, 1)


def test_qp_exact_workers():
    instance = _random_instance(4, n_clients=5, n_facilities=5, p=2)
    sequential = solve_qp_exact(instance, workers=1)
    threaded = solve_qp_exact(instance, workers=3)
    assert sequential.subset == threaded.subset
    assert sequential.objective == pytest.approx(threaded.objective, abs=1e-12)
    assert sequential.extra['subsets'] == 10


def _scipy_oracle(instance):
    # best SLSQP optimum over all subsets, from several starting points
    n_c, n_f = instance.rtt.shape
    best = np.inf
    for subset in itertools.combinations(range(n_f), instance.p):
        cols = list(subset)
        rtt = instance.rtt[:, cols]
        mu = instance.service[cols]

        def objective(v):
            x = v.reshape(n_c, len(cols))
            loads = x.sum(axis=0)
            return ((x * rtt).sum() + (loads / (mu - loads)).sum()) / instance.total_arrival

        constraints = [{'type': 'eq', 'fun': lambda v, ic=ic: v.reshape(n_c, len(cols))[ic].sum()
                        - instance.arrival[ic]} for ic in range(n_c)]
        constraints.append({'type': 'ineq', 'fun': lambda v: 0.999 * mu - v.reshape(n_c, len(cols)).sum(axis=0)})
        generator = np.random.default_rng(0)
        for _ in range(3):
            weights = generator.uniform(0.1, 1., (n_c, len(cols)))
            start = (weights / weights.sum(axis=1, keepdims=True) * instance.arrival[:, np.newaxis]).ravel()
            res = minimize(objective, start, method='SLSQP', bounds=[(0., None)] * start.size,
                           constraints=constraints, options={'ftol': 1e-14, 'maxiter': 1000})
            x = res.x.reshape(n_c, len(cols))
            if x.min() >= -1e-9 and np.allclose(x.sum(axis=1), instance.arrival, atol=1e-8):
                best = min(best, objective(np.clip(res.x, 0., None)))
    return best


def test_qp_exact_oracle():
    for seed in range(3):
        instance = _random_instance(seed)
        report = solve_qp_exact(instance)
        assert report.objective == pytest.approx(_scipy_oracle(instance), abs=1e-6)
        # no subset does better than the reported one
        for subset in itertools.combinations(range(instance.n_facilities), instance.p):
            other = solve_pqp(PqpProblem(instance, subset))
            assert other.objective >= report.objective - 1e-9
