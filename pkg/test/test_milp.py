import numpy as np
import pytest
from scipy.optimize import Bounds, LinearConstraint, linprog, milp

from qdplace.errors import InfeasibleError, ModelError, NoConvergenceError
from qdplace.instance import Instance
from qdplace.pwl import BasepointSet, linearize, linearize_preset
from qdplace.queueing import response_time
from qdplace.solvers import (LinearProgram, LpSolution, build_p_model, build_qp_lin_model, heuristic_incumbent, solve,
                             solve_lp, solve_milp, solve_p, solve_qp_exact, solve_qp_lin, sos2_check_repair)


def _pair(lam, rtt=(0.060, 0.070), mu=100., p=2):
    return Instance((0,), (0, 1), [list(rtt)], [lam], [mu, mu], p)


def _two_clients():
    # client 0 is nearer a, client 1 nearer b
    return Instance((0, 1), (0, 1), [[0.060, 0.070], [0.080, 0.050]], [50., 50.], [100., 100.], 1)


def _random_instance(seed, n_clients=6, n_facilities=4, p=2, load=0.4):
    generator = np.random.default_rng(seed)
    service = generator.uniform(80., 120., n_facilities)
    arrival = generator.uniform(0.5, 1.5, n_clients)
    arrival *= load * np.sort(service)[:p].sum() / arrival.sum()
    return Instance(tuple(range(n_clients)), tuple(range(n_facilities)),
                    generator.uniform(0.005, 0.080, (n_clients, n_facilities)), arrival, service, p)


def _concave():
    return BasepointSet([0., 30., 60., 90.], [0., 10., 15., 17.], mu=100.)


def test_lp_simple():
    sol = solve_lp(LinearProgram([1.], A_ub=[[-1.]], b_ub=[-3.]))
    assert sol.optimal
    assert sol.x[0] == pytest.approx(3.)
    assert sol.objective == pytest.approx(3.)

    assert solve_lp(LinearProgram([1.], A_ub=[[1.], [-1.]], b_ub=[1., -2.])).status == 'infeasible'
    assert solve_lp(LinearProgram([1.], lb=[2.], ub=[1.])).status == 'infeasible'
    unbounded = solve_lp(LinearProgram([-1.]))
    assert unbounded.status == 'unbounded'
    assert unbounded.objective == -np.inf


def test_lp_duals():
    # min x1 + 2 x2 subject to x1 + x2 >= 1
    sol = solve_lp(LinearProgram([1., 2.], A_ub=[[-1., -1.]], b_ub=[-1.]))
    assert np.allclose(sol.x, [1., 0.])
    assert sol.duals_ub[0] == pytest.approx(-1.)
    assert np.allclose(sol.reduced_costs, [0., 1.])


def test_lp_redundant_rows():
    sol = solve_lp(LinearProgram([1., 2.], A_eq=[[1., 1.], [2., 2.]], b_eq=[1., 2.]))
    assert sol.optimal
    assert np.allclose(sol.x, [1., 0.])


def test_lp_bounds():
    # fixed and shifted variables
    lp = LinearProgram([1., -1., 1.], A_eq=[[1., 1., 1.]], b_eq=[5.], lb=[1., 0., 2.], ub=[1., 10., 4.])
    sol = solve_lp(lp)
    assert np.allclose(sol.x, [1., 2., 2.])
    assert lp.residual(sol.x) < 1e-9


def test_lp_cycling():
    # Beale's example cycles under the textbook pivoting rule
    c = [-0.75, 150., -0.02, 6.]
    a_ub = [[0.25, -60., -0.04, 9.], [0.5, -90., -0.02, 3.], [0., 0., 1., 0.]]
    b_ub = [0., 0., 1.]
    sol = solve_lp(LinearProgram(c, A_ub=a_ub, b_ub=b_ub), degenerate_streak=1)
    assert sol.optimal
    assert sol.objective == pytest.approx(-0.05)


def test_lp_against_scipy():
    generator = np.random.default_rng(0)
    for _ in range(20):
        n = 8
        x0 = generator.uniform(0., 1., n)
        a_ub = generator.normal(size=(5, n))
        b_ub = a_ub @ x0 + generator.uniform(0., 1., 5)
        a_eq = generator.normal(size=(2, n))
        b_eq = a_eq @ x0
        c = generator.normal(size=n)
        ub = np.full(n, 2.)
        sol = solve_lp(LinearProgram(c, a_ub, b_ub, a_eq, b_eq, ub=ub))
        ref = linprog(c, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq, bounds=list(zip(np.zeros(n), ub)),
                      method='highs')
        assert sol.optimal
        assert sol.objective == pytest.approx(ref.fun, abs=1e-7)


def test_qp_lin_model_shape():
    instance = Instance((0, 1), (0, 1, 2), np.full((2, 3), 0.01), [10., 20.], [100., 100., 100.], 2)
    model = build_qp_lin_model(instance, tight=False)
    assert model.kind == 'qp-lin'
    assert model.n_continuous == 24
    assert model.n_binary == 3
    assert model.n_rows == 12
    # 6 client-facility links and 3 basepoint activations
    tight = build_qp_lin_model(instance)
    assert tight.n_rows == 12 + 6 + 3
    assert tight.row_names_ub[3] == 'link_0_0' and tight.row_names_ub[-1] == 'zopen_2'
    assert len(model.sos2) == 3
    assert model.presolved == {}
    assert model.names[model.x_index(1, 2)] == 'x_1_2'
    # basepoints rescaled to req/s
    assert model.basepoints[0].alpha[-1] == pytest.approx(96.)

    full = build_qp_lin_model(instance.with_p(3))
    assert full.presolved == {'fixed_open': 3}
    assert np.all(full.lb[full.binaries] == 1.)


def test_qp_lin_model_errors():
    instance = _pair(10.)
    shifted = BasepointSet([0.1, 0.5, 0.9], [0.1, 1., 9.])
    with pytest.raises(ModelError, match='alpha_0'):
        build_qp_lin_model(instance, shifted)
    with pytest.raises(ModelError):
        build_qp_lin_model(instance, [_concave()])

    crowded = Instance(tuple(range(5)), tuple(range(5)), np.full((5, 5), 0.01), [94.] * 5, [100.] * 5, 4)
    with pytest.raises(InfeasibleError) as info:
        build_qp_lin_model(crowded)
    assert info.value.capacity_sum == pytest.approx(384.)
    with pytest.raises(InfeasibleError):
        build_p_model(crowded)
    # p = 5 fits in the capacity, not in the linearized capacity
    build_p_model(crowded.with_p(5))
    with pytest.raises(InfeasibleError):
        build_qp_lin_model(Instance((0,), (0,), [[0.01]], [97.], [100.], 1))


def test_p_model():
    instance = _two_clients()
    model = build_p_model(instance)
    assert model.kind == 'p'
    assert model.n_binary == 2
    assert model.n_rows == 2 + 3 + 4
    assert build_p_model(instance, tight=False).n_rows == 2 + 3

    # facility b alone: the transportation problem costs 0.060
    lb, ub = model.lb.copy(), model.ub.copy()
    ub[model.binaries[0]] = 0.
    lb[model.binaries[1]] = 1.
    sol = solve_lp(model.relaxation(lb, ub))
    assert sol.objective == pytest.approx(0.060)


def test_p_saturates():
    report = solve_p(_two_clients())
    assert report.solver == 'p'
    assert report.subset == (1,)
    assert report.extra['model_objective'] == pytest.approx(0.060)
    # facility b is loaded at its service rate
    assert report.status == 'unstable'
    assert report.objective == np.inf
    assert np.allclose(report.assignment.loads, [0., 100.])


def test_p_nearest():
    generator = np.random.default_rng(5)
    rtt = generator.uniform(0.005, 0.080, (4, 3))
    instance = Instance(tuple(range(4)), tuple(range(3)), rtt, [5., 6., 7., 8.], [1000.] * 3, 3)
    report = solve_p(instance)
    nearest = np.argmin(rtt, axis=1)
    for ic in range(4):
        assert report.assignment.x[ic, nearest[ic]] == pytest.approx(instance.arrival[ic])


def test_node_limit():
    with pytest.raises(NoConvergenceError) as info:
        solve_p(_two_clients(), node_limit=0)
    # the heuristic incumbent is reported
    assert info.value.best.subset == (1,)
    # the nearer facility cannot hold the demand: no incumbent before branching
    lopsided = Instance((0,), (0, 1), [[0.010, 0.020]], [100.], [50., 200.], 1)
    assert heuristic_incumbent(build_p_model(lopsided)) is None
    with pytest.raises(NoConvergenceError) as info:
        solve_p(lopsided, node_limit=0)
    assert info.value.best is None
    assert solve_p(lopsided).subset == (1,)


def test_heuristic_incumbent():
    model = build_p_model(_two_clients())
    seed = heuristic_incumbent(model)
    assert seed.objective == pytest.approx(0.060)
    assert model.relaxation().residual(seed.x) < 1e-9
    # the seed is optimal, the root relaxation closes the search
    report = solve_milp(model)
    assert report.extra['heuristic_objective'] == pytest.approx(0.060)
    assert report.extra['nodes'] == 1

    instance = _random_instance(3)
    model = build_qp_lin_model(instance)
    seed = heuristic_incumbent(model)
    assert model.relaxation().residual(seed.x) < 1e-9
    assert solve_milp(model).extra['model_objective'] <= seed.objective + 1e-12
    # PWL weights are adjacent and span the loads
    assignment = model.assignment(seed.x)
    assert model.solution_vector(assignment) == pytest.approx(seed.x)


def test_tight_rows():
    for seed in range(3):
        instance = _random_instance(seed, n_clients=5, n_facilities=4, p=2, load=0.6)
        for build in (build_p_model, build_qp_lin_model):
            loose, tight = build(instance, tight=False), build(instance)
            # same integer optimum, stronger root bound
            assert solve_milp(tight).extra['model_objective'] == pytest.approx(
                solve_milp(loose).extra['model_objective'], rel=2e-6)
            assert solve_lp(tight.relaxation()).objective >= solve_lp(loose.relaxation()).objective - 1e-12


def test_qp_lin_single_client():
    report = solve_qp_lin(_pair(10., p=1))
    assert report.solver == 'qp-lin'
    assert report.subset == (0,)
    assert report.objective == pytest.approx(0.06 + 1 / 90., abs=1e-9)


def test_qp_lin_splits_load():
    instance = _pair(80., rtt=(0.060, 0.060))
    report = solve_qp_lin(instance)
    assert report.assignment.p == 2
    assert report.status == 'optimal'
    # any split within the linearization interval beats a single facility (0.110)
    assert report.objective < 0.110
    assert np.all(report.assignment.loads <= 96. + 1e-6)
    exact = solve_qp_exact(instance)
    assert exact.objective == pytest.approx(0.06 + 2 * (40 / 60) / 80, abs=1e-9)
    assert report.objective >= exact.objective - 1e-9


def test_qp_lin_oracle_bound():
    epsilon = linearize_preset().epsilon
    for seed in range(4):
        instance = _random_instance(seed)
        exact = solve_qp_exact(instance)
        assert np.all(exact.assignment.loads <= 0.96 * instance.service)
        lin = solve_qp_lin(instance)
        assert lin.status == 'optimal'
        assert lin.objective >= exact.objective - 1e-9
        assert lin.objective <= exact.objective + instance.p * epsilon / instance.total_arrival + 1e-6
        # the model objective overestimates the exact response time
        assert lin.extra['model_objective'] >= lin.objective - 1e-9


def test_qp_lin_fine_basepoints():
    # 48 basepoints bound the relative gap to the exact optimum below 2% on these instances
    basepoints = linearize('weighted_tis', m=48, interval_end=0.96)
    for seed in range(4):
        instance = _random_instance(seed)
        exact = solve_qp_exact(instance)
        lin = solve_qp_lin(instance, basepoints=basepoints)
        assert lin.objective >= exact.objective - 1e-9
        assert (lin.objective - exact.objective) / exact.objective <= 0.02


def test_qp_lin_coarse_basepoints():
    # the first segment is linear: the nearer facility takes all of it
    instance = _pair(80.)
    bp = linearize_preset()
    lin = solve_qp_lin(instance)
    assert lin.assignment.loads[0] == pytest.approx(100. * bp.alpha[1], rel=1e-6)
    exact = solve_qp_exact(instance)
    gap = lin.objective - exact.objective
    assert gap / exact.objective > 0.02
    assert gap <= instance.p * bp.epsilon / instance.total_arrival


def test_qp_lin_against_scipy():
    for seed in range(3):
        instance = _random_instance(seed, n_clients=5, n_facilities=4, p=2, load=0.6)
        model = build_qp_lin_model(instance)
        report = solve_milp(model)
        integrality = np.zeros(model.n_variables)
        integrality[model.binaries] = 1
        ref = milp(model.c, integrality=integrality, bounds=Bounds(model.lb, model.ub),
                   constraints=[LinearConstraint(model.A_ub, -np.inf, model.b_ub),
                                LinearConstraint(model.A_eq, model.b_eq, model.b_eq)],
                   options={'mip_rel_gap': 1e-9})
        assert ref.success
        assert report.extra['model_objective'] == pytest.approx(ref.fun, rel=2e-6)


def test_qp_lin_deterministic():
    instance = _random_instance(7)
    first, second = solve_qp_lin(instance), solve_qp_lin(instance)
    assert first.assignment == second.assignment
    assert first.extra['nodes'] == second.extra['nodes']


def _sos2_model(basepoints, lam):
    instance = Instance((0,), (0,), [[0.01]], [lam], [basepoints.mu], 1)
    return build_qp_lin_model(instance, [basepoints])


def test_sos2_repair_convex():
    bp = BasepointSet([0., 0.3, 0.6, 0.9], [0., 3 / 7., 1.5, 9.])
    model = _sos2_model(bp, 0.3)
    values = np.array([0.3, 0.5, 0., 0.5, 0., 1.])
    repaired = sos2_check_repair(LpSolution(values, float(model.c @ values), 'optimal'), model)
    idx, _ = model.sos2[0]
    assert np.allclose(repaired.x[idx], [0., 1., 0., 0.])
    assert repaired.sos2_flagged == ()
    assert repaired.objective == pytest.approx((0.3 * 0.01 + 3 / 7.) / 0.3)

    adjacent = np.array([0.3, 0., 0.3, 0.7, 0., 1.])
    kept = sos2_check_repair(LpSolution(adjacent, float(model.c @ adjacent), 'optimal'), model)
    assert np.array_equal(kept.x, adjacent)


def test_sos2_repair_concave():
    model = _sos2_model(_concave(), 45.)
    values = np.array([45., 0.5, 0., 0., 0.5, 1.])
    checked = sos2_check_repair(LpSolution(values, float(model.c @ values), 'optimal'), model)
    assert checked.sos2_flagged == (0,)
    assert np.array_equal(checked.x, values)


def test_sos2_branching():
    # the relaxation mixes the end basepoints of a concave curve, branching restores adjacency
    instance = Instance((0,), (0,), [[0.01]], [45.], [100.], 1)
    report = solve_qp_lin(instance, basepoints=[_concave()])
    assert report.extra['model_objective'] == pytest.approx((45 * 0.01 + 12.5) / 45)
    assert report.objective == pytest.approx(0.01 + 1 / 55.)
    assert report.extra['nodes'] > 1


def test_to_lp(tmp_path):
    model = build_qp_lin_model(_random_instance(1, n_clients=3, n_facilities=3))
    path = str(tmp_path / 'model.lp')
    model.to_lp(path)
    with open(path) as f:
        text = f.read()
    sections = ['Minimize', 'Subject To', 'Bounds', 'Binaries', 'SOS', 'End']
    positions = [text.index('\n%s\n' % s) for s in sections]
    assert positions == sorted(positions)
    assert ' s2_0: S2:: z_0_0:1 z_0_1:2' in text
    assert ' demand_2:' in text
    assert ' open_1:' in text
    assert ' link_2_1:' in text
    assert ' zopen_0:' in text
    assert 'y_0 y_1 y_2' in text

    build_p_model(_random_instance(1, n_clients=3, n_facilities=3)).to_lp(path)
    with open(path) as f:
        text = f.read()
    assert 'SOS' not in text
    assert ' capacity_2:' in text


def test_solve_dispatch():
    instance = _pair(10., p=1)
    assert solve(instance, 'p').solver == 'p'
    assert solve(instance, 'qp-exact').solver == 'qp-exact'
    assert solve(instance).solver == 'qp-lin'
    with pytest.raises(KeyError):
        solve(instance, 'greedy')
    # reports always hold the exact response time of their assignment
    for solver in ('p', 'qp-lin', 'qp-exact'):
        report = solve(instance, solver)
        assert report.objective == pytest.approx(response_time(instance, report.assignment))
