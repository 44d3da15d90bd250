import numpy as np
import pandas as pd
import pytest

from data_generator import generate_block_angular
from evaluator import ExperimentEvaluator
from exceptions import InvalidRange, ShardMismatch, ThetaOutOfRange
from problems import drift_tolerance, make_lasso, prox_block
from sampling import DistributedSampler
from solver import (
    Hydra2Solver, IterationBound, SolverConfig, iteration_bound, solve, theta_next, theta_schedule,
    u_coefficient,
)
from sparse_matrix import SparseMatrix, partition_uniform
from stepsizes import StepsizeCalculator


def test_theta_examples():
    assert theta_next(0.5) == pytest.approx(0.3903882032, abs=1e-10)
    assert theta_next(1.0) == pytest.approx(0.6180339887, abs=1e-10)
    with pytest.raises(ThetaOutOfRange):
        theta_next(0.0)
    with pytest.raises(ThetaOutOfRange):
        theta_next(1.5)


@pytest.mark.parametrize("theta0", [0.01, 0.1, 0.5, 1.0])
def test_theta_recurrence_and_decay(theta0):
    thetas = theta_schedule(theta0, 10_000)
    assert np.all(np.diff(thetas) < 0)
    np.testing.assert_allclose(thetas[1:] ** 2, (1 - thetas[1:]) * thetas[:-1] ** 2, rtol=1e-12)
    k = np.arange(len(thetas))
    assert np.all(thetas <= 2 / (k + 2 / theta0) * (1 + 1e-12))


def test_u_coefficient_vanishes_at_theta0():
    assert u_coefficient(3 / 7, 3, 7, at_theta0=True) == 0.0
    assert u_coefficient(0.5, 1, 2, at_theta0=False) == pytest.approx(0.0, abs=1e-15)
    assert u_coefficient(0.25, 1, 2, at_theta0=False) == pytest.approx(8.0)


def test_iteration_bound_examples():
    assert iteration_bound(0.5, 0.5, 0.1, 0.01, 10, 100) == 614
    assert iteration_bound(0.0, 0.0, 0.1, 0.01, 10, 100) == 1
    assert iteration_bound(0.0005, 0.0005, 0.1, 0.01, 10, 100) == 1
    assert iteration_bound(0.5, 0.5, 0.1, 0.01, 20, 100) == 308


def test_iteration_bound_rejects_bad_arguments():
    with pytest.raises(InvalidRange):
        iteration_bound(1.0, 1.0, 1.0, 0.01, 1, 2)
    with pytest.raises(InvalidRange):
        iteration_bound(1.0, 1.0, 0.1, 0.0, 1, 2)
    with pytest.raises(InvalidRange):
        IterationBound.from_run(1.0, 0.5, np.zeros(2), np.ones(2), np.ones(2), 1, 2, 0.1, 0.6)


def test_iteration_bound_from_run():
    bound = IterationBound.from_run(L_x0=1.5, optimum=0.5, x0=np.zeros(2), x_star=np.ones(2),
                                    D=np.array([1.0, 3.0]), tau=1, s=2, rho=0.1, epsilon=0.01)
    assert bound.C1 == pytest.approx(0.5)
    assert bound.C2 == pytest.approx(2.0)
    assert bound.k_min == iteration_bound(0.5, 2.0, 0.1, 0.01, 1, 2)


def test_one_dimensional_lasso():
    problem = make_lasso(SparseMatrix.from_dense([[1.0]]), np.array([1.0]), lam=0.1)
    x, trace = solve(SolverConfig(tau=1, c=1, max_iter=50), problem, partition_uniform(1, 1), np.ones(1))
    assert x[0] == pytest.approx(0.9, abs=1e-12)
    assert trace['objective'].iloc[-1] == pytest.approx(0.095, abs=1e-12)


def test_two_by_two_hand_step():
    A = SparseMatrix.from_dense([[1.0, 0.0], [0.0, 2.0]])
    problem = make_lasso(A, np.array([1.0, 1.0]), lam=0.0)
    x, trace = solve(SolverConfig(tau=1, c=2, max_iter=1), problem, partition_uniform(2, 2), np.array([1.0, 4.0]))
    np.testing.assert_allclose(x, [1.0, 0.5])
    assert trace['objective'].iloc[-1] == pytest.approx(0.0, abs=1e-15)


def test_plain_hydra_keeps_u_at_zero(tiny_lasso):
    problem, partition = tiny_lasso
    D = StepsizeCalculator(problem.matrix, partition, tau=3).compute('D1')
    solver = Hydra2Solver(problem, partition, D, SolverConfig(tau=3, c=4, mode='hydra', max_iter=1000, seed=1))
    thetas = []

    def check(state, sample):
        assert not state.u.any()
        thetas.append(state.theta)

    solver.run(callback=check)
    assert set(thetas) == {3 / 10}


def _dense_reference(problem, partition, D, tau, max_iter, seed, mode):
    """Reference iteration on dense arrays, one coordinate set at a time"""
    A = problem.matrix.to_dense()
    b = problem.loss.b
    s = partition.s
    sampler = DistributedSampler(partition, tau, seed)
    u = np.zeros(A.shape[1])
    z = np.zeros(A.shape[1])
    theta = theta_last = tau / s
    for k in range(max_iter):
        S = sampler.draw(k).indices
        w = A @ (theta**2 * u + z)
        g = A[:, S].T @ (w - b)
        if mode == 'hydra' or k == 0:
            coef, scale = 0.0, 1.0
        else:
            coef, scale = 1 / theta**2 - s / (tau * theta), s * theta / tau
        t = prox_block(problem.reg, g, scale * D[S], z[S])
        z[S] += t
        u[S] -= coef * t
        theta_last = theta
        if mode == 'hydra2':
            theta = theta_next(theta)
    return theta_last**2 * u + z


@pytest.mark.parametrize("mode", ["hydra", "hydra2"])
def test_matches_dense_reference(mode, tiny_lasso):
    problem, partition = tiny_lasso
    D = StepsizeCalculator(problem.matrix, partition, tau=4).compute('D1').values
    config = SolverConfig(tau=4, c=4, mode=mode, max_iter=60, seed=17)
    x, _ = solve(config, problem, partition, D)
    expected = _dense_reference(problem, partition, D, 4, 60, 17, mode)
    np.testing.assert_allclose(x, expected, rtol=1e-9, atol=1e-11)


def _plain_hydra(problem, partition, D, tau, max_iter, seed):
    """Plain Hydra written entry by entry over the CSC arrays, nodes in ascending order"""
    csc = problem.matrix.csc
    b, lam = problem.loss.b, problem.reg.lam
    r = np.zeros(problem.matrix.n_rows)
    z = np.zeros(problem.d)
    sampler = DistributedSampler(partition, tau, seed)
    for k in range(max_iter):
        steps = []
        for coords in sampler.draw(k).per_node:
            t_node, delta = [], {}
            for i in coords:
                entries = range(csc.indptr[i], csc.indptr[i + 1])
                g = 0.0
                for e in entries:
                    g += csc.data[e] * (r[csc.indices[e]] - b[csc.indices[e]])
                beta = 1.0 * D[i]
                target = z[i] - g / beta
                kappa = lam / beta
                if target > kappa:
                    shrunk = target - kappa
                elif target < -kappa:
                    shrunk = target + kappa
                else:
                    shrunk = 0.0
                t = shrunk - z[i]
                t_node.append((i, t))
                for e in entries:
                    row = csc.indices[e]
                    delta[row] = delta.get(row, 0.0) + csc.data[e] * t
            steps.append((t_node, delta))
        for t_node, delta in steps:
            for i, t in t_node:
                z[i] += t
            for row, value in delta.items():
                r[row] += value
    return z


def test_plain_hydra_matches_entrywise_loop_bitwise(tiny_lasso):
    problem, partition = tiny_lasso
    D = StepsizeCalculator(problem.matrix, partition, tau=3).compute('D1').values
    x, _ = solve(SolverConfig(tau=3, c=4, mode='hydra', max_iter=1000, seed=23), problem, partition, D)
    np.testing.assert_array_equal(x, _plain_hydra(problem, partition, D, 3, 1000, 23))


def test_exactly_c_tau_coordinates_change(tiny_lasso):
    problem, partition = tiny_lasso
    unregularized = make_lasso(problem.matrix, problem.loss.b, lam=0.0)
    D = StepsizeCalculator(problem.matrix, partition, tau=2).compute('D1')
    solver = Hydra2Solver(unregularized, partition, D, SolverConfig(tau=2, c=4, mode='hydra', max_iter=30, seed=5))
    previous = [np.zeros(problem.d)]

    def check(state, sample):
        changed = np.flatnonzero(state.z != previous[0])
        assert changed.tolist() == sorted(sample.indices.tolist())
        assert len(changed) == 8
        previous[0] = state.z.copy()

    solver.run(callback=check)


def test_best_objective_is_running_minimum(tiny_lasso):
    problem, partition = tiny_lasso
    D = StepsizeCalculator(problem.matrix, partition, tau=2).compute('D1')
    _, trace = solve(SolverConfig(tau=2, c=4, max_iter=300, monitor_every=3, seed=2), problem, partition, D)
    np.testing.assert_array_equal(trace['best_objective'], trace['objective'].cummin())
    assert trace['k'].iloc[0] == 0 and trace['k'].iloc[-1] == 300
    assert trace['objective'].iloc[0] == pytest.approx(problem.initial_objective())


def test_unsampled_coordinates_keep_z0(tiny_lasso):
    problem, partition = tiny_lasso
    D = StepsizeCalculator(problem.matrix, partition, tau=1).compute('D1')
    z0 = np.random.default_rng(0).uniform(-1, 1, problem.d)
    config = SolverConfig(tau=1, c=4, max_iter=2, seed=8)
    x, _ = solve(config, problem, partition, D, z0=z0)
    sampler = DistributedSampler(partition, 1, 8)
    touched = sampler.draw(0).as_set() | sampler.draw(1).as_set()
    untouched = [i for i in range(problem.d) if i not in touched]
    np.testing.assert_array_equal(x[untouched], z0[untouched])


def test_stops_at_target(tiny_lasso):
    problem, partition = tiny_lasso
    D = StepsizeCalculator(problem.matrix, partition, tau=5).compute('D1')
    config = SolverConfig(tau=5, c=4, max_iter=5000, optimum=problem.initial_objective() - 1e-3,
                          epsilon=1.0, monitor_every=1)
    _, trace = solve(config, problem, partition, D)
    assert trace.attrs['reached_target']
    assert trace.attrs['iterations'] == 0


def test_config_mismatch(tiny_lasso):
    problem, partition = tiny_lasso
    with pytest.raises(ShardMismatch):
        Hydra2Solver(problem, partition, np.ones(problem.d), SolverConfig(tau=1, c=2))
    with pytest.raises(ShardMismatch):
        Hydra2Solver(problem, partition, np.ones(3), SolverConfig(tau=1, c=4))
    with pytest.raises(InvalidRange):
        SolverConfig(tau=1, c=4, mode='fista')


def _block_angular_lasso(seed=0):
    data = generate_block_angular(1000, 10_000, 8, 50, 400, seed=seed)
    return make_lasso(data.matrix, data.b, lambda_ratio=0.1), data.partition


def _final_objective(problem, partition, D, tau, mode, max_iter, seed=0):
    _, trace = solve(SolverConfig(tau=tau, c=partition.c, mode=mode, max_iter=max_iter, seed=seed,
                                  monitor_every=max_iter), problem, partition, D)
    return trace['objective'].iloc[-1]


@pytest.mark.slow
def test_d1_beats_d3():
    problem, partition = _block_angular_lasso()
    calc = StepsizeCalculator(problem.matrix, partition, tau=50)
    d1, d3 = calc.compute('D1'), calc.compute('D3')
    assert np.all(d1.values <= d3.values * (1 + 1e-12))
    assert _final_objective(problem, partition, d1, 50, 'hydra2', 300) <= \
        _final_objective(problem, partition, d3, 50, 'hydra2', 300)


def _chain_least_squares(d=100, seed=0):
    """Upper bidiagonal A with unit diagonal and -1 above it; the optimum is 0"""
    dense = np.eye(d) - np.eye(d, k=1)
    b = np.random.default_rng(seed).standard_normal(d)
    return make_lasso(SparseMatrix.from_dense(dense), b, lam=0.0), partition_uniform(d, 4)


@pytest.mark.slow
def test_acceleration_beats_plain_hydra():
    problem, partition = _chain_least_squares()
    D = StepsizeCalculator(problem.matrix, partition, tau=25).compute('D1')
    L0 = problem.initial_objective()
    config = SolverConfig(tau=25, c=4, max_iter=20_000, seed=3, monitor_every=20, epsilon=1e-8 * L0)
    _, summary = ExperimentEvaluator().compare(problem, partition, D, config, optimum=0.0)
    assert summary['level'].tolist() == [1e-4, 1e-5, 1e-6]
    for _, row in summary.iterrows():
        assert not pd.isna(row['k_hydra2']), row['level']
        assert pd.isna(row['k_hydra']) or row['k_hydra'] > row['k_hydra2'], row['level']


@pytest.mark.slow
def test_expected_suboptimality_rate():
    data = generate_block_angular(200, 1000, 4, 20, 200, seed=2)
    problem, partition = make_lasso(data.matrix, data.b, lambda_ratio=0.1), data.partition
    tau, rho = 50, 0.2
    D = StepsizeCalculator(problem.matrix, partition, tau=tau).compute('D1')
    long_run = SolverConfig(tau=tau, c=4, max_iter=20_000, seed=99, monitor_every=1000)
    x_star, trace = solve(long_run, problem, partition, D)
    optimum = min(trace['best_objective'].iloc[-1], problem.objective(x_star))
    eps = 1e-3 * (problem.initial_objective() - optimum)
    k = IterationBound.from_run(L_x0=problem.initial_objective(), optimum=optimum, x0=np.zeros(problem.d),
                                x_star=x_star, D=D, tau=tau, s=partition.s, rho=rho, epsilon=eps).k_min
    gaps = np.array([_final_objective(problem, partition, D, tau, 'hydra2', k, seed=seed) - optimum
                     for seed in range(50)])
    assert np.mean(gaps <= eps) >= 1 - rho


@pytest.mark.slow
def test_residual_drift_stays_within_tolerance():
    data = generate_block_angular(200, 1000, 4, 20, 200, seed=5)
    problem, partition = make_lasso(data.matrix, data.b, lambda_ratio=0.1), data.partition
    D = StepsizeCalculator(problem.matrix, partition, tau=50).compute('D1')
    refresh = 5000
    config = SolverConfig(tau=50, c=4, max_iter=100_000, seed=8, monitor_every=10_000,
                          refresh_every=refresh)
    m = problem.matrix
    checked = []

    def before_refresh(state, sample):
        if state.k % refresh == refresh - 1:
            checked.append(state.k)
            assert state.res.drift(m, state.u, state.z) <= drift_tolerance(m, state.u), state.k
        elif state.k % refresh == 0:
            assert state.max_drift <= drift_tolerance(m, state.u), state.k

    solver = Hydra2Solver(problem, partition, D, config)
    _, trace = solver.run(callback=before_refresh)
    assert len(checked) == 20
    assert trace.attrs['max_drift'] <= drift_tolerance(m, solver.state.u)
