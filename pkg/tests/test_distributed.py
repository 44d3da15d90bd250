import numpy as np
import pytest

from distributed import (
    DELTA, FaultPlan, InProcessTransport, ResidualDelta, TcpTransport, checksum_barrier, decode_deltas,
    decode_frame, encode_deltas, encode_frame, make_shards, pack_frames, run_distributed, unpack_frames,
    worker_groups,
)
from exceptions import DesyncDetected, InvalidRange, NonFiniteIterate, TransportFailure
from solver import SolverConfig, solve
from stepsizes import StepsizeCalculator


@pytest.fixture
def lasso_run(tiny_lasso):
    problem, partition = tiny_lasso
    D = StepsizeCalculator(problem.matrix, partition, tau=3).compute('D1')
    return problem, partition, D


def _config(**kwargs):
    return SolverConfig(**{'tau': 3, 'c': 4, 'max_iter': 120, 'seed': 42, 'monitor_every': 5, **kwargs})


def test_delta_records_survive_the_wire():
    deltas = [ResidualDelta(node=0, rows=np.array([1, 5, 9]), dz=np.array([0.5, -1.0, 1e-300]),
                            du=np.array([0.0, 2.0, -3.5])),
              ResidualDelta(node=3, rows=np.array([], dtype=np.int64), dz=np.array([]), du=np.array([]))]
    frame = encode_frame(DELTA, 2, 17, encode_deltas(deltas))
    [received] = unpack_frames(pack_frames([frame]))
    kind, status, worker, iteration, payload = decode_frame(received)
    assert (kind, status, worker, iteration) == (DELTA, 0, 2, 17)
    decoded = decode_deltas(payload)
    assert [d.node for d in decoded] == [0, 3]
    np.testing.assert_array_equal(decoded[0].rows, [1, 5, 9])
    np.testing.assert_array_equal(decoded[0].dz, deltas[0].dz)
    np.testing.assert_array_equal(decoded[0].du, deltas[0].du)
    assert len(decoded[1].rows) == 0


def test_worker_groups():
    assert worker_groups(4, 2) == [[0, 1], [2, 3]]
    assert worker_groups(5, 2) == [[0, 1, 2], [3, 4]]
    with pytest.raises(InvalidRange):
        worker_groups(4, 5)


@pytest.mark.parametrize("workers", [1, 2, 4])
def test_objective_trace_matches_single_process(workers, lasso_run):
    problem, partition, D = lasso_run
    config = _config()
    x_single, single = solve(config, problem, partition, D)
    x_multi, multi = run_distributed(config, problem, partition, D, transport=InProcessTransport(workers))
    np.testing.assert_array_equal(multi['k'], single['k'])
    np.testing.assert_array_equal(multi['objective'], single['objective'])
    np.testing.assert_array_equal(x_multi, x_single)
    assert multi.attrs['desyncs'] == 0


def test_residual_refresh_keeps_runs_identical(lasso_run):
    problem, partition, D = lasso_run
    config = _config(refresh_every=7, checksum_every=3)
    _, single = solve(config, problem, partition, D)
    _, multi = run_distributed(config, problem, partition, D, workers=2)
    np.testing.assert_array_equal(multi['objective'], single['objective'])
    assert multi.attrs['max_drift'] == single.attrs['max_drift']
    assert single.attrs['max_drift'] < 1e-10


def test_svm_runs_match(tiny_svm):
    problem, partition = tiny_svm
    D = StepsizeCalculator(problem.matrix, partition, tau=5).compute('D2', sigma_source='bound')
    config = SolverConfig(tau=5, c=4, max_iter=60, seed=1, monitor_every=10)
    _, single = solve(config, problem, partition, D)
    _, multi = run_distributed(config, problem, partition, D, workers=4)
    np.testing.assert_array_equal(multi['duality_gap'], single['duality_gap'])


def test_fast_mode_stays_close(lasso_run):
    problem, partition, D = lasso_run
    _, exact = solve(_config(), problem, partition, D)
    _, fast = run_distributed(_config(deterministic=False), problem, partition, D, workers=2)
    np.testing.assert_allclose(fast['objective'], exact['objective'], rtol=1e-9)


def test_killed_worker_fails_the_run(lasso_run):
    problem, partition, D = lasso_run
    plan = FaultPlan(kill_worker=1, kill_at=10)
    with pytest.raises(TransportFailure) as info:
        run_distributed(_config(), problem, partition, D, transport=InProcessTransport(2, timeout=10), plan=plan)
    assert info.value.node == 1
    assert "worker 2 failed" in str(info.value)


def test_perturbed_replica_is_detected(lasso_run):
    problem, partition, D = lasso_run
    plan = FaultPlan(perturb_worker=1, perturb_at=20, perturb_row=4)
    config = _config(checksum_every=10)
    with pytest.raises(DesyncDetected) as info:
        run_distributed(config, problem, partition, D, transport=InProcessTransport(2, timeout=10), plan=plan)
    assert info.value.row == 4
    assert info.value.iteration == 20


def test_checksum_barrier(lasso_run):
    problem, partition, D = lasso_run
    shards, _ = make_shards(problem, partition, D, _config(), workers=4)
    assert checksum_barrier(shards)
    shards[2].res.r_u[7] = np.nextafter(shards[2].res.r_u[7], np.inf)
    with pytest.raises(DesyncDetected) as info:
        checksum_barrier(shards)
    assert info.value.row == 7


def test_divergence_is_reported(lasso_run):
    problem, partition, _ = lasso_run
    tiny = np.full(problem.d, 1e-300)
    with pytest.raises(NonFiniteIterate):
        solve(_config(), problem, partition, tiny)
    with pytest.raises(NonFiniteIterate):
        run_distributed(_config(), problem, partition, tiny, transport=InProcessTransport(2, timeout=10))


@pytest.mark.slow
def test_tcp_transport_matches_single_process(lasso_run):
    problem, partition, D = lasso_run
    config = _config(max_iter=60)
    _, single = solve(config, problem, partition, D)
    _, multi = run_distributed(config, problem, partition, D, transport=TcpTransport(2, timeout=60))
    np.testing.assert_array_equal(multi['objective'], single['objective'])


@pytest.mark.slow
def test_long_run_replicas_stay_in_sync(lasso_run):
    problem, partition, D = lasso_run
    config = _config(max_iter=10_000, checksum_every=100, monitor_every=1000)
    _, single = solve(config, problem, partition, D)
    _, multi = run_distributed(config, problem, partition, D, workers=4)
    assert multi.attrs['desyncs'] == 0
    np.testing.assert_array_equal(multi['objective'], single['objective'])
