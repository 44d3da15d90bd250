"""Multi-worker harness for Hydra^2.

Each worker hosts a contiguous group of nodes, owns their columns and their
slices of u and z, and keeps full replicas of r_u and r_z. A hub (the calling
process) runs rounds in lock step: it collects one frame from every worker and
broadcasts either all of them, concatenated in rank order, or a control frame.

Per iteration the schedule is fixed and known to every party:

    DELTA     always; every worker then applies all deltas in ascending node order
    REFRESH   every ``refresh_every`` iterations; partial products A_l u_l, A_l z_l
    CHECKSUM  every ``checksum_every`` iterations; REPLICA follows on mismatch
    XSLICE    at the monitor cadence and at max_iter; the hub answers continue/stop

The hub applies the same deltas to its own replica and assembles x from the
slices, so the objective trace equals the single-process one bit for bit.

Frames on the wire are length-prefixed: u64 length, then a header
(kind u8, status u8, worker u16, iteration u64) and the payload. Delta records
are (row u64, dz f64, du f64), little-endian.
"""
import hashlib
import json
import multiprocessing
import os
import queue
import socket
import struct
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from config import Config
from exceptions import (
    DesyncDetected, Hydra2Error, InvalidRange, NonFiniteIterate, ShardMismatch, TransportFailure,
)
from problems import CompositeLoss, Residuals
from sampling import DistributedSampler
from solver import (
    Hydra2Solver, Monitor, advance_theta, initial_state, iteration_scalars, node_update,
    reconstruct_x,
)
from utils import setup_logging

logger = setup_logging(__name__)

DELTA, REFRESH, CHECKSUM, REPLICA, XSLICE, CONTROL, ERROR = range(1, 8)
CONTINUE, STOP, SEND_REPLICA = range(3)

HEADER = struct.Struct('<BBHQ')
LENGTH = struct.Struct('<Q')
SECTION = struct.Struct('<IQ')
DELTA_DTYPE = np.dtype([('row', '<u8'), ('dz', '<f8'), ('du', '<f8')])


# Wire format

def encode_frame(kind, worker, iteration, payload=b'', status=0):
    return HEADER.pack(kind, status, worker, iteration) + payload


def decode_frame(frame):
    """(kind, status, worker, iteration, payload)"""
    kind, status, worker, iteration = HEADER.unpack_from(frame)
    return kind, status, worker, iteration, frame[HEADER.size:]


def pack_frames(frames):
    return b''.join(LENGTH.pack(len(f)) + f for f in frames)


def unpack_frames(blob):
    frames, offset = [], 0
    while offset < len(blob):
        (length,) = LENGTH.unpack_from(blob, offset)
        offset += LENGTH.size
        frames.append(blob[offset:offset + length])
        offset += length
    return frames


@dataclass(eq=False)
class ResidualDelta:
    """Sparse increments of r_z and r_u contributed by one node in one iteration"""
    node: int
    rows: np.ndarray
    dz: np.ndarray
    du: np.ndarray


def encode_deltas(deltas):
    """Node sections: (node u32, count u64) followed by ``count`` delta records"""
    parts = []
    for delta in deltas:
        records = np.empty(len(delta.rows), dtype=DELTA_DTYPE)
        records['row'], records['dz'], records['du'] = delta.rows, delta.dz, delta.du
        parts.append(SECTION.pack(delta.node, len(records)))
        parts.append(records.tobytes())
    return b''.join(parts)


def decode_deltas(payload):
    deltas, offset = [], 0
    while offset < len(payload):
        node, count = SECTION.unpack_from(payload, offset)
        offset += SECTION.size
        records = np.frombuffer(payload, dtype=DELTA_DTYPE, count=count, offset=offset)
        offset += count * DELTA_DTYPE.itemsize
        deltas.append(ResidualDelta(node=node, rows=records['row'].astype(np.int64),
                                    dz=records['dz'].copy(), du=records['du'].copy()))
    return deltas


def encode_arrays(*arrays):
    return b''.join(np.ascontiguousarray(a, dtype='<f8').tobytes() for a in arrays)


def decode_arrays(payload, *lengths):
    values = np.frombuffer(payload, dtype='<f8')
    out, offset = [], 0
    for n in lengths:
        out.append(values[offset:offset + n].astype(np.float64))
        offset += n
    return out


def encode_error(exc):
    body = {'type': type(exc).__name__, 'message': str(exc)}
    if isinstance(exc, NonFiniteIterate):
        body.update(iteration=exc.iteration, coord=exc.coord)
    return json.dumps(body).encode()


def raise_error(worker, payload):
    body = json.loads(payload)
    if body['type'] == 'NonFiniteIterate':
        raise NonFiniteIterate(body['iteration'], body.get('coord'))
    raise TransportFailure(worker, f"{body['type']}: {body['message']}")


def replica_digest(res, theta, theta_last, k):
    """Rolling hash of (r_u, r_z, theta, k)"""
    h = hashlib.blake2b(digest_size=32)
    h.update(np.ascontiguousarray(res.r_u).tobytes())
    h.update(np.ascontiguousarray(res.r_z).tobytes())
    h.update(struct.pack('<ddQ', theta, theta_last, k))
    return h.digest()


def first_differing_row(replicas):
    """Smallest row where some (r_u, r_z) replica differs from the first one, or None"""
    ref_u, ref_z = replicas[0]
    first = None
    for r_u, r_z in replicas[1:]:
        differs = np.flatnonzero((r_u != ref_u) | (r_z != ref_z))
        if differs.size:
            first = int(differs[0]) if first is None else min(first, int(differs[0]))
    return first


# Shards

@dataclass
class FaultPlan:
    """Injected failures for testing the harness"""
    kill_worker: int = None
    kill_at: int = None
    perturb_worker: int = None
    perturb_at: int = None
    perturb_row: int = 0


@dataclass(eq=False)
class WorkerShard:
    """Everything one worker needs: its nodes' columns, slices of u, z, D and residual replicas"""
    worker: int
    nodes: list
    blocks: list
    columns: np.ndarray
    d_values: np.ndarray
    u: np.ndarray
    z: np.ndarray
    res: Residuals
    loss: CompositeLoss
    reg: object
    sampler: DistributedSampler
    tau: int
    s: int
    mode: str
    theta: float
    theta_last: float
    k: int = 0
    merged_block: object = None
    max_drift: float = 0.0

    def digest(self):
        return replica_digest(self.res, self.theta, self.theta_last, self.k)

    def positions(self, coords):
        return np.searchsorted(self.columns, coords)

    def local_step(self, deterministic=True):
        """Sample, solve the prox subproblems and update owned coordinates; returns deltas"""
        scalars = iteration_scalars(self, self.tau, self.s, self.mode)
        sample = self.sampler.draw(self.k)
        if deterministic:
            groups = [(node, block, coords) for node, block, coords
                      in zip(self.nodes, self.blocks, sample.per_node)]
        else:
            groups = [(self.nodes[0], self.merged_block, sample.indices)]
        updates = []
        for node, block, coords in groups:
            pos = self.positions(coords)
            updates.append(node_update(self.loss, self.reg, block, coords, self.d_values[pos],
                                       self.z[pos], self.res, scalars, node=node))
        for update in updates:
            pos = self.positions(update.coords)
            self.z[pos] += update.t
            if scalars.coef != 0.0:
                self.u[pos] -= scalars.coef * update.t
        pos = self.positions(sample.indices)
        values = np.concatenate([self.z[pos], self.u[pos]])
        bad = ~np.isfinite(values) | (np.abs(values) > Config.DIVERGENCE_LIMIT)
        if bad.any():
            coord = int(sample.indices[np.flatnonzero(bad)[0] % len(pos)])
            raise NonFiniteIterate(self.k, coord)
        return [ResidualDelta(node=u.node, rows=u.rows, dz=u.dz, du=u.du) for u in updates]

    def partial_products(self):
        """A_l u_l and A_l z_l for every hosted node"""
        parts = []
        for block in self.blocks:
            pos = self.positions(block.columns)
            local = np.arange(block.n_cols)
            parts.append((block.combine(local, self.u[pos]), block.combine(local, self.z[pos])))
        return parts


def checksum_barrier(shards):
    """True when all replicas agree; DesyncDetected with the first differing row otherwise"""
    digests = {shard.digest() for shard in shards}
    if len(digests) <= 1:
        return True
    row = first_differing_row([(shard.res.r_u, shard.res.r_z) for shard in shards])
    raise DesyncDetected(shards[0].k, -1 if row is None else row)


def worker_groups(c, workers):
    """Contiguous node groups, one per worker"""
    if not 1 <= workers <= c:
        raise InvalidRange(f"workers={workers} must lie in 1..c={c}")
    return [list(map(int, g)) for g in np.array_split(np.arange(c), workers)]


def make_shards(problem, partition, stepsizes, config, workers, z0=None):
    """Split the problem by node group; residual replicas start identical"""
    m = problem.matrix
    partition.check(m.n_cols)
    config.check(partition)
    D = stepsizes.values if hasattr(stepsizes, 'values') else np.asarray(stepsizes, dtype=np.float64)
    if len(D) != m.n_cols:
        raise ShardMismatch(f"{len(D)} stepsizes for {m.n_cols} coordinates")
    blocks = [m.column_block(cols) for cols in partition.blocks]
    state = initial_state(problem, config.tau, partition.s, z0=z0, blocks=blocks)
    loss = problem.loss
    shard_loss = CompositeLoss(matrix=None, kind=loss.kind, b=loss.b, q=loss.q, svm_lambda=loss.svm_lambda)

    shards = []
    for rank, nodes in enumerate(worker_groups(partition.c, workers)):
        columns = np.sort(np.concatenate([partition.block(l) for l in nodes]))
        shards.append(WorkerShard(
            worker=rank, nodes=nodes, blocks=[blocks[l] for l in nodes], columns=columns,
            d_values=D[columns], u=state.u[columns].copy(), z=state.z[columns].copy(),
            res=state.res.copy(), loss=shard_loss, reg=problem.reg,
            sampler=DistributedSampler(partition, config.tau, config.seed, nodes=nodes),
            tau=config.tau, s=partition.s, mode=config.mode,
            theta=state.theta, theta_last=state.theta_last,
            merged_block=None if config.deterministic else m.column_block(columns),
        ))
    covered = np.sort(np.concatenate([sh.columns for sh in shards]))
    if not np.array_equal(covered, np.arange(m.n_cols)):
        raise ShardMismatch("shards do not partition the coordinates")
    return shards, state


# Schedule shared by hub and workers

def due(k, every):
    return bool(every) and k % every == 0


def monitor_due(k, every, max_iter):
    return k % every == 0 or k == max_iter


# Transports

class Channel(ABC):
    """Worker side of a transport"""

    @abstractmethod
    def send(self, frame):
        pass

    @abstractmethod
    def recv(self):
        pass

    @abstractmethod
    def die(self):
        """Drop off the transport without a word (fault injection)"""


class Transport(ABC):
    """Hub side: start workers, gather one frame per worker, broadcast to all"""

    def __init__(self, workers, timeout=None):
        self.workers = workers
        self.timeout = timeout if timeout is not None else Config.TRANSPORT_TIMEOUT

    @abstractmethod
    def start(self, shards, run_config, plan):
        pass

    @abstractmethod
    def gather(self):
        """Frames from all workers in rank order; TransportFailure when one is gone"""

    @abstractmethod
    def broadcast(self, blob):
        pass

    @abstractmethod
    def close(self):
        pass


class QueueChannel(Channel):
    def __init__(self, up, down):
        self.up = up
        self.down = down

    def send(self, frame):
        self.up.put(frame)

    def recv(self):
        return self.down.get()

    def die(self):
        self.up.put(None)


class InProcessTransport(Transport):
    """Workers are threads in this process talking through queues"""

    def start(self, shards, run_config, plan):
        self.up = [queue.Queue() for _ in range(self.workers)]
        self.down = [queue.Queue() for _ in range(self.workers)]
        self.threads = []
        for rank, shard in enumerate(shards):
            channel = QueueChannel(self.up[rank], self.down[rank])
            thread = threading.Thread(target=worker_loop, args=(shard, channel, run_config, plan),
                                      name=f"hydra2-worker-{rank}", daemon=True)
            thread.start()
            self.threads.append(thread)

    def gather(self):
        frames = []
        for rank in range(self.workers):
            try:
                frame = self.up[rank].get(timeout=self.timeout)
            except queue.Empty:
                raise TransportFailure(rank, f"no message within {self.timeout}s")
            if frame is None:
                raise TransportFailure(rank, "worker left the transport")
            frames.append(frame)
        return frames

    def broadcast(self, blob):
        for q in self.down:
            q.put(blob)

    def close(self):
        for thread in self.threads:
            thread.join(timeout=self.timeout)


def send_message(sock, blob):
    sock.sendall(LENGTH.pack(len(blob)) + blob)


def recv_exact(sock, size):
    chunks, remaining = [], size
    while remaining:
        chunk = sock.recv(min(remaining, 1 << 20))
        if not chunk:
            raise ConnectionError("connection closed")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b''.join(chunks)


def recv_message(sock):
    (length,) = LENGTH.unpack(recv_exact(sock, LENGTH.size))
    return recv_exact(sock, length)


class SocketChannel(Channel):
    def __init__(self, sock):
        self.sock = sock

    def send(self, frame):
        send_message(self.sock, frame)

    def recv(self):
        return recv_message(self.sock)

    def die(self):
        self.sock.close()
        os._exit(1)


def _tcp_worker_main(rank, host, port, shard, run_config, plan):
    sock = socket.create_connection((host, port))
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    send_message(sock, struct.pack('<H', rank))
    try:
        worker_loop(shard, SocketChannel(sock), run_config, plan)
    finally:
        sock.close()


class TcpTransport(Transport):
    """Workers are OS processes connected to the hub over TCP"""

    def __init__(self, workers, timeout=None, host=None):
        super().__init__(workers, timeout)
        self.host = host or Config.TCP_HOST

    def start(self, shards, run_config, plan):
        self.server = socket.create_server((self.host, 0))
        self.server.settimeout(self.timeout)
        port = self.server.getsockname()[1]
        ctx = multiprocessing.get_context('spawn')
        self.processes = [
            ctx.Process(target=_tcp_worker_main, args=(rank, self.host, port, shard, run_config, plan),
                        name=f"hydra2-worker-{rank}", daemon=True)
            for rank, shard in enumerate(shards)
        ]
        for process in self.processes:
            process.start()
        self.sockets = [None] * self.workers
        for _ in range(self.workers):
            try:
                conn, _ = self.server.accept()
            except socket.timeout:
                raise TransportFailure(-1, "workers did not connect in time")
            conn.settimeout(self.timeout)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            (rank,) = struct.unpack('<H', recv_message(conn))
            self.sockets[rank] = conn
        logger.info(f"TCP transport: {self.workers} workers connected on port {port}")

    def gather(self):
        frames = []
        for rank, conn in enumerate(self.sockets):
            try:
                frames.append(recv_message(conn))
            except (OSError, ConnectionError) as e:
                raise TransportFailure(rank, str(e))
        return frames

    def broadcast(self, blob):
        for conn in self.sockets:
            try:
                send_message(conn, blob)
            except OSError:
                pass

    def close(self):
        for conn in self.sockets:
            if conn is not None:
                conn.close()
        self.server.close()
        for process in self.processes:
            process.join(timeout=self.timeout)
            if process.is_alive():
                process.terminate()


# Worker and hub loops

@dataclass
class RunConfig:
    """Schedule parameters every party must agree on"""
    max_iter: int
    monitor_every: int
    refresh_every: int
    checksum_every: int
    deterministic: bool = True


def _control(blob):
    frames = unpack_frames(blob)
    kind, _, _, _, payload = decode_frame(frames[0])
    return kind, (payload[0] if payload else None), frames


def worker_loop(shard, channel, run, plan=None):
    """Run one worker until the hub says stop, max_iter is reached or an error is broadcast"""
    plan = plan or FaultPlan()
    rank = shard.worker
    try:
        while shard.k < run.max_iter:
            if plan.kill_worker == rank and plan.kill_at == shard.k:
                channel.die()
                return
            deltas = shard.local_step(run.deterministic)
            channel.send(encode_frame(DELTA, rank, shard.k, encode_deltas(deltas)))
            frames = unpack_frames(channel.recv())
            if any(decode_frame(f)[0] == ERROR for f in frames):
                return
            for frame in frames:
                for delta in decode_deltas(decode_frame(frame)[4]):
                    shard.res.r_z[delta.rows] += delta.dz
                    shard.res.r_u[delta.rows] += delta.du
            advance_theta(shard, shard.mode)
            k = shard.k

            if plan.perturb_worker == rank and plan.perturb_at == k:
                row = plan.perturb_row
                shard.res.r_z[row] = np.nextafter(shard.res.r_z[row], np.inf)

            if due(k, run.refresh_every):
                payload = encode_arrays(*[a for pair in shard.partial_products() for a in pair])
                channel.send(encode_frame(REFRESH, rank, k, payload))
                fresh = _sum_partials(unpack_frames(channel.recv()), len(shard.res.r_u))
                if fresh is None:
                    return
                shard.max_drift = max(shard.max_drift, shard.res.reset(*fresh))

            if due(k, run.checksum_every):
                channel.send(encode_frame(CHECKSUM, rank, k, shard.digest()))
                kind, code, _ = _control(channel.recv())
                if kind == ERROR:
                    return
                if code == SEND_REPLICA:
                    channel.send(encode_frame(REPLICA, rank, k, encode_arrays(shard.res.r_u, shard.res.r_z)))
                    channel.recv()
                    return

            if monitor_due(k, run.monitor_every, run.max_iter):
                channel.send(encode_frame(XSLICE, rank, k, encode_arrays(shard.u, shard.z)))
                kind, code, _ = _control(channel.recv())
                if kind == ERROR or code == STOP:
                    return
    except Exception as e:
        logger.error(f"Worker {rank} failed at iteration {shard.k}: {e}")
        try:
            channel.send(encode_frame(ERROR, rank, shard.k, encode_error(e), status=1))
        except Exception:
            pass


def _sum_partials(frames, n_rows):
    """Sum A_l u_l and A_l z_l over all nodes in ascending node order"""
    r_u, r_z = np.zeros(n_rows), np.zeros(n_rows)
    for frame in frames:
        kind, _, _, _, payload = decode_frame(frame)
        if kind == ERROR:
            return None
        values = np.frombuffer(payload, dtype='<f8').reshape(-1, 2, n_rows)
        for part_u, part_z in values:
            r_u += part_u
            r_z += part_z
    return r_u, r_z


class Coordinator:
    """Hub side of a distributed run"""

    def __init__(self, problem, partition, stepsizes, config, transport, plan=None, z0=None):
        self.config = config
        self.problem = problem
        self.partition = partition
        self.transport = transport
        self.plan = plan or FaultPlan()
        self.shards, self.state = make_shards(problem, partition, stepsizes, config,
                                              transport.workers, z0=z0)
        self.run_config = RunConfig(
            max_iter=config.max_iter, monitor_every=config.monitor_cadence(partition.s),
            refresh_every=config.refresh_every, checksum_every=config.checksum_every,
            deterministic=config.deterministic,
        )
        self.desyncs = 0

    def _gather(self):
        frames = self.transport.gather()
        for frame in frames:
            kind, _, worker, _, payload = decode_frame(frame)
            if kind == ERROR:
                self.transport.broadcast(pack_frames([frame]))
                raise_error(worker, payload)
        return frames

    def _control(self, code):
        self.transport.broadcast(pack_frames([encode_frame(CONTROL, 0, self.state.k, bytes([code]))]))

    def _abort(self, reason):
        self.transport.broadcast(pack_frames([encode_frame(ERROR, 0, self.state.k, reason.encode(), 1)]))

    def _collect_iterates(self):
        state = self.state
        for shard, frame in zip(self.shards, self._gather()):
            n = len(shard.columns)
            u, z = decode_arrays(decode_frame(frame)[4], n, n)
            state.u[shard.columns] = u
            state.z[shard.columns] = z

    def _check_replicas(self):
        state = self.state
        frames = self._gather()
        reference = replica_digest(state.res, state.theta, state.theta_last, state.k)
        if all(decode_frame(f)[4] == reference for f in frames):
            self._control(CONTINUE)
            return
        self.desyncs += 1
        self._control(SEND_REPLICA)
        n = self.problem.matrix.n_rows
        replicas = [(state.res.r_u, state.res.r_z)]
        replicas += [tuple(decode_arrays(decode_frame(f)[4], n, n)) for f in self._gather()]
        row = first_differing_row(replicas)
        self._abort("replica checksum mismatch")
        raise DesyncDetected(state.k, -1 if row is None else row)

    def run(self):
        cfg, run, state = self.config, self.run_config, self.state
        monitor = Monitor(self.problem, optimum=cfg.optimum, epsilon=cfg.epsilon)
        n = self.problem.matrix.n_rows
        logger.info(f"Distributed {cfg.mode}: {self.transport.workers} workers, c={self.partition.c}, "
                    f"tau={cfg.tau}, max_iter={cfg.max_iter}")
        row = monitor.record(state)
        if monitor.reached(row):
            run.max_iter = 0
        self.transport.start(self.shards, run, self.plan)
        try:
            while state.k < run.max_iter:
                frames = self._gather()
                self.transport.broadcast(pack_frames(frames))
                for frame in frames:
                    for delta in decode_deltas(decode_frame(frame)[4]):
                        state.res.r_z[delta.rows] += delta.dz
                        state.res.r_u[delta.rows] += delta.du
                advance_theta(state, cfg.mode)
                k = state.k

                if due(k, run.refresh_every):
                    frames = self._gather()
                    self.transport.broadcast(pack_frames(frames))
                    state.max_drift = max(state.max_drift, state.res.reset(*_sum_partials(frames, n)))
                if due(k, run.checksum_every):
                    self._check_replicas()
                if monitor_due(k, run.monitor_every, run.max_iter):
                    self._collect_iterates()
                    row = monitor.record(state)
                    stop = monitor.reached(row) or k == run.max_iter
                    self._control(STOP if stop else CONTINUE)
                    if stop:
                        break
        except Hydra2Error as e:
            # Release workers still waiting on a broadcast
            self._abort(str(e))
            raise
        finally:
            self.transport.close()

        trace = monitor.trace()
        trace.attrs.update({'iterations': state.k, 'max_drift': state.max_drift,
                            'reached_target': bool(monitor.reached(monitor.rows[-1])),
                            'workers': self.transport.workers, 'desyncs': self.desyncs})
        logger.info(f"Distributed run finished after {state.k} iterations, "
                    f"L={trace['objective'].iloc[-1]:.10g}")
        return reconstruct_x(state), trace


def run_distributed(config, problem, partition, stepsizes, transport=None, workers=None,
                    plan=None, z0=None):
    """Hydra^2 across workers; output equals the single-process run for the same seed.

    With one worker and no transport the single-process solver runs directly.
    """
    if transport is None:
        workers = workers or 1
        if workers == 1 and plan is None:
            return Hydra2Solver(problem, partition, stepsizes, config).run(z0=z0)
        transport = InProcessTransport(workers)
    start = time.perf_counter()
    result = Coordinator(problem, partition, stepsizes, config, transport, plan=plan, z0=z0).run()
    logger.info(f"Distributed run took {time.perf_counter() - start:.2f}s")
    return result


if __name__ == "__main__":
    from data_generator import generate_block_angular
    from problems import make_lasso
    from solver import SolverConfig
    from sparse_matrix import partition_uniform
    from stepsizes import StepsizeCalculator

    print("Testing the in-process harness...")
    data = generate_block_angular(rows=200, cols=400, c=4, avg_nnz_per_row=10, max_nnz_per_row=40, seed=1)
    problem = make_lasso(data.matrix, data.b, lambda_ratio=0.1)
    partition = partition_uniform(400, 4)
    D = StepsizeCalculator(data.matrix, partition, tau=5).compute('D1')
    cfg = SolverConfig(tau=5, c=4, max_iter=200, seed=3)
    _, single = run_distributed(cfg, problem, partition, D, workers=1)
    _, multi = run_distributed(cfg, problem, partition, D, workers=2)
    print(f"  identical objectives: {np.array_equal(single['objective'], multi['objective'])}")
