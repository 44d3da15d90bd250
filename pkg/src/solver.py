import math
import time
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np
import pandas as pd
from tqdm import tqdm

from config import Config
from exceptions import InvalidRange, NonFiniteIterate, ShardMismatch, ThetaOutOfRange
from problems import Residuals, grad_block, objective_from_residuals, prox_block
from sampling import DistributedSampler, check_tau
from utils import setup_logging

logger = setup_logging(__name__)

MODES = ('hydra2', 'hydra')


def theta_next(theta):
    """Positive root of x^2 + theta^2 x - theta^2 = 0"""
    if not 0.0 < theta <= 1.0:
        raise ThetaOutOfRange(theta)
    theta_sq = theta * theta
    # Rationalized form of (sqrt(theta^4 + 4 theta^2) - theta^2) / 2, free of cancellation
    return 2.0 * theta_sq / (math.sqrt(theta_sq * theta_sq + 4.0 * theta_sq) + theta_sq)


def theta_schedule(theta0, k):
    """theta_0, ..., theta_k"""
    thetas = [theta0]
    for _ in range(k):
        thetas.append(theta_next(thetas[-1]))
    return np.array(thetas)


def u_coefficient(theta, tau, s, at_theta0):
    """1/theta^2 - s/(tau theta); exactly zero at theta_0 = tau/s"""
    if at_theta0:
        theta0 = Fraction(tau, s)
        return float(1 / theta0**2 - Fraction(s, tau) / theta0)
    t = np.longdouble(theta)
    return float(1 / (t * t) - np.longdouble(s) / (np.longdouble(tau) * t))


def beta_scale(theta, tau, s, at_theta0):
    """s theta / tau; exactly one at theta_0"""
    if at_theta0:
        return 1.0
    return float(np.longdouble(s) * np.longdouble(theta) / np.longdouble(tau))


def default_monitor_every(s, c, tau):
    return max(1, s // (c * tau))


@dataclass
class SolverConfig:
    """Run parameters of Hydra^2 / Hydra"""
    tau: int
    c: int
    rule: str = 'D1'
    max_iter: int = 1000
    epsilon: float = None
    optimum: float = None
    mode: str = 'hydra2'
    monitor_every: int = None
    refresh_every: int = Config.RESIDUAL_REFRESH
    seed: int = 0
    deterministic: bool = True
    checksum_every: int = Config.CHECKSUM_EVERY
    verbose: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidRange(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.max_iter < 0:
            raise InvalidRange(f"max_iter must be nonnegative, got {self.max_iter}")

    def check(self, partition):
        """Raise unless this config matches the partition"""
        if self.c != partition.c:
            raise ShardMismatch(f"config has c={self.c}, partition has c={partition.c}")
        check_tau(self.tau, partition.s)
        return True

    def monitor_cadence(self, s):
        return self.monitor_every or default_monitor_every(s, self.c, self.tau)

    def to_dict(self):
        return asdict(self)


@dataclass(eq=False)
class SolverState:
    """Solver iterates; x is never formed inside an iteration"""
    u: np.ndarray
    z: np.ndarray
    res: Residuals
    theta: float
    theta_last: float
    k: int = 0
    max_drift: float = 0.0

    def copy(self):
        return SolverState(u=self.u.copy(), z=self.z.copy(), res=self.res.copy(),
                           theta=self.theta, theta_last=self.theta_last, k=self.k,
                           max_drift=self.max_drift)


def blocked_matvec(blocks, x, n_rows):
    """A x summed block by block in node order"""
    out = np.zeros(n_rows)
    for block in blocks:
        out += block.combine(np.arange(block.n_cols), x[block.columns])
    return out


def initial_state(problem, tau, s, z0=None, blocks=None):
    """theta_0 = tau/s, u_0 = 0, z_0 given (zero by default)"""
    m = problem.matrix
    z = np.zeros(m.n_cols) if z0 is None else np.array(z0, dtype=np.float64)
    u = np.zeros(m.n_cols)
    theta0 = tau / s
    if blocks is None:
        res = Residuals.from_iterates(m, u, z)
    else:
        res = Residuals(r_u=blocked_matvec(blocks, u, m.n_rows), r_z=blocked_matvec(blocks, z, m.n_rows))
    return SolverState(u=u, z=z, res=res, theta=theta0, theta_last=theta0)


def reconstruct_x(state):
    """x = theta^2 u + z with theta of the last completed iteration"""
    return state.theta_last**2 * state.u + state.z


@dataclass(eq=False)
class NodeUpdate:
    """What node l changes in one iteration: its coordinates and the residual rows they touch"""
    node: int
    coords: np.ndarray
    t: np.ndarray
    rows: np.ndarray
    dz: np.ndarray
    du: np.ndarray


@dataclass(eq=False)
class IterationScalars:
    theta: float
    theta_sq: float
    coef: float
    scale: float


def iteration_scalars(state, tau, s, mode):
    at_theta0 = mode == 'hydra' or state.k == 0
    theta = state.theta
    return IterationScalars(theta=theta, theta_sq=theta * theta,
                            coef=u_coefficient(theta, tau, s, at_theta0),
                            scale=beta_scale(theta, tau, s, at_theta0))


def node_update(loss, reg, block, coords, d_values, z_values, res, scalars, node=0):
    """One node's share of an iteration: gradient, prox, residual delta (sparse, on the touched rows).

    ``d_values`` and ``z_values`` hold D_ii and z_i for the coordinates in ``coords``.
    """
    local = np.searchsorted(block.columns, coords)
    gathered = block.gather(local)
    g = grad_block(loss, res, scalars.theta_sq, block, local, gathered)
    t = prox_block(reg, g, scalars.scale * d_values, z_values)
    dense = block.combine(local, t, gathered)
    rows = np.unique(gathered[1])
    dz = dense[rows]
    du = -scalars.coef * dz if scalars.coef != 0.0 else np.zeros_like(dz)
    return NodeUpdate(node=node, coords=coords, t=t, rows=rows, dz=dz, du=du)


def apply_coordinates(state, update, coef):
    state.z[update.coords] += update.t
    if coef != 0.0:
        state.u[update.coords] -= coef * update.t


def apply_delta(res, update):
    """Add one node's residual delta; callers go in ascending node order"""
    res.r_z[update.rows] += update.dz
    res.r_u[update.rows] += update.du


def check_finite(state, coords, iteration):
    """Abort when an updated coordinate blew up"""
    values = np.concatenate([state.z[coords], state.u[coords]])
    bad = ~np.isfinite(values) | (np.abs(values) > Config.DIVERGENCE_LIMIT)
    if bad.any():
        raise NonFiniteIterate(iteration, int(coords[np.flatnonzero(bad)[0] % len(coords)]))


def advance_theta(state, mode):
    state.theta_last = state.theta
    if mode == 'hydra2':
        state.theta = theta_next(state.theta)
    state.k += 1


def step(state, sample, D, loss, reg, blocks, tau, s, mode='hydra2', deterministic=True):
    """One iteration over all nodes of ``sample``"""
    scalars = iteration_scalars(state, tau, s, mode)
    if deterministic:
        updates = [node_update(loss, reg, blocks[l], coords, D[coords], state.z[coords], state.res, scalars, node=l)
                   for l, coords in enumerate(sample.per_node)]
    else:
        coords = sample.indices
        updates = [node_update(loss, reg, loss.matrix.block, coords, D[coords], state.z[coords], state.res,
                               scalars)]
    for update in updates:
        apply_coordinates(state, update, scalars.coef)
        apply_delta(state.res, update)
    check_finite(state, sample.indices, state.k)
    advance_theta(state, mode)
    return state


@dataclass
class IterationBound:
    """Iterations after which P(L(x_k) - L* <= eps) >= 1 - rho"""
    C1: float
    C2: float
    rho: float
    epsilon: float
    tau: int
    s: int
    k_min: int = None

    def __post_init__(self):
        if self.k_min is None:
            self.k_min = iteration_bound(self.C1, self.C2, self.rho, self.epsilon, self.tau, self.s)

    @classmethod
    def from_run(cls, L_x0, optimum, x0, x_star, D, tau, s, rho, epsilon):
        """C1 = (1 - tau/s) L0 and C2 = d0^T D d0 / 2 with L0 = L(x0) - L*, d0 = x0 - x*"""
        L0 = L_x0 - optimum
        if not 0 < epsilon < L0:
            raise InvalidRange(f"epsilon={epsilon} must lie in (0, L0={L0:.6g})")
        d0 = np.asarray(x0) - np.asarray(x_star)
        values = D.values if hasattr(D, 'values') else np.asarray(D)
        C1 = (1.0 - tau / s) * L0
        C2 = 0.5 * float(d0 @ (values * d0))
        return cls(C1=C1, C2=C2, rho=rho, epsilon=epsilon, tau=tau, s=s)


def iteration_bound(C1, C2, rho, eps, tau, s):
    """ceil((2s/tau)(sqrt((C1 + C2)/(rho eps)) - 1) + 1), at least 1"""
    if not 0.0 < rho < 1.0:
        raise InvalidRange(f"rho={rho} must lie in (0, 1)")
    if not eps > 0.0:
        raise InvalidRange(f"epsilon={eps} must be positive")
    if C1 < 0 or C2 < 0:
        raise InvalidRange("C1 and C2 must be nonnegative")
    check_tau(tau, s)
    value = (2.0 * s / tau) * (math.sqrt((C1 + C2) / (rho * eps)) - 1.0) + 1.0
    # Absorb rounding in the square root so exact integers are not bumped up
    return max(1, math.ceil(value - 1e-9 * max(1.0, abs(value))))


class Monitor:
    """Objective trace at the monitor cadence with a running best value"""

    def __init__(self, problem, optimum=None, epsilon=None):
        self.problem = problem
        self.optimum = optimum
        self.epsilon = epsilon
        self.rows = []
        self.best = math.inf
        self.start = time.perf_counter()

    def record(self, state, x=None, ax=None, elapsed=None):
        x = reconstruct_x(state) if x is None else x
        ax = state.res.ax(state.theta_last**2) if ax is None else ax
        loss, reg = self.problem.loss, self.problem.reg
        value = objective_from_residuals(loss, reg, ax, x)
        self.best = min(self.best, value)
        row = {
            'k': state.k,
            'seconds': time.perf_counter() - self.start if elapsed is None else elapsed,
            'objective': value,
            'best_objective': self.best,
            'theta': state.theta_last,
        }
        if self.optimum is not None:
            row['suboptimality'] = value - self.optimum
        if self.problem.kind == 'svm_dual':
            row['duality_gap'] = self.problem.duality_gap(x, ax=ax)
        self.rows.append(row)
        return row

    def reached(self, row):
        if self.epsilon is None:
            return False
        if 'suboptimality' in row:
            return row['suboptimality'] <= self.epsilon
        if 'duality_gap' in row:
            return row['duality_gap'] <= self.epsilon
        return False

    def trace(self):
        return pd.DataFrame(self.rows)


class Hydra2Solver:
    """Single-process Hydra^2 (or Hydra) on a partitioned problem"""

    def __init__(self, problem, partition, stepsizes, config):
        self.config = config
        self.problem = problem
        self.partition = partition
        config.check(partition)
        partition.check(problem.d)
        self.D = stepsizes.values if hasattr(stepsizes, 'values') else np.asarray(stepsizes, dtype=np.float64)
        if len(self.D) != problem.d:
            raise ShardMismatch(f"{len(self.D)} stepsizes for {problem.d} coordinates")
        m = problem.matrix
        self.blocks = [m.column_block(cols) for cols in partition.blocks]

    def run(self, z0=None, callback=None):
        """Iterate until max_iter or the monitored target is reached; returns (x, trace)"""
        cfg, p = self.config, self.partition
        state = initial_state(self.problem, cfg.tau, p.s, z0=z0, blocks=self.blocks)
        sampler = DistributedSampler(p, cfg.tau, cfg.seed)
        monitor = Monitor(self.problem, optimum=cfg.optimum, epsilon=cfg.epsilon)
        every = cfg.monitor_cadence(p.s)
        loss, reg = self.problem.loss, self.problem.reg

        logger.info(f"Running {cfg.mode} with c={p.c}, s={p.s}, tau={cfg.tau}, "
                    f"max_iter={cfg.max_iter}, monitor every {every}")
        row = monitor.record(state)
        done = monitor.reached(row)
        progress = tqdm(total=cfg.max_iter, desc=cfg.mode, disable=not cfg.verbose)
        while not done and state.k < cfg.max_iter:
            sample = sampler.draw(state.k)
            step(state, sample, self.D, loss, reg, self.blocks, cfg.tau, p.s,
                 mode=cfg.mode, deterministic=cfg.deterministic)
            progress.update(1)
            if cfg.refresh_every and state.k % cfg.refresh_every == 0:
                n = self.problem.matrix.n_rows
                drift = state.res.reset(blocked_matvec(self.blocks, state.u, n),
                                        blocked_matvec(self.blocks, state.z, n))
                state.max_drift = max(state.max_drift, drift)
            if callback is not None:
                callback(state, sample)
            if state.k % every == 0 or state.k == cfg.max_iter:
                row = monitor.record(state)
                done = monitor.reached(row)
        progress.close()

        if monitor.rows[-1]['k'] != state.k:
            monitor.record(state)
        self.state = state
        trace = monitor.trace()
        trace.attrs.update({'iterations': state.k, 'max_drift': state.max_drift,
                            'reached_target': bool(done)})
        logger.info(f"{cfg.mode} finished after {state.k} iterations, "
                    f"L={trace['objective'].iloc[-1]:.10g}")
        return reconstruct_x(state), trace


def solve(config, problem, partition, stepsizes, z0=None):
    """Run the solver in this process; returns (x, trace)"""
    return Hydra2Solver(problem, partition, stepsizes, config).run(z0=z0)


if __name__ == "__main__":
    from problems import make_lasso
    from sparse_matrix import SparseMatrix, partition_uniform

    print("Testing Hydra^2 on the 1-D lasso...")
    A = SparseMatrix.from_dense([[1.0]])
    problem = make_lasso(A, np.array([1.0]), lam=0.1)
    x, trace = solve(SolverConfig(tau=1, c=1, max_iter=50), problem, partition_uniform(1, 1), np.ones(1))
    print(f"  x = {x}, L = {trace['objective'].iloc[-1]:.6f}")
    print(f"  iteration bound example: {iteration_bound(0.5, 0.5, 0.1, 0.01, 10, 100)}")
