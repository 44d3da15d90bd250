"""Admissible stepsize vectors for the distributed sampling.

Four rules are provided, all of the form D_ii = sum_j w_j A_ji^2:

  D1  per-row weights alpha*_j built from omega_j, omega'_j (one pass over the data)
  D2  uniform weight beta* built from the spectral quantities sigma, sigma'
  D3  uniform weight 2(1 + (tau-1)(max_j omega_j - 1)/s1)
  D4  uniform weight tau/(tau-1) (1 + (sigma~ - 1)(tau-1)/(s-1))

For tau >= 2 they satisfy D1 <= D4 <= D3 and D2 <= D4 coordinatewise.
Column sums are accumulated with exactly rounded summation so results do not
depend on traversal order or thread count.
"""
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
from scipy.sparse.linalg import lsmr

from config import Config
from exceptions import ManifestError, NoConvergence, TauOutOfRange, TauTooSmall
from utils import setup_logging, timer

logger = setup_logging(__name__)

RULES = ('D1', 'D2', 'D3', 'D4')


@dataclass(eq=False)
class StepsizeVector:
    """Diagonal D with the rule and scalars that produced it"""
    values: np.ndarray
    rule: str
    tau: int = None
    c: int = None
    s: int = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.values)

    def summary(self):
        return {
            'rule': self.rule,
            'min': float(np.min(self.values)),
            'median': float(np.median(self.values)),
            'max': float(np.max(self.values)),
        }

    def to_dict(self):
        return {
            'rule': self.rule, 'tau': self.tau, 'c': self.c, 's': self.s,
            'meta': self.meta, 'values': self.values.tolist(),
        }

    def save_json(self, path):
        path = Path(path)
        with open(path, 'w') as handle:
            json.dump(self.to_dict(), handle, indent=1)
        logger.info(f"Stepsizes {self.rule} saved to: {path}")
        return path

    def save_binary(self, path):
        """Binary sidecar: magic, version, header length, JSON header, float64 values"""
        path = Path(path)
        header = {k: v for k, v in self.to_dict().items() if k != 'values'}
        header['d'] = len(self.values)
        blob = json.dumps(header).encode()
        with open(path, 'wb') as handle:
            handle.write(_DVEC_MAGIC)
            handle.write(struct.pack('<II', Config.MATRIX_VERSION, len(blob)))
            handle.write(blob)
            handle.write(np.ascontiguousarray(self.values, dtype='<f8').tobytes())
        logger.info(f"Stepsizes {self.rule} saved to: {path}")
        return path

    @classmethod
    def load(cls, path):
        """Load either export format, chosen by file suffix"""
        path = Path(path)
        if path.suffix == '.json':
            with open(path) as handle:
                raw = json.load(handle)
            values = np.asarray(raw.pop('values'), dtype=np.float64)
        else:
            with open(path, 'rb') as handle:
                if handle.read(8) != _DVEC_MAGIC:
                    raise ManifestError(f"{path} is not a stepsize file")
                _, length = struct.unpack('<II', handle.read(8))
                raw = json.loads(handle.read(length))
                values = np.frombuffer(handle.read(), dtype='<f8').astype(np.float64)
            if len(values) != raw.pop('d'):
                raise ManifestError(f"{path} is truncated")
        return cls(values=values, rule=raw['rule'], tau=raw.get('tau'), c=raw.get('c'),
                   s=raw.get('s'), meta=raw.get('meta', {}))


_DVEC_MAGIC = b"HYD2DVEC"


@dataclass(eq=False)
class EsoScalars:
    """Ingredients of the stepsize rules"""
    alpha_star: np.ndarray
    s1: int
    beta_star: float = None
    sigma: float = None
    sigma_prime: float = None
    sigma_tilde: float = None
    v: np.ndarray = None


@dataclass
class SpectralEstimate:
    """Power-iteration estimates of sigma and sigma' (lower bounds)"""
    sigma: float
    sigma_prime: float
    iterations: tuple
    converged: bool
    history: tuple = ((), ())


def s1_of(s):
    return max(1, s - 1)


def _check_tau(tau, s):
    if not 1 <= tau <= s:
        raise TauOutOfRange(tau, s)


def _finalize(m, values, rule, tau, c, s, meta):
    """Padding columns do not enter f, any positive D_ii is admissible there"""
    values = np.asarray(values, dtype=np.float64)
    if m.n_padded:
        values = values.copy()
        values[m.n_active:] = 1.0
    return StepsizeVector(values=values, rule=rule, tau=tau, c=c, s=s, meta=meta)


def compute_alpha_star(stats, tau, s, c=None):
    """alpha*_j = 1 + (tau-1)(omega_j-1)/s1 + (tau/s - (tau-1)/s1)(omega'_j-1)/omega'_j * omega_j"""
    _check_tau(tau, s)
    s1 = s1_of(s)
    omega = stats.omega.astype(np.float64)
    omega_prime = stats.omega_prime.astype(np.float64)
    alpha_1 = 1.0 + (tau - 1) * (omega - 1.0) / s1
    alpha_2 = (tau / s - (tau - 1) / s1) * ((omega_prime - 1.0) / omega_prime) * omega
    return alpha_1 + alpha_2


@timer
def compute_d1(m, alpha_star, tau=None, s=None, c=None):
    """D1_ii = sum_j alpha*_j A_ji^2"""
    values = m.weighted_col_sums(alpha_star)
    meta = {'alpha_star_max': float(np.max(alpha_star)), 'alpha_star_mean': float(np.mean(alpha_star))}
    return _finalize(m, values, 'D1', tau, c, s, meta)


def beta_star_parts(sigma, sigma_prime, tau, s):
    s1 = s1_of(s)
    beta_1 = 1.0 + (tau - 1) * (sigma - 1.0) / s1
    beta_2 = (tau / s - (tau - 1) / s1) * ((sigma_prime - 1.0) / sigma_prime) * sigma
    return beta_1, beta_2


def compute_beta_star(sigma, sigma_prime, tau, s):
    """beta* = beta*_1 + beta*_2"""
    _check_tau(tau, s)
    beta_1, beta_2 = beta_star_parts(sigma, sigma_prime, tau, s)
    return beta_1 + beta_2


def beta_star_upper_bound(stats, tau, s, sigma_tilde=None):
    """beta* with sigma <= sigma~ (or max omega) and sigma' <= max omega'; one pass over the data"""
    sigma = sigma_tilde if sigma_tilde is not None else float(stats.max_omega)
    return compute_beta_star(sigma, float(stats.max_omega_prime), tau, s)


@timer
def compute_d2(m, beta_star, tau=None, s=None, c=None, sigma=None, sigma_prime=None):
    """D2_ii = beta* sum_j A_ji^2"""
    meta = {'beta_star': float(beta_star), 'sigma': sigma, 'sigma_prime': sigma_prime}
    return _finalize(m, beta_star * m.col_sq_norms, 'D2', tau, c, s, meta)


@timer
def compute_d3(m, stats, tau, s, c=None):
    """D3_ii = 2(1 + (tau-1)(max_j omega_j - 1)/s1) sum_j A_ji^2; needs tau >= 2"""
    if tau < 2:
        raise TauTooSmall('D3', tau)
    _check_tau(tau, s)
    factor = 2.0 * (1.0 + (tau - 1) * (stats.max_omega - 1) / s1_of(s))
    meta = {'factor': factor, 'max_omega': stats.max_omega}
    return _finalize(m, factor * m.col_sq_norms, 'D3', tau, c, s, meta)


@timer
def compute_sigma_tilde(m, stats):
    """v_i = sum_j omega_j A_ji^2 / sum_j A_ji^2 and sigma~ = max_i v_i"""
    norms = m.col_sq_norms
    weighted = m.weighted_col_sums(stats.omega)
    v = np.ones(m.n_cols)
    active = m.active_mask
    v[active] = weighted[active] / norms[active]
    return v, float(v[active].max())


@timer
def compute_d4(m, sigma_tilde, tau, s, c=None):
    """D4_ii = tau/(tau-1) (1 + (sigma~-1)(tau-1)/(s-1)) sum_j A_ji^2; needs tau >= 2"""
    if tau < 2:
        raise TauTooSmall('D4', tau)
    _check_tau(tau, s)
    factor = tau / (tau - 1) * (1.0 + (sigma_tilde - 1.0) * (tau - 1) / (s - 1))
    meta = {'factor': factor, 'sigma_tilde': float(sigma_tilde)}
    return _finalize(m, factor * m.col_sq_norms, 'D4', tau, c, s, meta)


# Spectral quantities

def _power_iteration(step, x0, tol, max_iter):
    """Generic generalized power iteration.

    ``step(x)`` returns (rayleigh_quotient, next_x) with next_x normalized.
    Returns the best quotient seen, iterations used, convergence flag and the
    non-decreasing sequence of reported estimates.
    """
    x = x0
    best = 0.0
    previous = None
    history = []
    for it in range(1, max_iter + 1):
        value, x = step(x)
        best = max(best, value)
        history.append(best)
        if previous is not None and abs(value - previous) <= tol * abs(value):
            return best, it, True, history
        previous = value
    return best, max_iter, False, history


def _sigma_step(m, active):
    norms = m.col_sq_norms
    inv_norms = np.zeros(m.n_cols)
    inv_norms[active] = 1.0 / norms[active]

    def step(x):
        y = m.matvec(x)
        value = float(y @ y) / float(norms @ (x * x))
        x_next = m.rmatvec(y) * inv_norms
        return value, x_next / np.sqrt(norms @ (x_next * x_next))
    return step


def _block_solvers(m, p, active):
    """Per block, a map y -> argmin-norm x_l with A_l x_l closest to y"""
    solvers = []
    for l in range(p.c):
        cols = p.block(l)
        cols = cols[active[cols]]
        sub = m.submatrix(cols)
        if len(cols) <= Config.DENSE_BLOCK_LIMIT:
            gram = (sub.T @ sub).toarray()
            solve = _dense_gram_solver(gram)
            solvers.append((cols, sub, lambda y, sub=sub, solve=solve: solve(sub.T @ y)))
        else:
            # Large blocks: iterative least squares instead of a factorization
            solvers.append((cols, sub, lambda y, sub=sub: lsmr(sub, y, atol=1e-12, btol=1e-12)[0]))
    return solvers


def _dense_gram_solver(gram):
    """Cholesky solve, falling back to the pseudo-inverse for rank-deficient blocks"""
    try:
        factor = scipy.linalg.cho_factor(gram)
        diag = np.abs(np.diag(factor[0]))
        if diag.min() ** 2 > 1e-12 * diag.max() ** 2:
            return lambda rhs: scipy.linalg.cho_solve(factor, rhs)
    except scipy.linalg.LinAlgError:
        pass
    pinv = scipy.linalg.pinvh(gram)
    return lambda rhs: pinv @ rhs


def _sigma_prime_step(m, p, active):
    solvers = _block_solvers(m, p, active)

    def block_norm_sq(x):
        return sum(float(np.sum((sub @ x[cols]) ** 2)) for cols, sub, _ in solvers)

    def step(x):
        y = m.matvec(x)
        value = float(y @ y) / block_norm_sq(x)
        x_next = np.zeros(m.n_cols)
        for cols, _, solve in solvers:
            x_next[cols] = solve(y)
        return value, x_next / np.sqrt(block_norm_sq(x_next))
    return step, block_norm_sq


@timer
def compute_sigma_power(m, p, tol=None, max_iter=None, strict=False):
    """sigma, sigma' by power iteration started from all-ones normalized in the D^M (B^M) norm"""
    tol = tol if tol is not None else Config.POWER_TOL
    max_iter = max_iter if max_iter is not None else Config.POWER_MAX_ITER_FACTOR * m.n_cols
    p.check(m.n_cols)
    active = m.active_mask
    ones = active.astype(np.float64)

    sigma_step = _sigma_step(m, active)
    x0 = ones / np.sqrt(m.col_sq_norms @ ones)
    sigma, it_sigma, ok_sigma, hist_sigma = _power_iteration(sigma_step, x0, tol, max_iter)

    prime_step, block_norm_sq = _sigma_prime_step(m, p, active)
    x0 = ones / np.sqrt(block_norm_sq(ones))
    sigma_prime, it_prime, ok_prime, hist_prime = _power_iteration(prime_step, x0, tol, max_iter)

    converged = ok_sigma and ok_prime
    logger.info(f"Power iteration: sigma={sigma:.6g} ({it_sigma} it), "
                f"sigma'={sigma_prime:.6g} ({it_prime} it)")
    if not converged:
        logger.warning(f"Power iteration stopped at max_iter={max_iter} before reaching tol={tol}")
        if strict:
            raise NoConvergence(max_iter, sigma if not ok_sigma else sigma_prime)
    return SpectralEstimate(sigma=sigma, sigma_prime=sigma_prime,
                            iterations=(it_sigma, it_prime), converged=converged,
                            history=(tuple(hist_sigma), tuple(hist_prime)))


def spectral_oracle(m, p):
    """Exact sigma, sigma' by dense generalized eigensolve (small instances only)"""
    active = m.active_mask
    dense = m.to_dense()[:, active]
    gram = dense.T @ dense
    sigma = float(scipy.linalg.eigh(gram, np.diag(np.diag(gram)), eigvals_only=True)[-1])

    # sigma' = largest eigenvalue of the sum of projectors onto range(A_l)
    assignment = p.assignment[active]
    bases = [scipy.linalg.orth(dense[:, assignment == l]) for l in range(p.c)]
    stacked = np.hstack([b for b in bases if b.size])
    sigma_prime = float(scipy.linalg.svdvals(stacked)[0] ** 2)
    return sigma, sigma_prime


def compute_eso_scalars(m, p, stats, tau, spectral=None):
    """All scalar ingredients for one (matrix, partition, tau)"""
    alpha_star = compute_alpha_star(stats, tau, p.s, p.c)
    v, sigma_tilde = compute_sigma_tilde(m, stats)
    scalars = EsoScalars(alpha_star=alpha_star, s1=s1_of(p.s), sigma_tilde=sigma_tilde, v=v)
    if spectral is not None:
        sigma, sigma_prime = spectral
        scalars.sigma, scalars.sigma_prime = sigma, sigma_prime
        scalars.beta_star = compute_beta_star(sigma, sigma_prime, tau, p.s)
    return scalars


class StepsizeCalculator:
    """Compute any subset of the four rules for one (matrix, partition, tau)"""

    def __init__(self, matrix, partition, tau):
        self.config = Config()
        self.matrix = matrix
        self.partition = partition
        self.tau = tau
        _check_tau(tau, partition.s)
        self.stats = None
        self.timings = {}

    def _row_stats(self):
        if self.stats is None:
            from sparse_matrix import row_stats
            self.stats = row_stats(self.matrix, self.partition)
        return self.stats

    def compute(self, rule, sigma_source='power', spectral=None):
        """One rule; sigma_source for D2 is 'power', 'exact' or 'bound'"""
        m, p, tau = self.matrix, self.partition, self.tau
        stats = self._row_stats()
        if rule == 'D1':
            vec = compute_d1(m, compute_alpha_star(stats, tau, p.s, p.c), tau, p.s, p.c)
            elapsed = compute_d1.last_elapsed
        elif rule == 'D2':
            if spectral is None:
                spectral = self.spectral(sigma_source)
            sigma, sigma_prime = spectral
            if sigma_source == 'bound':
                beta = beta_star_upper_bound(stats, tau, p.s, sigma_tilde=sigma)
            else:
                beta = compute_beta_star(sigma, sigma_prime, tau, p.s)
            vec = compute_d2(m, beta, tau, p.s, p.c, sigma=sigma, sigma_prime=sigma_prime)
            vec.meta['sigma_source'] = sigma_source
            elapsed = compute_d2.last_elapsed + self.timings.get('spectral', 0.0)
        elif rule == 'D3':
            vec = compute_d3(m, stats, tau, p.s, p.c)
            elapsed = compute_d3.last_elapsed
        elif rule == 'D4':
            _, sigma_tilde = compute_sigma_tilde(m, stats)
            vec = compute_d4(m, sigma_tilde, tau, p.s, p.c)
            elapsed = compute_d4.last_elapsed + compute_sigma_tilde.last_elapsed
        else:
            raise ValueError(f"unknown stepsize rule {rule!r}, expected one of {RULES}")
        self.timings[rule] = elapsed
        return vec

    def spectral(self, source='power'):
        """(sigma, sigma') from power iteration, the dense oracle, or one-pass upper bounds"""
        m, p = self.matrix, self.partition
        if source == 'exact':
            result = spectral_oracle(m, p)
            self.timings['spectral'] = 0.0
        elif source == 'bound':
            stats = self._row_stats()
            _, sigma_tilde = compute_sigma_tilde(m, stats)
            result = (sigma_tilde, float(stats.max_omega_prime))
            self.timings['spectral'] = compute_sigma_tilde.last_elapsed
        else:
            estimate = compute_sigma_power(m, p)
            result = (estimate.sigma, estimate.sigma_prime)
            self.timings['spectral'] = compute_sigma_power.last_elapsed
        return result

    def compute_all(self, rules=RULES, sigma_source='power'):
        vectors = {}
        for rule in rules:
            vectors[rule] = self.compute(rule, sigma_source=sigma_source)
            logger.info(f"{rule}: min={vectors[rule].values.min():.4g} "
                        f"max={vectors[rule].values.max():.4g} ({self.timings[rule]:.3f}s)")
        return vectors


if __name__ == "__main__":
    from sparse_matrix import SparseMatrix, partition_uniform

    print("Testing stepsize rules on a 3x4 example...")
    E = SparseMatrix.from_dense([[1, 1, 0, 0], [0, 1, 1, 1], [1, 0, 0, 1]])
    calc = StepsizeCalculator(E, partition_uniform(4, 2), tau=2)
    for rule, vec in calc.compute_all(sigma_source='exact').items():
        print(f"  {rule}: {np.round(vec.values, 4)}")
