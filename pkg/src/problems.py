"""Composite problems min f(x) + sum_i R_i(x_i) with f(x) = sum_j phi_j(A_j: x) + q^T x.

Two losses are supported. ``square_minus_b`` is the lasso loss
phi_j(w) = (w - b_j)^2 / 2. ``scaled_square`` is phi_j(w) = w^2 / 2 on a
pre-scaled matrix, used for the SVM dual

    D(x) = 1/(2 lambda d^2) ||sum_i b_i a_i x_i||^2 - (1/d) sum_i x_i,   x in [0, 1]^d,

where the samples a_i are the columns of A (one row per feature). Loading
folds labels and the 1/(d sqrt(lambda)) factor into A~ = A diag(b) / (d sqrt(lambda)),
so D(x) = ||A~ x||^2 / 2 - mean(x) and every phi_j has a 1-Lipschitz derivative.
The primal point recovered from x is w = A~ x / sqrt(lambda), which gives the
duality gap

    gap(x) = mean_i max(0, 1 - d (A~^T A~ x)_i) + ||A~ x||^2 - mean(x).

This is one consistent reading of the feature-as-row convention; other
scalings of the same dual give the same minimisers.
"""
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from exceptions import InfeasibleDualPoint, InvalidRange, ManifestError, NonpositiveBeta
from sparse_matrix import SparseMatrix
from utils import read_manifest, setup_logging, write_manifest

logger = setup_logging(__name__)

LOSS_KINDS = ('square_minus_b', 'scaled_square')
REGULARIZER_KINDS = ('zero', 'l1', 'box01')

# Rounding slack when testing membership of [0, 1]
BOX_TOLERANCE = 1e-12


@dataclass(eq=False)
class CompositeLoss:
    """f(x) = sum_j phi_j(A_j: x) + q^T x"""
    matrix: SparseMatrix
    kind: str = 'square_minus_b'
    b: np.ndarray = None
    q: np.ndarray = None
    svm_lambda: float = None

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.kind == 'square_minus_b':
            n_rows = self.matrix.n_rows if self.matrix is not None else len(self.b)
            if self.b is None or len(self.b) != n_rows:
                raise InvalidRange("lasso loss needs one b entry per row")
            self.b = np.asarray(self.b, dtype=np.float64)

    def phi_prime(self, w, rows=None):
        """phi'_j(w) for the given rows (all rows when ``rows`` is None)"""
        if self.kind == 'square_minus_b':
            return w - (self.b if rows is None else self.b[rows])
        return w

    def value_at(self, ax, x):
        """f(x) given A x"""
        if self.kind == 'square_minus_b':
            res = ax - self.b
            value = 0.5 * float(res @ res)
        else:
            value = 0.5 * float(ax @ ax)
        if self.q is not None:
            value += float(self.q @ x)
        return value

    def linear_term(self, i):
        return 0.0 if self.q is None else self.q[i]


@dataclass
class SeparableRegularizer:
    """R(x) = sum_i R_i(x_i): zero, lam * |x_i|, or the indicator of [0, 1]"""
    kind: str = 'zero'
    lam: float = 0.0

    def __post_init__(self):
        if self.kind not in REGULARIZER_KINDS:
            raise ValueError(f"unknown regularizer kind {self.kind!r}")
        if self.lam < 0:
            raise InvalidRange(f"l1 weight must be nonnegative, got {self.lam}")

    def value(self, x):
        if self.kind == 'zero':
            return 0.0
        if self.kind == 'l1':
            return self.lam * float(np.sum(np.abs(x)))
        if np.any((x < -BOX_TOLERANCE) | (x > 1.0 + BOX_TOLERANCE)):
            return math.inf
        return 0.0


@dataclass(eq=False)
class Residuals:
    """r_u = A u and r_z = A z, maintained incrementally"""
    r_u: np.ndarray
    r_z: np.ndarray

    @classmethod
    def from_iterates(cls, matrix, u, z):
        return cls(r_u=matrix.matvec(u), r_z=matrix.matvec(z))

    def refresh(self, matrix, u, z):
        """Recompute both vectors from scratch; returns the drift just removed"""
        return self.reset(matrix.matvec(u), matrix.matvec(z))

    def reset(self, fresh_u, fresh_z):
        """Replace both vectors by freshly computed ones; returns the drift removed"""
        drift = max(_max_abs(self.r_u - fresh_u), _max_abs(self.r_z - fresh_z))
        self.r_u, self.r_z = fresh_u, fresh_z
        return drift

    def drift(self, matrix, u, z):
        return max(_max_abs(self.r_u - matrix.matvec(u)), _max_abs(self.r_z - matrix.matvec(z)))

    def ax(self, theta_sq):
        """A x for x = theta^2 u + z"""
        return theta_sq * self.r_u + self.r_z

    def copy(self):
        return Residuals(r_u=self.r_u.copy(), r_z=self.r_z.copy())


def _max_abs(v):
    return float(np.max(np.abs(v))) if v.size else 0.0


def drift_tolerance(matrix, u):
    """1e-8 (1 + ||A||_1 ||u||_inf), the accepted residual drift"""
    norm_1 = float(abs(matrix.csc).sum(axis=0).max()) if matrix.nnz else 0.0
    return 1e-8 * (1.0 + norm_1 * _max_abs(np.asarray(u)))


def grad_coord(loss, res, theta_sq, i):
    """nabla_i f(theta^2 u + z) from the residuals, at cost |D_i|"""
    rows, vals = loss.matrix.column(i)
    w = theta_sq * res.r_u[rows] + res.r_z[rows]
    return float(vals @ loss.phi_prime(w, rows)) + loss.linear_term(i)


def grad_block(loss, res, theta_sq, block, local, gathered=None):
    """grad_coord for every requested local column of a ColumnBlock at once"""
    pos, rows, vals = gathered if gathered is not None else block.gather(local)
    w = theta_sq * res.r_u[rows] + res.r_z[rows]
    g = np.bincount(pos, weights=vals * loss.phi_prime(w, rows), minlength=len(local))
    if loss.q is not None:
        g = g + loss.q[block.columns[local]]
    return g


def prox_block(reg, g, beta, z):
    """argmin_t g t + beta t^2 / 2 + R_i(z + t), elementwise"""
    beta = np.asarray(beta, dtype=np.float64)
    if np.any(beta <= 0):
        raise NonpositiveBeta(float(np.min(beta)))
    if reg.kind == 'zero':
        return -g / beta
    target = z - g / beta
    if reg.kind == 'l1':
        kappa = reg.lam / beta
        return np.sign(target) * np.maximum(np.abs(target) - kappa, 0.0) - z
    return np.clip(target, 0.0, 1.0) - z


def prox_step(reg, g, beta, z):
    """Scalar form of prox_block"""
    if not beta > 0:
        raise NonpositiveBeta(beta)
    return float(prox_block(reg, np.float64(g), np.float64(beta), np.float64(z)))


def objective(loss, reg, x):
    """L(x) = f(x) + R(x); +inf outside the box for box01"""
    x = np.asarray(x, dtype=np.float64)
    return loss.value_at(loss.matrix.matvec(x), x) + reg.value(x)


def objective_from_residuals(loss, reg, ax, x):
    """L(x) when A x is already known"""
    return loss.value_at(ax, x) + reg.value(x)


def suboptimality(loss, reg, x, optimum):
    return objective(loss, reg, x) - optimum


def svm_duality_gap(loss, x, ax=None):
    """Primal hinge objective at w(x) plus the dual objective at x"""
    if loss.kind != 'scaled_square' or loss.svm_lambda is None:
        raise InvalidRange("duality gap is defined for SVM dual problems only")
    x = np.asarray(x, dtype=np.float64)
    if np.any((x < -BOX_TOLERANCE) | (x > 1.0 + BOX_TOLERANCE)) or not np.all(np.isfinite(x)):
        raise InfeasibleDualPoint("dual point must lie in [0, 1]^d")
    m = loss.matrix
    ax = m.matvec(x) if ax is None else ax
    d = m.n_active
    margins = d * m.rmatvec(ax)[:d]
    hinge = np.maximum(0.0, 1.0 - margins)
    return float(hinge.mean()) + float(ax @ ax) - float(x[:d].mean())


@dataclass(eq=False)
class Problem:
    """A loss, a regularizer and the manifest that describes them"""
    loss: CompositeLoss
    reg: SeparableRegularizer
    kind: str
    meta: dict = field(default_factory=dict)

    @property
    def matrix(self):
        return self.loss.matrix

    @property
    def d(self):
        return self.matrix.n_cols

    def objective(self, x):
        return objective(self.loss, self.reg, x)

    def initial_objective(self, x0=None):
        """L_0 = L(x_0), with x_0 = 0 by default"""
        return self.objective(np.zeros(self.d) if x0 is None else x0)

    def duality_gap(self, x, ax=None):
        return svm_duality_gap(self.loss, x, ax=ax) if self.kind == 'svm_dual' else None

    def manifest(self):
        return {'kind': self.kind, **self.meta}

    def save_manifest(self, path):
        return write_manifest(self.manifest(), path)


def lambda_max(matrix, b):
    """||A^T b||_inf, the smallest lam for which x = 0 solves the lasso"""
    return float(np.max(np.abs(matrix.rmatvec(b))))


def make_lasso(matrix, b, lam=None, lambda_ratio=None, data_path=None):
    """0.5 ||Ax - b||^2 + lam ||x||_1, lam given directly or as a fraction of lambda_max"""
    if (lam is None) == (lambda_ratio is None):
        raise InvalidRange("give exactly one of lam and lambda_ratio")
    if lambda_ratio is not None:
        if lambda_ratio <= 0:
            raise InvalidRange(f"lambda_ratio must be positive, got {lambda_ratio}")
        lam = lambda_ratio * lambda_max(matrix, b)
    loss = CompositeLoss(matrix=matrix, kind='square_minus_b', b=b)
    reg = SeparableRegularizer(kind='l1', lam=float(lam)) if lam > 0 else SeparableRegularizer()
    meta = {'lambda': float(lam), 'lambda_ratio': lambda_ratio, 'data_path': _str(data_path),
            'scaling_applied': False}
    logger.info(f"Lasso problem on {matrix} with lambda={lam:.6g}")
    return Problem(loss=loss, reg=reg, kind='lasso', meta=meta)


def scale_svm_matrix(matrix, labels, svm_lambda):
    """A~ = A diag(b) / (d sqrt(lambda)) for features-by-samples A"""
    if svm_lambda <= 0:
        raise InvalidRange(f"SVM lambda must be positive, got {svm_lambda}")
    labels = np.asarray(labels, dtype=np.float64)
    d = matrix.n_active
    if len(labels) not in (d, matrix.n_cols):
        raise InvalidRange(f"{len(labels)} labels for {d} samples")
    col_scale = np.ones(matrix.n_cols)
    col_scale[:d] = labels[:d] / (d * math.sqrt(svm_lambda))
    scaled = sparse.csc_matrix(matrix.csc @ sparse.diags(col_scale))
    return SparseMatrix(scaled.indptr, scaled.indices, scaled.data, matrix.shape,
                        n_padded=matrix.n_padded)


def make_svm_dual(matrix, labels, svm_lambda, data_path=None, prescaled=False):
    """SVM dual on features-by-samples data; labels in {-1, +1}"""
    scaled = matrix if prescaled else scale_svm_matrix(matrix, labels, svm_lambda)
    d = scaled.n_active
    q = np.zeros(scaled.n_cols)
    q[:d] = -1.0 / d
    loss = CompositeLoss(matrix=scaled, kind='scaled_square', q=q, svm_lambda=float(svm_lambda))
    reg = SeparableRegularizer(kind='box01')
    meta = {'lambda': float(svm_lambda), 'data_path': _str(data_path), 'scaling_applied': True}
    logger.info(f"SVM dual problem on {scaled} with lambda={svm_lambda:.6g}")
    return Problem(loss=loss, reg=reg, kind='svm_dual', meta=meta)


def _str(path):
    return None if path is None else str(path)


def load_problem_manifest(path):
    """Read and check a problem manifest"""
    manifest = read_manifest(path)
    if manifest.get('kind') not in ('lasso', 'svm_dual'):
        raise ManifestError(f"{path}: unknown problem kind {manifest.get('kind')!r}")
    if 'lambda' not in manifest:
        raise ManifestError(f"{path}: missing lambda")
    return manifest


if __name__ == "__main__":
    print("Testing the 1-D lasso...")
    A = SparseMatrix.from_dense([[1.0]])
    problem = make_lasso(A, np.array([1.0]), lam=0.1)
    print(f"  L(0) = {problem.objective(np.zeros(1)):.4f}, L(0.9) = {problem.objective(np.array([0.9])):.4f}")
