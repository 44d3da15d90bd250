import numpy as np

from config import Config
from exceptions import InvalidShape
from sparse_matrix import SparseMatrix, partition_uniform, row_stats
from utils import git_describe, setup_logging, timer

logger = setup_logging(__name__)

# Share of rows that couple all blocks, and how much denser they are than local rows
COUPLING_FRACTION = 0.1
COUPLING_DENSITY = 4.0


class BlockAngularData:
    """Generated matrix, right-hand side, planted solution and manifest"""

    def __init__(self, matrix, b, x_true, partition, manifest):
        self.matrix = matrix
        self.b = b
        self.x_true = x_true
        self.partition = partition
        self.manifest = manifest


class BlockAngularGenerator:
    """Random block-angular sparse matrices: c diagonal blocks plus dense coupling rows"""

    def __init__(self, rows, cols, c, avg_nnz_per_row, max_nnz_per_row, seed=None,
                 noise=0.01, solution_density=0.1):
        self.config = Config()
        if min(rows, cols, c, avg_nnz_per_row, max_nnz_per_row) <= 0:
            raise InvalidShape("rows, cols, c and the nonzero counts must be positive")
        if cols % c != 0:
            raise InvalidShape(f"cols={cols} is not divisible by c={c}")
        if avg_nnz_per_row > max_nnz_per_row:
            raise InvalidShape("avg_nnz_per_row exceeds max_nnz_per_row")
        if avg_nnz_per_row * rows < cols:
            raise InvalidShape(f"{rows} rows with {avg_nnz_per_row} nonzeros on average "
                               f"cannot cover {cols} columns")
        self.rows, self.cols, self.c = rows, cols, c
        self.s = cols // c
        self.avg = avg_nnz_per_row
        self.max = max_nnz_per_row
        self.seed = seed
        self.noise = noise
        self.solution_density = solution_density
        self.rng = np.random.default_rng(seed)

        self.n_coupling = int(round(COUPLING_FRACTION * rows)) if c > 1 else 0
        self.n_local = rows - self.n_coupling
        if self.n_local < c:
            raise InvalidShape(f"{self.n_local} local rows cannot serve {c} blocks")

    def _row_targets(self):
        """Nonzeros per row: local rows around a, coupling rows around 4a, mean ~ avg"""
        weight = self.n_local + COUPLING_DENSITY * self.n_coupling
        local = self.avg * self.rows / weight
        targets = np.empty(self.rows, dtype=np.int64)
        targets[:self.n_local] = np.clip(self.rng.poisson(local, self.n_local), 1, min(self.s, self.max))
        if self.n_coupling:
            coupled = self.rng.poisson(COUPLING_DENSITY * local, self.n_coupling)
            targets[self.n_local:] = np.clip(coupled, 1, min(self.cols, self.max))
        return targets

    def _local_rows(self):
        return np.array_split(np.arange(self.n_local), self.c)

    @timer
    def generate(self):
        targets = self._row_targets()
        row_parts, col_parts = [], []

        # Cover every column: deal each block's columns round-robin over its local rows
        for l, rows in enumerate(self._local_rows()):
            cols = l * self.s + self.rng.permutation(self.s)
            if -(-self.s // len(rows)) > self.max:
                raise InvalidShape(f"block {l + 1}: {self.s} columns over {len(rows)} rows "
                                   f"exceeds max_nnz_per_row={self.max}")
            row_parts.append(rows[np.arange(self.s) % len(rows)])
            col_parts.append(cols)
        coverage_rows = np.concatenate(row_parts)
        covered = np.bincount(coverage_rows, minlength=self.rows)

        by_row = {}
        order = np.argsort(coverage_rows, kind='stable')
        bounds = np.concatenate([[0], np.cumsum(covered)])
        all_cover_cols = np.concatenate(col_parts)[order]
        for j in range(self.n_local):
            by_row[j] = all_cover_cols[bounds[j]:bounds[j + 1]]

        # Top up each row to its target
        local_rows = self._local_rows()
        for l, rows in enumerate(local_rows):
            block = np.arange(l * self.s, (l + 1) * self.s)
            for j in rows:
                extra = targets[j] - covered[j]
                if extra > 0:
                    free = np.setdiff1d(block, by_row[j], assume_unique=True)
                    pick = self.rng.choice(free, size=min(extra, len(free)), replace=False)
                    row_parts.append(np.full(len(pick), j))
                    col_parts.append(pick)
        for j in range(self.n_local, self.rows):
            pick = self.rng.choice(self.cols, size=targets[j], replace=False)
            row_parts.append(np.full(len(pick), j))
            col_parts.append(pick)

        rows = np.concatenate(row_parts)
        cols = np.concatenate(col_parts)
        values = self.rng.standard_normal(len(rows))
        values[values == 0.0] = 1.0
        matrix = SparseMatrix.from_triples(rows, cols, values, (self.rows, self.cols))

        x_true = np.zeros(self.cols)
        support = self.rng.choice(self.cols, size=max(1, int(self.solution_density * self.cols)),
                                  replace=False)
        x_true[support] = self.rng.standard_normal(len(support))
        signal = matrix.matvec(x_true)
        scale = float(np.std(signal)) or 1.0
        b = signal + self.noise * scale * self.rng.standard_normal(self.rows)

        partition = partition_uniform(self.cols, self.c)
        manifest = self._manifest(matrix, partition)
        logger.info(f"Generated block-angular {matrix}: avg omega={manifest['stats']['avg_nnz_per_row']:.2f}, "
                    f"max omega={manifest['stats']['max_nnz_per_row']}")
        return BlockAngularData(matrix, b, x_true, partition, manifest)

    def _manifest(self, matrix, partition):
        stats = row_stats(matrix, partition)
        return {
            'generator': 'block_angular',
            'requested': {
                'rows': self.rows, 'cols': self.cols, 'c': self.c,
                'avg_nnz_per_row': self.avg, 'max_nnz_per_row': self.max,
                'noise': self.noise, 'solution_density': self.solution_density,
            },
            'seed': self.seed,
            'coupling_rows': self.n_coupling,
            'stats': {
                'nnz': matrix.nnz,
                'avg_nnz_per_row': float(stats.omega.mean()),
                'max_nnz_per_row': stats.max_omega,
                'max_partitions_per_row': stats.max_omega_prime,
            },
            'reference_scale': Config.REFERENCE_SCALE,
            'version': git_describe(),
        }


def generate_block_angular(rows, cols, c, avg_nnz_per_row, max_nnz_per_row, seed=None, **kwargs):
    return BlockAngularGenerator(rows, cols, c, avg_nnz_per_row, max_nnz_per_row,
                                 seed=seed, **kwargs).generate()


if __name__ == "__main__":
    print("Testing the block-angular generator...")
    data = generate_block_angular(rows=1000, cols=10_000, c=8, avg_nnz_per_row=50,
                                  max_nnz_per_row=1000, seed=0)
    print(f"  {data.matrix}, stats: {data.manifest['stats']}")
