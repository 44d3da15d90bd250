import bz2
import re
import struct
from pathlib import Path

import numpy as np
import requests
from scipy import sparse
from sklearn.datasets import load_svmlight_file

from config import Config
from exceptions import EmptyRowOrColumn, ManifestError, ParseError
from sparse_matrix import SparseMatrix
from utils import git_describe, setup_logging, timer, write_manifest

logger = setup_logging(__name__)

_FEATURE = re.compile(r'^(\d+):(\S+)$')

_HEADER = struct.Struct('<IQQQQQ')


class DatasetLoader:
    """svmlight ingestion, LIBSVM downloads and the binary matrix format"""

    def __init__(self):
        self.config = Config()

    def download_dataset(self, name_or_url, force=False):
        """Download a LIBSVM dataset into data/raw if not there yet; returns the path or None"""
        url = self.config.DATASET_URLS.get(name_or_url, name_or_url)
        target = self.config.RAW_DATA_DIR / url.rstrip('/').split('/')[-1]
        if target.exists() and not force:
            logger.info(f"Dataset already downloaded: {target}")
            return target

        try:
            logger.info(f"Downloading {url}...")
            response = requests.get(url, stream=True, timeout=60)
            response.raise_for_status()
            with open(target, 'wb') as handle:
                for chunk in response.iter_content(chunk_size=1 << 16):
                    if chunk:
                        handle.write(chunk)
            logger.info(f"Dataset saved to: {target}")
            return target
        except requests.RequestException as e:
            logger.error(f"Error downloading dataset: {e}")
            if target.exists():
                target.unlink()
            return None

    def decompress(self, path):
        """Unpack a .bz2 download next to itself"""
        path = Path(path)
        if path.suffix != '.bz2':
            return path
        target = path.with_suffix('')
        if not target.exists():
            with bz2.open(path, 'rb') as src, open(target, 'wb') as dst:
                for chunk in iter(lambda: src.read(1 << 20), b''):
                    dst.write(chunk)
            logger.info(f"Decompressed {path.name} to {target.name}")
        return target

    @timer
    def load_svmlight(self, path):
        """(X samples-by-features CSR, labels); feature indices are 1-based"""
        try:
            X, y = load_svmlight_file(str(path), zero_based=False)
        except ValueError as e:
            line, reason = locate_parse_error(path)
            raise ParseError(line, reason or str(e))
        if X.nnz and X.indices.min() < 0:
            line, reason = locate_parse_error(path)
            raise ParseError(line, reason or "feature index below 1")
        logger.info(f"Loaded {path}: {X.shape[0]} samples, {X.shape[1]} features, {X.nnz} nonzeros")
        return X, y

    @timer
    def ingest(self, path, samples_as_columns=True, normalize=False, pad_to=None, drop_empty=False):
        """Parse an svmlight file into a SparseMatrix.

        With ``samples_as_columns`` the matrix is features-by-samples (one
        coordinate per sample, as the SVM dual needs); otherwise samples are rows
        and the labels serve as the right-hand side. ``pad_to`` appends empty
        columns until the column count is divisible by it.
        """
        X, y = self.load_svmlight(path)
        A = sparse.csc_matrix(X.T if samples_as_columns else X)
        A.eliminate_zeros()
        A, y = self._handle_empty(A, y, samples_as_columns, drop_empty)

        if normalize:
            norms = np.sqrt(np.asarray(A.multiply(A).sum(axis=0)).ravel())
            A = sparse.csc_matrix(A @ sparse.diags(1.0 / norms))

        n_padded = 0
        if pad_to and A.shape[1] % pad_to:
            n_padded = pad_to - A.shape[1] % pad_to
            A = sparse.hstack([A, sparse.csc_matrix((A.shape[0], n_padded))], format='csc')
            if samples_as_columns:
                y = np.concatenate([y, np.ones(n_padded)])

        matrix = SparseMatrix.from_scipy(A, n_padded=n_padded)
        manifest = {
            'source': str(path),
            'rows': matrix.n_rows, 'cols': matrix.n_cols, 'nnz': matrix.nnz,
            'samples_as_columns': samples_as_columns,
            'normalized': bool(normalize),
            'n_padded': n_padded,
            'version': git_describe(),
        }
        return matrix, y, manifest

    def _handle_empty(self, A, y, samples_as_columns, drop_empty):
        row_nnz = np.diff(A.tocsr().indptr)
        col_nnz = np.diff(A.indptr)
        empty_rows = np.flatnonzero(row_nnz == 0)
        empty_cols = np.flatnonzero(col_nnz == 0)
        if not empty_rows.size and not empty_cols.size:
            return A, y
        if not drop_empty:
            what = (f"row {empty_rows[0] + 1}" if empty_rows.size else f"column {empty_cols[0] + 1}")
            raise EmptyRowOrColumn(f"{what} has no nonzero entry "
                                   f"({empty_rows.size} empty rows, {empty_cols.size} empty columns)")
        logger.warning(f"Dropping {empty_rows.size} empty rows and {empty_cols.size} empty columns")
        A = A[row_nnz > 0][:, col_nnz > 0]
        keep = col_nnz > 0 if samples_as_columns else row_nnz > 0
        return sparse.csc_matrix(A), y[keep]

    def get_data_summary(self, matrix):
        omega = np.diff(matrix.csr.indptr)
        return {
            'rows': matrix.n_rows,
            'cols': matrix.n_cols,
            'nnz': matrix.nnz,
            'avg_nnz_per_row': float(omega.mean()),
            'max_nnz_per_row': int(omega.max()),
            'padded_cols': matrix.n_padded,
        }


def locate_parse_error(path):
    """First malformed line of an svmlight file as (line number, reason)"""
    with open(path) as handle:
        for lineno, raw in enumerate(handle, start=1):
            tokens = raw.split('#', 1)[0].split()
            if not tokens:
                continue
            try:
                float(tokens[0])
            except ValueError:
                return lineno, f"bad label {tokens[0]!r}"
            for token in tokens[1:]:
                if token.startswith('qid:'):
                    continue
                match = _FEATURE.match(token)
                if match is None:
                    return lineno, f"malformed feature {token!r}"
                if int(match.group(1)) == 0:
                    return lineno, "feature index 0 (svmlight indices are 1-based)"
                try:
                    float(match.group(2))
                except ValueError:
                    return lineno, f"bad value {match.group(2)!r}"
    return 0, None


def save_matrix(matrix, path, c=0):
    """Binary matrix: header, CSC arrays, then the CSR mirror"""
    path = Path(path)
    with open(path, 'wb') as handle:
        handle.write(Config.MATRIX_MAGIC)
        handle.write(_HEADER.pack(Config.MATRIX_VERSION, matrix.n_rows, matrix.n_cols,
                                  matrix.nnz, c, matrix.n_padded))
        for array, dtype in ((matrix.csc.indptr, '<i8'), (matrix.csc.indices, '<i8'), (matrix.csc.data, '<f8'),
                             (matrix.csr.indptr, '<i8'), (matrix.csr.indices, '<i8'), (matrix.csr.data, '<f8')):
            handle.write(np.ascontiguousarray(array, dtype=dtype).tobytes())
    logger.info(f"Matrix {matrix} saved to: {path}")
    return path


def load_matrix(path):
    """(SparseMatrix, c) from the binary format; c is 0 when it was not recorded"""
    path = Path(path)
    with open(path, 'rb') as handle:
        if handle.read(len(Config.MATRIX_MAGIC)) != Config.MATRIX_MAGIC:
            raise ManifestError(f"{path} is not a matrix file")
        version, n, d, nnz, c, n_padded = _HEADER.unpack(handle.read(_HEADER.size))
        if version != Config.MATRIX_VERSION:
            raise ManifestError(f"{path}: unsupported format version {version}")
        indptr = np.frombuffer(handle.read(8 * (d + 1)), dtype='<i8')
        indices = np.frombuffer(handle.read(8 * nnz), dtype='<i8')
        data = np.frombuffer(handle.read(8 * nnz), dtype='<f8')
    if len(indptr) != d + 1 or len(data) != nnz:
        raise ManifestError(f"{path} is truncated")
    # The row-major mirror is rebuilt by SparseMatrix; the stored one serves external readers
    matrix = SparseMatrix(indptr.astype(np.int64), indices.astype(np.int64), data.astype(np.float64),
                          (n, d), n_padded=n_padded)
    return matrix, c


def save_vector(values, path):
    np.save(path, np.asarray(values, dtype=np.float64))
    return Path(path)


def load_vector(path):
    return np.load(path)


def save_dataset(matrix, vector, directory, name, manifest, c=0):
    """Matrix, vector (b or labels) and manifest under one stem"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    matrix_path = save_matrix(matrix, directory / f"{name}{Config.MATRIX_SUFFIX}", c=c)
    vector_path = save_vector(vector, directory / f"{name}.npy")
    write_manifest({**manifest, 'matrix': matrix_path.name, 'vector': vector_path.name, 'c': c},
                   directory / f"{name}.json")
    return matrix_path


def load_dataset(matrix_path):
    """(matrix, vector, c) for a matrix written by save_dataset"""
    matrix_path = Path(matrix_path)
    matrix, c = load_matrix(matrix_path)
    vector_path = matrix_path.with_suffix('.npy')
    vector = load_vector(vector_path) if vector_path.exists() else None
    return matrix, vector, c


if __name__ == "__main__":
    loader = DatasetLoader()
    path = loader.download_dataset('news20')
    if path:
        matrix, labels, manifest = loader.ingest(loader.decompress(path), normalize=True)
        print(loader.get_data_summary(matrix))
