import os
from pathlib import Path

class Config:
    """Paths, file formats and numeric defaults for the solver stack"""

    # Project paths
    PROJECT_ROOT = Path(__file__).parent.parent
    DATA_DIR = PROJECT_ROOT / "data"
    RAW_DATA_DIR = DATA_DIR / "raw"
    PROCESSED_DATA_DIR = DATA_DIR / "processed"
    RESULTS_DIR = PROJECT_ROOT / "results"
    LOG_FILE = RESULTS_DIR / "hydra2.log"
    LOG_LEVEL = os.environ.get("HYDRA2_LOG_LEVEL", "INFO")

    # Public LIBSVM binary datasets (svmlight format, bz2 compressed)
    LIBSVM_BASE_URL = "https://www.csie.ntu.edu.tw/~cjlin/libsvmtools/datasets/binary"
    DATASET_URLS = {
        'rcv1': f"{LIBSVM_BASE_URL}/rcv1_train.binary.bz2",
        'news20': f"{LIBSVM_BASE_URL}/news20.binary.bz2",
        'real-sim': f"{LIBSVM_BASE_URL}/real-sim.bz2",
    }

    # Binary matrix format
    MATRIX_MAGIC = b"HYD2MAT\x00"
    MATRIX_VERSION = 1
    MATRIX_SUFFIX = ".hmat"
    STEPSIZE_SUFFIX = ".dvec"

    # Stepsize computation
    POWER_TOL = 1e-6
    POWER_MAX_ITER_FACTOR = 10      # max_iter = factor * d
    DENSE_BLOCK_LIMIT = 2000        # largest block inverted densely for sigma'
    ENUMERATION_LIMIT = 10**6

    # Solver
    RESIDUAL_REFRESH = 10**4
    DIVERGENCE_LIMIT = 1e100
    OPTIMUM_HORIZON_FACTOR = 10

    # Distributed harness
    CHECKSUM_EVERY = 100
    TRANSPORT_TIMEOUT = 60.0
    TCP_HOST = "127.0.0.1"

    # Reference scale of the large block-angular lasso run (echoed in manifests only)
    REFERENCE_SCALE = {
        'cols': 50_000_000_000,
        'c': 256,
        's': 195_312_500,
        'rows': 5_000_000,
        'avg_nnz_per_row': 60_000,
        'max_nnz_per_row': 1_993_419,
    }

    @classmethod
    def setup_directories(cls):
        """Create necessary directories"""
        directories = [
            cls.RAW_DATA_DIR,
            cls.PROCESSED_DATA_DIR,
            cls.RESULTS_DIR
        ]
        for directory in directories:
            directory.mkdir(parents=True, exist_ok=True)

# Initialize directories when module is imported
Config.setup_directories()
