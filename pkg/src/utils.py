import json
import math
import time
import logging
import subprocess
from functools import wraps

import numpy as np
import pandas as pd

from config import Config

def setup_logging(name=__name__):
    """Setup basic logging configuration"""
    if logging.getLogger().handlers:
        return logging.getLogger(name)
    logging.basicConfig(
        level=Config.LOG_LEVEL,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(Config.LOG_FILE),
            logging.StreamHandler()
        ]
    )
    return logging.getLogger(name)

logger = setup_logging()

def timer(func):
    """Decorator to measure function execution time"""
    @wraps(func)
    def wrapper(*args, **kwargs):
        start_time = time.perf_counter()
        result = func(*args, **kwargs)
        wrapper.last_elapsed = time.perf_counter() - start_time
        logger.debug(f"{func.__name__} executed in {wrapper.last_elapsed:.4f} seconds")
        return result
    wrapper.last_elapsed = None
    return wrapper

def fsum_segments(values, indptr):
    """Exactly rounded sum of each segment values[indptr[k]:indptr[k+1]]"""
    values = values.tolist()
    out = np.empty(len(indptr) - 1)
    for k in range(len(indptr) - 1):
        out[k] = math.fsum(values[indptr[k]:indptr[k + 1]])
    return out

def save_dataframe(df, filename, directory):
    """Save DataFrame to CSV with proper path handling"""
    filepath = directory / f"{filename}.csv"
    df.to_csv(filepath, index=False)
    logger.info(f"Data saved to: {filepath}")
    return filepath

def write_manifest(manifest, path):
    """Write a JSON manifest next to an artifact"""
    with open(path, 'w') as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True, default=_json_default)
    logger.info(f"Manifest written to: {path}")
    return path

def read_manifest(path):
    with open(path) as handle:
        return json.load(handle)

def _json_default(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    return str(value)

def git_describe():
    """Version string of the code producing an artifact, None outside a git checkout"""
    try:
        result = subprocess.run(
            ['git', 'describe', '--always', '--dirty', '--tags'],
            cwd=Config.PROJECT_ROOT, capture_output=True, text=True, timeout=5
        )
    except (OSError, subprocess.SubprocessError) as e:
        logger.debug(f"git describe unavailable: {e}")
        return None
    if result.returncode != 0:
        return None
    return result.stdout.strip()
