import numpy as np
import pandas as pd

from config import Config
from solver import SolverConfig, solve
from utils import setup_logging, timer

logger = setup_logging(__name__)


class ExperimentEvaluator:
    """Reference optima, paired Hydra / Hydra^2 runs and stepsize reports"""

    def __init__(self):
        self.config = Config()

    @timer
    def estimate_optimum(self, problem, partition, stepsizes, config, horizon=None):
        """L* from a Hydra^2 run OPTIMUM_HORIZON_FACTOR times longer than the plotted horizon"""
        horizon = horizon or config.max_iter
        long_run = SolverConfig(
            tau=config.tau, c=config.c, rule=config.rule,
            max_iter=self.config.OPTIMUM_HORIZON_FACTOR * horizon,
            mode='hydra2', seed=config.seed + 1,
            monitor_every=max(1, horizon // 10), refresh_every=config.refresh_every,
            verbose=config.verbose,
        )
        x, trace = solve(long_run, problem, partition, stepsizes)
        optimum = float(trace['best_objective'].min())
        logger.info(f"Estimated optimum L*={optimum:.12g} after {long_run.max_iter} iterations")
        return optimum, x

    def iterations_to_target(self, trace, optimum, L0, levels=(1e-4, 1e-5, 1e-6)):
        """First monitored k with L(x_k) - L* <= level * L0, None when never reached"""
        gap = trace['objective'].to_numpy() - optimum
        ks = trace['k'].to_numpy()
        result = {}
        for level in levels:
            hit = np.flatnonzero(gap <= level * L0)
            result[level] = int(ks[hit[0]]) if hit.size else None
        return result

    def compare(self, problem, partition, stepsizes, config, optimum=None, levels=(1e-4, 1e-5, 1e-6)):
        """Run Hydra and Hydra^2 with the same seed and stepsizes; returns (merged trace, summary)"""
        traces = {}
        for mode in ('hydra', 'hydra2'):
            run = SolverConfig(**{**config.to_dict(), 'mode': mode, 'optimum': optimum})
            _, traces[mode] = solve(run, problem, partition, stepsizes)

        merged = pd.merge(
            traces['hydra'][['k', 'seconds', 'objective']],
            traces['hydra2'][['k', 'seconds', 'objective']],
            on='k', how='outer', suffixes=('_hydra', '_hydra2'),
        ).sort_values('k').reset_index(drop=True)

        summary = None
        if optimum is not None:
            L0 = problem.initial_objective() - optimum
            for mode in ('hydra', 'hydra2'):
                merged[f'suboptimality_{mode}'] = merged[f'objective_{mode}'] - optimum
            rows = []
            hydra = self.iterations_to_target(traces['hydra'], optimum, L0, levels)
            hydra2 = self.iterations_to_target(traces['hydra2'], optimum, L0, levels)
            for level in levels:
                ratio = None
                if hydra[level] is not None and hydra2[level] is not None:
                    ratio = hydra[level] / hydra2[level] if hydra2[level] else 1.0
                rows.append({'level': level, 'k_hydra': hydra[level], 'k_hydra2': hydra2[level],
                             'ratio': ratio})
            summary = pd.DataFrame(rows)
            logger.info(f"Iterations to target:\n{summary.to_string(index=False)}")
        return merged, summary

    def stepsize_report(self, vectors, timings=None):
        """Per-rule min / median / max of D_ii, the mean ratio to D1 and the time to compute"""
        timings = timings or {}
        reference = vectors.get('D1')
        rows = []
        for rule, vec in vectors.items():
            row = {'rule': rule, **{k: v for k, v in vec.summary().items() if k != 'rule'}}
            if reference is not None:
                row['mean_ratio_to_D1'] = float(np.mean(vec.values / reference.values))
            row['seconds'] = timings.get(rule)
            rows.append(row)
        return pd.DataFrame(rows)
