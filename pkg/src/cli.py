"""Command-line driver: gen, ingest, stepsizes, solve, bound, compare.

Exit codes: 0 on success, 2 on invalid input, 3 on numeric or transport failure.
"""
import argparse
import sys
from pathlib import Path

import numpy as np

from config import Config
from data_generator import generate_block_angular
from data_loader import DatasetLoader, load_dataset, save_dataset
from distributed import InProcessTransport, TcpTransport, run_distributed
from evaluator import ExperimentEvaluator
from exceptions import Hydra2Error, InvalidRange
from problems import make_lasso, make_svm_dual, scale_svm_matrix
from sampling import draw_master_seed
from solver import SolverConfig, iteration_bound
from sparse_matrix import partition_uniform
from stepsizes import RULES, StepsizeCalculator, StepsizeVector
from utils import git_describe, save_dataframe, setup_logging, write_manifest

logger = setup_logging(__name__)


def _resolve_seed(seed):
    if seed is None:
        seed = draw_master_seed()
        print(f"seed: {seed}")
    return seed


def _load(args):
    matrix, vector, stored_c = load_dataset(args.data)
    c = args.c or stored_c
    if not c:
        raise InvalidRange("number of nodes unknown: pass --c")
    return matrix, vector, partition_uniform(matrix.n_cols, c)


def _problem(args, matrix, vector):
    if vector is None:
        raise InvalidRange(f"{args.data} has no right-hand side or labels next to it")
    if args.problem == 'svm':
        return make_svm_dual(matrix, vector, args.svm_lambda, data_path=args.data)
    return make_lasso(matrix, vector, lam=args.lam,
                      lambda_ratio=args.lambda_ratio if args.lam is None else None,
                      data_path=args.data)


def _stepsizes(args, matrix, partition):
    if args.stepsizes:
        vec = StepsizeVector.load(args.stepsizes)
        if len(vec) != matrix.n_cols:
            raise InvalidRange(f"{args.stepsizes} holds {len(vec)} values for {matrix.n_cols} coordinates")
        return vec
    return StepsizeCalculator(matrix, partition, args.tau).compute(args.rule)


def _solver_config(args, partition, seed, optimum=None):
    return SolverConfig(
        tau=args.tau, c=partition.c, rule=args.rule, max_iter=args.max_iter,
        epsilon=args.eps, optimum=optimum, mode=getattr(args, 'mode', 'hydra2'),
        monitor_every=args.monitor_every, seed=seed,
        deterministic=not args.fast, checksum_every=args.checksum_every,
        verbose=args.verbose,
    )


def cmd_gen(args):
    seed = _resolve_seed(args.seed)
    data = generate_block_angular(args.rows, args.cols, args.c, args.avg_nnz_per_row,
                                  args.max_nnz_per_row, seed=seed)
    path = save_dataset(data.matrix, data.b, args.out, args.name, data.manifest, c=args.c)
    np.save(Path(args.out) / f"{args.name}.x_true.npy", data.x_true)
    print(f"wrote {path}")
    return 0


def cmd_ingest(args):
    loader = DatasetLoader()
    source = args.path
    if args.url:
        source = loader.download_dataset(args.url)
        if source is None:
            raise InvalidRange(f"could not download {args.url}")
    source = loader.decompress(source)
    matrix, vector, manifest = loader.ingest(source, samples_as_columns=not args.samples_as_rows,
                                             normalize=args.normalize, pad_to=args.pad,
                                             drop_empty=args.drop_empty)
    path = save_dataset(matrix, vector, args.out, args.name, manifest, c=args.pad or 0)
    print(f"wrote {path}")
    return 0


def cmd_stepsizes(args):
    matrix, vector, partition = _load(args)
    if args.problem == 'svm':
        if vector is None:
            raise InvalidRange(f"{args.data} has no labels next to it")
        matrix = scale_svm_matrix(matrix, vector, args.svm_lambda)
    calc = StepsizeCalculator(matrix, partition, args.tau)
    rules = args.rules
    if args.tau < 2:
        skipped = [r for r in rules if r in ('D3', 'D4')]
        if skipped:
            print(f"skipping {', '.join(skipped)}: these rules need tau >= 2", file=sys.stderr)
        rules = [r for r in rules if r not in ('D3', 'D4')]
    source = 'exact' if args.exact else ('bound' if args.bound else 'power')
    vectors = calc.compute_all(rules, sigma_source=source)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.data).stem
    for rule, vec in vectors.items():
        if args.format == 'json':
            vec.save_json(out / f"{stem}.{rule}.json")
        else:
            vec.save_binary(out / f"{stem}.{rule}{Config.STEPSIZE_SUFFIX}")
    report = ExperimentEvaluator().stepsize_report(vectors, calc.timings)
    save_dataframe(report, f"{stem}.stepsizes", out)
    print(report.to_string(index=False))
    return 0


def cmd_solve(args):
    seed = _resolve_seed(args.seed)
    matrix, vector, partition = _load(args)
    problem = _problem(args, matrix, vector)
    D = _stepsizes(args, problem.matrix, partition)
    config = _solver_config(args, partition, seed, optimum=args.optimum)

    transport = None
    if args.workers > 1:
        transport = (TcpTransport if args.transport == 'tcp' else InProcessTransport)(args.workers)
    x, trace = run_distributed(config, problem, partition, D, transport=transport, workers=args.workers)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataframe(trace, f"{args.name}.trace", out)
    np.save(out / f"{args.name}.x.npy", x[:matrix.n_active])
    write_manifest({
        'command': 'solve',
        'config': config.to_dict(),
        'problem': problem.manifest(),
        'stepsizes': {'rule': D.rule, 'meta': D.meta, 'source': args.stepsizes},
        'workers': args.workers,
        'transport': args.transport,
        'data': str(args.data),
        'iterations': trace.attrs.get('iterations'),
        'final_objective': float(trace['objective'].iloc[-1]),
        'max_residual_drift': trace.attrs.get('max_drift'),
        'version': git_describe(),
    }, out / f"{args.name}.json")
    print(trace.tail(1).to_string(index=False))
    return 0


def cmd_bound(args):
    print(iteration_bound(args.C1, args.C2, args.rho, args.eps, args.tau, args.s))
    return 0


def cmd_compare(args):
    seed = _resolve_seed(args.seed)
    matrix, vector, partition = _load(args)
    problem = _problem(args, matrix, vector)
    D = _stepsizes(args, problem.matrix, partition)
    config = _solver_config(args, partition, seed)
    evaluator = ExperimentEvaluator()
    optimum = args.optimum
    if optimum is None:
        optimum, _ = evaluator.estimate_optimum(problem, partition, D, config)
    merged, summary = evaluator.compare(problem, partition, D, config, optimum=optimum,
                                        levels=tuple(args.levels))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataframe(merged, f"{args.name}.compare", out)
    save_dataframe(summary, f"{args.name}.targets", out)
    write_manifest({'command': 'compare', 'config': config.to_dict(), 'optimum': optimum,
                    'problem': problem.manifest(), 'stepsizes': {'rule': D.rule, 'meta': D.meta},
                    'data': str(args.data), 'version': git_describe()},
                   out / f"{args.name}.compare.json")
    print(summary.to_string(index=False))
    return 0


def _add_run_options(p):
    p.add_argument('--data', required=True, help='matrix file written by gen or ingest')
    p.add_argument('--c', type=int, default=None, help='number of nodes (defaults to the stored value)')
    p.add_argument('--tau', type=int, required=True)
    p.add_argument('--problem', choices=('lasso', 'svm'), default='lasso')
    p.add_argument('--lambda', dest='lam', type=float, default=None)
    p.add_argument('--lambda-ratio', type=float, default=0.1, help='lambda as a fraction of lambda_max')
    p.add_argument('--svm-lambda', type=float, default=1e-4)
    p.add_argument('--rule', choices=RULES, default='D1')
    p.add_argument('--stepsizes', default=None, help='precomputed stepsize file')
    p.add_argument('--eps', type=float, default=None)
    p.add_argument('--optimum', type=float, default=None)
    p.add_argument('--max-iter', type=int, default=1000)
    p.add_argument('--monitor-every', type=int, default=None)
    p.add_argument('--checksum-every', type=int, default=Config.CHECKSUM_EVERY)
    p.add_argument('--fast', action='store_true', help='merge residual deltas without a fixed order')
    p.add_argument('--seed', type=int, default=None)
    p.add_argument('--out', default=str(Config.RESULTS_DIR))
    p.add_argument('--name', default='run')
    p.add_argument('--verbose', action='store_true')


def build_parser():
    parser = argparse.ArgumentParser(prog='hydra2', description='Distributed accelerated coordinate descent')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen', help='generate a block-angular lasso instance')
    p.add_argument('--rows', type=int, required=True)
    p.add_argument('--cols', type=int, required=True)
    p.add_argument('--c', type=int, required=True)
    p.add_argument('--avg-nnz-per-row', type=float, required=True)
    p.add_argument('--max-nnz-per-row', type=int, required=True)
    p.add_argument('--seed', type=int, default=None)
    p.add_argument('--out', default=str(Config.PROCESSED_DATA_DIR))
    p.add_argument('--name', default='block_angular')
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser('ingest', help='convert an svmlight file to the binary matrix format')
    p.add_argument('path', nargs='?', default=None)
    p.add_argument('--url', default=None, help='LIBSVM dataset name or URL to download first')
    p.add_argument('--normalize', action='store_true', help='scale columns to unit norm')
    p.add_argument('--pad', type=int, default=None, help='pad columns to a multiple of this many nodes')
    p.add_argument('--samples-as-rows', action='store_true')
    p.add_argument('--drop-empty', action='store_true')
    p.add_argument('--out', default=str(Config.PROCESSED_DATA_DIR))
    p.add_argument('--name', default='dataset')
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser('stepsizes', help='compute stepsize vectors and a report')
    p.add_argument('--data', required=True)
    p.add_argument('--c', type=int, default=None)
    p.add_argument('--tau', type=int, required=True)
    p.add_argument('--rules', nargs='+', choices=RULES, default=list(RULES))
    p.add_argument('--problem', choices=('lasso', 'svm'), default='lasso',
                   help='svm scales the matrix by labels and lambda first')
    p.add_argument('--svm-lambda', type=float, default=1e-4)
    group = p.add_mutually_exclusive_group()
    group.add_argument('--exact', action='store_true', help='dense eigensolve for sigma, sigma\'')
    group.add_argument('--bound', action='store_true', help='one-pass upper bounds for sigma, sigma\'')
    p.add_argument('--format', choices=('json', 'dvec'), default='dvec')
    p.add_argument('--out', default=str(Config.PROCESSED_DATA_DIR))
    p.set_defaults(func=cmd_stepsizes)

    p = sub.add_parser('solve', help='run Hydra^2 or Hydra')
    _add_run_options(p)
    p.add_argument('--mode', choices=('hydra2', 'hydra'), default='hydra2')
    p.add_argument('--workers', type=int, default=1)
    p.add_argument('--transport', choices=('inproc', 'tcp'), default='inproc')
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser('bound', help='iterations guaranteeing P(L(x_k) - L* <= eps) >= 1 - rho')
    p.add_argument('--C1', type=float, required=True)
    p.add_argument('--C2', type=float, required=True)
    p.add_argument('--rho', type=float, required=True)
    p.add_argument('--eps', type=float, required=True)
    p.add_argument('--tau', type=int, required=True)
    p.add_argument('--s', type=int, required=True)
    p.set_defaults(func=cmd_bound)

    p = sub.add_parser('compare', help='paired Hydra / Hydra^2 runs merged into one CSV')
    _add_run_options(p)
    p.add_argument('--levels', type=float, nargs='+', default=[1e-4, 1e-5, 1e-6])
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == 'ingest' and not (args.path or args.url):
        print("error: give a file path or --url", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except Hydra2Error as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
