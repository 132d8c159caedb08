#!/usr/bin/env python3
"""
Command-line entry point: dataset generation, oracle queries, BGM curves, bound training and plots.

Usage: python cli.py <gen-data|oracle|bgm|apid|plot> [options]
"""
import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

import config
from apid import CurvatureMode, load_checkpoint, save_checkpoint
from bgm import bgm_curve, parse_direction
from data import DatasetSpec, DatasetTag, generate, read_csv, write_csv
from error_handling import EXIT_OK, ErrorHandler, UsageError, ValidationError
from level_oracle import OracleConfig, counterfactual_density, ecou_curve, ecou_oracle, observational_density
from monitoring import RunManifest, TrainingLog, to_jsonable
from plotting import plot_bound_curves, plot_curvature_map, plot_density
from schemas import OutputValidator, document_kind, parse_grid, validate_or_raise
from scm_core import AnalyticScmId, Scm2D, as_arm, build_scm, sample_observational
from training import TrainConfig, train_bounds

logger = logging.getLogger(__name__)

ORACLE_SCMS = [AnalyticScmId.M1.value, AnalyticScmId.M2.value, AnalyticScmId.BOX_MULLER.value,
               AnalyticScmId.M_PERP.value, AnalyticScmId.OSCILLATING_BOX_MULLER.value]
BGM_HEADER = ('y_prime', 'q_increasing', 'q_decreasing')


def _manifest_path(out: Path) -> Path:
    return out.with_name(out.name + '.manifest.json')


def _start_manifest(command: str, args: argparse.Namespace, outputs: Dict[str, Path], path: Path,
                    seed: Optional[int] = None) -> RunManifest:
    """Write the manifest before any heavy computation."""
    echo = {k: v for k, v in vars(args).items() if k != 'handler'}
    manifest = RunManifest(command=command, config=to_jsonable(echo), seed=seed)
    for name, out in outputs.items():
        manifest.add_output(name, out)
    validate_or_raise(OutputValidator.validate_manifest_data, manifest.to_dict(), 'manifest', ValidationError)
    manifest.write(path)
    return manifest


def _write_json(data: Dict[str, Any], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as fh:
        json.dump(to_jsonable(data), fh, indent=2, sort_keys=True)


def _summary(data: Dict[str, Any]) -> None:
    print(json.dumps(to_jsonable(data), sort_keys=True))


def cmd_gen_data(args: argparse.Namespace) -> int:
    out = Path(args.out)
    request = DatasetSpec(tag=DatasetTag(args.dataset), n_per_arm=args.n_per_arm, seed=args.seed)
    _start_manifest('gen-data', args, {'data': out}, _manifest_path(out), seed=args.seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataset = generate(request)
    write_csv(dataset, out)
    _summary({'command': 'gen-data', 'out': out, 'rows': len(dataset)})
    return EXIT_OK


def _default_density_grid(scm: Scm2D, a, n: int = config.ORACLE_DENSITY_BINS) -> np.ndarray:
    sample = sample_observational(scm, a, 20_000, seed=0)
    lo, hi = np.quantile(sample, [0.0005, 0.9995])
    pad = 0.05 * (hi - lo) + 1e-6
    return np.linspace(lo - pad, hi + pad, n)


def cmd_oracle(args: argparse.Namespace) -> int:
    scm = build_scm(args.scm)
    a_prime, a = as_arm(args.aprime), as_arm(args.a)
    if (args.yprime is None) == (args.yprime_grid is None):
        raise UsageError("give exactly one of --yprime and --yprime-grid")
    cfg = OracleConfig(grid_resolution=args.grid_res)
    out = Path(args.out) if args.out else Path(config.OUTPUT_DIR) / f'oracle_{args.scm}_{int(a_prime)}to{int(a)}.json'
    manifest_path = _manifest_path(out)
    _start_manifest('oracle', args, {'result': out}, manifest_path)

    doc: Dict[str, Any] = {'scm': scm.name, 'a_prime': int(a_prime), 'a': int(a), 'grid_resolution': args.grid_res,
                           'manifest': str(manifest_path)}
    if args.yprime_grid is not None:
        grid = parse_grid(args.yprime_grid)
        workers = min(args.jobs or config.max_workers(), config.max_workers())
        values = ecou_curve(scm, a_prime, grid, a, cfg, max_workers=workers)
        doc['curve'] = {'y_prime': grid.tolist(), 'q': values.tolist()}
        summary = {'command': 'oracle', 'out': out, 'points': int(grid.size)}
    else:
        y_prime = float(args.yprime)
        q = ecou_oracle(scm, a_prime, y_prime, a, cfg)
        ys = parse_grid(args.density_grid) if args.density_grid else _default_density_grid(scm, a)
        density = counterfactual_density(scm, a_prime, y_prime, a, ys, cfg)
        doc.update({'y_prime': y_prime, 'q': q,
                    'observational_density': observational_density(scm, a_prime, y_prime, cfg),
                    'density_curve': {'y': ys.tolist(), 'density': density.tolist()}})
        summary = {'command': 'oracle', 'out': out, 'q': q}
    validate_or_raise(OutputValidator.validate_oracle_data, to_jsonable(doc), 'oracle result', ValidationError)
    _write_json(doc, out)
    _summary(summary)
    return EXIT_OK


def cmd_bgm(args: argparse.Namespace) -> int:
    direction = parse_direction(args.direction)
    grid = parse_grid(args.grid)
    out = Path(args.out)
    _start_manifest('bgm', args, {'curves': out}, _manifest_path(out))
    dataset = read_csv(args.data)
    curves = bgm_curve(dataset.empirical(0), dataset.empirical(1), grid, direction)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, 'w', newline='') as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(BGM_HEADER)
        for y, inc, dec in curves.rows():
            writer.writerow((f"{y:.17g}", f"{inc:.17g}", f"{dec:.17g}"))
    _summary({'command': 'bgm', 'out': out, 'points': int(grid.size)})
    return EXIT_OK


def cmd_apid(args: argparse.Namespace) -> int:
    a_prime, a = as_arm(args.aprime), as_arm(args.a)
    cfg = TrainConfig.from_preset(
        args.preset, lambda_q=args.lambda_q, lambda_kappa=args.lambda_kappa, seed=args.seed,
        curvature_mode=args.curvature_mode, n_burnin=args.n_burnin, n_query=args.n_query,
        n_curv_query=args.n_curv_query, batch_size=args.batch_size, n_blocks=args.n_blocks, n_eval=args.n_eval,
    )
    tag = f"{int(a_prime)}to{int(a)}_y{args.yprime:g}_lk{cfg.lambda_kappa:g}_s{cfg.seed}"
    out_dir = Path(args.out_dir) if args.out_dir else Path(config.OUTPUT_DIR) / f'apid_{tag}'
    outputs = {
        'bounds': out_dir / 'bounds.json',
        'log': out_dir / 'training.jsonl',
        'upper_checkpoint': out_dir / 'upper.npz',
        'lower_checkpoint': out_dir / 'lower.npz',
    }
    manifest_path = out_dir / 'manifest.json'
    _start_manifest('apid', args, outputs, manifest_path, seed=cfg.seed)

    dataset = read_csv(args.data)
    with TrainingLog(outputs['log']) as log:
        result = train_bounds(dataset, (a_prime, args.yprime, a), cfg, log)
    doc = result.to_dict()
    doc['manifest'] = str(manifest_path)
    validate_or_raise(OutputValidator.validate_bounds_data, to_jsonable(doc), 'bounds result', ValidationError)
    _write_json(doc, outputs['bounds'])
    save_checkpoint(result.upper_model, outputs['upper_checkpoint'])
    save_checkpoint(result.lower_model, outputs['lower_checkpoint'])
    _summary({'command': 'apid', 'out': outputs['bounds'], 'lower': result.lower, 'upper': result.upper,
              'crossed': result.crossed})
    return EXIT_OK


def _read_bgm_rows(path: Path) -> List[tuple]:
    with open(path, newline='') as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != BGM_HEADER:
            raise UsageError(f"{path} is not a BGM curve file")
        return [tuple(float(v) for v in row) for row in reader if row]


def cmd_plot(args: argparse.Namespace) -> int:
    inputs = [Path(p) for p in (args.inputs or [])]
    if not inputs:
        raise UsageError("plot needs at least one input file")
    out = Path(args.out)
    _start_manifest('plot', args, {'figure': out}, _manifest_path(out))

    checkpoints = [p for p in inputs if p.suffix == '.npz']
    if checkpoints:
        if len(inputs) > 1:
            raise UsageError("a curvature map takes exactly one checkpoint")
        model = load_checkpoint(checkpoints[0])
        plot_curvature_map(model, args.arm, out, resolution=args.resolution, a_prime=args.aprime, y_prime=args.yprime)
        _summary({'command': 'plot', 'out': out, 'kind': 'curvature'})
        return EXIT_OK

    bounds_docs, oracle_docs, bgm_rows = [], [], []
    for path in inputs:
        if path.suffix == '.csv':
            bgm_rows.extend(_read_bgm_rows(path))
            continue
        with open(path) as fh:
            doc = json.load(fh)
        kind = document_kind(doc)
        if kind == 'bounds':
            bounds_docs.append(validate_or_raise(OutputValidator.validate_bounds_data, doc, str(path)))
        elif kind == 'oracle':
            oracle_docs.append(validate_or_raise(OutputValidator.validate_oracle_data, doc, str(path)))
        else:
            raise UsageError(f"{path} is neither a bounds nor an oracle result")

    if len(oracle_docs) == 1 and 'density_curve' in oracle_docs[0] and not bounds_docs and not bgm_rows:
        plot_density(oracle_docs[0], out)
        kind = 'density'
    else:
        plot_bound_curves(bounds_docs, out, bgm_rows=sorted(bgm_rows),
                          oracle_curves=[d for d in oracle_docs if 'curve' in d])
        kind = 'bounds'
    _summary({'command': 'plot', 'out': out, 'kind': kind})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='cli.py', description='Counterfactual bounds under curvature sensitivity')
    parser.add_argument('--version', action='version', version=config.__version__)
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen-data', help='generate a synthetic observational dataset')
    p.add_argument('--dataset', choices=[t.value for t in DatasetTag], required=True)
    p.add_argument('--n-per-arm', type=int, required=True)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser('oracle', help='ground-truth counterfactual query of an analytic SCM')
    p.add_argument('--scm', choices=ORACLE_SCMS, required=True)
    p.add_argument('--aprime', type=int, choices=(0, 1), required=True)
    p.add_argument('--yprime', type=float)
    p.add_argument('--yprime-grid', help="sweep y' over 'lo:hi:n' instead of a single value")
    p.add_argument('--a', type=int, choices=(0, 1), required=True)
    p.add_argument('--grid-res', type=int, default=config.ORACLE_GRID_RESOLUTION)
    p.add_argument('--density-grid', help="outcome grid 'lo:hi:n' for the counterfactual density")
    p.add_argument('--jobs', type=int, default=None, help='worker threads for --yprime-grid')
    p.add_argument('--out')
    p.set_defaults(handler=cmd_oracle)

    p = sub.add_parser('bgm', help='BGM counterfactual curves from a dataset')
    p.add_argument('--data', required=True)
    p.add_argument('--direction', default='0to1')
    p.add_argument('--grid', required=True, help="y' grid 'lo:hi:n'")
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_bgm)

    p = sub.add_parser('apid', help='train upper and lower bounds for one query')
    p.add_argument('--data', required=True)
    p.add_argument('--aprime', type=int, choices=(0, 1), required=True)
    p.add_argument('--yprime', type=float, required=True)
    p.add_argument('--a', type=int, choices=(0, 1), required=True)
    p.add_argument('--lambda-q', type=float)
    p.add_argument('--lambda-kappa', type=float)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--preset', choices=sorted(config.PRESETS), default='paper')
    p.add_argument('--curvature-mode', choices=CurvatureMode.ALL)
    p.add_argument('--n-burnin', type=int)
    p.add_argument('--n-query', type=int)
    p.add_argument('--n-curv-query', type=int)
    p.add_argument('--batch-size', type=int)
    p.add_argument('--n-blocks', type=int)
    p.add_argument('--n-eval', type=int)
    p.add_argument('--out-dir')
    p.set_defaults(handler=cmd_apid)

    p = sub.add_parser('plot', help='render bounds, oracle curves or a curvature map as SVG')
    p.add_argument('--inputs', nargs='*', default=[])
    p.add_argument('--out', required=True)
    p.add_argument('--arm', type=int, choices=(0, 1), default=1, help='arm of the curvature map')
    p.add_argument('--aprime', type=int, choices=(0, 1))
    p.add_argument('--yprime', type=float)
    p.add_argument('--resolution', type=int, default=60)
    p.set_defaults(handler=cmd_plot)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    ErrorHandler.init_logging(config.LOG_LEVEL, config.LOG_FILE)
    try:
        return args.handler(args)
    except Exception as exc:
        return ErrorHandler.handle(exc, f"command '{args.command}'")


if __name__ == '__main__':
    sys.exit(main())
