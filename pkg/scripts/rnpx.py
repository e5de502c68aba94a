#!/usr/bin/env python3
"""
RNPx command line: train, evaluate and check Renyi-divergence neural processes.

    rnpx.py train     --config configs/rbf_rnp.ini --seed 0
    rnpx.py eval      --config configs/rbf_rnp.ini --ckpt runs/.../ckpt_final --data test --K 50
    rnpx.py sweep     --config configs/rbf_rnp.ini --kind k --grid 1,8,16,32,50
    rnpx.py misspec   --config configs/lv_rnp_ml.ini --protocol lv
    rnpx.py gradcheck --seed 0
    rnpx.py oracle
    rnpx.py dump      --config configs/rbf_rnp.ini --out predictions.csv

Exit codes: 0 success, 1 failed check or run error (one `FAIL <check>: <reason>`
line on stderr), 2 configuration error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

sys.path.insert(0, str(Path(__file__).parent.parent))

from models.rnp_v1 import __version__
from models.rnp_v1.errors import CheckFailure, ConfigError, RNPError
from models.rnp_v1.evaluate import (EvalSplit, MisspecProtocol, RunLabels, SweepKind,
                                    default_grid, emit_prediction_dump, evaluate_splits,
                                    hare_lynx_tasks, make_exp_id, parse_grid, run_misspec_protocol,
                                    run_sweep, select_alpha, write_metrics)
from models.rnp_v1.model import load_checkpoint
from models.rnp_v1.taskgen import TaskSource, manifest_path, read_task_cache
from models.rnp_v1.train import single_threaded, train
from scripts.run_config import RunConfig, describe_keys, load_run_config, resolve_input
from scripts.self_check import run_gradient_suite, run_oracle_suite

logger = logging.getLogger("rnpx")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2
SPLITS = ("train", "val", "test")


def setup_logging(level: str = "INFO", json_logs: bool = False):
    handler = logging.StreamHandler()
    if json_logs:
        from pythonjsonlogger import jsonlogger
        handler.setFormatter(jsonlogger.JsonFormatter('%(asctime)s %(levelname)s %(name)s %(message)s'))
    else:
        handler.setFormatter(logging.Formatter('%(asctime)s - %(levelname)s - %(message)s'))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(getattr(logging, level.upper(), logging.INFO))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='INI run configuration')
    common.add_argument('--set', dest='overrides', action='append', default=[],
                        metavar='SECTION.KEY=VALUE', help='Override one configuration key (repeatable)')
    common.add_argument('--seed', type=int, help='Override run.seed')
    common.add_argument('--log-level', default='INFO', help='Logging level')
    common.add_argument('--log-json', action='store_true', help='Emit JSON log lines')
    common.add_argument('--no-progress', action='store_true', help='Disable progress bars')

    parser = argparse.ArgumentParser(description='RNPx: Renyi-divergence neural processes',
                                     formatter_class=argparse.RawDescriptionHelpFormatter,
                                     epilog=describe_keys())
    parser.add_argument('--version', action='version', version=f'rnpx {__version__}')
    sub = parser.add_subparsers(dest='command', required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        return sub.add_parser(name, parents=[common], help=help_text, description=help_text,
                              formatter_class=argparse.RawDescriptionHelpFormatter,
                              epilog=describe_keys())

    p = add('train', 'Meta-train a neural process')
    p.add_argument('--output-dir', help='Override paths.output_dir')
    p.add_argument('--K', dest='num_samples', type=int, help='Override objective.num_samples')

    p = add('eval', 'Evaluate a checkpoint (context and target log-likelihood)')
    p.add_argument('--ckpt', help='Checkpoint (default: paths.checkpoint or <output_dir>/ckpt_final)')
    p.add_argument('--data', default='test',
                   help='train|val|test split of the configured dataset, a .jsonl task cache or a Hare-Lynx .csv')
    p.add_argument('--K', dest='num_samples', type=int, help='Override eval.num_samples')
    p.add_argument('--split', choices=['context', 'target', 'both'], default='both')
    p.add_argument('--metrics', help='Metrics CSV to append to')

    p = add('sweep', 'Sweep alpha, K or the context size')
    p.add_argument('--kind', required=True, choices=[k.value for k in SweepKind])
    p.add_argument('--grid', help='Comma-separated grid (default: the standard grid for --kind)')
    p.add_argument('--ckpt', help='Checkpoint, or a {alpha} template for --kind alpha')
    p.add_argument('--select', action='store_true',
                   help='Print the alpha with the best mean target log-likelihood')
    p.add_argument('--K', dest='num_samples', type=int, help='Override eval.num_samples')
    p.add_argument('--metrics', help='Metrics CSV to append to')

    p = add('misspec', 'Run a misspecification protocol')
    p.add_argument('--protocol', required=True, choices=[m.value for m in MisspecProtocol])
    p.add_argument('--ckpt', help='Checkpoint')
    p.add_argument('--hare-lynx', help='Override paths.hare_lynx')
    p.add_argument('--K', dest='num_samples', type=int, help='Override eval.num_samples')
    p.add_argument('--metrics', help='Metrics CSV to append to')

    p = add('gradcheck', 'Gradient identity and finite-difference checks')
    p.add_argument('--tasks', type=int, default=20, help='Number of random small tasks')
    p.add_argument('--tol', type=float, default=1e-4, help='Finite-difference tolerance')

    add('oracle', 'Analytic divergence and Renyi-fit oracles')

    p = add('dump', 'Write predictive mean/std on a grid for one task')
    p.add_argument('--ckpt', help='Checkpoint')
    p.add_argument('--data', default='test', help='Task source, as for eval')
    p.add_argument('--task-index', type=int, default=0)
    p.add_argument('--points', type=int, help='Override eval.dump_points')
    p.add_argument('--K', dest='num_samples', type=int, help='Override eval.num_samples')
    p.add_argument('--out', help='Override paths.dump')
    return parser


def collect_overrides(args) -> List[str]:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if getattr(args, 'num_samples', None) is not None:
        section = 'objective' if args.command == 'train' else 'eval'
        overrides.append(f"{section}.num_samples={args.num_samples}")
    if getattr(args, 'output_dir', None):
        overrides.append(f"paths.output_dir={args.output_dir}")
    if getattr(args, 'hare_lynx', None):
        overrides.append(f"paths.hare_lynx={args.hare_lynx}")
    if getattr(args, 'points', None) is not None:
        overrides.append(f"eval.dump_points={args.points}")
    if getattr(args, 'out', None):
        overrides.append(f"paths.dump={args.out}")
    return overrides


def run_labels(cfg: RunConfig, dataset: Optional[str] = None) -> RunLabels:
    """Row identity: the exp_id carries the run seed that picked the evaluated tasks."""
    return RunLabels(make_exp_id(cfg.run.name, cfg.config_hash(), seed=cfg.seed),
                     dataset or cfg.dataset.label, cfg.objective.kind.value,
                     cfg.objective.spec().label_alpha())


def checkpoint_arg(cfg: RunConfig, ckpt: Optional[str]) -> Path:
    return resolve_input(ckpt) if ckpt else cfg.checkpoint_path


def metrics_arg(cfg: RunConfig, metrics: Optional[str]) -> Path:
    return Path(metrics) if metrics else cfg.metrics_path


def load_tasks(cfg: RunConfig, data: str):
    """(tasks, dataset label) for a split name, a JSON-lines task cache or a Hare-Lynx CSV."""
    if data in SPLITS:
        return TaskSource(cfg.dataset, cfg.seed, data).take(cfg.eval.n_tasks), cfg.dataset.label
    path = resolve_input(data)
    if path.suffix == '.jsonl':
        return read_task_cache(path)[0], path.stem
    if path.suffix == '.csv':
        return hare_lynx_tasks(path, cfg.eval, cfg.seed), 'hare_lynx'
    raise ConfigError(f"--data must be one of {', '.join(SPLITS)}, a .jsonl cache or a .csv file: {data}")


def write_artifact_manifest(path: Path, cfg: RunConfig, **extra):
    """Sidecar recording (config hash, seed, code version) for a CSV artifact."""
    meta = dict(extra, config_hash=cfg.config_hash(), seed=cfg.seed, code_version=__version__)
    manifest_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True), encoding='utf-8')


def cmd_train(cfg: RunConfig, args) -> int:
    result = train(cfg.train_config(), cfg.output_dir, progress=not args.no_progress,
                   metrics_path=cfg.metrics_path)
    print(f"checkpoint {result.final_checkpoint}")
    print(f"metrics {cfg.metrics_path} ({len(result.records)} rows)")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    model = load_checkpoint(checkpoint_arg(cfg, args.ckpt))
    tasks, label = load_tasks(cfg, args.data)
    splits = (EvalSplit.CONTEXT, EvalSplit.TARGET) if args.split == 'both' else (EvalSplit(args.split),)
    records = evaluate_splits(model, tasks, cfg.eval.num_samples, cfg.eval.seeds,
                              run_labels(cfg, label), splits)
    path = write_metrics(records, metrics_arg(cfg, args.metrics))
    for r in records:
        print(f"{r.dataset} {r.split} seed={r.seed} K={r.K}: {r.ll_mean:.6f} +/- {r.ll_std:.6f}")
    print(f"metrics {path}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, args) -> int:
    kind = SweepKind(args.kind)
    if args.select and kind != SweepKind.ALPHA:
        raise ConfigError("--select applies to --kind alpha only")
    grid = parse_grid(args.grid, kind) if args.grid else default_grid(kind)
    if kind == SweepKind.ALPHA:
        checkpoint = args.ckpt or cfg.paths.checkpoint_template
        if not checkpoint:
            raise ConfigError("alpha sweep needs --ckpt or paths.checkpoint_template with an {alpha} field")
        checkpoint = str(resolve_input(checkpoint))
    else:
        checkpoint = checkpoint_arg(cfg, args.ckpt)
    records = run_sweep(kind, grid, cfg.dataset, cfg.eval, checkpoint, run_labels(cfg), cfg.seed)
    path = write_metrics(records, metrics_arg(cfg, args.metrics))
    print(f"{len(records)} rows -> {path}")
    if args.select:
        print(f"selected alpha {select_alpha(records):g}")
    return EXIT_OK


def cmd_misspec(cfg: RunConfig, args) -> int:
    model = load_checkpoint(checkpoint_arg(cfg, args.ckpt))
    records = run_misspec_protocol(MisspecProtocol(args.protocol), model, cfg.dataset, cfg.eval,
                                   run_labels(cfg), cfg.seed, resolve_input(cfg.paths.hare_lynx))
    path = write_metrics(records, metrics_arg(cfg, args.metrics))
    for r in records:
        print(f"{r.dataset} {r.split} seed={r.seed}: {r.ll_mean:.6f} +/- {r.ll_std:.6f}")
    print(f"{len(records)} rows -> {path}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    report, max_error = run_gradient_suite(cfg.seed, n_tasks=args.tasks, tol=args.tol)
    report.raise_on_failure()
    print(f"max relative error {max_error:.3e}")
    return EXIT_OK


def cmd_oracle(cfg: RunConfig, args) -> int:
    report = run_oracle_suite(cfg.seed)
    report.raise_on_failure()
    for result in report.results:
        print(f"{result.name}: {result.detail}")
    return EXIT_OK


def cmd_dump(cfg: RunConfig, args) -> int:
    model = load_checkpoint(checkpoint_arg(cfg, args.ckpt))
    tasks, label = load_tasks(cfg, args.data)
    if not 0 <= args.task_index < len(tasks):
        raise ConfigError(f"--task-index {args.task_index} out of range for {len(tasks)} tasks")
    out = cfg.expand(cfg.paths.dump)
    frame = emit_prediction_dump(model, tasks[args.task_index], cfg.eval.num_samples, out,
                                 grid_points=cfg.eval.dump_points, seed=cfg.seed)
    write_artifact_manifest(out, cfg, dataset=label, task_index=args.task_index)
    print(f"{len(frame)} rows -> {out}")
    return EXIT_OK


COMMANDS = {
    'train': cmd_train,
    'eval': cmd_eval,
    'sweep': cmd_sweep,
    'misspec': cmd_misspec,
    'gradcheck': cmd_gradcheck,
    'oracle': cmd_oracle,
    'dump': cmd_dump,
}


def _one_line(message) -> str:
    return " ".join(str(message).split())


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level, args.log_json)
    try:
        cfg = load_run_config(args.config, collect_overrides(args))
        with single_threaded():
            return COMMANDS[args.command](cfg, args)
    except (ConfigError, ValidationError) as e:
        print(f"CONFIG ERROR: {_one_line(e)}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckFailure as e:
        print(f"FAIL {e.check}: {_one_line(e.reason)}", file=sys.stderr)
        return EXIT_FAILED
    except (RNPError, OSError) as e:
        print(f"FAIL {args.command}: {type(e).__name__}: {_one_line(e)}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == '__main__':
    sys.exit(main())
