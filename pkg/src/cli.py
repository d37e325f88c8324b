"""pixelcl command line.

    pixelcl synth --scenes 200 --label-fraction 0.1 --out data.pxds
    pixelcl run --plan plan.json --out runs/a
    pixelcl ablate --preset no-refine --plan plan.json --out runs/b
    pixelcl margin-lab --config lab.json --out grid.csv
    pixelcl eval --checkpoint runs/a/seed_0/student.pxcl --dataset data.pxds --out metrics.json
    pixelcl sweep --config sweep.json --out sweeps/c

Exit codes: 0 success, 2 config/argument error, 3 data/format error, 4 numeric failure.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .config import (
    DatasetRef, LabConfig, RunPlan, SceneConfig, StageConfig, SweepConfig, load_config, parse_config,
)
from .errors import ArgumentError, PixelclError
from .margin_lab import run_grid
from .pipeline import (
    PRESET_ALIASES, PRESETS, apply_overrides, apply_preset, evaluate_checkpoint, run_plan, run_sweep, write_json,
)
from .synth import build_dataset, save_dataset

logger = logging.getLogger('pixelcl')

OBJECTIVE_FLAGS = {
    'sampler': 'sampler',
    'loss': 'loss',
    'negatives': 'negatives',
    'temperature': 'temperature',
    'lambda_pxl': 'lambda_pxl',
    'scope': 'scope',
    'debias_exponent': 'debias_exponent',
    'sampler_source': 'sampler_source',
    'margin': 'margin',
    'bank_capacity': 'bank_capacity',
}


def _add_objective_flags(parser: argparse.ArgumentParser):
    group = parser.add_argument_group('objective overrides')
    group.add_argument('--sampler', choices=['uniform', 'mask', 'class', 'fusion'])
    group.add_argument('--loss', choices=['ntxent', 'hinge'])
    group.add_argument('--negatives', type=int)
    group.add_argument('--temperature', type=float)
    group.add_argument('--lambda-pxl', dest='lambda_pxl', type=float)
    group.add_argument('--scope', choices=['batch', 'bank'])
    group.add_argument('--debias-exponent', dest='debias_exponent', choices=['linear', 'squared', 'sqrt'])
    group.add_argument('--sampler-source', dest='sampler_source', choices=['self', 'teacher'])
    group.add_argument('--margin', type=float, help='hinge margin')
    group.add_argument('--bank-capacity', dest='bank_capacity', type=int, help='memory bank size')


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, help='override the config seed(s)')
    common.add_argument('--log-level', default='INFO', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    common.add_argument('--quiet', action='store_true', help='disable progress bars')

    parser = argparse.ArgumentParser(prog='pixelcl', description='Pixel-level contrastive distillation toolkit')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('synth', parents=[common], help='generate a synthetic scene dataset')
    p.add_argument('--scene-config', help='SceneConfig JSON')
    p.add_argument('--scenes', type=int, default=200)
    p.add_argument('--label-fraction', type=float, default=0.1)
    p.add_argument('--eval-scenes', type=int, default=40)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser('run', parents=[common], help='run a training plan')
    p.add_argument('--plan', help='RunPlan JSON')
    p.add_argument('--out', required=True)
    _add_objective_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser('ablate', parents=[common], help='run a stage-ablation preset')
    p.add_argument('--preset', required=True, choices=sorted(PRESETS) + sorted(PRESET_ALIASES))
    p.add_argument('--plan', help='RunPlan JSON the preset is applied to')
    p.add_argument('--out', required=True)
    _add_objective_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser('margin-lab', parents=[common], help='Monte-Carlo margin dynamics grid')
    p.add_argument('--config', help='LabConfig JSON')
    p.add_argument('--trials', type=int)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_margin_lab)

    p = sub.add_parser('eval', parents=[common], help='evaluate a checkpoint on a dataset')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--dataset', required=True)
    p.add_argument('--config', help='StageConfig JSON for the sampler settings')
    p.add_argument('--teacher-checkpoint', dest='teacher_checkpoint', help='teacher for --sampler-source teacher')
    p.add_argument('--out', required=True)
    _add_objective_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('sweep', parents=[common], help='hyperparameter sweep')
    p.add_argument('--config', help='SweepConfig JSON')
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def _objective_overrides(args: argparse.Namespace) -> dict:
    return {field: getattr(args, flag) for flag, field in OBJECTIVE_FLAGS.items()
            if getattr(args, flag, None) is not None}


def _load_plan(args: argparse.Namespace) -> RunPlan:
    plan = load_config(args.plan, RunPlan) if args.plan else RunPlan()
    raw = plan.model_dump()
    if args.seed is not None:
        raw['seeds'] = [args.seed]
    return apply_overrides(parse_config(raw, RunPlan), _objective_overrides(args))


def cmd_synth(args: argparse.Namespace) -> int:
    if not 0.0 < args.label_fraction <= 1.0:
        raise ArgumentError(f'--label-fraction must lie in (0, 1], got {args.label_fraction}')
    if args.scenes < 1:
        raise ArgumentError(f'--scenes must be >= 1, got {args.scenes}')
    scene = load_config(args.scene_config, SceneConfig) if args.scene_config else SceneConfig()
    ref = DatasetRef(scene=scene, n_scenes=args.scenes, label_fraction=args.label_fraction,
                     n_eval=args.eval_scenes, seed=args.seed or 0)
    dataset = build_dataset(ref)
    path = save_dataset(args.out, dataset)
    manifest = write_json(Path(f'{args.out}.manifest.json'), dataset.manifest())
    logger.info(f'Wrote dataset {path} and manifest {manifest}')
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    plan = _load_plan(args)
    report = run_plan(plan, args.out, progress=not args.quiet)
    logger.info(f'Run finished: {json.dumps(report.aggregate.get("student_ap_mean"))} student AP, output in {report.out_dir}')
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    plan = apply_preset(_load_plan(args), args.preset)
    report = run_plan(plan, args.out, progress=not args.quiet)
    logger.info(f'Ablation {args.preset} finished, output in {report.out_dir}')
    return 0


def cmd_margin_lab(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, LabConfig) if args.config else LabConfig()
    update = {}
    if args.seed is not None:
        update['seed'] = args.seed
    if args.trials is not None:
        update['trials'] = args.trials
    if update:
        cfg = parse_config({**cfg.model_dump(), **update}, LabConfig)
    summary = run_grid(cfg, args.out, progress=not args.quiet)
    logger.info(f'Margin lab wrote {", ".join(summary["files"])}')
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, StageConfig) if args.config else StageConfig()
    overrides = _objective_overrides(args)
    samplers = None
    if 'sampler' in overrides:
        samplers = [overrides.pop('sampler')]
    if overrides:
        cfg = parse_config({**cfg.model_dump(), **overrides}, StageConfig)
    result = evaluate_checkpoint(args.checkpoint, args.dataset, cfg, samplers=samplers, seed=args.seed or 0,
                                 teacher_path=args.teacher_checkpoint)
    write_json(Path(args.out), result)
    logger.info(f'ap={result["ap"]:.4f} ap50={result["ap50"]:.4f} fnr={result["fnr"]}')
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, SweepConfig) if args.config else SweepConfig()
    if args.seed is not None:
        raw = cfg.model_dump()
        raw['plan']['seeds'] = [args.seed]
        cfg = parse_config(raw, SweepConfig)
    rows = run_sweep(cfg, args.out, progress=not args.quiet)
    logger.info(f'Sweep wrote {len(rows)} cells to {args.out}')
    return 0


def configure_logging(level: str):
    logging.basicConfig(
        level=getattr(logging, level),
        format='%(asctime)s %(levelname)s %(name)s %(message)s',
        stream=sys.stderr,
    )


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.func(args)
    except PixelclError as e:
        logger.error(f'{type(e).__name__}: {str(e)}')
        return e.exit_code


if __name__ == '__main__':
    sys.exit(main())
