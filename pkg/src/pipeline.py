"""Three-stage training pipeline.

1. Teacher adaptation. The zero-shot teacher θ_T^0 (trained on a palette-shifted
   source domain) is fine-tuned on the labeled pool; its pseudo-labels on the
   unlabeled pool are frozen; training restarts from θ_T^0 on both pools.
2. Knowledge transfer. The frozen adapted teacher labels the unlabeled pool and
   a fresh student minimises the unified objective.
3. Student refinement. Labeled-only fine-tuning of the student.

Every stage writes a metrics CSV; checkpoints use the shared binary container.
"""
import itertools
import json
import logging
from contextlib import ExitStack
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from .config import (
    STAGES, ArchConfig, RunPlan, SceneConfig, StageConfig, StagePlan, SweepConfig,
    dump_config, get_env_int, parse_config,
)
from .errors import ArgumentError, ConfigError, DataError, FormatError, InternalError, NumericError
from .metrics import empirical_margin, fnr, mask_ap
from .model import ModelParams, count_params, forward, init_params, param_shapes
from .numcore import RngStream, Tape, value_of
from .objective import (
    ObjectiveResult, PseudoLabel, SceneSample, decode_instances, generate_pseudo_labels, teacher_score_maps,
    unified_objective,
)
from .optim import Optimizer
from .sampler import MemoryBank, ScoreMaps
from .synth import (
    SceneDataset, SyntheticScene, apply_weak, build_dataset, generate_scene, load_dataset,
    strong_augment, weak_augment,
)
from .utils.codec import encode_container, read_container, write_container
from .utils.csvlog import METRIC_COLUMNS, CsvWriter, read_csv, write_csv

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'PXCL'
EVAL_MIN_SCORE = 0.05

# sup-only is the supervised baseline: a fresh student trained on labeled scenes with both extra terms off
PRESETS: Dict[str, Dict[str, Any]] = {
    'full': {'stages': list(STAGES)},
    'no-refine': {'stages': ['teacher_finetune', 'teacher_selftrain', 'distill']},
    'no-adapt': {'stages': ['distill', 'refine']},
    'distill-only': {'stages': ['distill']},
    'sup-only': {'stages': ['distill'], 'distill_objective': {'lambda_semi': 0.0, 'lambda_pxl': 0.0}},
}
PRESET_ALIASES = {'no-teacher-adapt': 'no-adapt'}


# --------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    params: ModelParams
    step: int = 0
    rng_state: Optional[Dict[str, Any]] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def arch(self) -> ArchConfig:
        return self.params.arch


def _checkpoint_payload(ckpt: Checkpoint):
    meta = {
        'kind': 'checkpoint',
        'arch': dump_config(ckpt.arch),
        'step': int(ckpt.step),
        'rng_state': ckpt.rng_state,
        'meta': ckpt.meta,
    }
    order = list(param_shapes(ckpt.arch))
    return meta, [(name, ckpt.params.tensors[name]) for name in order]


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    return encode_container(CHECKPOINT_MAGIC, *_checkpoint_payload(ckpt))


def save_checkpoint(path: str, ckpt: Checkpoint) -> str:
    return write_container(path, CHECKPOINT_MAGIC, *_checkpoint_payload(ckpt))


def load_checkpoint(path: str, arch: Optional[ArchConfig] = None) -> Checkpoint:
    """Load a checkpoint, optionally checking it against an expected architecture."""
    meta, tensors = read_container(path, CHECKPOINT_MAGIC)
    if meta.get('kind') != 'checkpoint':
        raise FormatError(f'{path} is not a checkpoint')
    stored = ArchConfig.model_validate(meta['arch'])
    expected = param_shapes(arch or stored)
    for name, shape in expected.items():
        if name not in tensors:
            raise FormatError(f"checkpoint is missing tensor '{name}'")
        if tuple(tensors[name].shape) != shape:
            raise FormatError(f"tensor '{name}' has shape {tuple(tensors[name].shape)}, expected {shape}")
    extra = sorted(set(tensors) - set(expected))
    if extra:
        raise FormatError(f'checkpoint has unexpected tensors {extra}')
    params = ModelParams(arch or stored, {name: tensors[name] for name in expected})
    return Checkpoint(params=params, step=int(meta['step']), rng_state=meta.get('rng_state'), meta=meta.get('meta', {}))


# ---------------------------------------------------------------- training

@dataclass
class StageData:
    labeled: List[SyntheticScene]
    unlabeled: List[SyntheticScene] = field(default_factory=list)
    pseudo: List[PseudoLabel] = field(default_factory=list)
    teacher_maps_l: Optional[List[ScoreMaps]] = None
    teacher_maps_u: Optional[List[ScoreMaps]] = None


@dataclass
class StageResult:
    params: ModelParams
    steps: int
    losses: List[float]
    last_row: Optional[Dict[str, Any]] = None
    rng_state: Optional[Dict[str, Any]] = None


def _sample(scene: SyntheticScene, rng: RngStream, stride: int, targets, maps: Optional[ScoreMaps]) -> SceneSample:
    return SceneSample(
        scene=scene,
        weak=weak_augment(scene, rng.child('weak'), stride),
        strong=strong_augment(scene, rng.child('strong'), stride),
        targets=list(targets),
        teacher_maps=maps,
    )


def assemble_batch(data: StageData, stage_plan: StagePlan, stride: int, rng: RngStream):
    """Labeled and unlabeled samples for one step; depends only on ``rng``."""
    batch_l, batch_u = [], []
    if data.labeled and stage_plan.batch_labeled:
        picks = rng.child('l').integers(0, len(data.labeled), size=stage_plan.batch_labeled)
        for pos, i in enumerate(picks):
            maps = data.teacher_maps_l[i] if data.teacher_maps_l else None
            scene = data.labeled[i]
            batch_l.append(_sample(scene, rng.child('lv').child(pos), stride, scene.instances, maps))
    if data.unlabeled and stage_plan.batch_unlabeled:
        picks = rng.child('u').integers(0, len(data.unlabeled), size=stage_plan.batch_unlabeled)
        for pos, i in enumerate(picks):
            maps = data.teacher_maps_u[i] if data.teacher_maps_u else None
            targets = data.pseudo[i].instances if data.pseudo else []
            batch_u.append(_sample(data.unlabeled[i], rng.child('uv').child(pos), stride, targets, maps))
    return batch_l, batch_u


def metric_row(step: int, result: ObjectiveResult) -> Dict[str, Any]:
    row: Dict[str, Any] = {
        'step': step,
        'loss_sup': result.terms.get('loss_sup'),
        'loss_semi': result.terms.get('loss_semi'),
        'loss_pxl': result.terms.get('loss_pxl'),
    }
    if result.plan is not None:
        row['fnr'] = fnr(result.plan, result.instance_ids)
        row['pos_mean'], row['neg_mean'], row['margin'] = empirical_margin(result.similarities)
    return row


def predict(params: ModelParams, scene: SyntheticScene, min_score: float = EVAL_MIN_SCORE):
    return decode_instances(forward(params, scene.image), scene.shape, min_score)


def evaluate(params: ModelParams, scenes: List[SyntheticScene]) -> Dict[str, Any]:
    return mask_ap([predict(params, s) for s in scenes], [s.instances for s in scenes])


def train_stage(
    stage: str,
    params: ModelParams,
    stage_plan: StagePlan,
    steps: int,
    data: StageData,
    rng: RngStream,
    metrics_path: Optional[str] = None,
    eval_scenes: Optional[List[SyntheticScene]] = None,
    metrics_every: int = 10,
    progress: bool = True,
) -> StageResult:
    """Run ``steps`` optimizer updates of the unified objective on a copy of ``params``."""
    params = params.copy()
    cfg = stage_plan.objective
    stride = params.arch.stride
    optimizer = Optimizer(stage_plan.optim, steps)
    bank = MemoryBank(cfg.bank_capacity) if cfg.scope == 'bank' else None
    losses: List[float] = []
    last_row = None

    with ExitStack() as stack:
        writer = stack.enter_context(CsvWriter(metrics_path, METRIC_COLUMNS)) if metrics_path else None
        prefetch = stack.enter_context(ThreadPoolExecutor(max_workers=1))
        pending = prefetch.submit(assemble_batch, data, stage_plan, stride, rng.child('batch').child(0)) if steps else None
        for step in tqdm(range(steps), desc=stage, disable=None if progress else True, leave=False):
            batch_l, batch_u = pending.result()
            if step + 1 < steps:
                pending = prefetch.submit(assemble_batch, data, stage_plan, stride, rng.child('batch').child(step + 1))
            log_now = (step + 1) % metrics_every == 0 or step == steps - 1

            tape = Tape()
            result = unified_objective(
                params, batch_l, batch_u, cfg, tape=tape,
                rng=rng.child('sampler').child(step), bank=bank, compute_pxl=log_now,
            )
            loss = float(value_of(result.total))
            if not np.isfinite(loss):
                raise NumericError(f'stage={stage} step={step} produced a non-finite loss')
            tape.backward(result.total)
            optimizer.step(params, tape.leaf_grads())
            losses.append(loss)
            if bank is not None and result.bank_rows is not None:
                bank.push(*result.bank_rows, num_slots=params.arch.num_slots)

            if log_now:
                row = metric_row(step + 1, result)
                if step == steps - 1 and eval_scenes:
                    scores = evaluate(params, eval_scenes)
                    row['ap'], row['ap50'] = scores['ap'], scores['ap50']
                if writer:
                    writer.write_row(row)
                last_row = row
                logger.info(f'stage={stage} step={step + 1} loss={loss:.6f}')
    if not params.is_finite():
        raise NumericError(f'stage={stage} left non-finite parameters')
    return StageResult(params=params, steps=optimizer.step_count, losses=losses, last_row=last_row,
                       rng_state=rng.state())


def label_unlabeled(teacher: ModelParams, scenes: List[SyntheticScene], cfg: StageConfig, source: str) -> List[PseudoLabel]:
    labels = [generate_pseudo_labels(forward(teacher, s.image), cfg, s.shape, source=source) for s in scenes]
    kept = sum(len(p.instances) for p in labels)
    logger.info(f'Pseudo-labeled {len(scenes)} scenes with {kept} instances from {source}')
    return labels


def labeled_loss(params: ModelParams, scenes: List[SyntheticScene], cfg: StageConfig) -> float:
    """Mean supervised loss on unaugmented labeled scenes."""
    if not scenes:
        return 0.0
    stride = params.arch.stride
    samples = []
    for s in scenes:
        view = apply_weak(s, flip=False, scale=1.0, stride=stride)
        samples.append(SceneSample(scene=s, weak=view, strong=view, targets=s.instances))
    plain = cfg.model_copy(update={'lambda_semi': 0.0, 'lambda_pxl': 0.0})
    return float(value_of(unified_objective(params, samples, [], plain).total))


# ------------------------------------------------------------------ stages

@dataclass
class RunContext:
    out_dir: Path
    metrics_every: int = 10
    progress: bool = True
    eval_scenes: List[SyntheticScene] = field(default_factory=list)
    completed: Dict[str, StageResult] = field(default_factory=dict)

    def metrics_path(self, stage: str) -> str:
        return str(self.out_dir / f'metrics_{stage}.csv')

    def record(self, stage: str, result: StageResult) -> StageResult:
        self.completed[stage] = result
        return result

    def checkpoint(self, params: ModelParams, stages: Tuple[str, ...], **meta: Any) -> Checkpoint:
        """Checkpoint carrying the step counter and stream of the latest finished stage in ``stages``."""
        for stage in stages:
            done = self.completed.get(stage)
            if done is not None:
                return Checkpoint(params, step=done.steps, rng_state=done.rng_state, meta={**meta, 'stage': stage})
        return Checkpoint(params, meta=meta)


def _stage_plan(plan: RunPlan, stage: str, **objective: Any) -> StagePlan:
    base = plan.stage_plan(stage)
    if not objective:
        return base
    return base.model_copy(update={'objective': base.objective.model_copy(update=objective)})


def pretrain_teacher(plan: RunPlan, rng: RngStream, ctx: Optional[RunContext] = None) -> ModelParams:
    """Zero-shot teacher: supervised training on a palette-shifted source domain."""
    params = init_params(plan.teacher_arch, rng.child('teacher_init'))
    pre = plan.pretrain
    if pre.steps == 0:
        return params
    scene_cfg = plan.dataset.scene.model_copy(update={'palette_shift': pre.palette_shift})
    root = RngStream(plan.dataset.seed).child('source')
    scenes = [generate_scene(scene_cfg, root.child(i)) for i in range(pre.n_scenes)]
    stage_plan = StagePlan(
        batch_labeled=pre.batch, batch_unlabeled=0,
        objective=StageConfig(lambda_semi=0.0, lambda_pxl=0.0), optim=pre.optim,
    )
    result = train_stage(
        'pretrain', params, stage_plan, pre.steps, StageData(labeled=scenes), rng.child('pretrain'),
        metrics_path=ctx.metrics_path('pretrain') if ctx else None,
        metrics_every=ctx.metrics_every if ctx else 10, progress=ctx.progress if ctx else False,
    )
    if ctx:
        ctx.record('pretrain', result)
    return result.params


@dataclass
class AdaptationResult:
    phase1: ModelParams
    adapted: ModelParams
    reinit_matches_init: Optional[bool] = None


def adapt_teacher(data: SceneDataset, plan: RunPlan, theta0: ModelParams, rng: RngStream,
                  ctx: Optional[RunContext] = None) -> AdaptationResult:
    """Fine-tune, pseudo-label, then retrain from θ_T^0 on labeled + pseudo-labeled data."""
    labeled, unlabeled = data.labeled, data.unlabeled
    if not labeled:
        raise ConfigError('teacher adaptation needs a non-empty labeled pool')
    contrastive = plan.teacher_variant == 'selftrain_contrastive'
    off = {} if contrastive else {'lambda_pxl': 0.0}
    every = ctx.metrics_every if ctx else 10
    progress = ctx.progress if ctx else False
    eval_scenes = ctx.eval_scenes if ctx else None

    init_fingerprint = theta0.fingerprint()
    phase1 = theta0
    if 'teacher_finetune' in plan.stages:
        result = train_stage(
            'teacher_finetune', theta0, _stage_plan(plan, 'teacher_finetune', **off),
            plan.stage_steps('teacher_finetune'), StageData(labeled=labeled), rng.child('teacher_finetune'),
            metrics_path=ctx.metrics_path('teacher_finetune') if ctx else None,
            eval_scenes=eval_scenes, metrics_every=every, progress=progress,
        )
        if ctx:
            ctx.record('teacher_finetune', result)
        phase1 = result.params

    if 'teacher_selftrain' not in plan.stages or plan.teacher_variant == 'finetune':
        return AdaptationResult(phase1=phase1, adapted=phase1)

    selftrain_plan = _stage_plan(plan, 'teacher_selftrain', **off)
    pseudo = label_unlabeled(phase1, unlabeled, selftrain_plan.objective, source='teacher_phase1')
    reinit_ok = theta0.fingerprint() == init_fingerprint
    if not reinit_ok:
        raise InternalError('phase-2 teacher start differs from the initial teacher')
    result = train_stage(
        'teacher_selftrain', theta0, selftrain_plan, plan.stage_steps('teacher_selftrain'),
        StageData(labeled=labeled, unlabeled=unlabeled, pseudo=pseudo), rng.child('teacher_selftrain'),
        metrics_path=ctx.metrics_path('teacher_selftrain') if ctx else None,
        eval_scenes=eval_scenes, metrics_every=every, progress=progress,
    )
    if ctx:
        ctx.record('teacher_selftrain', result)
    return AdaptationResult(phase1=phase1, adapted=result.params, reinit_matches_init=reinit_ok)


@dataclass
class DistillResult:
    student: ModelParams
    teacher_frozen: bool


def distill_student(data: SceneDataset, teacher: Optional[ModelParams], plan: RunPlan, rng: RngStream,
                    ctx: Optional[RunContext] = None, pseudo_teacher: Optional[ModelParams] = None) -> DistillResult:
    """Train a fresh student against ground truth, frozen-teacher pseudo-labels and L_pxl."""
    if teacher is None:
        raise ConfigError('distillation needs a teacher checkpoint')
    if count_params(plan.student_arch) >= count_params(teacher):
        logger.warning('Student is not smaller than the teacher')
    before = teacher.fingerprint()
    stage_plan = plan.stage_plan('distill')
    cfg = stage_plan.objective
    source = pseudo_teacher if pseudo_teacher is not None else teacher

    pseudo = label_unlabeled(source, data.unlabeled, cfg, source='teacher') if data.unlabeled else []
    stage_data = StageData(labeled=data.labeled, unlabeled=data.unlabeled, pseudo=pseudo)
    if cfg.sampler_source == 'teacher':
        h, w = data.config.scene.height // plan.student_arch.stride, data.config.scene.width // plan.student_arch.stride
        stage_data.teacher_maps_l = [teacher_score_maps(teacher, s, (h, w)) for s in data.labeled]
        stage_data.teacher_maps_u = [teacher_score_maps(teacher, s, (h, w)) for s in data.unlabeled]

    student = init_params(plan.student_arch, rng.child('student_init'))
    result = train_stage(
        'distill', student, stage_plan, plan.stage_steps('distill'), stage_data, rng.child('distill'),
        metrics_path=ctx.metrics_path('distill') if ctx else None,
        eval_scenes=ctx.eval_scenes if ctx else None,
        metrics_every=ctx.metrics_every if ctx else 10, progress=ctx.progress if ctx else False,
    )
    if ctx:
        ctx.record('distill', result)
    frozen = teacher.fingerprint() == before
    if not frozen:
        raise InternalError('teacher parameters changed during distillation')
    return DistillResult(student=result.params, teacher_frozen=frozen)


def refine_student(data: SceneDataset, student: ModelParams, plan: RunPlan, rng: RngStream,
                   ctx: Optional[RunContext] = None) -> Tuple[ModelParams, Dict[str, float]]:
    """Labeled-only fine-tuning; returns the refined student and a before/after loss monitor."""
    if not data.labeled:
        raise ConfigError('student refinement needs a non-empty labeled pool')
    stage_plan = plan.stage_plan('refine')
    steps = plan.stage_steps('refine')
    before = labeled_loss(student, data.labeled, stage_plan.objective)
    if steps == 0:
        return student.copy(), {'loss_before': before, 'loss_after': before}
    result = train_stage(
        'refine', student, stage_plan, steps, StageData(labeled=data.labeled), rng.child('refine'),
        metrics_path=ctx.metrics_path('refine') if ctx else None,
        eval_scenes=ctx.eval_scenes if ctx else None,
        metrics_every=ctx.metrics_every if ctx else 10, progress=ctx.progress if ctx else False,
    )
    if ctx:
        ctx.record('refine', result)
    refined = result.params
    after = labeled_loss(refined, data.labeled, stage_plan.objective)
    if after > before:
        logger.warning(f'Refinement raised the labeled loss from {before:.6f} to {after:.6f}')
    return refined, {'loss_before': before, 'loss_after': after}


# -------------------------------------------------------------------- runs

@dataclass
class RunReport:
    out_dir: str
    seeds: List[Dict[str, Any]]
    aggregate: Dict[str, Any]

    def to_dict(self) -> Dict[str, Any]:
        return {'out_dir': self.out_dir, 'seeds': self.seeds, 'aggregate': self.aggregate}


def write_json(path: Path, payload: Dict[str, Any]) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + '\n')
    return str(path)


def apply_preset(plan: RunPlan, preset: str) -> RunPlan:
    name = PRESET_ALIASES.get(preset, preset)
    if name not in PRESETS:
        raise ConfigError(f'unknown preset {preset!r}; choose from {sorted(PRESETS) + sorted(PRESET_ALIASES)}')
    preset_cfg = PRESETS[name]
    plan = plan.model_copy(update={'stages': list(preset_cfg['stages']), 'name': f'{plan.name}-{name}'})
    if 'distill_objective' in preset_cfg:
        plan = plan.model_copy(update={'distill': _stage_plan(plan, 'distill', **preset_cfg['distill_objective'])})
    return plan


def validate_plan(plan: RunPlan, scene: SceneConfig):
    if 'refine' in plan.stages and 'distill' not in plan.stages and plan.student_checkpoint is None:
        raise ConfigError("stage 'refine' needs a student: add 'distill' or set student_checkpoint")
    if not plan.stages:
        raise ConfigError('plan has no stages')
    for role, arch in (('teacher', plan.teacher_arch), ('student', plan.student_arch)):
        if scene.height % arch.stride or scene.width % arch.stride:
            raise ConfigError(f'scene size {scene.height}x{scene.width} is not divisible by the {role} stride {arch.stride}')
        if arch.num_classes != scene.num_classes:
            raise ConfigError(f'{role} predicts {arch.num_classes} classes, scenes have {scene.num_classes}')
        if arch.num_slots < scene.max_instances:
            raise ConfigError(f'{role} has {arch.num_slots} slots, scenes hold up to {scene.max_instances} instances')


def _run_seed(plan: RunPlan, data: SceneDataset, seed: int, ctx: RunContext) -> Dict[str, Any]:
    rng = RngStream(seed)
    out = ctx.out_dir
    summary: Dict[str, Any] = {'seed': seed, 'stages': list(plan.stages), 'contracts': {}}

    if plan.teacher_checkpoint:
        theta0 = load_checkpoint(plan.teacher_checkpoint, plan.teacher_arch).params
    else:
        theta0 = pretrain_teacher(plan, rng, ctx)
    save_checkpoint(str(out / 'teacher_init.pxcl'), ctx.checkpoint(theta0, ('pretrain',), role='teacher', phase='init'))

    adaptation = AdaptationResult(phase1=theta0, adapted=theta0)
    if 'teacher_finetune' in plan.stages or 'teacher_selftrain' in plan.stages:
        adaptation = adapt_teacher(data, plan, theta0, rng, ctx)
        summary['contracts']['teacher_reinit_matches_init'] = adaptation.reinit_matches_init
    teacher = adaptation.adapted
    teacher_stages = ('teacher_selftrain', 'teacher_finetune', 'pretrain')
    save_checkpoint(str(out / 'teacher.pxcl'), ctx.checkpoint(teacher, teacher_stages, role='teacher', phase='adapted'))

    student: Optional[ModelParams] = None
    if 'distill' in plan.stages:
        pseudo_teacher = adaptation.phase1 if plan.distill_pseudo_source == 'phase1' else teacher
        distilled = distill_student(data, teacher, plan, rng, ctx, pseudo_teacher=pseudo_teacher)
        summary['contracts']['teacher_frozen_during_distill'] = distilled.teacher_frozen
        student = distilled.student
    elif plan.student_checkpoint:
        student = load_checkpoint(plan.student_checkpoint, plan.student_arch).params

    if 'refine' in plan.stages:
        student, monitor = refine_student(data, student, plan, rng, ctx)
        summary['refine_monitor'] = monitor

    summary['teacher_choice'] = {
        'zero_shot': evaluate(theta0, data.eval_scenes),
        'adapted': evaluate(teacher, data.eval_scenes),
        'student_taught_by': 'adapted' if any(s.startswith('teacher_') for s in plan.stages) else 'zero_shot',
    }
    summary['params'] = {'teacher': count_params(teacher), 'student': count_params(plan.student_arch)}
    summary['params']['ratio'] = summary['params']['teacher'] / summary['params']['student']
    if student is not None:
        save_checkpoint(str(out / 'student.pxcl'), ctx.checkpoint(student, ('refine', 'distill'), role='student'))
        summary['student'] = evaluate(student, data.eval_scenes)
    summary['metrics_files'] = sorted(p.name for p in out.glob('metrics_*.csv'))
    summary['final_metrics'] = _final_rows(out)
    return summary


def _final_rows(out: Path) -> Dict[str, Dict[str, Optional[str]]]:
    final = {}
    for path in sorted(out.glob('metrics_*.csv')):
        rows = read_csv(str(path))
        if rows:
            final[path.stem[len('metrics_'):]] = rows[-1]
    return final


def run_plan(plan: RunPlan, out_dir: str, progress: bool = True, dataset: Optional[SceneDataset] = None) -> RunReport:
    """Execute the plan's stages once per seed; writes CSVs, checkpoints and summaries under ``out_dir``."""
    data = dataset
    if data is None:
        data = load_dataset(plan.dataset.path) if plan.dataset.path else build_dataset(plan.dataset)
    validate_plan(plan, data.config.scene)
    root = Path(out_dir)
    config = dump_config(plan)
    fingerprint = data.fingerprint()

    seeds = []
    for seed in plan.seeds:
        ctx = RunContext(out_dir=root / f'seed_{seed}', metrics_every=plan.metrics_every,
                         progress=progress, eval_scenes=data.eval_scenes)
        logger.info(f'Running plan={plan.name} seed={seed} stages={",".join(plan.stages)}')
        summary = _run_seed(plan, data, seed, ctx)
        summary['config'] = config
        summary['dataset_sha256'] = fingerprint
        write_json(ctx.out_dir / 'summary.json', summary)
        seeds.append(summary)

    aggregate = {'config': config, 'dataset_sha256': fingerprint, 'seeds': list(plan.seeds)}
    student_aps = [s['student']['ap'] for s in seeds if 'student' in s]
    if student_aps:
        aggregate['student_ap_mean'] = float(np.mean(student_aps))
        aggregate['student_ap50_mean'] = float(np.mean([s['student']['ap50'] for s in seeds]))
    aggregate['teacher_ap_mean'] = float(np.mean([s['teacher_choice']['adapted']['ap'] for s in seeds]))
    write_json(root / 'report.json', aggregate)
    return RunReport(out_dir=str(root), seeds=seeds, aggregate=aggregate)


# ------------------------------------------------------------------ sweeps

SWEEP_COLUMNS = ['cell', 'lambda_pxl', 'negatives', 'temperature', 'label_fraction',
                 'ap', 'ap50', 'margin', 'fnr', 'dataset_sha256']


def sweep_cells(cfg: SweepConfig) -> List[Dict[str, float]]:
    axes = {k: list(v) for k, v in cfg.axes.items() if v}
    if not axes:
        raise ArgumentError('sweep grid is empty')
    if cfg.mode == 'grid':
        names = sorted(axes)
        return [dict(zip(names, values)) for values in itertools.product(*(axes[n] for n in names))]
    return [{name: value} for name in sorted(axes) for value in axes[name]]


DISTILL_ONLY_OVERRIDES = ('lambda_pxl', 'sampler_source')


def _override_value(name: str, value: Any) -> Any:
    annotation = StageConfig.model_fields[name].annotation
    if annotation is int:
        return int(value)
    if annotation is float:
        return float(value)
    return value


def apply_overrides(plan: RunPlan, overrides: Dict[str, Any]) -> RunPlan:
    """Objective overrides from the CLI or a sweep cell.

    lambda_pxl and sampler_source apply to distillation only; every other
    objective field reaches all stages; label_fraction changes the dataset.
    """
    raw = plan.model_dump()
    for name, value in overrides.items():
        if name == 'label_fraction':
            raw['dataset']['label_fraction'] = float(value)
        elif name in DISTILL_ONLY_OVERRIDES:
            raw['distill']['objective'][name] = _override_value(name, value)
        elif name in StageConfig.model_fields:
            for stage in STAGES:
                raw[stage]['objective'][name] = _override_value(name, value)
        else:
            raise ArgumentError(f'unknown override {name!r}')
    return parse_config(raw, RunPlan)


def _run_cell(args) -> Dict[str, Any]:
    index, plan, out_dir = args
    report = run_plan(plan, out_dir, progress=False)
    margins, fnrs = [], []
    for s in report.seeds:
        row = s['final_metrics'].get('distill') or {}
        if row.get('margin') is not None:
            margins.append(float(row['margin']))
        if row.get('fnr') is not None:
            fnrs.append(float(row['fnr']))
    return {
        'cell': index,
        'ap': report.aggregate.get('student_ap_mean'),
        'ap50': report.aggregate.get('student_ap50_mean'),
        'margin': float(np.mean(margins)) if margins else None,
        'fnr': float(np.mean(fnrs)) if fnrs else None,
        'dataset_sha256': report.aggregate['dataset_sha256'],
    }


def run_sweep(cfg: SweepConfig, out_dir: str, progress: bool = True) -> List[Dict[str, Any]]:
    cells = sweep_cells(cfg)
    root = Path(out_dir)
    jobs = [(i, apply_overrides(cfg.plan, cell), str(root / f'cell_{i:03d}')) for i, cell in enumerate(cells)]
    workers = min(get_env_int('PIXELCL_THREADS', 1), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(tqdm(pool.map(_run_cell, jobs), total=len(jobs), desc='sweep',
                                disable=None if progress else True))
    else:
        results = [_run_cell(job) for job in tqdm(jobs, desc='sweep', disable=None if progress else True)]

    rows = []
    for cell, result in zip(cells, results):
        plan = jobs[result['cell']][1]
        row = {
            'lambda_pxl': plan.distill.objective.lambda_pxl,
            'negatives': plan.distill.objective.negatives,
            'temperature': plan.distill.objective.temperature,
            'label_fraction': plan.dataset.label_fraction,
        }
        row.update(result)
        rows.append(row)
    write_csv(str(root / 'sweep.csv'), SWEEP_COLUMNS, rows)
    write_json(root / 'sweep.json', {'config': dump_config(cfg), 'cells': cells, 'results': rows})
    logger.info(f'Sweep finished: {len(rows)} cells')
    return rows


# -------------------------------------------------------------- evaluation

def evaluate_checkpoint(checkpoint_path: str, dataset_path: str, cfg: StageConfig,
                        samplers: Optional[List[str]] = None, seed: int = 0,
                        teacher_path: Optional[str] = None) -> Dict[str, Any]:
    """AP/AP50 per class and overall, plus sampler FNRs on the evaluation scenes.

    With ``sampler_source='teacher'`` the score maps come from the checkpoint at
    ``teacher_path`` instead of the evaluated model.
    """
    if cfg.sampler_source == 'teacher' and teacher_path is None:
        raise ConfigError('sampler_source=teacher needs a teacher checkpoint to draw score maps from')
    ckpt = load_checkpoint(checkpoint_path)
    data = load_dataset(dataset_path)
    scene = data.config.scene
    arch = ckpt.arch
    if arch.num_classes != scene.num_classes or scene.height % arch.stride or scene.width % arch.stride:
        raise DataError(
            f'checkpoint (classes={arch.num_classes}, stride={arch.stride}) does not fit the dataset '
            f'(classes={scene.num_classes}, {scene.height}x{scene.width})'
        )
    scores = evaluate(ckpt.params, data.eval_scenes)

    rng = RngStream(seed)
    stride = arch.stride
    teacher = load_checkpoint(teacher_path).params if cfg.sampler_source == 'teacher' else None
    if teacher is not None and teacher.arch.num_classes != scene.num_classes:
        raise DataError(f'teacher predicts {teacher.arch.num_classes} classes, dataset has {scene.num_classes}')
    grid = (scene.height // stride, scene.width // stride)
    samples = [SceneSample(scene=s, weak=weak_augment(s, rng.child('weak').child(i), stride),
                           strong=strong_augment(s, rng.child('strong').child(i), stride), targets=s.instances,
                           teacher_maps=teacher_score_maps(teacher, s, grid) if teacher is not None else None)
               for i, s in enumerate(data.eval_scenes)]
    fnrs = {}
    for variant in samplers or ['uniform', 'mask', 'class', 'fusion']:
        variant_cfg = cfg.model_copy(update={'sampler': variant, 'lambda_pxl': 0.0})
        result = unified_objective(ckpt.params, [], samples, variant_cfg, rng=rng.child('sampler'), compute_pxl=True)
        fnrs[variant] = fnr(result.plan, result.instance_ids) if result.plan is not None else None

    return {
        'checkpoint': checkpoint_path,
        'dataset': dataset_path,
        'dataset_sha256': data.fingerprint(),
        'arch': dump_config(arch),
        'objective': dump_config(cfg),
        'ap': scores['ap'],
        'ap50': scores['ap50'],
        'per_class': scores['per_class'],
        'fnr': fnrs,
    }
