"""Configuration documents.

Every document is a pydantic model that rejects unknown keys. JSON files are
loaded through ``load_config`` so validation problems surface as
``ConfigError`` with the offending fields listed.
"""
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Type, TypeVar

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

M = TypeVar('M', bound=BaseModel)

STAGES = ('teacher_finetune', 'teacher_selftrain', 'distill', 'refine')

# Iteration schedule of the full-scale recipe; desk runs divide it by step_divisor.
FULL_SCALE_SCHEDULE = {'teacher_finetune': 1000, 'teacher_selftrain': 5000, 'distill': 90000, 'refine': 2000}


def get_env_var(name: str, default: Optional[str] = None) -> str:
    value = os.environ.get(name)
    if value is None or value == '':
        if default is None:
            raise ConfigError(f'{name} environment variable is required to be set')
        return default
    return value


def get_env_int(name: str, default: int) -> int:
    value = os.environ.get(name)
    if value is None or value == '':
        return default
    try:
        parsed = int(value)
    except ValueError:
        raise ConfigError(f'{name} must be an integer, got {value!r}')
    if parsed < 1:
        raise ConfigError(f'{name} must be >= 1, got {parsed}')
    return parsed


class StrictModel(BaseModel):
    model_config = ConfigDict(extra='forbid', populate_by_name=True, frozen=True)


class SceneConfig(StrictModel):
    height: int = Field(64, ge=16)
    width: int = Field(64, ge=16)
    min_instances: int = Field(2, ge=0)
    max_instances: int = Field(6, ge=0)
    num_classes: int = Field(4, ge=1)
    min_size: int = Field(8, ge=2)
    max_size: int = Field(20, ge=2)
    shapes: List[Literal['rectangle', 'ellipse', 'triangle']] = ['rectangle', 'ellipse', 'triangle']
    shared_class_prob: float = Field(0.6, ge=0.0, le=1.0)
    gap: int = Field(1, ge=0)
    noise: float = Field(0.04, ge=0.0)
    palette_shift: float = Field(0.0, ge=0.0, le=1.0)
    max_retries: int = Field(200, ge=1)

    @model_validator(mode='after')
    def _check_ranges(self):
        if self.min_instances > self.max_instances:
            raise ValueError('min_instances must not exceed max_instances')
        if self.min_size > self.max_size:
            raise ValueError('min_size must not exceed max_size')
        if self.min_size > min(self.height, self.width):
            raise ValueError('min_size must fit inside the scene')
        return self


class ArchConfig(StrictModel):
    feature_dim: int = Field(8, ge=1)
    depth: int = Field(2, ge=0)
    stride: int = Field(4, ge=1)
    proj_dim: int = Field(16, ge=1)
    num_slots: int = Field(8, ge=1)
    num_classes: int = Field(4, ge=1)


TEACHER_ARCH = ArchConfig(feature_dim=24, depth=3)
STUDENT_ARCH = ArchConfig(feature_dim=8, depth=2)


class StageConfig(StrictModel):
    """Scalar knobs of the unified objective."""

    lambda_semi: float = Field(1.0, ge=0.0)
    lambda_pxl: float = Field(0.2, ge=0.0)
    temperature: float = Field(0.2, gt=0.0, alias='T')
    negatives: int = Field(256, ge=1, alias='R')
    pseudo_threshold: float = Field(0.3, gt=0.0, lt=1.0)
    w_mask: float = Field(5.0, ge=0.0)
    w_class: float = Field(2.0, ge=0.0)
    sampler: Literal['uniform', 'mask', 'class', 'fusion'] = 'fusion'
    debias_exponent: Literal['linear', 'squared', 'sqrt'] = 'linear'
    scope: Literal['batch', 'bank'] = 'batch'
    bank_capacity: int = Field(10000, ge=1)
    loss: Literal['ntxent', 'hinge'] = 'ntxent'
    margin: float = Field(0.2, ge=0.0)
    sampler_source: Literal['self', 'teacher'] = 'self'
    foreground_anchors: bool = False
    max_anchors: Optional[int] = Field(None, ge=1)


class OptimConfig(StrictModel):
    name: Literal['sgd', 'adamw'] = 'sgd'
    lr: float = Field(0.05, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    betas: List[float] = [0.9, 0.999]
    eps: float = Field(1e-8, gt=0.0)
    weight_decay: float = Field(0.0, ge=0.0)
    grad_clip: Optional[float] = Field(None, gt=0.0)
    schedule: Literal['constant', 'multistep', 'poly'] = 'constant'
    milestones: List[float] = [0.9, 0.95]
    gamma: float = Field(0.1, gt=0.0)
    power: float = Field(0.9, gt=0.0)


class StagePlan(StrictModel):
    steps: Optional[int] = Field(None, ge=0)
    batch_labeled: int = Field(2, ge=0)
    batch_unlabeled: int = Field(2, ge=0)
    objective: StageConfig = StageConfig()
    optim: OptimConfig = OptimConfig()


def _desk_objective(**objective: Any) -> StageConfig:
    objective.setdefault('negatives', 64)
    objective.setdefault('max_anchors', 256)
    return StageConfig(**objective)


def _teacher_stage(**objective: Any) -> StagePlan:
    return StagePlan(
        batch_labeled=2, batch_unlabeled=2,
        objective=_desk_objective(**objective),
        optim=OptimConfig(weight_decay=0.01, schedule='multistep'),
    )


def _student_stage(**objective: Any) -> StagePlan:
    return StagePlan(
        batch_labeled=4, batch_unlabeled=4,
        objective=_desk_objective(**objective),
        optim=OptimConfig(weight_decay=0.05, grad_clip=1.0, schedule='poly'),
    )


class DatasetRef(StrictModel):
    path: Optional[str] = None
    scene: SceneConfig = SceneConfig()
    n_scenes: int = Field(200, ge=1)
    label_fraction: float = Field(0.1, gt=0.0, le=1.0)
    n_eval: int = Field(40, ge=1)
    seed: int = 0


class PretrainPlan(StrictModel):
    """Source-domain training that produces the zero-shot teacher θ_T^0."""

    steps: int = Field(60, ge=0)
    n_scenes: int = Field(60, ge=1)
    palette_shift: float = Field(0.35, ge=0.0, le=1.0)
    batch: int = Field(4, ge=1)
    optim: OptimConfig = OptimConfig()


class RunPlan(StrictModel):
    name: str = 'run'
    stages: List[Literal['teacher_finetune', 'teacher_selftrain', 'distill', 'refine']] = list(STAGES)
    seeds: List[int] = [0]
    dataset: DatasetRef = DatasetRef()
    teacher_arch: ArchConfig = TEACHER_ARCH
    student_arch: ArchConfig = STUDENT_ARCH
    pretrain: PretrainPlan = PretrainPlan()
    step_divisor: int = Field(50, ge=1)
    teacher_variant: Literal['finetune', 'selftrain', 'selftrain_contrastive'] = 'selftrain_contrastive'
    distill_pseudo_source: Literal['adapted', 'phase1'] = 'adapted'
    teacher_checkpoint: Optional[str] = None
    student_checkpoint: Optional[str] = None
    teacher_finetune: StagePlan = _teacher_stage(lambda_semi=0.0)
    teacher_selftrain: StagePlan = _teacher_stage(lambda_semi=1.0)
    distill: StagePlan = _student_stage()
    refine: StagePlan = _student_stage(lambda_semi=0.0, lambda_pxl=0.0)
    metrics_every: int = Field(10, ge=1)

    @field_validator('stages')
    @classmethod
    def _ordered(cls, stages: List[str]) -> List[str]:
        if len(set(stages)) != len(stages):
            raise ValueError('stages must not repeat')
        order = [STAGES.index(s) for s in stages]
        if order != sorted(order):
            raise ValueError(f'stages must follow the order {list(STAGES)}')
        return stages

    @field_validator('seeds')
    @classmethod
    def _nonempty_seeds(cls, seeds: List[int]) -> List[int]:
        if not seeds:
            raise ValueError('at least one seed is required')
        return seeds

    @model_validator(mode='after')
    def _teacher_sampling_in_distill(self):
        # only distillation has a frozen teacher to draw score maps from
        others = [s for s in STAGES if s != 'distill' and self.stage_plan(s).objective.sampler_source == 'teacher']
        if others:
            raise ValueError(f'sampler_source=teacher is only valid for distill, not {others}')
        return self

    def stage_plan(self, stage: str) -> StagePlan:
        return getattr(self, stage)

    def stage_steps(self, stage: str) -> int:
        """Explicit step count, else the full-scale schedule divided by ``step_divisor``."""
        explicit = self.stage_plan(stage).steps
        if explicit is not None:
            return explicit
        if stage == 'refine':
            return max(1, self.stage_steps('distill') // 10)
        return max(1, FULL_SCALE_SCHEDULE[stage] // self.step_divisor)


class LabConfig(StrictModel):
    D: int = Field(64, ge=1)
    R: int = Field(16, ge=1)
    p_grid: List[float] = [0.5, 0.6, 0.75, 0.9, 1.0]
    lambda_grid: List[float] = [0.01, 0.05, 0.1, 0.2]
    T: float = Field(1.0, gt=0.0)
    trials: int = Field(10000, ge=1)
    intra_similarity: float = Field(1.0, ge=-1.0, le=1.0)
    dims: Optional[List[int]] = None
    seed: int = 0

    @field_validator('p_grid')
    @classmethod
    def _probabilities(cls, values: List[float]) -> List[float]:
        if not values or any(not 0.0 <= v <= 1.0 for v in values):
            raise ValueError('p values must lie in [0, 1]')
        return values

    @field_validator('lambda_grid')
    @classmethod
    def _step_sizes(cls, values: List[float]) -> List[float]:
        if not values or any(v < 0.0 for v in values):
            raise ValueError('step sizes must be >= 0')
        return values


class SweepConfig(StrictModel):
    plan: RunPlan = RunPlan()
    mode: Literal['one_at_a_time', 'grid'] = 'one_at_a_time'
    axes: Dict[Literal['lambda_pxl', 'negatives', 'temperature', 'label_fraction'], List[float]] = {
        'lambda_pxl': [0.0, 0.01, 0.1, 0.2, 0.5],
        'negatives': [128, 256, 512],
        'temperature': [0.1, 0.2, 0.4],
    }


def load_config(path: str, model: Type[M]) -> M:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f'config file not found: {path}')
    except json.JSONDecodeError as e:
        raise ConfigError(f'invalid JSON in {path}: {str(e)}')
    return parse_config(raw, model, source=path)


def parse_config(raw: Dict[str, Any], model: Type[M], source: str = '<inline>') -> M:
    try:
        return model.model_validate(raw)
    except ValidationError as e:
        problems = '; '.join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        raise ConfigError(f'invalid {model.__name__} in {source}: {problems}')


def dump_config(config: BaseModel) -> Dict[str, Any]:
    """Resolved config as embedded in every output artifact."""
    return config.model_dump(mode='json', by_alias=True)
