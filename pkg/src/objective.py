"""Unified training objective.

J = L_sup(labeled) + lambda_semi * L_semi(unlabeled, pseudo-labels)
    + lambda_pxl * L_pxl(labeled + unlabeled)

All terms are evaluated on the source feature grid: each view's outputs are
gathered back onto the (H/stride, W/stride) grid of the scene it came from,
so ground truth, pseudo-labels and contrastive positives line up cell by cell.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

from .config import StageConfig
from .contrastive import PixelEmbeddings, SimilaritySet, pixel_contrastive_loss
from .errors import ArgumentError, ConfigError
from .model import ModelOutput, ModelParams, attach, forward
from .numcore import RngStream, Tape, Var, bilinear_resize, softmax, value_of
from .numcore import ops
from .sampler import MemoryBank, SamplingPlan, ScoreMaps, joint_embedding, plan_negatives, select_anchors
from .synth import AugmentedView, Instance, SyntheticScene, instance_targets

logger = logging.getLogger(__name__)

Tensor = Union[np.ndarray, Var]

BACKGROUND = 0
_EPS = 1e-12


@dataclass
class PseudoLabel:
    instances: List[Instance]
    source: str = 'teacher'


@dataclass
class SceneSample:
    """One scene prepared for a training step."""

    scene: SyntheticScene
    weak: AugmentedView
    strong: AugmentedView
    targets: List[Instance]
    teacher_maps: Optional[ScoreMaps] = None


@dataclass
class GridOutput:
    """Model output gathered onto the source feature grid."""

    z: Tensor
    mask_logits: Tensor
    class_logits: Tensor


@dataclass
class ObjectiveResult:
    total: Tensor
    terms: Dict[str, float]
    plan: Optional[SamplingPlan] = None
    similarities: Optional[SimilaritySet] = None
    instance_ids: Optional[np.ndarray] = None
    bank_rows: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default=None, repr=False)


def to_grid(out: ModelOutput, index: np.ndarray) -> GridOutput:
    """Gather a view's per-cell outputs at the flat view indices of the source grid."""
    k = value_of(out.mask_logits).shape[0]
    per_cell = ops.transpose(ops.reshape(out.mask_logits, (k, -1)))
    return GridOutput(
        z=ops.take(out.z, index),
        mask_logits=ops.take(per_cell, index),
        class_logits=out.class_logits,
    )


# ------------------------------------------------------------------ matching

def soft_dice(probs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Pairwise soft Dice coefficients, probs [K, N] x targets [G, N] -> [K, G]."""
    inter = probs @ targets.T
    return (2.0 * inter + 1.0) / (probs.sum(axis=1)[:, None] + targets.sum(axis=1)[None, :] + 1.0)


def match_cost(mask_probs: np.ndarray, class_probs: np.ndarray, targets: np.ndarray, classes: np.ndarray,
               w_mask: float, w_class: float) -> np.ndarray:
    dice = soft_dice(mask_probs, targets)
    p_class = class_probs[:, np.asarray(classes, dtype=np.int64)]
    return w_mask * (1.0 - dice) + w_class * (1.0 - p_class)


def solve_assignment(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost slot -> target assignment; unmatched slots get -1."""
    cost = np.asarray(cost, dtype=np.float64)
    k, g = cost.shape
    if g > k:
        raise ConfigError(f'{g} instances cannot be matched to {k} slots; raise num_slots')
    assignment = np.full(k, -1, dtype=np.int64)
    if g == 0:
        return assignment
    rows, cols = linear_sum_assignment(cost)
    assignment[rows] = cols
    return assignment


def hungarian_match(mask_probs: np.ndarray, class_probs: np.ndarray, targets: np.ndarray, classes: np.ndarray,
                    cfg: StageConfig) -> np.ndarray:
    return solve_assignment(match_cost(mask_probs, class_probs, targets, classes, cfg.w_mask, cfg.w_class))


# ------------------------------------------------------------------- losses

def supervised_loss(out: GridOutput, targets: np.ndarray, classes: np.ndarray,
                    cfg: StageConfig) -> Tuple[Tensor, Tensor, Tensor]:
    """Matched mask (BCE + Dice) and class (CE) loss averaged over slots.

    ``targets`` is [G, N] on the feature grid, ``classes`` the G class ids.
    Returns ``(total, mask_term, class_term)``.
    """
    probs = ops.transpose(ops.softmax(out.mask_logits, axis=1))
    log_cls = ops.log_softmax(out.class_logits, axis=-1)
    k, c1 = value_of(log_cls).shape
    n_cells = value_of(out.mask_logits).shape[0]
    targets = np.asarray(targets, dtype=np.float64).reshape(len(classes), n_cells)
    classes = np.asarray(classes, dtype=np.int64)

    assignment = hungarian_match(value_of(probs), np.exp(value_of(log_cls)), targets, classes, cfg)
    matched = np.flatnonzero(assignment >= 0)

    class_target = np.zeros((k, c1))
    class_target[np.arange(k), BACKGROUND] = 1.0
    if matched.size:
        class_target[matched, BACKGROUND] = 0.0
        class_target[matched, classes[assignment[matched]]] = 1.0
    ce = ops.mul(ops.sum(ops.mul(log_cls, class_target)), -1.0)
    class_term = ops.mul(ce, cfg.w_class / k)

    if matched.size == 0:
        mask_term = ops.mul(ops.sum(ops.mul(probs, 0.0)), 0.0)
    else:
        p = ops.take(probs, matched)
        t = targets[assignment[matched]]
        n = t.shape[1]
        bce = ops.mul(ops.add(ops.mul(ops.log(ops.add(p, _EPS)), t),
                              ops.mul(ops.log(ops.add(ops.sub(1.0, p), _EPS)), 1.0 - t)), -1.0 / n)
        bce = ops.sum(bce, axis=1)
        inter = ops.sum(ops.mul(p, t), axis=1)
        denom = ops.add(ops.sum(p, axis=1), t.sum(axis=1) + 1.0)
        dice_loss = ops.sub(1.0, ops.div(ops.add(ops.mul(inter, 2.0), 1.0), denom))
        mask_term = ops.mul(ops.sum(ops.add(bce, dice_loss)), cfg.w_mask / (2.0 * k))
    return ops.add(mask_term, class_term), mask_term, class_term


def decode_instances(out: ModelOutput, image_shape: Tuple[int, int], min_score: float) -> List[Instance]:
    """Non-background slots scoring at least ``min_score``, masks binarised at 0.5 at image resolution.

    A slot's score is its highest foreground class probability.
    """
    class_probs = softmax(value_of(out.class_logits), axis=-1)
    mask_probs = softmax(value_of(out.mask_logits), axis=0)
    upsampled = bilinear_resize(mask_probs, *image_shape)
    instances = []
    for k in range(class_probs.shape[0]):
        if int(np.argmax(class_probs[k])) == BACKGROUND:
            continue
        confidence = float(class_probs[k, 1:].max())
        if confidence < min_score:
            continue
        mask = upsampled[k] > 0.5
        if not mask.any():
            continue
        instances.append(Instance(mask=mask, class_id=int(np.argmax(class_probs[k, 1:])) + 1, score=confidence))
    return instances


def generate_pseudo_labels(teacher_out: ModelOutput, cfg: StageConfig, image_shape: Tuple[int, int],
                           source: str = 'teacher') -> PseudoLabel:
    return PseudoLabel(instances=decode_instances(teacher_out, image_shape, cfg.pseudo_threshold), source=source)


def teacher_score_maps(teacher: ModelParams, scene: SyntheticScene, grid: Tuple[int, int]) -> ScoreMaps:
    """Frozen-teacher score maps of the source image, resized to ``grid``."""
    out = forward(teacher, scene.image)
    mask_probs = softmax(value_of(out.mask_logits), axis=0)
    if mask_probs.shape[1:] != grid:
        mask_probs = bilinear_resize(mask_probs, *grid)
        mask_probs = mask_probs / mask_probs.sum(axis=0, keepdims=True)
    k = mask_probs.shape[0]
    return ScoreMaps(mask_probs=mask_probs.reshape(1, k, -1),
                     class_probs=softmax(value_of(out.class_logits), axis=-1)[None])


# ---------------------------------------------------------------- objective

def _run_sample(params: ModelParams, sample: SceneSample, weights, with_strong: bool):
    stride = params.arch.stride
    weak_index, _ = sample.weak.feature_index(stride)
    weak = to_grid(forward(params, sample.weak.image, weights=weights), weak_index)
    if not with_strong:
        return weak, None, None
    strong_index, strong_valid = sample.strong.feature_index(stride)
    strong = to_grid(forward(params, sample.strong.image, weights=weights), strong_index)
    return weak, strong, strong_valid


def _mean(terms: List[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    return ops.mul(total, 1.0 / len(terms))


def _targets(sample: SceneSample, stride: int) -> Tuple[np.ndarray, np.ndarray]:
    targets = instance_targets(sample.targets, sample.scene.shape, stride)
    classes = np.array([inst.class_id for inst in sample.targets], dtype=np.int64)
    return targets.reshape(len(sample.targets), targets.shape[1] * targets.shape[2]), classes


def unified_objective(
    params: ModelParams,
    batch_l: List[SceneSample],
    batch_u: List[SceneSample],
    cfg: StageConfig,
    tape: Optional[Tape] = None,
    rng: Optional[RngStream] = None,
    bank: Optional[MemoryBank] = None,
    compute_pxl: bool = False,
) -> ObjectiveResult:
    """Evaluate J on one labeled and one unlabeled mini-batch.

    With a recording tape the parameters are attached once and the returned
    total is a tape value ready for ``tape.backward``. L_pxl is evaluated when
    ``lambda_pxl > 0`` or ``compute_pxl`` is set; its sampler draws from ``rng``.
    """
    if not batch_l and not batch_u:
        raise ArgumentError('both the labeled and the unlabeled batch are empty')
    weights = attach(params, tape) if tape is not None and tape.record_ops else None
    stride = params.arch.stride
    need_pxl = cfg.lambda_pxl > 0.0 or compute_pxl
    if need_pxl and rng is None:
        raise ArgumentError('the contrastive term needs a sampler stream')

    samples = list(batch_l) + list(batch_u)
    runs = [_run_sample(params, s, weights, need_pxl) for s in samples]

    terms: Dict[str, float] = {}
    sup_parts, mask_parts, class_parts = [], [], []
    for sample, (weak, _, _) in zip(batch_l, runs[:len(batch_l)]):
        total, mask_term, class_term = supervised_loss(weak, *_targets(sample, stride), cfg)
        sup_parts.append(total)
        mask_parts.append(mask_term)
        class_parts.append(class_term)
    zero = ops.mul(ops.sum(runs[0][0].class_logits), 0.0)
    l_sup = _mean(sup_parts) if sup_parts else zero
    terms['loss_sup'] = float(value_of(l_sup))
    terms['loss_sup_mask'] = float(value_of(_mean(mask_parts))) if mask_parts else 0.0
    terms['loss_sup_class'] = float(value_of(_mean(class_parts))) if class_parts else 0.0

    semi_parts = []
    for sample, (weak, _, _) in zip(batch_u, runs[len(batch_l):]):
        if not sample.targets:
            continue
        semi_parts.append(supervised_loss(weak, *_targets(sample, stride), cfg)[0])
    l_semi = _mean(semi_parts) if semi_parts else zero
    terms['loss_semi'] = float(value_of(l_semi))

    total = l_sup
    if cfg.lambda_semi > 0.0 and semi_parts:
        total = ops.add(total, ops.mul(l_semi, cfg.lambda_semi))

    result = ObjectiveResult(total=total, terms=terms)
    if need_pxl:
        l_pxl = _contrastive_term(samples, runs, cfg, rng, bank, stride, result)
        terms['loss_pxl'] = float(value_of(l_pxl))
        if cfg.lambda_pxl > 0.0:
            result.total = ops.add(result.total, ops.mul(l_pxl, cfg.lambda_pxl))
    terms['loss_total'] = float(value_of(result.total))
    return result


def _contrastive_term(samples, runs, cfg: StageConfig, rng: RngStream, bank: Optional[MemoryBank], stride: int,
                      result: ObjectiveResult) -> Tensor:
    b = len(samples)
    n, d = value_of(runs[0][0].z).shape
    z_weak = ops.concat([ops.reshape(weak.z, (1, n, d)) for weak, _, _ in runs], axis=0)
    z_strong = ops.concat([ops.reshape(strong.z, (1, n, d)) for _, strong, _ in runs], axis=0)
    valid = np.stack([v for _, _, v in runs])

    if cfg.sampler_source == 'teacher':
        if any(s.teacher_maps is None for s in samples):
            raise ConfigError('sampler_source=teacher needs teacher score maps on every sample')
        maps = ScoreMaps(
            mask_probs=np.concatenate([s.teacher_maps.mask_probs for s in samples]),
            class_probs=np.concatenate([s.teacher_maps.class_probs for s in samples]),
        )
    else:
        maps = ScoreMaps.from_logits(
            np.stack([np.transpose(value_of(weak.mask_logits)) for weak, _, _ in runs]),
            np.stack([value_of(weak.class_logits) for weak, _, _ in runs]),
        )
    je = joint_embedding(maps)

    anchor_mask = valid.copy()
    if cfg.foreground_anchors:
        foreground = np.argmax(je.y[..., je.num_slots:], axis=-1) != BACKGROUND
        if np.any(anchor_mask & foreground):
            anchor_mask &= foreground
    if valid.sum() < 2:
        logger.info('Fewer than two valid locations in the batch, skipping the contrastive term')
        return ops.mul(ops.sum(z_weak), 0.0)

    anchors = select_anchors(anchor_mask, cfg.max_anchors, rng.child('anchors'))
    plan = plan_negatives(
        je, anchors, valid, cfg.negatives, rng.child('negatives'),
        variant=cfg.sampler, exponent=cfg.debias_exponent,
        bank=bank if cfg.scope == 'bank' else None,
    )
    pe = PixelEmbeddings(z_weak=z_weak, z_strong=z_strong, valid=valid)
    loss, sims = pixel_contrastive_loss(pe, plan, cfg.temperature, cfg.loss, cfg.margin)

    ids = np.stack([s.scene.cell_instance_keys(stride) for s in samples])
    result.plan = plan
    result.similarities = sims
    result.instance_ids = ids
    strong_rows = value_of(z_strong)[valid]
    result.bank_rows = (strong_rows.copy(), je.y_normalized[valid].copy(), ids[valid].copy())
    return loss
