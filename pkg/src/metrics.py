"""Measurement instruments: false negative rate, empirical margin and mask AP."""
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .contrastive import SimilaritySet
from .errors import ArgumentError
from .sampler import SamplingPlan
from .synth import Instance

IOU_THRESHOLDS = np.linspace(0.5, 0.95, int(np.round((0.95 - 0.5) / 0.05)) + 1, endpoint=True)
RECALL_THRESHOLDS = np.linspace(0.0, 1.0, 101, endpoint=True)


def fnr(plan: SamplingPlan, instance_keys: np.ndarray) -> float:
    """Fraction of sampled negatives that share the anchor's instance.

    ``instance_keys`` is [B, N] and must tell instances of different scenes
    apart (see ``SyntheticScene.cell_instance_keys``); background is 0 and
    counts as one shared region. For bank scope the plan carries the keys of
    the stored rows.
    """
    if plan.num_anchors == 0 or plan.negatives.shape[1] == 0:
        raise ArgumentError('cannot compute FNR of an empty sampling plan')
    ids = np.asarray(instance_keys)
    anchor_ids = ids[plan.anchors[:, 0], plan.anchors[:, 1]]
    if plan.scope == 'bank':
        negative_ids = plan.negative_ids
    else:
        negative_ids = ids[plan.negatives[..., 0], plan.negatives[..., 1]]
    return float(np.mean(negative_ids == anchor_ids[:, None]))


def empirical_margin(sims: Union[SimilaritySet, Iterable[SimilaritySet]]) -> Tuple[float, float, float]:
    """(pos_mean, neg_mean, pos_mean - neg_mean) over raw cosines."""
    sets = [sims] if isinstance(sims, SimilaritySet) else list(sims)
    pos = np.concatenate([s.pos_cosines.reshape(-1) for s in sets]) if sets else np.zeros(0)
    neg = np.concatenate([s.neg_cosines.reshape(-1) for s in sets]) if sets else np.zeros(0)
    if pos.size == 0:
        raise ArgumentError('empirical margin needs at least one anchor')
    pos_mean = float(pos.mean())
    neg_mean = float(neg.mean()) if neg.size else 0.0
    return pos_mean, neg_mean, pos_mean - neg_mean


def mask_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(pred, gt).sum() / union)


def _class_ap(preds: List[List[Instance]], gts: List[List[Instance]], class_id: int, threshold: float) -> Optional[float]:
    n_gt = sum(1 for image in gts for inst in image if inst.class_id == class_id)
    if n_gt == 0:
        return None
    entries = [
        (-inst.score, img, slot, inst)
        for img, image in enumerate(preds)
        for slot, inst in enumerate(image)
        if inst.class_id == class_id
    ]
    if not entries:
        return 0.0
    # ties broken by image then slot index
    entries.sort(key=lambda e: (e[0], e[1], e[2]))

    taken = [np.zeros(len(image), dtype=bool) for image in gts]
    tp = np.zeros(len(entries))
    for i, (_, img, _, inst) in enumerate(entries):
        best, best_iou = -1, threshold
        for j, gt in enumerate(gts[img]):
            if gt.class_id != class_id or taken[img][j]:
                continue
            iou = mask_iou(inst.mask, gt.mask)
            if iou >= best_iou:
                best, best_iou = j, iou
        if best >= 0:
            taken[img][best] = True
            tp[i] = 1.0

    cum_tp = np.cumsum(tp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.arange(1, len(entries) + 1)
    # precision envelope, non-increasing in recall
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_THRESHOLDS, side='left')
    sampled = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(sampled.mean())


def mask_ap(preds: List[List[Instance]], gts: List[List[Instance]],
            iou_thresholds: Sequence[float] = IOU_THRESHOLDS) -> Dict[str, object]:
    """COCO-style mask AP averaged over IoU thresholds and classes, plus AP50.

    Each prediction needs ``mask``, ``class_id`` and ``score``. Classes without
    ground truth are left out of the average.
    """
    if len(preds) != len(gts):
        raise ArgumentError(f'{len(preds)} prediction lists for {len(gts)} images')
    classes = sorted({inst.class_id for image in gts for inst in image})
    per_class: Dict[str, Dict[str, float]] = {}
    for c in classes:
        aps = [_class_ap(preds, gts, c, float(t)) for t in iou_thresholds]
        per_class[str(c)] = {'ap': float(np.mean(aps)), 'ap50': float(_class_ap(preds, gts, c, 0.5))}
    if not per_class:
        return {'ap': 0.0, 'ap50': 0.0, 'per_class': {}}
    return {
        'ap': float(np.mean([v['ap'] for v in per_class.values()])),
        'ap50': float(np.mean([v['ap50'] for v in per_class.values()])),
        'per_class': per_class,
    }
