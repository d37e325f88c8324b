"""Debiased negative sampling for pixel-wise contrastive learning.

Mask probabilities over the K slots and the expected class distribution of
each pixel are concatenated into a joint pseudo-probability embedding. Two
pixels whose normalised joint embeddings point the same way most likely
belong to the same instance, so negatives are drawn in proportion to
``max(0, 1 - <y_a, y_q>)``.
"""
import logging
from dataclasses import dataclass, field
from typing import Literal, Optional, Tuple

import numpy as np

from .errors import ArgumentError
from .numcore import RngStream, l2_normalize, softmax

logger = logging.getLogger(__name__)

Variant = Literal['uniform', 'mask', 'class', 'fusion']
Exponent = Literal['linear', 'squared', 'sqrt']

# accepted spellings of the variant names
_VARIANT_ALIASES = {'mask_only': 'mask', 'class_only': 'class'}


@dataclass
class ScoreMaps:
    """Per-pixel slot probabilities [B, K, N] and per-slot class probabilities [B, K, C+1]."""

    mask_probs: np.ndarray
    class_probs: np.ndarray

    @classmethod
    def from_logits(cls, mask_logits: np.ndarray, class_logits: np.ndarray) -> 'ScoreMaps':
        b, k = mask_logits.shape[:2]
        return cls(
            mask_probs=softmax(np.asarray(mask_logits).reshape(b, k, -1), axis=1),
            class_probs=softmax(np.asarray(class_logits), axis=-1),
        )

    @property
    def num_slots(self) -> int:
        return self.mask_probs.shape[1]


@dataclass
class JointEmbedding:
    y: np.ndarray
    y_normalized: np.ndarray
    num_slots: int

    def rows(self, variant: str) -> np.ndarray:
        """Unit rows [B, N, d] of the block a sampler variant scores with."""
        variant = _VARIANT_ALIASES.get(variant, variant)
        if variant == 'fusion':
            return self.y_normalized
        if variant == 'mask':
            return l2_normalize(self.y[..., :self.num_slots], axis=-1)
        if variant == 'class':
            return l2_normalize(self.y[..., self.num_slots:], axis=-1)
        if variant == 'uniform':
            return self.y_normalized
        raise ArgumentError(f'unknown sampler variant {variant!r}')


@dataclass
class SamplingPlan:
    """Anchors as (b, p) and, per anchor, R drawn negatives.

    For batch scope ``negatives[a, r]`` is a (b', q) location; for bank scope it
    is (-1, bank slot) and ``negative_ids`` carries the stored instance ids.
    """

    anchors: np.ndarray
    negatives: np.ndarray
    probabilities: np.ndarray
    variant: str
    exponent: str
    scope: str = 'batch'
    negative_ids: Optional[np.ndarray] = None
    bank_z: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def num_anchors(self) -> int:
        return int(self.anchors.shape[0])


def expected_class_distribution(sm: ScoreMaps) -> np.ndarray:
    """F_c[b, p, c] = sum_k P_m[b, k, p] * P_c[b, k, c]."""
    return np.einsum('bkn,bkc->bnc', sm.mask_probs, sm.class_probs)


def joint_embedding(sm: ScoreMaps, class_dist: Optional[np.ndarray] = None) -> JointEmbedding:
    if class_dist is None:
        class_dist = expected_class_distribution(sm)
    y = np.concatenate([np.transpose(sm.mask_probs, (0, 2, 1)), class_dist], axis=-1)
    return JointEmbedding(y=y, y_normalized=l2_normalize(y, axis=-1), num_slots=sm.num_slots)


def debias_score(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """max(0, 1 - <a, b>) along the last axis; in [0, 2] for unit rows."""
    return np.maximum(0.0, 1.0 - np.sum(np.asarray(a) * np.asarray(b), axis=-1))


def _apply_exponent(scores: np.ndarray, exponent: str) -> np.ndarray:
    if exponent == 'linear':
        return scores
    if exponent == 'squared':
        return scores * scores
    if exponent == 'sqrt':
        return np.sqrt(scores)
    raise ArgumentError(f'unknown debias exponent {exponent!r}')


def score_distribution(anchor_row: np.ndarray, pool_rows: np.ndarray, variant: str, exponent: str) -> np.ndarray:
    """Sampling probabilities over ``pool_rows`` for one anchor."""
    m = pool_rows.shape[0]
    if m == 0:
        raise ArgumentError('empty candidate pool')
    if _VARIANT_ALIASES.get(variant, variant) == 'uniform':
        return np.full(m, 1.0 / m)
    weights = _apply_exponent(debias_score(anchor_row[None, :], pool_rows), exponent)
    total = weights.sum()
    if total <= 0.0:
        return np.full(m, 1.0 / m)
    return weights / total


def build_sampling_distribution(
    anchor: Tuple[int, int],
    je: JointEmbedding,
    variant: str,
    exponent: str,
    valid: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Distribution over every valid batch location except the anchor.

    Returns ``(probabilities, flat_pool_index)`` where the flat index is b * N + q.
    """
    rows = je.rows(variant)
    b, n = rows.shape[:2]
    flat = rows.reshape(b * n, -1)
    mask = np.ones(b * n, dtype=bool) if valid is None else np.asarray(valid, dtype=bool).reshape(-1).copy()
    mask[anchor[0] * n + anchor[1]] = False
    pool = np.flatnonzero(mask)
    return score_distribution(flat[anchor[0] * n + anchor[1]], flat[pool], variant, exponent), pool


def sample_negatives(dist: np.ndarray, R: int, rng: RngStream) -> np.ndarray:
    """R i.i.d. draws with replacement from ``dist`` via a cumulative table."""
    if R < 1:
        raise ArgumentError(f'R must be >= 1, got {R}')
    cdf = np.cumsum(dist)
    cdf = cdf / cdf[-1]
    return np.searchsorted(cdf, rng.random(R), side='right').astype(np.int64)


class MemoryBank:
    """Fixed-capacity FIFO of past strong-view embeddings and their joint rows.

    Entries are frozen when pushed.
    """

    def __init__(self, capacity: int = 10000):
        if capacity < 1:
            raise ArgumentError(f'bank capacity must be >= 1, got {capacity}')
        self.capacity = capacity
        self._z: Optional[np.ndarray] = None
        self._y: Optional[np.ndarray] = None
        self._ids = np.zeros(capacity, dtype=np.int64)
        self._ptr = 0
        self._size = 0
        self.num_slots: Optional[int] = None

    def __len__(self) -> int:
        return self._size

    def push(self, z_rows: np.ndarray, y_rows: np.ndarray, instance_ids: Optional[np.ndarray] = None,
             num_slots: Optional[int] = None):
        z_rows = np.atleast_2d(np.asarray(z_rows, dtype=np.float64))
        y_rows = np.atleast_2d(np.asarray(y_rows, dtype=np.float64))
        if instance_ids is None:
            instance_ids = np.full(z_rows.shape[0], -1, dtype=np.int64)
        if self._z is None:
            self._z = np.zeros((self.capacity, z_rows.shape[1]))
            self._y = np.zeros((self.capacity, y_rows.shape[1]))
        if num_slots is not None:
            self.num_slots = num_slots
        for z, y, i in zip(z_rows, y_rows, np.asarray(instance_ids)):
            self._z[self._ptr] = z
            self._y[self._ptr] = y
            self._ids[self._ptr] = i
            self._ptr = (self._ptr + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)

    def _order(self) -> np.ndarray:
        """Slot indices from oldest to newest."""
        if self._size < self.capacity:
            return np.arange(self._size)
        return (np.arange(self.capacity) + self._ptr) % self.capacity

    def entries(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        order = self._order()
        if self._z is None:
            return np.zeros((0, 0)), np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        return self._z[order], self._y[order], self._ids[order]

    def _rows(self, variant: str) -> np.ndarray:
        _, y, _ = self.entries()
        variant = _VARIANT_ALIASES.get(variant, variant)
        if variant == 'mask':
            return l2_normalize(y[:, :self.num_slots], axis=-1)
        if variant == 'class':
            return l2_normalize(y[:, self.num_slots:], axis=-1)
        return y

    def sample(self, anchor_row: np.ndarray, R: int, rng: RngStream, variant: str = 'fusion',
               exponent: str = 'linear') -> Tuple[np.ndarray, np.ndarray]:
        """Bank positions (oldest = 0) and their probabilities for one anchor."""
        dist = score_distribution(anchor_row, self._rows(variant), variant, exponent)
        picks = sample_negatives(dist, R, rng)
        return picks, dist[picks]


def select_anchors(valid: np.ndarray, max_anchors: Optional[int], rng: RngStream) -> np.ndarray:
    """(b, p) pairs of valid locations, optionally subsampled without replacement."""
    anchors = np.argwhere(np.asarray(valid, dtype=bool))
    if max_anchors is not None and anchors.shape[0] > max_anchors:
        keep = np.sort(rng.permutation(anchors.shape[0])[:max_anchors])
        anchors = anchors[keep]
    return anchors


def plan_negatives(
    je: JointEmbedding,
    anchors: np.ndarray,
    valid: np.ndarray,
    R: int,
    rng: RngStream,
    variant: str = 'fusion',
    exponent: str = 'linear',
    bank: Optional[MemoryBank] = None,
) -> SamplingPlan:
    """Draw R negatives for every anchor from the batch pool or the memory bank."""
    variant = _VARIANT_ALIASES.get(variant, variant)
    anchors = np.asarray(anchors, dtype=np.int64).reshape(-1, 2)
    if anchors.shape[0] == 0:
        raise ArgumentError('no anchors to sample negatives for')
    use_bank = bank is not None
    if use_bank and len(bank) == 0:
        logger.info('Memory bank is empty, sampling negatives from the mini-batch')
        use_bank = False

    rows = je.rows(variant)
    b, n = rows.shape[:2]
    flat_rows = rows.reshape(b * n, -1)
    negatives = np.zeros((anchors.shape[0], R, 2), dtype=np.int64)
    probabilities = np.zeros((anchors.shape[0], R))

    if use_bank:
        bank_z, _, bank_ids = bank.entries()
        negative_ids = np.zeros((anchors.shape[0], R), dtype=np.int64)
        for a, (ab, ap) in enumerate(anchors):
            picks, probs = bank.sample(flat_rows[ab * n + ap], R, rng, variant, exponent)
            negatives[a, :, 0] = -1
            negatives[a, :, 1] = picks
            probabilities[a] = probs
            negative_ids[a] = bank_ids[picks]
        return SamplingPlan(anchors, negatives, probabilities, variant, exponent,
                            scope='bank', negative_ids=negative_ids, bank_z=bank_z)

    valid_flat = np.asarray(valid, dtype=bool).reshape(-1)
    for a, (ab, ap) in enumerate(anchors):
        self_index = ab * n + ap
        pool_mask = valid_flat.copy()
        pool_mask[self_index] = False
        pool = np.flatnonzero(pool_mask)
        if pool.size == 0:
            raise ArgumentError('empty candidate pool')
        dist = score_distribution(flat_rows[self_index], flat_rows[pool], variant, exponent)
        picks = sample_negatives(dist, R, rng)
        chosen = pool[picks]
        negatives[a, :, 0] = chosen // n
        negatives[a, :, 1] = chosen % n
        probabilities[a] = dist[picks]
    return SamplingPlan(anchors, negatives, probabilities, variant, exponent)
