"""Pixel-wise contrastive losses.

Similarities are temperature-scaled cosines: ``s+ = <z_weak[b,p], z_strong[b,p]> / T``
and ``s-_r = <z_weak[b,p], z_strong[b',q_r]> / T``. Loss functions are
dual-mode like the numcore primitives: pass tape values to record them.
"""
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from .errors import ArgumentError, InternalError, NumericError
from .numcore import Var, value_of
from .numcore import ops
from .sampler import SamplingPlan

Tensor = Union[np.ndarray, Var]

_IDENTITY_TOL = 1e-12
_CLOSED_FORM_TOL = 1e-9


@dataclass
class PixelEmbeddings:
    """Weak and strong embeddings on a shared grid, [B, N, D] each, plus validity [B, N]."""

    z_weak: Tensor
    z_strong: Tensor
    valid: np.ndarray


@dataclass
class SimilaritySet:
    s_plus: np.ndarray
    s_neg: np.ndarray
    T: float

    @property
    def pos_cosines(self) -> np.ndarray:
        return self.s_plus * self.T

    @property
    def neg_cosines(self) -> np.ndarray:
        return self.s_neg * self.T


def _check_temperature(T: float):
    if T <= 0:
        raise ArgumentError(f'temperature must be > 0, got {T}')


def positive_similarity(pe: PixelEmbeddings, anchor: Tuple[int, int], T: float) -> float:
    _check_temperature(T)
    b, p = anchor
    if not pe.valid[b, p]:
        raise ArgumentError(f'anchor {anchor} has no valid strong-view correspondence')
    return float(np.dot(value_of(pe.z_weak)[b, p], value_of(pe.z_strong)[b, p]) / T)


def negative_similarities(pe: PixelEmbeddings, anchor: Tuple[int, int], negatives: np.ndarray, T: float) -> np.ndarray:
    """Scaled cosines between the anchor and the strong-view rows at (b', q) pairs."""
    _check_temperature(T)
    z_weak, z_strong = value_of(pe.z_weak), value_of(pe.z_strong)
    negatives = np.asarray(negatives, dtype=np.int64).reshape(-1, 2)
    b, n = z_strong.shape[:2]
    if negatives.size and (
        negatives[:, 0].min() < 0 or negatives[:, 0].max() >= b
        or negatives[:, 1].min() < 0 or negatives[:, 1].max() >= n
    ):
        raise InternalError(f'negative index out of range for a {b}x{n} embedding grid')
    rows = z_strong[negatives[:, 0], negatives[:, 1]]
    return rows @ z_weak[anchor[0], anchor[1]] / T


def ntxent_loss(s_plus: Tensor, s_neg: Tensor) -> Tensor:
    """-mean log(e^{s+} / (e^{s+} + sum_r e^{s-_r})), max-shifted; s_plus [A], s_neg [A, R]."""
    a = value_of(s_plus).shape[0]
    if a == 0:
        raise ArgumentError('ntxent_loss needs at least one anchor')
    logits = ops.concat([ops.reshape(s_plus, (a, 1)), s_neg], axis=1)
    first = np.zeros(value_of(logits).shape)
    first[:, 0] = 1.0
    picked = ops.sum(ops.mul(ops.log_softmax(logits, axis=1), first), axis=1)
    return ops.mul(ops.mean(picked), -1.0)


def hinge_loss(s_plus: Tensor, s_neg: Tensor, T: float, margin: float) -> Tensor:
    """Mean over anchors and negatives of max(0, m + cos- - cos+)."""
    if margin < 0:
        raise ArgumentError(f'margin must be >= 0, got {margin}')
    a = value_of(s_plus).shape[0]
    gap = ops.mul(ops.sub(s_neg, ops.reshape(s_plus, (a, 1))), T)
    return ops.mean(ops.relu(ops.add(gap, margin)))


def anchor_ntxent(z_a: Tensor, z_plus: np.ndarray, z_negs: np.ndarray, T: float) -> Tensor:
    """NT-Xent of a single anchor vector; differentiable in ``z_a``."""
    s_plus = ops.reshape(ops.div(ops.matmul(z_plus, z_a), T), (1,))
    s_neg = ops.reshape(ops.div(ops.matmul(z_negs, z_a), T), (1, np.shape(z_negs)[0]))
    return ntxent_loss(s_plus, s_neg)


def _alphas(z_a: np.ndarray, z_plus: np.ndarray, z_negs: np.ndarray, T: float) -> Tuple[np.ndarray, float]:
    s_plus = float(z_a @ z_plus) / T
    s_neg = z_negs @ z_a / T
    shift = max(s_plus, float(s_neg.max(initial=-np.inf)))
    e_plus = np.exp(s_plus - shift)
    e_neg = np.exp(s_neg - shift)
    z = e_plus + e_neg.sum()
    alpha = e_neg / z
    pos_share = e_plus / z
    if abs((1.0 - pos_share) - alpha.sum()) > _IDENTITY_TOL:
        raise NumericError('softmax weights violate sum(alpha) = 1 - e^{s+}/Z')
    return alpha, pos_share


def ntxent_grad_anchor(z_a: np.ndarray, z_plus: np.ndarray, z_negs: np.ndarray, T: float) -> np.ndarray:
    """Closed-form gradient of the single-anchor loss: (1/T) sum_r alpha_r (z-_r - z+)."""
    _check_temperature(T)
    z_a, z_plus = np.asarray(z_a, dtype=np.float64), np.asarray(z_plus, dtype=np.float64)
    z_negs = np.atleast_2d(np.asarray(z_negs, dtype=np.float64))
    alpha, _ = _alphas(z_a, z_plus, z_negs, T)
    return (alpha[:, None] * (z_negs - z_plus[None, :])).sum(axis=0) / T


def softmax_weights(z_a: np.ndarray, z_plus: np.ndarray, z_negs: np.ndarray, T: float) -> np.ndarray:
    """The negatives' shares alpha_r of the NT-Xent partition function."""
    return _alphas(np.asarray(z_a, dtype=np.float64), np.asarray(z_plus, dtype=np.float64),
                   np.atleast_2d(np.asarray(z_negs, dtype=np.float64)), T)[0]


def one_step_margin_delta(
    z_a: np.ndarray,
    z_plus: np.ndarray,
    z_negs: np.ndarray,
    T: float,
    step: float,
    z_heldout: Optional[np.ndarray] = None,
) -> Tuple[float, float]:
    """Change of the raw positive and held-out-negative inner products after one descent step.

    The anchor moves to z_a - step * grad without re-projection onto the sphere.
    Closed forms are checked against direct recomputation.
    """
    _check_temperature(T)
    if step < 0:
        raise ArgumentError(f'step size must be >= 0, got {step}')
    z_a, z_plus = np.asarray(z_a, dtype=np.float64), np.asarray(z_plus, dtype=np.float64)
    z_negs = np.atleast_2d(np.asarray(z_negs, dtype=np.float64))
    alpha, _ = _alphas(z_a, z_plus, z_negs, T)
    grad = (alpha[:, None] * (z_negs - z_plus[None, :])).sum(axis=0) / T
    moved = z_a - step * grad

    ds_plus = float(moved @ z_plus - z_a @ z_plus)
    closed_plus = step / T * float(np.sum(alpha * (z_plus @ z_plus - z_negs @ z_plus)))
    if abs(ds_plus - closed_plus) > _CLOSED_FORM_TOL * max(1.0, abs(closed_plus)):
        raise NumericError(f'positive delta {ds_plus} disagrees with closed form {closed_plus}')

    if z_heldout is None:
        return ds_plus, 0.0
    z_h = np.asarray(z_heldout, dtype=np.float64)
    ds_minus = float(moved @ z_h - z_a @ z_h)
    closed_minus = step / T * float(np.sum(alpha * (z_plus @ z_h - z_negs @ z_h)))
    if abs(ds_minus - closed_minus) > _CLOSED_FORM_TOL * max(1.0, abs(closed_minus)):
        raise NumericError(f'negative delta {ds_minus} disagrees with closed form {closed_minus}')
    return ds_plus, ds_minus


def similarity_set(pe: PixelEmbeddings, plan: SamplingPlan, T: float) -> Tuple[Tensor, Tensor]:
    """Scaled positive [A] and negative [A, R] similarities for every anchor of ``plan``."""
    _check_temperature(T)
    z_weak, z_strong = pe.z_weak, pe.z_strong
    b, n, d = value_of(z_weak).shape
    anchors = plan.anchors
    if not np.all(pe.valid[anchors[:, 0], anchors[:, 1]]):
        raise ArgumentError('anchors must lie on valid strong-view locations')
    a, r = plan.negatives.shape[:2]
    anchor_flat = anchors[:, 0] * n + anchors[:, 1]

    weak_rows = ops.take(ops.reshape(z_weak, (b * n, d)), anchor_flat)
    strong_flat = ops.reshape(z_strong, (b * n, d))
    pos_rows = ops.take(strong_flat, anchor_flat)
    s_plus = ops.div(ops.sum(ops.mul(weak_rows, pos_rows), axis=1), T)

    if plan.scope == 'bank':
        neg_rows = plan.bank_z[plan.negatives[:, :, 1]]
    else:
        neg_flat = plan.negatives[:, :, 0] * n + plan.negatives[:, :, 1]
        if neg_flat.size and (neg_flat.min() < 0 or neg_flat.max() >= b * n):
            raise InternalError('negative index out of range')
        neg_rows = ops.take(strong_flat, neg_flat)
    s_neg = ops.div(ops.sum(ops.mul(ops.reshape(weak_rows, (a, 1, d)), neg_rows), axis=2), T)
    return s_plus, s_neg


def pixel_contrastive_loss(pe: PixelEmbeddings, plan: SamplingPlan, T: float, loss: str = 'ntxent',
                           margin: float = 0.2) -> Tuple[Tensor, SimilaritySet]:
    s_plus, s_neg = similarity_set(pe, plan, T)
    if loss == 'ntxent':
        value = ntxent_loss(s_plus, s_neg)
    elif loss == 'hinge':
        value = hinge_loss(s_plus, s_neg, T, margin)
    else:
        raise ArgumentError(f'unknown contrastive loss {loss!r}')
    return value, SimilaritySet(value_of(s_plus).copy(), value_of(s_neg).copy(), T)
