"""Monte-Carlo check of the one-step margin dynamics of the contrastive loss.

The anchor sits on its positive (z_a = z+). Each of the R negatives is, with
probability p, a fresh uniform unit vector from another instance, otherwise a
same-instance vector with cosine ``intra_similarity`` to z+. One descent step
of size λ is applied to the anchor and the changes of <z_a, z+> and of the
inner product with a fresh held-out negative are recorded.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy import stats
from tqdm import tqdm

from .config import LabConfig, dump_config
from .contrastive import one_step_margin_delta, softmax_weights
from .errors import ArgumentError, NumericError
from .numcore import RngStream
from .utils.csvlog import write_csv

logger = logging.getLogger(__name__)

LAB_COLUMNS = ['p', 'lambda', 'mean_ds_plus', 'se_ds_plus', 'mean_ds_minus', 'se_ds_minus', 'mean_sum_alpha', 'predicted']
CHUNK = 2048
_IDENTITY_TOL = 1e-12


def _unit(rng: RngStream, shape: Tuple[int, ...]) -> np.ndarray:
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _intra(z_plus: np.ndarray, u: np.ndarray, c: float) -> np.ndarray:
    """Unit vectors with cosine ``c`` to ``z_plus``; ``u`` supplies the orthogonal direction."""
    if c == 1.0:
        return np.broadcast_to(z_plus, u.shape).copy()
    ortho = u - (u * z_plus).sum(axis=-1, keepdims=True) * z_plus
    ortho /= np.linalg.norm(ortho, axis=-1, keepdims=True)
    return c * z_plus + np.sqrt(1.0 - c * c) * ortho


def _draw(cfg: LabConfig, D: int, p: float, n: int, rng: RngStream):
    z_plus = _unit(rng.child('positive'), (n, D))
    inter = _unit(rng.child('inter'), (n, cfg.R, D))
    same = _intra(z_plus[:, None, :], _unit(rng.child('intra'), (n, cfg.R, D)), cfg.intra_similarity)
    is_true = rng.child('labels').random((n, cfg.R)) < p
    negatives = np.where(is_true[..., None], inter, same)
    heldout = _unit(rng.child('heldout'), (n, D))
    return z_plus, negatives, is_true, heldout


def simulate_trial(cfg: LabConfig, p: float, lam: float, rng: RngStream, D: Optional[int] = None) -> Tuple[float, float, float]:
    """One trial: (Δs+, Δs-, Σα)."""
    D = D or cfg.D
    z_plus, negatives, _, heldout = _draw(cfg, D, p, 1, rng)
    z_plus, negatives, heldout = z_plus[0], negatives[0], heldout[0]
    ds_plus, ds_minus = one_step_margin_delta(z_plus, z_plus, negatives, cfg.T, lam, z_heldout=heldout)
    sum_alpha = float(softmax_weights(z_plus, z_plus, negatives, cfg.T).sum())
    return ds_plus, ds_minus, sum_alpha


@dataclass
class CellResult:
    ds_plus: np.ndarray
    ds_minus: np.ndarray
    sum_alpha: np.ndarray
    # Σα weighted by the generative model's expected 1 - <z-, z+> per negative
    expected_gap: np.ndarray


def simulate_cell(cfg: LabConfig, p: float, lam: float, rng: RngStream, D: Optional[int] = None) -> CellResult:
    """``cfg.trials`` trials at once, drawn in chunks from child streams of ``rng``."""
    D = D or cfg.D
    parts = []
    for chunk, start in enumerate(range(0, cfg.trials, CHUNK)):
        n = min(CHUNK, cfg.trials - start)
        z_plus, negatives, is_true, heldout = _draw(cfg, D, p, n, rng.child(chunk))
        s_plus = np.ones(n) / cfg.T
        s_neg = np.einsum('nrd,nd->nr', negatives, z_plus) / cfg.T
        shift = np.maximum(s_plus, s_neg.max(axis=1))
        e_plus = np.exp(s_plus - shift)
        e_neg = np.exp(s_neg - shift[:, None])
        Z = e_plus + e_neg.sum(axis=1)
        alpha = e_neg / Z[:, None]
        sum_alpha = alpha.sum(axis=1)
        if np.max(np.abs((1.0 - e_plus / Z) - sum_alpha)) > _IDENTITY_TOL:
            raise NumericError('softmax weights violate sum(alpha) = 1 - e^{s+}/Z')

        grad = np.einsum('nr,nrd->nd', alpha, negatives - z_plus[:, None, :]) / cfg.T
        ds_plus = -lam * (grad * z_plus).sum(axis=1)
        ds_minus = -lam * (grad * heldout).sum(axis=1)
        gap = np.where(is_true, 1.0, 1.0 - cfg.intra_similarity)
        parts.append((ds_plus, ds_minus, sum_alpha, (alpha * gap).sum(axis=1)))
    return CellResult(*(np.concatenate(cols) for cols in zip(*parts)))


def _se(x: np.ndarray) -> float:
    return float(x.std(ddof=1) / np.sqrt(x.size)) if x.size > 1 else 0.0


def cell_row(cfg: LabConfig, p: float, lam: float, cell: CellResult) -> Dict[str, float]:
    return {
        'p': p,
        'lambda': lam,
        'mean_ds_plus': float(cell.ds_plus.mean()),
        'se_ds_plus': _se(cell.ds_plus),
        'mean_ds_minus': float(cell.ds_minus.mean()),
        'se_ds_minus': _se(cell.ds_minus),
        'mean_sum_alpha': float(cell.sum_alpha.mean()),
        'predicted': lam / cfg.T * float(cell.expected_gap.mean()),
    }


def linearity(rows: List[Dict[str, float]]) -> Dict[str, Dict[str, float]]:
    """Per p, regression of the mean margin change on λ."""
    out = {}
    for p in sorted({r['p'] for r in rows}):
        cells = [r for r in rows if r['p'] == p]
        if len(cells) < 2:
            continue
        fit = stats.linregress([r['lambda'] for r in cells], [r['mean_ds_plus'] - r['mean_ds_minus'] for r in cells])
        out[str(p)] = {'slope': float(fit.slope), 'intercept': float(fit.intercept), 'r2': float(fit.rvalue ** 2)}
    return out


def run_dimension(cfg: LabConfig, D: int, progress: bool = True) -> List[Dict[str, float]]:
    """All (p, λ) cells at dimension ``D``.

    Cells at the same p share their draws (stream keyed by D and p), so the λ
    axis sees common random numbers and cells at different p are independent.
    """
    root = RngStream(cfg.seed).child('margin_lab').child(D)
    rows = []
    cells = [(i, p, lam) for i, p in enumerate(cfg.p_grid) for lam in cfg.lambda_grid]
    for i, p, lam in tqdm(cells, desc=f'margin-lab D={D}', disable=None if progress else True, leave=False):
        rows.append(cell_row(cfg, p, lam, simulate_cell(cfg, p, lam, root.child(i), D)))
    return rows


def _dimension_path(out: Path, D: int) -> Path:
    return out.with_name(f'{out.stem}_D{D}{out.suffix}')


def run_grid(cfg: LabConfig, out_path: Optional[str] = None, progress: bool = True) -> Dict[str, Any]:
    """Run the grid; write the CSV(s) and a JSON summary when ``out_path`` is given."""
    if cfg.trials < 2:
        raise ArgumentError('margin lab needs at least two trials per cell for standard errors')
    dims = cfg.dims or [cfg.D]
    summary: Dict[str, Any] = {'config': dump_config(cfg), 'dimensions': {}}
    rows_by_dim = {}
    for D in dims:
        rows = run_dimension(cfg, D, progress)
        rows_by_dim[D] = rows
        summary['dimensions'][str(D)] = {
            'linearity': linearity(rows),
            'simplified_predicted': [
                {'p': r['p'], 'lambda': r['lambda'], 'value': r['lambda'] / cfg.T * r['p'] * r['mean_sum_alpha']}
                for r in rows
            ],
            'mean_abs_ds_minus': float(np.mean([abs(r['mean_ds_minus']) for r in rows])),
        }
        logger.info(f'margin-lab D={D} cells={len(rows)}')

    if out_path:
        out = Path(out_path)
        if cfg.dims:
            summary['files'] = [write_csv(str(_dimension_path(out, D)), LAB_COLUMNS, rows_by_dim[D]) for D in dims]
        else:
            summary['files'] = [write_csv(str(out), LAB_COLUMNS, rows_by_dim[dims[0]])]
        json_path = out.with_suffix('.json')
        json_path.write_text(json.dumps(summary, sort_keys=True, indent=2) + '\n')
    summary['rows'] = rows_by_dim
    return summary
