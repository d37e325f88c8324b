"""Procedural instance-segmentation scenes and their augmented views.

Scenes hold hard-edged shapes on a noisy gray background so the per-pixel
instance id is exact. Views record their geometry both ways:

* ``correspondence`` is indexed by *source* pixel and gives the view pixel it
  lands on, or ``SENTINEL_INVALID`` when the pixel was cropped away;
* ``source_coords`` is indexed by *view* pixel and gives the source pixel it
  was sampled from (nearest-neighbour resampling).

Augmentations are split into a draw step (consumes randomness) and an apply
step (pure), so tests can pin the parameters.
"""
import colorsys
import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .config import DatasetRef, SceneConfig, dump_config, get_env_int
from .errors import ArgumentError, FormatError, GenerationError
from .numcore import RngStream
from .utils.codec import encode_container, read_container, write_container

logger = logging.getLogger(__name__)

SENTINEL_INVALID = -1
DATASET_MAGIC = b'PXDS'

LABELED = 'labeled'
UNLABELED = 'unlabeled'

_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class Instance:
    mask: np.ndarray
    class_id: int
    score: float = 1.0


@dataclass
class SyntheticScene:
    image: np.ndarray
    instances: List[Instance]
    pixel_instance_id: np.ndarray
    split: str = UNLABELED
    stream_id: int = 0

    @property
    def shape(self) -> Tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]

    def cell_instance_ids(self, stride: int) -> np.ndarray:
        """Instance id at the centre pixel of every feature cell, flattened."""
        return cell_centres(self.pixel_instance_id, stride).reshape(-1)

    def cell_instance_keys(self, stride: int) -> np.ndarray:
        """Per-cell instance identity that stays distinct across scenes; background is 0."""
        ids = self.cell_instance_ids(stride)
        scene_key = (int(self.stream_id) & 0x7FFFFFFF) << 16
        return np.where(ids > 0, scene_key | ids, 0).astype(np.int64)

    def instance_targets(self, stride: int) -> np.ndarray:
        return instance_targets(self.instances, self.shape, stride)


def cell_centres(grid: np.ndarray, stride: int) -> np.ndarray:
    h, w = grid.shape[0] // stride, grid.shape[1] // stride
    half = stride // 2
    return grid[half::stride, half::stride][:h, :w]


def instance_targets(instances: List[Instance], shape: Tuple[int, int], stride: int) -> np.ndarray:
    """Area-pooled instance masks on the feature grid, shape [n, H//stride, W//stride]."""
    h, w = shape[0] // stride, shape[1] // stride
    if not instances:
        return np.zeros((0, h, w))
    masks = np.stack([inst.mask[:h * stride, :w * stride] for inst in instances]).astype(np.float64)
    return masks.reshape(len(instances), h, stride, w, stride).mean(axis=(2, 4))


# ------------------------------------------------------------------ shapes

def _rasterise(kind: str, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (yy + 0.5) - h / 2.0, (xx + 0.5) - w / 2.0
    if kind == 'rectangle':
        return np.ones((h, w), dtype=bool)
    if kind == 'ellipse':
        return (cy / (h / 2.0)) ** 2 + (cx / (w / 2.0)) ** 2 <= 1.0
    if kind == 'triangle':
        half_width = (yy + 1.0) / h * (w / 2.0)
        return np.abs(cx) <= half_width
    raise ArgumentError(f'unknown shape {kind!r}')


def class_colour(class_id: int, num_classes: int, palette_shift: float = 0.0) -> np.ndarray:
    hue = ((class_id - 1) / num_classes + palette_shift) % 1.0
    return np.array(colorsys.hsv_to_rgb(hue, 0.8, 0.9))


def generate_scene(cfg: SceneConfig, rng: RngStream) -> SyntheticScene:
    height, width = cfg.height, cfg.width
    n = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
    classes = [int(c) for c in rng.integers(1, cfg.num_classes + 1, size=n)]
    if n >= 2 and rng.random() < cfg.shared_class_prob:
        classes[1] = classes[0]

    ids = np.zeros((height, width), dtype=np.int64)
    structure = np.ones((3, 3), dtype=bool)
    image = np.empty((3, height, width))
    image[:] = 0.5
    instances: List[Instance] = []

    for idx, class_id in enumerate(classes, start=1):
        for _ in range(cfg.max_retries):
            kind = cfg.shapes[int(rng.integers(0, len(cfg.shapes)))]
            h = int(rng.integers(cfg.min_size, min(cfg.max_size, height) + 1))
            w = int(rng.integers(cfg.min_size, min(cfg.max_size, width) + 1))
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            mask = np.zeros((height, width), dtype=bool)
            mask[top:top + h, left:left + w] = _rasterise(kind, h, w)
            if not mask.any():
                continue
            grown = ndimage.binary_dilation(mask, structure, iterations=cfg.gap) if cfg.gap else mask
            if np.any(grown & (ids > 0)):
                continue
            break
        else:
            raise GenerationError(
                f'could not place instance {idx} of {n} in a {height}x{width} scene '
                f'after {cfg.max_retries} attempts'
            )
        ids[mask] = idx
        jitter = rng.uniform(-0.02, 0.02)
        colour = class_colour(class_id, cfg.num_classes, cfg.palette_shift + jitter)
        image[:, mask] = colour[:, None]
        instances.append(Instance(mask=mask, class_id=class_id))

    if cfg.noise > 0:
        image = image + rng.normal(0.0, cfg.noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return SyntheticScene(image=image, instances=instances, pixel_instance_id=ids, stream_id=rng.stream_id)


def make_splits(n_scenes: int, label_fraction: float, rng: RngStream) -> List[str]:
    """Labeled/unlabeled assignment with exactly round(fraction * n) labeled scenes."""
    if not 0.0 < label_fraction <= 1.0:
        raise ArgumentError(f'label_fraction must lie in (0, 1], got {label_fraction}')
    if n_scenes < 1:
        raise ArgumentError(f'n_scenes must be >= 1, got {n_scenes}')
    n_labeled = int(np.floor(label_fraction * n_scenes + 0.5))
    order = rng.permutation(n_scenes)
    splits = [UNLABELED] * n_scenes
    for i in order[:n_labeled]:
        splits[int(i)] = LABELED
    return splits


# ------------------------------------------------------------------- views

@dataclass
class AugmentedView:
    image: np.ndarray
    correspondence: np.ndarray
    source_coords: np.ndarray
    kind: str
    params: Dict[str, Any] = field(default_factory=dict)

    @property
    def valid_fraction(self) -> float:
        return float(np.mean(self.correspondence[..., 0] != SENTINEL_INVALID))

    def feature_index(self, stride: int) -> Tuple[np.ndarray, np.ndarray]:
        """Map the source feature grid onto this view's feature grid.

        Returns the flat view-cell index for every source cell (row-major) and
        a validity flag; invalid cells carry index 0.
        """
        corr = cell_centres(self.correspondence, stride)
        valid = corr[..., 0] != SENTINEL_INVALID
        view_h, view_w = self.image.shape[1] // stride, self.image.shape[2] // stride
        fy = np.clip(corr[..., 0] // stride, 0, view_h - 1)
        fx = np.clip(corr[..., 1] // stride, 0, view_w - 1)
        index = np.where(valid, fy * view_w + fx, 0)
        return index.reshape(-1).astype(np.int64), valid.reshape(-1)


def _nearest(n_in: int, n_out: int) -> np.ndarray:
    """Nearest-neighbour source index for each of ``n_out`` samples over ``n_in``."""
    return np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64), n_in - 1)


def _snap(extent: float, stride: int) -> int:
    return max(stride, int(round(extent / stride)) * stride)


def draw_weak(rng: RngStream) -> Dict[str, Any]:
    return {'flip': bool(rng.random() < 0.5), 'scale': float(rng.uniform(0.8, 1.2))}


def apply_weak(scene: SyntheticScene, flip: bool, scale: float, stride: int = 1) -> AugmentedView:
    height, width = scene.shape
    out_h, out_w = _snap(height * scale, stride), _snap(width * scale, stride)
    rows = _nearest(height, out_h)
    cols = _nearest(width, out_w)
    if flip:
        cols = width - 1 - cols
    image = scene.image[:, rows][:, :, cols]
    source_coords = np.stack(np.meshgrid(rows, cols, indexing='ij'), axis=-1)

    view_rows = _nearest(out_h, height)
    src_x = np.arange(width)
    view_cols = _nearest(out_w, width)[width - 1 - src_x if flip else src_x]
    correspondence = np.stack(np.meshgrid(view_rows, view_cols, indexing='ij'), axis=-1)
    return AugmentedView(
        image=image, correspondence=correspondence, source_coords=source_coords,
        kind='weak', params={'flip': flip, 'scale': scale, 'out_size': [out_h, out_w]},
    )


def weak_augment(scene: SyntheticScene, rng: RngStream, stride: int = 1) -> AugmentedView:
    """Horizontal flip (p=0.5) and uniform resize in [0.8, 1.2]."""
    return apply_weak(scene, stride=stride, **draw_weak(rng))


def draw_crop(height: int, width: int, rng: RngStream) -> Tuple[int, int, int, int]:
    area = float(rng.uniform(0.5, 1.0))
    ratio = float(np.exp(rng.uniform(np.log(3 / 4), np.log(4 / 3))))
    # keep both sides inside the image so the area ratio survives clipping
    ratio = min(max(ratio, area * height / width), width / (area * height))
    crop_h = int(np.clip(round(np.sqrt(area * height * width / ratio)), 1, height))
    crop_w = int(np.clip(round(np.sqrt(area * height * width * ratio)), 1, width))
    top = int(rng.integers(0, height - crop_h + 1))
    left = int(rng.integers(0, width - crop_w + 1))
    return top, left, crop_h, crop_w


def draw_photometric(rng: RngStream) -> Dict[str, Any]:
    ops: Dict[str, Any] = {}
    if rng.random() < 0.8:
        ops['jitter'] = [float(v) for v in rng.uniform(0.6, 1.4, size=3)]
    if rng.random() < 0.2:
        ops['grayscale'] = True
    if rng.random() < 0.5:
        ops['blur'] = float(rng.uniform(0.1, 2.0))
    return ops


def apply_photometric(image: np.ndarray, ops: Dict[str, Any]) -> np.ndarray:
    out = image.copy()
    if 'jitter' in ops:
        brightness, contrast, saturation = ops['jitter']
        out = np.clip(out * brightness, 0.0, 1.0)
        out = np.clip((out - out.mean()) * contrast + out.mean(), 0.0, 1.0)
        gray = np.tensordot(_LUMA, out, axes=1)
        out = np.clip(gray + (out - gray) * saturation, 0.0, 1.0)
    if ops.get('grayscale'):
        out = np.repeat(np.tensordot(_LUMA, out, axes=1)[None], 3, axis=0)
    if 'blur' in ops:
        out = np.stack([ndimage.gaussian_filter(ch, sigma=ops['blur'], mode='nearest') for ch in out])
    return out


def apply_strong(
    scene: SyntheticScene,
    crop: Tuple[int, int, int, int],
    ops: Optional[Dict[str, Any]] = None,
    stride: int = 1,
) -> AugmentedView:
    height, width = scene.shape
    top, left, crop_h, crop_w = crop
    if crop_h < 1 or crop_w < 1 or top < 0 or left < 0 or top + crop_h > height or left + crop_w > width:
        raise ArgumentError(f'crop {crop} does not fit a {height}x{width} scene')
    out_h, out_w = _snap(height, stride), _snap(width, stride)
    rows = top + _nearest(crop_h, out_h)
    cols = left + _nearest(crop_w, out_w)
    image = apply_photometric(scene.image[:, rows][:, :, cols], ops or {})
    source_coords = np.stack(np.meshgrid(rows, cols, indexing='ij'), axis=-1)

    correspondence = np.full((height, width, 2), SENTINEL_INVALID, dtype=np.int64)
    inside = np.stack(np.meshgrid(_nearest(out_h, crop_h), _nearest(out_w, crop_w), indexing='ij'), axis=-1)
    correspondence[top:top + crop_h, left:left + crop_w] = inside
    return AugmentedView(
        image=image, correspondence=correspondence, source_coords=source_coords,
        kind='strong', params={'crop': list(crop), 'ops': ops or {}, 'out_size': [out_h, out_w]},
    )


def strong_augment(scene: SyntheticScene, rng: RngStream, stride: int = 1) -> AugmentedView:
    """Random resized crop (area 0.5-1.0), colour jitter, grayscale (p=0.2), blur (p=0.5)."""
    crop = draw_crop(*scene.shape, rng)
    return apply_strong(scene, crop, draw_photometric(rng), stride=stride)


# ----------------------------------------------------------------- datasets

@dataclass
class SceneDataset:
    """Training scenes with their split plus a fully labeled evaluation set."""

    config: DatasetRef
    train: List[SyntheticScene]
    eval_scenes: List[SyntheticScene]

    def __len__(self) -> int:
        return len(self.train)

    def __getitem__(self, index: int) -> SyntheticScene:
        return self.train[index]

    @property
    def labeled(self) -> List[SyntheticScene]:
        return [s for s in self.train if s.split == LABELED]

    @property
    def unlabeled(self) -> List[SyntheticScene]:
        return [s for s in self.train if s.split == UNLABELED]

    def manifest(self) -> Dict[str, Any]:
        return {
            'config': dump_config(self.config),
            'n_labeled': len(self.labeled),
            'n_unlabeled': len(self.unlabeled),
            'n_eval': len(self.eval_scenes),
            'scenes': [{'index': i, 'split': s.split, 'stream_id': str(s.stream_id)} for i, s in enumerate(self.train)],
            'eval_scenes': [{'index': i, 'stream_id': str(s.stream_id)} for i, s in enumerate(self.eval_scenes)],
            'sha256': self.fingerprint(),
        }

    def fingerprint(self) -> str:
        return hashlib.sha256(encode_dataset(self)).hexdigest()


def _generate_many(scene_cfg: SceneConfig, root: RngStream, n: int) -> List[SyntheticScene]:
    streams = [root.child(i) for i in range(n)]
    workers = get_env_int('PIXELCL_THREADS', 1)
    if workers == 1:
        return [generate_scene(scene_cfg, s) for s in streams]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: generate_scene(scene_cfg, s), streams))


def build_dataset(ref: DatasetRef, scene_cfg: Optional[SceneConfig] = None) -> SceneDataset:
    scene_cfg = scene_cfg or ref.scene
    root = RngStream(ref.seed)
    train = _generate_many(scene_cfg, root.child('train'), ref.n_scenes)
    for scene, split in zip(train, make_splits(ref.n_scenes, ref.label_fraction, root.child('splits'))):
        scene.split = split
    eval_scenes = _generate_many(scene_cfg, root.child('eval'), ref.n_eval)
    for scene in eval_scenes:
        scene.split = LABELED
    dataset = SceneDataset(config=ref, train=train, eval_scenes=eval_scenes)
    logger.info(
        f'Built dataset: {len(dataset.labeled)} labeled, {len(dataset.unlabeled)} unlabeled, '
        f'{len(eval_scenes)} eval scenes'
    )
    return dataset


def _scene_entries(scenes: List[SyntheticScene], prefix: str):
    meta, tensors = [], []
    for i, scene in enumerate(scenes):
        meta.append({
            'split': scene.split,
            'classes': [inst.class_id for inst in scene.instances],
            'stream_id': str(scene.stream_id),
        })
        tensors.append((f'{prefix}/{i}/image', scene.image))
        tensors.append((f'{prefix}/{i}/ids', scene.pixel_instance_id.astype(np.float64)))
    return meta, tensors


def _dataset_payload(dataset: SceneDataset):
    train_meta, train_tensors = _scene_entries(dataset.train, 'train')
    eval_meta, eval_tensors = _scene_entries(dataset.eval_scenes, 'eval')
    meta = {'kind': 'dataset', 'config': dump_config(dataset.config), 'train': train_meta, 'eval': eval_meta}
    return meta, train_tensors + eval_tensors


def encode_dataset(dataset: SceneDataset) -> bytes:
    return encode_container(DATASET_MAGIC, *_dataset_payload(dataset))


def save_dataset(path: str, dataset: SceneDataset) -> str:
    return write_container(path, DATASET_MAGIC, *_dataset_payload(dataset))


def _restore_scenes(entries: List[Dict[str, Any]], tensors: Dict[str, np.ndarray], prefix: str) -> List[SyntheticScene]:
    scenes = []
    for i, entry in enumerate(entries):
        try:
            image = tensors[f'{prefix}/{i}/image']
            ids = tensors[f'{prefix}/{i}/ids'].astype(np.int64)
        except KeyError as e:
            raise FormatError(f'dataset is missing tensor {str(e)}')
        instances = [Instance(mask=ids == k, class_id=int(c)) for k, c in enumerate(entry['classes'], start=1)]
        scenes.append(SyntheticScene(
            image=image, instances=instances, pixel_instance_id=ids,
            split=entry['split'], stream_id=int(entry['stream_id']),
        ))
    return scenes


def load_dataset(path: str) -> SceneDataset:
    meta, tensors = read_container(path, DATASET_MAGIC)
    if meta.get('kind') != 'dataset':
        raise FormatError(f'{path} is not a dataset file')
    ref = DatasetRef.model_validate(meta['config'])
    return SceneDataset(
        config=ref,
        train=_restore_scenes(meta['train'], tensors, 'train'),
        eval_scenes=_restore_scenes(meta['eval'], tensors, 'eval'),
    )
