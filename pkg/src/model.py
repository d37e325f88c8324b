"""Query-based toy segmentation network.

A stack of 3x3 conv + relu stages (2x average pooling after the first
log2(stride) stages) produces features F on an (H/stride, W/stride) grid.
K learned queries read masks off F by inner product, a class head scores
each query refined by the mean feature, and a two-layer MLP projects F to
unit-norm contrastive embeddings.
"""
import hashlib
from dataclasses import dataclass
from typing import Dict, Optional, Tuple, Union

import numpy as np

from .config import ArchConfig
from .errors import ArgumentError, NumericError
from .numcore import RngStream, Tape, Var, value_of
from .numcore import ops

Tensor = Union[np.ndarray, Var]


@dataclass
class ModelParams:
    arch: ArchConfig
    tensors: Dict[str, np.ndarray]

    def copy(self) -> 'ModelParams':
        return ModelParams(self.arch, {name: t.copy() for name, t in self.tensors.items()})

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.tensors):
            digest.update(name.encode('utf-8'))
            digest.update(np.ascontiguousarray(self.tensors[name], dtype='<f8').tobytes())
        return digest.hexdigest()

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors.values())


@dataclass
class ModelOutput:
    z: Tensor
    mask_logits: Tensor
    class_logits: Tensor
    grid: Tuple[int, int]

    def detached(self) -> 'ModelOutput':
        return ModelOutput(value_of(self.z), value_of(self.mask_logits), value_of(self.class_logits), self.grid)


def _pool_stages(arch: ArchConfig) -> int:
    n_pool = int(np.log2(arch.stride)) if arch.stride > 0 else -1
    if arch.stride < 1 or 2 ** n_pool != arch.stride:
        raise ArgumentError(f'stride must be a power of two, got {arch.stride}')
    if n_pool > arch.depth:
        raise ArgumentError(f'stride {arch.stride} needs at least {n_pool} encoder stages, got depth {arch.depth}')
    return n_pool


def param_shapes(arch: ArchConfig) -> Dict[str, Tuple[int, ...]]:
    if arch.depth < 1:
        raise ArgumentError('encoder depth must be >= 1')
    _pool_stages(arch)
    d, k, c1, p = arch.feature_dim, arch.num_slots, arch.num_classes + 1, arch.proj_dim
    shapes: Dict[str, Tuple[int, ...]] = {}
    for i in range(arch.depth):
        shapes[f'enc{i}.w'] = (d, 3 if i == 0 else d, 3, 3)
        shapes[f'enc{i}.b'] = (d,)
    shapes['queries'] = (k, d)
    shapes['cls.w'] = (d, c1)
    shapes['cls.b'] = (c1,)
    shapes['proj1.w'] = (d, p)
    shapes['proj1.b'] = (p,)
    shapes['proj2.w'] = (p, p)
    shapes['proj2.b'] = (p,)
    return shapes


def _fan_in(name: str, shape: Tuple[int, ...]) -> int:
    if name.startswith('enc'):
        return shape[1] * 9
    return shape[-1] if name == 'queries' else shape[0]


def init_params(arch: ArchConfig, rng: RngStream) -> ModelParams:
    tensors: Dict[str, np.ndarray] = {}
    for name, shape in param_shapes(arch).items():
        if name.endswith('.b'):
            tensors[name] = np.zeros(shape)
            continue
        bound = 1.0 / np.sqrt(_fan_in(name, shape))
        tensors[name] = rng.child(name).uniform(-bound, bound, size=shape)
    return ModelParams(arch, tensors)


def count_params(params: Union[ModelParams, ArchConfig]) -> int:
    shapes = param_shapes(params) if isinstance(params, ArchConfig) else {n: t.shape for n, t in params.tensors.items()}
    return int(sum(int(np.prod(s)) for s in shapes.values()))


def attach(params: ModelParams, tape: Tape) -> Dict[str, Var]:
    """Register every parameter as a named trainable leaf."""
    return {name: tape.leaf(value, name=name) for name, value in params.tensors.items()}


def _avg_pool2(x: Tensor) -> Tensor:
    c, h, w = value_of(x).shape
    return ops.mean(ops.reshape(x, (c, h // 2, 2, w // 2, 2)), axis=(2, 4))


def forward(params: ModelParams, image: np.ndarray, tape: Optional[Tape] = None,
            weights: Optional[Dict[str, Var]] = None) -> ModelOutput:
    """Run the network on one [3, H, W] image.

    With a recording tape the parameters are attached as leaves (or taken
    from ``weights`` when already attached) and every op is recorded.
    """
    arch = params.arch
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ArgumentError(f'expected a [3, H, W] image, got {image.shape}')
    if image.shape[1] % arch.stride or image.shape[2] % arch.stride:
        raise ArgumentError(f'image {image.shape[1]}x{image.shape[2]} is not divisible by stride {arch.stride}')

    if weights is not None:
        p = weights
    elif tape is not None and tape.record_ops:
        p = attach(params, tape)
    else:
        p = params.tensors

    n_pool = _pool_stages(arch)
    x: Tensor = image
    for i in range(arch.depth):
        x = ops.relu(ops.conv3x3(x, p[f'enc{i}.w'], p[f'enc{i}.b']))
        if i < n_pool:
            x = _avg_pool2(x)

    d, h, w = value_of(x).shape
    flat = ops.reshape(x, (d, h * w))
    feats = ops.transpose(flat)

    mask_logits = ops.reshape(ops.matmul(p['queries'], flat), (arch.num_slots, h, w))
    refined = ops.add(p['queries'], ops.mean(feats, axis=0))
    class_logits = ops.add(ops.matmul(refined, p['cls.w']), p['cls.b'])

    hidden = ops.relu(ops.add(ops.matmul(feats, p['proj1.w']), p['proj1.b']))
    z = ops.l2_normalize(ops.add(ops.matmul(hidden, p['proj2.w']), p['proj2.b']), axis=-1)

    _check_output(value_of(z), value_of(mask_logits), value_of(class_logits))
    return ModelOutput(z=z, mask_logits=mask_logits, class_logits=class_logits, grid=(h, w))


def _check_output(z: np.ndarray, mask_logits: np.ndarray, class_logits: np.ndarray):
    for name, arr in (('z', z), ('mask_logits', mask_logits), ('class_logits', class_logits)):
        if not np.all(np.isfinite(arr)):
            raise NumericError(f'non-finite values in model output {name}')
    norms = np.linalg.norm(z, axis=-1)
    # zero rows survive the normalisation guard
    if not np.all((np.abs(norms - 1.0) < 1e-9) | (norms < 1e-12)):
        raise NumericError('embedding rows are not unit norm')
