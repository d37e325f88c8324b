import os

import numpy as np
import pytest

from src.config import ArchConfig, DatasetRef, PretrainPlan, RunPlan, SceneConfig, StageConfig, StagePlan
from src.model import init_params
from src.numcore import RngStream
from src.synth import build_dataset, generate_scene


@pytest.fixture
def mock_env_vars(tmp_path):
    """Point the registry and worker settings at test values"""
    test_env = {
        'PIXELCL_RUNS_DIR': str(tmp_path / 'runs'),
        'PIXELCL_THREADS': '1',
    }

    original_env = {}
    for key, value in test_env.items():
        original_env[key] = os.environ.get(key)
        os.environ[key] = value

    yield test_env

    for key, original_value in original_env.items():
        if original_value is not None:
            os.environ[key] = original_value
        elif key in os.environ:
            del os.environ[key]


@pytest.fixture
def rng():
    return RngStream(1234)


@pytest.fixture
def small_scene_cfg():
    """16x16 scenes with up to three instances of two classes"""
    return SceneConfig(
        height=16, width=16, min_instances=2, max_instances=3, num_classes=2,
        min_size=4, max_size=7, noise=0.02,
    )


@pytest.fixture
def small_arch():
    return ArchConfig(feature_dim=6, depth=2, stride=2, proj_dim=8, num_slots=4, num_classes=2)


@pytest.fixture
def small_params(small_arch):
    return init_params(small_arch, RngStream(7))


@pytest.fixture
def small_scene(small_scene_cfg):
    return generate_scene(small_scene_cfg, RngStream(3).child(0))


@pytest.fixture
def small_dataset_ref(small_scene_cfg):
    return DatasetRef(scene=small_scene_cfg, n_scenes=6, label_fraction=0.5, n_eval=2, seed=5)


@pytest.fixture
def small_dataset(small_dataset_ref):
    return build_dataset(small_dataset_ref)


@pytest.fixture
def small_objective():
    return StageConfig(negatives=4, max_anchors=16, lambda_pxl=0.2)


def _stage(steps, objective, batch_l=1, batch_u=1):
    return StagePlan(steps=steps, batch_labeled=batch_l, batch_unlabeled=batch_u, objective=objective)


@pytest.fixture
def small_plan(small_dataset_ref, small_arch):
    """Two steps per stage on the small scenes"""
    student = small_arch.model_copy(update={'feature_dim': 4, 'proj_dim': 6})
    objective = StageConfig(negatives=4, max_anchors=16)
    return RunPlan(
        name='small',
        seeds=[0],
        dataset=small_dataset_ref,
        teacher_arch=small_arch,
        student_arch=student,
        pretrain=PretrainPlan(steps=2, n_scenes=3, batch=2),
        teacher_finetune=_stage(2, objective.model_copy(update={'lambda_semi': 0.0}), batch_u=0),
        teacher_selftrain=_stage(2, objective),
        distill=_stage(2, objective),
        refine=_stage(2, objective.model_copy(update={'lambda_semi': 0.0, 'lambda_pxl': 0.0}), batch_u=0),
        metrics_every=1,
    )


def unit_rows(rng: RngStream, *shape: int) -> np.ndarray:
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)
