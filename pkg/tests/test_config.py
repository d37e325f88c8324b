import json

import pytest

from src.config import (
    FULL_SCALE_SCHEDULE, LabConfig, RunPlan, SceneConfig, StageConfig, get_env_int, get_env_var, load_config,
    parse_config,
)
from src.errors import ConfigError


@pytest.mark.unit
class TestEnvironment:

    def test_get_env_var(self, mock_env_vars):
        """Required variables are read, missing ones are config errors"""
        assert get_env_var('PIXELCL_THREADS') == '1'
        with pytest.raises(ConfigError):
            get_env_var('PIXELCL_NOT_SET')

    def test_get_env_var_default(self, monkeypatch):
        """Missing or empty variables fall back to the default"""
        monkeypatch.delenv('PIXELCL_NOT_SET', raising=False)
        assert get_env_var('PIXELCL_NOT_SET', 'runs') == 'runs'
        monkeypatch.setenv('PIXELCL_NOT_SET', '')
        assert get_env_var('PIXELCL_NOT_SET', 'runs') == 'runs'
        with pytest.raises(ConfigError):
            get_env_var('PIXELCL_NOT_SET')

    def test_get_env_int(self, monkeypatch):
        """Integer settings fall back to the default and reject junk"""
        monkeypatch.delenv('PIXELCL_THREADS', raising=False)
        assert get_env_int('PIXELCL_THREADS', 3) == 3
        monkeypatch.setenv('PIXELCL_THREADS', 'many')
        with pytest.raises(ConfigError):
            get_env_int('PIXELCL_THREADS', 1)
        monkeypatch.setenv('PIXELCL_THREADS', '0')
        with pytest.raises(ConfigError):
            get_env_int('PIXELCL_THREADS', 1)


@pytest.mark.unit
class TestDocuments:

    def test_unknown_keys_rejected(self):
        """Documents refuse keys they do not know, listing the field"""
        with pytest.raises(ConfigError, match='temprature'):
            parse_config({'temprature': 0.1}, StageConfig)

    def test_aliases(self):
        """Short names T and R are accepted"""
        cfg = parse_config({'T': 0.4, 'R': 32}, StageConfig)
        assert cfg.temperature == 0.4 and cfg.negatives == 32

    def test_scene_ranges(self):
        """Inverted ranges are invalid"""
        with pytest.raises(ConfigError):
            parse_config({'min_instances': 5, 'max_instances': 2}, SceneConfig)
        with pytest.raises(ConfigError):
            parse_config({'min_size': 30, 'max_size': 20}, SceneConfig)

    def test_lab_grids(self):
        """Probabilities stay in [0, 1] and step sizes non-negative"""
        with pytest.raises(ConfigError):
            parse_config({'p_grid': [1.5]}, LabConfig)
        with pytest.raises(ConfigError):
            parse_config({'lambda_grid': [-0.1]}, LabConfig)

    def test_stage_steps(self):
        """Steps default to the full-scale schedule divided down; refinement follows distillation"""
        plan = RunPlan(step_divisor=100)
        assert plan.stage_steps('distill') == FULL_SCALE_SCHEDULE['distill'] // 100
        assert plan.stage_steps('refine') == plan.stage_steps('distill') // 10
        assert plan.stage_steps('teacher_finetune') == 10

    def test_defaults_follow_recipe(self):
        """Student stages clip gradients; refinement runs without extra terms"""
        plan = RunPlan()
        assert plan.distill.optim.grad_clip == 1.0
        assert plan.refine.objective.lambda_semi == 0.0 and plan.refine.objective.lambda_pxl == 0.0
        assert plan.teacher_finetune.objective.lambda_semi == 0.0
        assert plan.distill.objective.sampler == 'fusion'

    def test_load_config_errors(self, tmp_path):
        """Missing files and broken JSON are config errors"""
        with pytest.raises(ConfigError, match='not found'):
            load_config(str(tmp_path / 'absent.json'), RunPlan)
        broken = tmp_path / 'broken.json'
        broken.write_text('{')
        with pytest.raises(ConfigError, match='invalid JSON'):
            load_config(str(broken), RunPlan)

    def test_load_config(self, tmp_path):
        """Valid files load into the model"""
        path = tmp_path / 'lab.json'
        path.write_text(json.dumps({'D': 8, 'trials': 10}))
        cfg = load_config(str(path), LabConfig)
        assert cfg.D == 8 and cfg.trials == 10 and cfg.R == 16
