import json

import pytest

from src.cli import build_parser, main
from src.config import RunPlan, load_config
from src.synth import load_dataset


@pytest.fixture
def scene_config(tmp_path):
    path = tmp_path / 'scene.json'
    path.write_text(json.dumps({'height': 16, 'width': 16, 'min_instances': 1, 'max_instances': 2,
                                'num_classes': 2, 'min_size': 4, 'max_size': 6}))
    return str(path)


@pytest.mark.unit
class TestSynthCommand:

    def test_writes_dataset_and_manifest(self, tmp_path, scene_config):
        """synth writes the dataset and its manifest and exits 0"""
        out = tmp_path / 'data.pxds'
        code = main(['synth', '--scene-config', scene_config, '--scenes', '10', '--label-fraction', '0.2',
                     '--eval-scenes', '2', '--out', str(out), '--seed', '3', '--quiet'])
        assert code == 0
        dataset = load_dataset(str(out))
        assert len(dataset.labeled) == 2
        manifest = json.loads((tmp_path / 'data.pxds.manifest.json').read_text())
        assert manifest['n_unlabeled'] == 8
        assert manifest['config']['seed'] == 3

    @pytest.mark.parametrize('fraction', ['0', '1.5'])
    def test_bad_label_fraction(self, tmp_path, fraction):
        """Label fractions outside (0, 1] exit 2"""
        assert main(['synth', '--label-fraction', fraction, '--out', str(tmp_path / 'd.pxds')]) == 2

    def test_invalid_scene_config(self, tmp_path):
        """An invalid config file exits 2"""
        path = tmp_path / 'scene.json'
        path.write_text(json.dumps({'height': 4}))
        assert main(['synth', '--scene-config', str(path), '--out', str(tmp_path / 'd.pxds')]) == 2

    def test_impossible_scenes(self, tmp_path):
        """Scene generation that cannot pack the instances exits 3"""
        path = tmp_path / 'scene.json'
        path.write_text(json.dumps({'height': 16, 'width': 16, 'min_instances': 6, 'max_instances': 6,
                                    'min_size': 14, 'max_size': 16, 'shapes': ['rectangle'], 'max_retries': 2}))
        assert main(['synth', '--scene-config', str(path), '--scenes', '2', '--out', str(tmp_path / 'd.pxds')]) == 3


@pytest.mark.unit
class TestEvalCommand:

    def test_missing_checkpoint(self, tmp_path):
        """A missing checkpoint file exits 3"""
        code = main(['eval', '--checkpoint', str(tmp_path / 'none.pxcl'), '--dataset', str(tmp_path / 'd.pxds'),
                     '--out', str(tmp_path / 'm.json')])
        assert code == 3

    def test_teacher_source_without_teacher(self, tmp_path, small_params, small_dataset):
        """Teacher-driven sampling without --teacher-checkpoint exits 2"""
        from src.pipeline import Checkpoint, save_checkpoint
        from src.synth import save_dataset
        ckpt = save_checkpoint(str(tmp_path / 'c.pxcl'), Checkpoint(small_params))
        data = save_dataset(str(tmp_path / 'd.pxds'), small_dataset)
        code = main(['eval', '--checkpoint', ckpt, '--dataset', data, '--out', str(tmp_path / 'm.json'),
                     '--sampler-source', 'teacher', '--quiet'])
        assert code == 2

    def test_evaluates_saved_checkpoint(self, tmp_path, small_params, small_dataset):
        """eval writes AP and the requested sampler FNR"""
        from src.pipeline import Checkpoint, save_checkpoint
        from src.synth import save_dataset
        ckpt = save_checkpoint(str(tmp_path / 'c.pxcl'), Checkpoint(small_params))
        data = save_dataset(str(tmp_path / 'd.pxds'), small_dataset)
        code = main(['eval', '--checkpoint', ckpt, '--dataset', data, '--out', str(tmp_path / 'm.json'),
                     '--sampler', 'fusion', '--negatives', '4', '--quiet'])
        assert code == 0
        result = json.loads((tmp_path / 'm.json').read_text())
        assert list(result['fnr']) == ['fusion']
        assert result['objective']['R'] == 4


@pytest.mark.unit
class TestMarginLabCommand:

    def test_small_grid(self, tmp_path):
        """margin-lab writes the CSV and JSON summary"""
        config = tmp_path / 'lab.json'
        config.write_text(json.dumps({'D': 8, 'R': 4, 'p_grid': [0.5, 1.0], 'lambda_grid': [0.1, 0.2]}))
        code = main(['margin-lab', '--config', str(config), '--trials', '50', '--out', str(tmp_path / 'grid.csv'),
                     '--quiet'])
        assert code == 0
        assert len((tmp_path / 'grid.csv').read_text().splitlines()) == 5
        assert json.loads((tmp_path / 'grid.json').read_text())['config']['trials'] == 50

    def test_too_few_trials(self, tmp_path):
        """A single trial per cell exits 2"""
        assert main(['margin-lab', '--trials', '1', '--out', str(tmp_path / 'g.csv'), '--quiet']) == 2


@pytest.mark.unit
class TestRunCommand:

    def test_objective_flags_reach_stages(self, tmp_path, mocker, small_plan):
        """Objective flags override every stage; lambda_pxl reaches distillation only"""
        plan_path = tmp_path / 'plan.json'
        plan_path.write_text(small_plan.model_dump_json())
        run = mocker.patch('src.cli.run_plan', return_value=mocker.MagicMock(aggregate={}, out_dir=str(tmp_path)))
        code = main(['run', '--plan', str(plan_path), '--out', str(tmp_path / 'out'), '--sampler', 'uniform',
                     '--lambda-pxl', '0.4', '--seed', '9', '--quiet'])
        assert code == 0
        plan = run.call_args.args[0]
        assert isinstance(plan, RunPlan)
        assert plan.seeds == [9]
        assert plan.distill.objective.sampler == 'uniform'
        assert plan.distill.objective.lambda_pxl == 0.4
        assert plan.refine.objective.lambda_pxl == 0.0
        assert plan.teacher_finetune.objective.sampler == 'uniform'

    def test_teacher_sampler_source_flag(self, tmp_path, mocker, small_plan):
        """--sampler-source teacher switches distillation only"""
        plan_path = tmp_path / 'plan.json'
        plan_path.write_text(small_plan.model_dump_json())
        run = mocker.patch('src.cli.run_plan', return_value=mocker.MagicMock(aggregate={}, out_dir=str(tmp_path)))
        code = main(['run', '--plan', str(plan_path), '--out', str(tmp_path / 'out'), '--sampler-source', 'teacher',
                     '--quiet'])
        assert code == 0
        plan = run.call_args.args[0]
        assert plan.distill.objective.sampler_source == 'teacher'
        assert ([plan.stage_plan(s).objective.sampler_source for s in ('teacher_finetune', 'teacher_selftrain', 'refine')]
            == ['self', 'self', 'self'])

    def test_margin_and_bank_capacity_flags(self, tmp_path, mocker):
        """--margin and --bank-capacity reach the stage objectives"""
        args = build_parser().parse_args(['run', '--out', str(tmp_path), '--margin', '0.3', '--bank-capacity', '100'])
        assert args.margin == 0.3 and args.bank_capacity == 100
        run = mocker.patch('src.cli.run_plan', return_value=mocker.MagicMock(aggregate={}, out_dir=str(tmp_path)))
        assert main(['run', '--out', str(tmp_path), '--loss', 'hinge', '--margin', '0.3', '--scope', 'bank',
                     '--bank-capacity', '100', '--quiet']) == 0
        objective = run.call_args.args[0].distill.objective
        assert (objective.loss, objective.margin, objective.scope, objective.bank_capacity) == ('hinge', 0.3, 'bank', 100)

    def test_bad_bank_capacity(self, tmp_path):
        """A non-positive bank capacity exits 2"""
        assert main(['run', '--out', str(tmp_path), '--bank-capacity', '0', '--quiet']) == 2

    def test_ablate_applies_preset(self, tmp_path, mocker):
        """ablate forwards the preset's stage list"""
        run = mocker.patch('src.cli.run_plan', return_value=mocker.MagicMock(aggregate={}, out_dir=str(tmp_path)))
        assert main(['ablate', '--preset', 'distill-only', '--out', str(tmp_path), '--quiet']) == 0
        assert run.call_args.args[0].stages == ['distill']

    def test_missing_plan_file(self, tmp_path):
        """A missing plan file exits 2"""
        assert main(['run', '--plan', str(tmp_path / 'nope.json'), '--out', str(tmp_path)]) == 2

    def test_parser_requires_command(self):
        """A subcommand is required"""
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_plan_round_trip(self, tmp_path, small_plan):
        """Plans written as JSON load back through the config loader"""
        path = tmp_path / 'plan.json'
        path.write_text(small_plan.model_dump_json(by_alias=True))
        assert load_config(str(path), RunPlan) == small_plan
