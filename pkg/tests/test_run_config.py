from fractions import Fraction

import numpy as np
import pytest

from errors import ConfigError
from run_config import RunConfig


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / 'run.cfg'
    path.write_text('# experiment\ndim = 3\nwidth-scale = 1/8   # narrow\n\nruns = 2\n')
    return str(path)


def test_defaults():
    config = RunConfig.resolve(environ={})
    assert config == RunConfig()
    assert config.class_ids() == list(range(1, 13))
    assert config.budget_for() == 20000
    assert config.repetitions == 5
    assert config.selection == 'median'


def test_environment_values():
    config = RunConfig.resolve(environ={'LANDSCAPE_DIM': '5', 'LANDSCAPE_RESIZE': 'yes',
                                        'LANDSCAPE_BUDGET': 'none', 'OTHER_DIM': '9'})
    assert config.dim == 5
    assert config.resize is True
    assert config.budget is None


def test_precedence(config_file):
    environ = {'LANDSCAPE_DIM': '5', 'LANDSCAPE_EPOCHS': '4'}
    config = RunConfig.resolve({'dim': 7, 'seed': None}, config_path=config_file, environ=environ)
    assert config.dim == 7
    assert config.epochs == 4
    assert config.runs == 2
    assert RunConfig.resolve(config_path=config_file, environ=environ).dim == 3


def test_config_file_width_scale(config_file):
    config = RunConfig.resolve(config_path=config_file, environ={})
    assert config.width_scale == '1/8'
    assert config.arch_config(3).width_scale == Fraction(1, 8)


def test_decimal_width_scale_normalised():
    assert RunConfig.resolve({'width_scale': '0.125'}, environ={}).width_scale == '1/8'


@pytest.mark.parametrize('environ', [{'LANDSCAPE_DIM': 'two'}, {'LANDSCAPE_RESIZE': 'maybe'}])
def test_unreadable_environment(environ):
    with pytest.raises(ConfigError):
        RunConfig.resolve(environ=environ)


def test_unknown_file_key(tmp_path):
    path = tmp_path / 'bad.cfg'
    path.write_text('colour = blue\n')
    with pytest.raises(ConfigError):
        RunConfig.resolve(config_path=str(path), environ={})


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.resolve(config_path=str(tmp_path / 'absent.cfg'), environ={})


@pytest.mark.parametrize('overrides', [
    {'arch': 'c'}, {'precision': 2}, {'split': 'holdout'}, {'dim': 0}, {'runs': 0},
    {'width_scale': '2'}, {'classes': '30'}, {'classes': 'x,y'}, {'sample_mode': 'sobol'},
    {'selection': 'best-test'},
])
def test_invalid_values(overrides):
    with pytest.raises(ConfigError):
        RunConfig.resolve(overrides, environ={})


def test_class_list_and_derived_values():
    config = RunConfig.resolve({'classes': '1,3,4', 'budget': 500, 'precision': 4}, environ={})
    assert config.class_ids() == [1, 3, 4]
    assert config.budget_for(10) == 500
    assert config.dtype is np.float32


def test_dump(tmp_path):
    path = tmp_path / 'resolved_config.txt'
    RunConfig(dim=4).dump(str(path))
    lines = path.read_text().splitlines()
    assert 'dim = 4' in lines
    assert 'budget = ' in lines
    assert lines == sorted(lines)


def test_quoted_config_values(tmp_path):
    path = tmp_path / 'quoted.cfg'
    path.write_text('out = "my runs"\nmanifest = "data#1/manifest.tsv"  # labeled set\nselection = best-val\n')
    config = RunConfig.resolve(config_path=str(path), environ={})
    assert config.out == 'my runs'
    assert config.manifest == 'data#1/manifest.tsv'
    assert config.selection == 'best-val'


def test_config_line_without_value(tmp_path):
    path = tmp_path / 'bare.cfg'
    path.write_text('dim\n')
    with pytest.raises(ConfigError):
        RunConfig.resolve(config_path=str(path), environ={})
