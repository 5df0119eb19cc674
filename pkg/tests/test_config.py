import pytest

from distilrl.config import (
    ConfigError,
    RunConfig,
    config_from_dict,
    config_to_dict,
    dump_config,
    load_config,
    preset,
    save_config,
    with_overrides,
)
from distilrl.rewards import Constraint, ConstraintMode, ConstraintParseError


def test_defaults():
    cfg = RunConfig()
    assert (cfg.run.n1, cfg.run.n2, cfg.run.m) == (100, 100, 5)
    assert cfg.policy.lr_remove == 0.003
    assert cfg.policy.lr_shrink == 0.01
    assert cfg.policy.hidden_remove == 30 and cfg.policy.hidden_shrink == 50
    assert cfg.reward.mode == "None"
    assert cfg.eval.lam == 0.5
    assert not cfg.surrogate.enabled


def test_yaml_round_trip(tmp_path):
    cfg = with_overrides(RunConfig(), {
        'run.seed': 7,
        'reward.constraints': ['params<=20000', '1, 5e5'],
        'reward.mode': 'Annealed',
        'eval.train_limit': 1000,
        'policy.transfer_checkpoint': 'runs/a/stage1_policy.json',
    })
    path = tmp_path / "config.yaml"
    save_config(cfg, path)
    assert load_config(path) == cfg
    assert config_from_dict(config_to_dict(cfg)) == cfg


def test_missing_keys_take_defaults(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text("run:\n  n1: 3\nsurrogate:\n  enabled: true\n")
    cfg = load_config(path)
    assert cfg.run.n1 == 3 and cfg.run.n2 == 100
    assert cfg.surrogate.enabled


def test_empty_file_is_the_default(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text("")
    assert load_config(path) == RunConfig()


def test_yaml_exponent_strings_become_floats(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text("policy:\n  lr_remove: 3e-3\n")
    assert load_config(path).policy.lr_remove == 0.003


def test_single_constraint_string(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text("reward:\n  constraints: params<=20K\n  mode: Hard\n")
    cfg = load_config(path)
    assert cfg.reward.constraints == ('params<=20K',)
    assert cfg.constraint_rows() == (Constraint((1.0,), 20000.0),)


@pytest.mark.parametrize("text", [
    "run:\n  n3: 4\n",
    "runs:\n  n1: 4\n",
    "run: 4\n",
    "- run\n",
    "run:\n  n1: lots\n",
    "run:\n  verbose: 1\n",
    "run:\n  n1: 0\n",
    "run:\n  stages: '3'\n",
    "reward:\n  mode: Soft\n",
    "reward:\n  constraints: ['params<=10']\n",
    "eval:\n  val_fraction: 1.5\n",
    "run: {n1: [1\n",
])
def test_invalid_configs(tmp_path, text):
    path = tmp_path / "config.yaml"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_config(path)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")


def test_bad_constraint_text_is_a_parse_error():
    cfg = with_overrides(RunConfig(), {'reward.constraints': ['size<=3'],
                                       'reward.mode': 'Hard'})
    with pytest.raises(ConstraintParseError):
        cfg.constraint_rows()


def test_overrides_skip_none():
    cfg = with_overrides(RunConfig(), {'run.n1': None, 'run.m': 8})
    assert cfg.run.n1 == 100 and cfg.run.m == 8
    with pytest.raises(ConfigError):
        with_overrides(RunConfig(), {'run.nope': 1})
    with pytest.raises(ConfigError):
        with_overrides(RunConfig(), {'nope.n1': 1})


def test_presets():
    desk = preset('desk')
    assert desk.run.n1 == desk.run.n2 == 30
    assert preset('default') == RunConfig()
    with pytest.raises(ConfigError):
        preset('huge')


def test_reward_config():
    cfg = with_overrides(RunConfig(), {'reward.constraints': ['params<=500'],
                                       'reward.mode': 'Annealed'})
    reward = cfg.reward_config(0.9, t_anneal=40)
    assert reward.mode is ConstraintMode.ANNEALED
    assert reward.t_anneal == 40
    assert reward.constraints == (Constraint((1.0,), 500.0),)
    fixed = with_overrides(cfg, {'reward.t_anneal': 5})
    assert fixed.reward_config(0.9, t_anneal=40).t_anneal == 5


def test_dump_lists_constraints():
    cfg = with_overrides(RunConfig(), {'reward.constraints': ['params<=500'],
                                       'reward.mode': 'Hard'})
    assert "- params<=500" in dump_config(cfg)
