import pytest

from mmspeaker.config import (
    SEED_ENV_VAR,
    RunConfig,
    canonical_json,
    config_hash,
    load_run_config,
    parse_run_config,
)
from mmspeaker.errors import ConfigError


def test_default_settings():
    cfg = parse_run_config({}, environ={})
    assert cfg.train.learning_rate == 0.0002
    assert (cfg.train.loss.alpha, cfg.train.loss.margin, cfg.train.loss.scale) == (0.1, 0.2, 30.0)
    assert (cfg.train.loss.mu, cfg.train.loss.beta, cfg.train.loss.tau, cfg.train.loss.gamma) == (0.8, 0.1, 0.1, 10.0)
    assert cfg.corpus.n_train_speakers == 64 and cfg.corpus.n_heldout_speakers == 16
    assert cfg.eval.p_target == 0.01


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="stepz"):
        parse_run_config({"train": {"stepz": 3}}, environ={})
    with pytest.raises(ConfigError, match="colour"):
        parse_run_config({"colour": "blue"}, environ={})


def test_invalid_values_are_rejected():
    with pytest.raises(ConfigError):
        parse_run_config({"train": {"loss": {"mu": 1.5}}}, environ={})
    with pytest.raises(ConfigError):
        parse_run_config({"eval": {"enroll_modality": "text"}}, environ={})


def test_speech_reference_protocol_is_allowed():
    cfg = parse_run_config({"eval": {"enroll_modality": "speech", "test_modality": "speech"}}, environ={})
    assert cfg.eval.enroll_modality == cfg.eval.test_modality == "speech"
    assert RunConfig().eval.reference_speech


def test_seed_from_environment():
    cfg = parse_run_config({"corpus": {"seed": 2}}, environ={SEED_ENV_VAR: "5"})
    assert cfg.seed == 5
    assert cfg.corpus_config().seed == 7
    assert cfg.train_config().seed == 5


def test_seed_set_twice_is_rejected():
    with pytest.raises(ConfigError):
        parse_run_config({"seed": 1}, environ={SEED_ENV_VAR: "5"})
    with pytest.raises(ConfigError):
        parse_run_config({}, environ={SEED_ENV_VAR: "five"})


def test_load_yaml(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("seed: 3\ntrain:\n  steps: 10\n  hidden: [8, 8]\n")
    cfg = load_run_config(str(path), environ={})
    assert cfg.seed == 3
    assert cfg.train.steps == 10 and cfg.train.hidden == [8, 8]


def test_empty_yaml_means_defaults(tmp_path):
    path = tmp_path / "empty.yaml"
    path.write_text("")
    assert load_run_config(str(path), environ={}) == RunConfig()
    assert load_run_config(None, environ={}) == RunConfig()


def test_malformed_yaml(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("train: [1,\n")
    with pytest.raises(ConfigError):
        load_run_config(str(path), environ={})
    path.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_run_config(str(path), environ={})


def test_config_hash_is_stable():
    a = parse_run_config({"train": {"steps": 10}}, environ={})
    b = parse_run_config({"train": {"steps": 10}}, environ={})
    assert config_hash(a) == config_hash(b)
    assert canonical_json(a) == canonical_json(b)
    assert config_hash(a) != config_hash(parse_run_config({"train": {"steps": 11}}, environ={}))
