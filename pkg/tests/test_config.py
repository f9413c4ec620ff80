import pytest

from hfgnn.config import ExperimentConfig, config_keys, emit_config, parse_config, parse_text
from hfgnn.errors import ConfigError


def test_empty_config_gives_defaults():
    cfg = parse_text("# nothing but a comment\n\n")
    assert cfg == ExperimentConfig()
    assert cfg.round.strategy == "hfgnn"
    assert cfg.round.propagation_depth == 2
    assert cfg.round.temperature == 0.5 and cfg.round.self_floor == 0.1
    assert cfg.data.alpha == 0.3 and cfg.data.feature_noise == 0.5
    assert cfg.train.optimizer == "adam" and cfg.train.weight_decay == 5e-4


def test_reference_hyperparameters_accepted():
    cfg = parse_text(
        """
        train.prox_coefficient = 0.1
        train.learning_rate = 0.0004
        train.batch_size = 32
        train.local_epochs = 1   # one pass per round
        round.strategy = fedprox
        """
    )
    t = cfg.train
    assert (t.prox_coefficient, t.learning_rate, t.batch_size, t.local_epochs) == (0.1, 0.0004, 32, 1)
    assert cfg.round.strategy == "fedprox"


def test_negative_learning_rate_names_key_and_line():
    with pytest.raises(ConfigError) as err:
        parse_text("seed = 3\ntrain.learning_rate = -0.01\n")
    assert err.value.key == "train.learning_rate"
    assert err.value.line == 2
    assert "train.learning_rate" in str(err.value)


@pytest.mark.parametrize(
    "text,key",
    [
        ("round.strategy = fedsgd", "round.strategy"),
        ("round.num_rounds = 2.5", "round.num_rounds"),
        ("data.alpha = 0", "data.alpha"),
        ("round.self_floor = 1.5", "round.self_floor"),
        ("data.num_clients = 3\nround.clients_per_round = 4", "round.clients_per_round"),
        ("hmm.enabled = yes", "hmm.enabled"),
        ("nonsense.key = 1", "nonsense.key"),
        ("seed = 1\nseed = 2", "seed"),
    ],
)
def test_invalid_values(text, key):
    with pytest.raises(ConfigError) as err:
        parse_text(text)
    assert err.value.key == key


def test_missing_equals():
    with pytest.raises(ConfigError) as err:
        parse_text("seed 4")
    assert err.value.line == 1


def test_bad_hmm_matrix():
    with pytest.raises(ConfigError):
        parse_text("hmm.enabled = true\nhmm.initial = [0.5, 0.6, 0.1]")


def test_values_and_comments():
    cfg = parse_text(
        'data.block_sizes = [30, 30]  # two blocks\n'
        'data.client_names = ["a#1", "b"]\n'
        "data.num_clients = 2\n"
        "round.clients_per_round = 2\n"
        "data.feature_dim = 8\n"
        "hmm.enabled = true\n"
        "hmm.transition = [[0.9, 0.05, 0.05], [0.1, 0.8, 0.1], [0.2, 0.2, 0.6]]\n"
    )
    assert cfg.data.block_sizes == (30, 30)
    assert cfg.data.client_names == ("a#1", "b")
    assert cfg.hmm.model().transition[2, 2] == 0.6


def test_round_trip_is_idempotent(tmp_path):
    src = tmp_path / "a.cfg"
    src.write_text("round.strategy = fedavg\ntrain.learning_rate = 0.0004\nhmm.enabled = true\n")
    resolved = tmp_path / "resolved.cfg"
    cfg = parse_config(src, resolved_out=resolved)
    again = parse_config(resolved)
    assert emit_config(again) == resolved.read_text()
    assert again.round == cfg.round and again.data == cfg.data
    # every schema key appears exactly once
    keys = [line.split(" = ")[0] for line in resolved.read_text().splitlines()]
    assert keys == config_keys()


def test_unreadable_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "missing.cfg")
