"""INI run configuration: strict parsing, defaults, and environment overrides."""
import pytest

from coordsum.runconfig import (
    ENV_SEED,
    ENV_THREADS,
    ConfigError,
    help_text,
    parse_runconfig,
    thread_limit_from_env,
)


def write(tmp_path, text):
    p = tmp_path / "run.ini"
    p.write_text(text)
    return p


def test_defaults_when_no_file():
    cfg = parse_runconfig(None)
    assert cfg.seed == 0
    assert cfg.train.label_smoothing == 0.1
    assert cfg.train.length_alpha == 2.0
    assert cfg.task.n_keywords == 12
    assert cfg.run["brio_mode"] == "mul"
    assert cfg.data_sizes == {"n_train": 2000, "n_valid": 200, "n_test": 200}


def test_missing_file_raises_filenotfound(tmp_path):
    with pytest.raises(FileNotFoundError):
        parse_runconfig(tmp_path / "absent.ini")


def test_sections_parse_and_resolve(tmp_path):
    p = write(tmp_path, """
[task]
n_keywords = 9
p_keyword = 0.25

[model]
embed_dim = 32
n_heads = 4

[train]
epochs = 7
gamma = 2.5
tie_tolerance = 0.05

[beam]
beam_width = 12
n_candidates = 6

[run]
seed = 42
sweep_gammas = 0,0.5,1

[paths]
out_dir = somewhere
""")
    cfg = parse_runconfig(p)
    assert cfg.seed == 42
    assert cfg.task.n_keywords == 9 and cfg.task.p_keyword == 0.25
    assert cfg.train.epochs == 7 and cfg.train.gamma == 2.5
    assert cfg.train.tie_tolerance == 0.05
    assert cfg.train.beam.beam_width == 12 and cfg.train.beam.n_candidates == 6
    assert cfg.run["sweep_gammas"] == (0.0, 0.5, 1.0)
    assert cfg.paths["out_dir"] == "somewhere"
    # resolved form renders every key explicitly
    assert cfg.resolved["train"]["gamma"] == "2.5"
    assert cfg.resolved["task"]["n_keywords"] == "9"
    assert cfg.resolved["run"]["sweep_gammas"] == "0.0,0.5,1.0"


def test_model_config_vocab_resolution(tmp_path):
    p = write(tmp_path, "[model]\nembed_dim = 16\nn_heads = 2\n")
    cfg = parse_runconfig(p)
    mc = cfg.model_config(64)
    assert mc.vocab_size == 64 and mc.embed_dim == 16
    p2 = write(tmp_path, "[model]\nvocab_size = 80\nembed_dim = 16\nn_heads = 2\n")
    assert parse_runconfig(p2).model_config(64).vocab_size == 80


def test_unknown_section_and_key_are_errors(tmp_path):
    with pytest.raises(ConfigError):
        parse_runconfig(write(tmp_path, "[mystery]\nx = 1\n"))
    with pytest.raises(ConfigError):
        parse_runconfig(write(tmp_path, "[train]\nnot_a_key = 1\n"))


def test_bad_values_are_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        parse_runconfig(write(tmp_path, "[train]\nepochs = many\n"))
    with pytest.raises(ConfigError):
        parse_runconfig(write(tmp_path, "[train]\nepochs = -3\n"))  # dataclass validation
    with pytest.raises(ConfigError):
        parse_runconfig(write(tmp_path, "[task]\np_keyword = 1.5\n"))
    with pytest.raises(ConfigError):
        parse_runconfig(write(tmp_path, "not ini at all"))


def test_path_accessor_requires_value(tmp_path):
    cfg = parse_runconfig(write(tmp_path, "[paths]\nvocab = v.txt\n"))
    assert str(cfg.path("vocab")) == "v.txt"
    with pytest.raises(ConfigError):
        cfg.path("checkpoint")


def test_env_seed_override(tmp_path, monkeypatch):
    p = write(tmp_path, "[run]\nseed = 5\n")
    monkeypatch.setenv(ENV_SEED, "99")
    cfg = parse_runconfig(p)
    assert cfg.seed == 99
    assert cfg.train.seed == 99
    assert cfg.resolved["run"]["seed"] == "99"
    monkeypatch.setenv(ENV_SEED, "not-int")
    with pytest.raises(ConfigError):
        parse_runconfig(p)


def test_thread_limit_env(monkeypatch):
    monkeypatch.delenv(ENV_THREADS, raising=False)
    assert thread_limit_from_env() is None
    monkeypatch.setenv(ENV_THREADS, "2")
    assert thread_limit_from_env() == 2
    monkeypatch.setenv(ENV_THREADS, "0")
    with pytest.raises(ConfigError):
        thread_limit_from_env()
    monkeypatch.setenv(ENV_THREADS, "lots")
    with pytest.raises(ConfigError):
        thread_limit_from_env()


def test_boolean_parsing(tmp_path):
    cfg = parse_runconfig(write(tmp_path, "[task]\nparaphrase = yes\n"))
    assert cfg.task.paraphrase is True
    cfg = parse_runconfig(write(tmp_path, "[task]\nparaphrase = off\n"))
    assert cfg.task.paraphrase is False
    with pytest.raises(ConfigError):
        parse_runconfig(write(tmp_path, "[task]\nparaphrase = maybe\n"))


def test_help_text_covers_every_section():
    text = help_text()
    for section in ("[task]", "[model]", "[train]", "[beam]", "[data]", "[run]", "[paths]"):
        assert section in text
    assert "tie_tolerance" in text
    assert ENV_SEED in text
