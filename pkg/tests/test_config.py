import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forgelab import thread_limit
from forgelab.config import RunConfig, load_config, parse_config
from forgelab.world import ConfigError


def test_defaults_validate_and_derive():
    cfg = load_config(None)
    assert cfg.seed == 42 and cfg.run.count == 512
    assert cfg.train_config().seed == cfg.stage_config().seed == cfg.baseline_config("npo").seed == 42
    assert cfg.baseline_config("npo").method == "npo"
    assert cfg.policy_config().world == cfg.world
    assert cfg.request().value == "red"


def test_ini_roundtrip():
    cfg = RunConfig()
    cfg = dataclasses.replace(cfg, unlearn=dataclasses.replace(cfg.unlearn, lr=1e-3, k_l=2))
    back = parse_config(cfg.to_ini())
    assert back == cfg and back.config_hash() == cfg.config_hash()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), count=st.integers(1, 2000), lr=st.floats(1e-6, 1e-1))
def test_ini_roundtrip_property(seed, count, lr):
    cfg = parse_config(f"[run]\nseed = {seed}\ncount = {count}\n[baseline]\nlr = {lr!r}\n")
    assert parse_config(cfg.to_ini()) == cfg


def test_hashes_track_the_right_sections():
    a = RunConfig()
    b = dataclasses.replace(a, train=dataclasses.replace(a.train, epochs=3))
    c = a.with_seed(7)
    assert a.data_hash() == b.data_hash() and a.config_hash() != b.config_hash()
    assert a.data_hash() != c.data_hash()
    assert len(a.config_hash()) == 16


@pytest.mark.parametrize("text, match", [
    ("[run]\nbogus = 1\n", "unknown key"),
    ("[extras]\nx = 1\n", "unknown sections"),
    ("[run]\ncount = 0\n", "count"),
    ("[run]\ncount = many\n", "cannot parse"),
    ("[run]\nforget_color = purple\n", "forget_color"),
    ("[train]\nseed = 3\n", "unknown key"),
    ("[unlearn]\nlambda_f = -1\n", "lambda_f"),
    ("[policy]\nd_model = 30\n", "divisible|d_model"),
    ("[run\n", None),
])
def test_bad_configs_raise(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_optional_and_tuple_values():
    cfg = parse_config("[baseline]\nretain_weight = none\n[world]\ncolors = red, blue, green, yellow\n")
    assert cfg.baseline.retain_weight is None
    assert cfg.world.colors == ("red", "blue", "green", "yellow")
    assert parse_config("[baseline]\nretain_weight = 0.5\n").baseline.retain_weight == 0.5


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.ini")


def test_thread_limit_env(monkeypatch):
    monkeypatch.delenv("FORGELAB_THREADS", raising=False)
    assert thread_limit() is None
    monkeypatch.setenv("FORGELAB_THREADS", "2")
    assert thread_limit() == 2
    monkeypatch.setenv("FORGELAB_THREADS", "zero")
    with pytest.raises(ConfigError):
        thread_limit()
