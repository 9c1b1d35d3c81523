import pytest
from hypothesis import given, settings, strategies as st

from cjepa import config
from cjepa.errors import ConfigError
from cjepa.trainer import TrainConfig


def test_empty_config_is_defaults():
    assert config.parse("") == TrainConfig()


def test_sections_and_overrides():
    text = """
[model]
embed_dim = 16
[vicreg]
beta_vicreg = 0.01
[run]
stop_grad = false
"""
    cfg = config.parse(text, ["vicreg.beta_vicreg=0", "schedules.epochs=5"])
    assert cfg.model.embed_dim == 16
    assert cfg.vicreg.beta_vicreg == 0.0
    assert cfg.run.stop_grad is False
    assert cfg.schedules.epochs == 5


def test_data_grid_follows_masking():
    cfg = config.parse("[masking]\ngrid_h = 6\ngrid_w = 5\n[model]\npatch_dim = 27\n")
    assert (cfg.data.grid_h, cfg.data.grid_w, cfg.data.patch_dim) == (6, 5, 27)


@pytest.mark.parametrize(
    "text, overrides",
    [
        ("[vicreg]\nbeta_sin = 25\n", []),
        ("[optimizer]\nlr = 1\n", []),
        ("[data]\ngrid_h = 8\n", []),
        ("[model]\nembed_dim = many\n", []),
        ("[run]\nstop_grad = maybe\n", []),
        ("", ["vicreg.beta_vicreg"]),
        ("", ["beta_vicreg=0"]),
        ("", ["schedules.warmup_epochs=30"]),
        ("", ["vicreg.gamma=0"]),
        ("[model\n", []),
    ],
)
def test_rejects_bad_input(text, overrides):
    with pytest.raises(ConfigError):
        config.parse(text, overrides)


def test_round_trip_defaults_and_file(tmp_path):
    cfg = config.parse("", ["vicreg.beta_vicreg=0.1", "run.wiring=encoder", "model.predictor=linear"])
    text = config.dumps(cfg)
    assert config.parse(text) == cfg
    assert config.dumps(config.parse(text)) == text
    path = tmp_path / "run.ini"
    path.write_text(text)
    assert config.load(path) == cfg


@settings(max_examples=40, deadline=None)
@given(
    st.floats(0, 1, allow_nan=False),
    st.floats(1e-9, 10, allow_nan=False),
    st.integers(1, 64),
    st.booleans(),
    st.integers(0, 2**31),
)
def test_round_trip_property(beta, eps, dim, stop_grad, seed):
    cfg = config.parse(
        "",
        [
            f"vicreg.beta_vicreg={beta!r}",
            f"vicreg.epsilon={eps!r}",
            f"model.embed_dim={dim}",
            f"run.stop_grad={stop_grad}",
            f"run.seed={seed}",
        ],
    )
    assert config.parse(config.dumps(cfg)) == cfg
