import pytest

from scfs.config import TrainConfig, format_config, load_config, override, parse_config_text


def test_text_round_trip():
    cfg = TrainConfig(layers=("res3",), use_fs=False, tau=0.2, widths=(8, 16))
    assert parse_config_text(format_config(cfg)) == cfg


def test_comments_and_dashes(tmp_path):
    (tmp_path / "c").write_text("# smoke\nbatch-size = 32  # half\nlayers = res2,res4\n")
    cfg = load_config(tmp_path / "c")
    assert cfg.batch_size == 32 and cfg.layers == ("res2", "res4")


@pytest.mark.parametrize("text", ["nope = 3", "batch_size 3", "use_fs = maybe"])
def test_bad_lines(text):
    with pytest.raises(ValueError):
        parse_config_text(text)


def test_override_parses_strings():
    cfg = override(TrainConfig(), layers="res2,res3", epochs=None, seed=4)
    assert cfg.layers == ("res2", "res3") and cfg.epochs == 15 and cfg.seed == 4


def test_linear_scaling_rule():
    assert TrainConfig(batch_size=64).lr == 0.025
    assert TrainConfig(base_lr=0.3).lr == 0.3


@pytest.mark.parametrize("changes", [dict(layers=("res7",)), dict(batch_size=0), dict(attention="dot"),
                                     dict(ema_momentum=1.5), dict(layers=())])
def test_validation(changes):
    with pytest.raises(ValueError):
        TrainConfig(**changes).validate()


def test_empty_layers_allowed_without_search():
    TrainConfig(layers=(), use_fs=False).validate()
