import pytest

from cife.config import ConfigError, RunConfig, load_config, parse_config_text


def test_round_trip_covers_every_field(tmp_path):
    cfg = RunConfig().update({"learning_rate": "0.005", "freeze_unet": "false", "steps": "30", "characters": 4})
    path = tmp_path / "c.txt"
    cfg.write(path)
    again = load_config(path)
    assert again == cfg
    assert again.train.learning_rate == 0.005 and again.train.freeze_unet is False
    assert again.sampler.steps == 30 and again.dataset.characters == 4
    written = parse_config_text(path.read_text())
    assert set(written) == set(cfg.keys())


def test_comments_and_blank_lines(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("# header\n\nseed = 7  # trailing\n")
    assert load_config(path).train.seed == 7


@pytest.mark.parametrize("text", ["colour = red\n", "seed 3\n", "seed = x\n", "batch_size = 0\n",
                                  "freeze_vae = maybe\n"])
def test_bad_files_rejected(tmp_path, text):
    path = tmp_path / "c.txt"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_config(path)


def test_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv("CIFE_SEED", "11")
    assert load_config().train.seed == 11
    path = tmp_path / "c.txt"
    path.write_text("seed = 12\n")
    assert load_config(path).train.seed == 12
    assert load_config(path, overrides={"seed": 13}).train.seed == 13
    monkeypatch.setenv("CIFE_SEED", "eleven")
    with pytest.raises(ConfigError):
        load_config()
