import pytest

from dpc.config import ConfigError, RunConfig, parse_config


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text('lr0 = 0.1\nmanifest = "synthetic"\nepochs = 4\n')
    return path


def test_defaults_and_file_values(config_file):
    c = parse_config(config_file)
    assert c.lr0 == 0.1 and c.epochs == 4
    assert c.momentum == 0.9 and c.lr_step == 3 and c.lr_gamma == 0.9
    assert c.logit_scale == 1.0 and c.batch_size == 64


def test_override_beats_file(config_file):
    c = parse_config(config_file, ["lr0=0.01"])
    assert c.lr0 == 0.01
    assert parse_config(config_file, ["template=an image of [label word]"]).template == \
        "an image of [label word]"


def test_momentum_out_of_range_rejected(config_file):
    with pytest.raises(ConfigError, match="momentum"):
        parse_config(config_file, ["momentum=1.5"])


def test_all_problems_reported_together(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text('momentum = "high"\nbogus = 1\n')
    with pytest.raises(ConfigError) as info:
        parse_config(path)
    msg = str(info.value)
    assert "bogus" in msg and "lr0" in msg and "manifest" in msg and "momentum" in msg


def test_nested_tables_rejected(tmp_path):
    path = tmp_path / "nested.toml"
    path.write_text('lr0 = 0.1\nmanifest = "synthetic"\n[optim]\nmomentum = 0.9\n')
    with pytest.raises(ConfigError, match="optim"):
        parse_config(path)


def test_digest_ignores_key_order_and_locators(tmp_path):
    a = tmp_path / "a.toml"
    b = tmp_path / "b.toml"
    a.write_text('lr0 = 0.1\nmanifest = "synthetic"\nseed_data = 2\n')
    b.write_text('seed_data = 2\nout_dir = "elsewhere"\nmanifest = "synthetic"\nlr0 = 0.1\n')
    assert parse_config(a).digest() == parse_config(b).digest()
    assert len(parse_config(a).digest()) == 32
    assert parse_config(a, ["lr0=0.2"]).digest() != parse_config(a).digest()


def test_digest_tracks_manifest_contents(tmp_path):
    manifest = tmp_path / "m.txt"
    manifest.write_text("dpc-manifest v1\na.png,x,train\nb.png,y,test\n")
    cfg = tmp_path / "run.toml"
    cfg.write_text('lr0 = 0.1\nmanifest = "m.txt"\n')
    before = parse_config(cfg).digest()
    manifest.write_text("dpc-manifest v1\na.png,y,train\nb.png,x,test\n")
    assert parse_config(cfg).digest() != before


def test_shipped_config_parses():
    from pathlib import Path
    c = parse_config(Path(__file__).parents[1] / "configs" / "synthetic.toml")
    assert isinstance(c, RunConfig) and c.is_synthetic and c.lr0 == 0.1
