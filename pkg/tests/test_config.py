import pytest

from bigran.config import PipelineConfig, load_config, parse_config_text
from bigran.errors import ConfigError


def test_defaults_validate():
    cfg = PipelineConfig().validate()
    assert cfg.train_count(6000) == 5000
    assert cfg.int_list("bits_Ms") == [8, 16, 32, 64, 128]
    assert cfg.stage1().codebook_lr_scale == cfg.s1_codebook_lr_scale
    assert cfg.stage2().steps is None


def test_precedence(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nseed = 5\nM = 4  # trailing\n")
    cfg = load_config(p, {"seed": "9"})
    assert cfg.seed == 9 and cfg.M == 4


def test_dump_roundtrip(tmp_path):
    cfg = PipelineConfig(unify=True, s1_lr=1e-3)
    back = PipelineConfig().with_overrides(parse_config_text(cfg.dump()))
    assert back == cfg
    cfg.write(tmp_path)
    assert load_config(tmp_path / "config.resolved") == cfg


@pytest.mark.parametrize(
    "text",
    ["nope = 1", "seed 3", "seed = x", "unify = maybe", "M = 7", "strategy = bfs", "K = 2000", "ef_search = 10"],
)
def test_rejects_bad_config(tmp_path, text):
    p = tmp_path / "c.cfg"
    p.write_text(text + "\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_missing_file_propagates(tmp_path):
    with pytest.raises(OSError):
        load_config(tmp_path / "absent.cfg")


def test_bool_spellings():
    for v, want in [("true", True), ("1", True), ("off", False)]:
        assert PipelineConfig().with_overrides({"unify": v}).unify is want
