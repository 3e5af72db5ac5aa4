import pytest
from hypothesis import given
from hypothesis import strategies as st

from apodistill.config import PipelineConfig, dump_config, from_dict, load_config
from apodistill.errors import ConfigError


def test_defaults_validate():
    cfg = load_config()
    assert cfg.ensemble.teachers == 5 and cfg.apo.beta == 0.1
    assert "run_dir" not in cfg.snapshot() and "threads" not in cfg.snapshot()


def test_yaml_round_trip(tmp_path):
    cfg = from_dict({"seed": 3, "apo": {"beta": 0.5, "weights": "drift"}, "corpus": {"rounds": 2}, "ensemble": {"temperatures": [0.5, 1, 2], "teachers": 3}})
    p = tmp_path / "c.yaml"
    p.write_text(dump_config(cfg))
    assert load_config(p) == cfg
    assert cfg.ensemble.temperatures == [0.5, 1.0, 2.0]


@pytest.mark.parametrize(
    "data, path",
    [
        ({"apo": {"betta": 1}}, "apo.betta"),
        ({"nope": 1}, "nope"),
        ({"apo": {"beta": "x"}}, "apo.beta"),
        ({"apo": {"beta": -1}}, "apo.beta"),
        ({"ensemble": {"teachers": 0}}, "ensemble.teachers"),
        ({"ensemble": {"teachers": 2.5}}, "ensemble.teachers"),
        ({"apo": {"length_normalize": 1}}, "apo.length_normalize"),
        ({"spd": {"subsample_fraction": 0}}, "spd.subsample_fraction"),
        ({"drift": {"correction": "holm"}}, "drift.correction"),
        ({"ensemble": {"teachers": 2, "temperatures": [1, 1, 1]}}, "ensemble.temperatures"),
        ({"corpus": 3}, "corpus"),
        ({"seed": -1}, "seed"),
        ({"apo": {"weights": "drift"}}, "apo.weights"),
    ],
)
def test_errors_name_the_field(data, path):
    with pytest.raises(ConfigError) as info:
        from_dict(data)
    assert str(info.value).startswith(path + ":")


def test_bad_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    p = tmp_path / "bad.yaml"
    p.write_text("apo: [unclosed")
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text("")
    assert load_config(p) == PipelineConfig()


def test_override():
    cfg = PipelineConfig()
    cfg.override("apo.lr", 3.0)
    assert cfg.apo.lr == 3.0
    with pytest.raises(ConfigError):
        cfg.override("apo.rate", 1)


@given(st.integers(0, 2**31), st.floats(0.01, 10), st.integers(1, 8))
def test_dump_load_property(seed, beta, teachers):
    cfg = from_dict({"seed": seed, "apo": {"beta": beta}, "ensemble": {"teachers": teachers}})
    import yaml

    assert from_dict(yaml.safe_load(dump_config(cfg))) == cfg
