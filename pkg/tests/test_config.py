from importlib import resources

import pytest
import yaml

from alignps.config import Config, ConfigError, config_from_dict, load_config, shipped_config


def test_default_config_carries_published_schedule():
    text = resources.files("alignps").joinpath("configs", "default.yaml").read_text()
    raw = yaml.safe_load(text)["train"]
    assert raw["base_lr"] == 0.001
    assert raw["lr_steps"] == [16, 22]
    assert raw["total_epochs"] == 24
    assert raw["warmup_steps"] == 300
    assert raw["batch_size"] == 4
    assert raw["weight_decay"] == 0.0005
    assert raw["momentum"] == 0.9
    cfg = shipped_config("default")
    assert cfg.eval.gallery_size == 100
    assert cfg.data.profile.train_long_side == (667, 2000)
    assert cfg.data.profile.test_size == (1500, 900)
    assert (cfg.model.afa.lateral_kind, cfg.model.afa.fusion, cfg.model.afa.output_kind, cfg.model.afa.output_levels) == (
        "deform_3x3", "concat", "deform_3x3", "P3_only")
    assert cfg.model.task == "alignps"


def test_desk_profile_limits():
    cfg = shipped_config("desk")
    assert cfg.model.backbone.variant == "tiny"
    assert max(cfg.data.profile.train_long_side) <= 480
    assert cfg.data.synthetic.num_identities == 8
    assert (cfg.data.n_train, cfg.data.n_test) == (200, 50)


def test_round_trip(tmp_path):
    cfg = shipped_config("desk")
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(cfg.to_dict()))
    assert load_config(path) == cfg
    assert load_config(path).hash() == cfg.hash()


def test_missing_field_names_path():
    d = Config().to_dict()
    del d["train"]["warmup_steps"]
    with pytest.raises(ConfigError) as exc:
        config_from_dict(d)
    assert exc.value.path == "train.warmup_steps"


def test_unknown_field_names_path():
    d = Config().to_dict()
    d["model"]["afa"]["colour"] = 1
    with pytest.raises(ConfigError, match="model.afa.colour"):
        config_from_dict(d)


@pytest.mark.parametrize("key, value", [
    ("train.batch_size", "four"),
    ("train.lr_steps", [16, 30]),
    ("train.warmup_steps", -1),
    ("model.afa.fusion", "max"),
    ("model.task", "t9"),
    ("reid.temperature", None),
])
def test_invalid_values(key, value):
    d = Config().to_dict()
    sec, *rest = key.split(".")
    cur = d[sec]
    for r in rest[:-1]:
        cur = cur[r]
    cur[rest[-1]] = value
    with pytest.raises(ConfigError):
        config_from_dict(d)


def test_replace_and_hash():
    cfg = Config()
    other = cfg.replace(train__seed=3)
    assert other.train.seed == 3 and other.hash() != cfg.hash()
    assert cfg.replace(train__seed=0).hash() == cfg.hash()
