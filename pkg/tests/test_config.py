import pytest
import yaml

from maskood.config import ExperimentConfig, load_config, parse_config, toy_config
from maskood.errors import ValidationError


def test_toy_config_roundtrip():
    cfg = toy_config("data")
    again = parse_config(cfg.dumps())
    assert again == cfg
    assert parse_config(again.dumps()).dumps() == cfg.dumps()


def test_load_resolves_relative_to_file(tmp_path):
    cfg = toy_config(".")
    path = cfg.save(tmp_path / "sub" / "config.yaml")
    loaded = load_config(path)
    assert loaded.resolve("toy_ind.mdc") == tmp_path / "sub" / "toy_ind.mdc"
    assert loaded.out_path == tmp_path / "sub" / "runs"
    with pytest.raises(ValidationError, match="data.in_d.root"):
        loaded.validate_paths()


def test_missing_config_file(tmp_path):
    with pytest.raises(ValidationError):
        load_config(tmp_path / "none.yaml")


def _raw():
    return toy_config(".").to_dict()


@pytest.mark.parametrize(
    "mutate, field",
    [
        (lambda d: d.update(bogus=1), "bogus"),
        (lambda d: d["data"].pop("in_d"), "data.in_d"),
        (lambda d: d["generator"]["train"].update(learning_rate=-1), "generator.train"),
        (lambda d: d["generator"]["train"].update(seed=3), "generator.train"),
        (lambda d: d["cb"]["train"].update(batch_size=0), "cb.train"),
        (lambda d: d["data"]["in_d"].update(class_count=0), "data.in_d"),
        (lambda d: d.update(seed=-2), "seed"),
        (lambda d: d["mask"].update(style="zigzag"), "mask"),
        (lambda d: d["cascade"].update(scorers=[]), "cascade"),
        (lambda d: d["generator"]["model"].update(depth=3), "generator.model"),
    ],
)
def test_field_level_errors(mutate, field):
    d = _raw()
    mutate(d)
    with pytest.raises(ValidationError, match=field.replace(".", r"\.")):
        ExperimentConfig.from_dict(d)


def test_not_a_mapping(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("- 1\n- 2\n")
    with pytest.raises(ValidationError):
        load_config(p)
    p.write_text("a: [\n")
    with pytest.raises(ValidationError):
        load_config(p)


def test_seed_is_not_read_from_train_sections():
    d = _raw()
    assert "seed" not in d["generator"]["train"] and "mask_spec" not in d["cb"]["train"]
    yaml.safe_dump(d)
