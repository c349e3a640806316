import pytest

from crossmodal.config import ConfigError, load_config, parse_config
from crossmodal.curriculum import MethodId, TrainConfig


def test_empty_sections_give_defaults():
    rc = parse_config('{"seed": 4, "data": {}, "train": {}, "eval": {}}')
    assert rc.seed == 4
    assert rc.data.seed == 4 and rc.train.seed == 4 and rc.eval.seed == 4
    assert rc.data.num_classes == 10 and len(rc.data.modalities) == 5
    default = TrainConfig()
    assert rc.train.lr == default.lr and rc.train.lambdas == default.lambdas
    assert rc.eval.num_queries is None
    assert rc.workdir is None


def test_partial_lambdas_merge():
    rc = parse_config('{"seed": 0, "train": {"lambdas": {"join": 0.5}}}')
    default = TrainConfig().lambdas
    assert rc.train.lambdas["join"] == 0.5
    assert rc.train.lambdas["shared1"] == default["shared1"]
    assert rc.train.lambdas["shared2"] == default["shared2"]


def test_duplicate_key():
    with pytest.raises(ConfigError, match="duplicate key 'lr'"):
        parse_config('{"seed": 0, "train": {"lr": 0.1, "lr": 0.2}}')


@pytest.mark.parametrize("text, where", [
    ('{"seed": 0, "bogus": 1}', "bogus"),
    ('{"seed": 0, "train": {"lrate": 1}}', "train.lrate"),
    ('{"seed": 0, "train": {"lambdas": {"logits": 1}}}', "train.lambdas.logits"),
    ('{"seed": 0, "data": {"modalities": [{"name": "a", "input_dim": 3, "colour": 1}]}}', "colour"),
])
def test_unknown_keys(text, where):
    with pytest.raises(ConfigError, match=where):
        parse_config(text)


def test_seed_required():
    with pytest.raises(ConfigError, match="seed"):
        parse_config('{"train": {}}')


def test_seed_override_and_section_seed():
    rc = parse_config('{"seed": 1, "train": {"seed": 9}}')
    assert rc.train.seed == 9 and rc.data.seed == 1
    rc = parse_config('{"seed": 1, "train": {"seed": 9}}', seed_override=5)
    assert rc.train.seed == 5 and rc.data.seed == 5 and rc.eval.seed == 5


@pytest.mark.parametrize("text", [
    '{"seed": "zero"}',
    '{"seed": 0, "train": {"lr": "fast"}}',
    '{"seed": 0, "train": {"batch_size": 2.5}}',
    '{"seed": 0, "train": {"method": "d"}}',
    '{"seed": 0, "train": {"lr": -1}}',
    '{"seed": 0, "train": {"source_modality": "xyz"}}',
    '{"seed": 0, "eval": {"layers": ["logits"]}}',
    '{"seed": 0, "eval": {"num_queries": 0}}',
    '{"seed": 0, "data": {"num_classes": 1}}',
    '{"seed": 0, "train": []}',
    '[1, 2]',
    '{"seed": 0,',
])
def test_invalid(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_values_parsed():
    rc = parse_config('{"seed": 0, "train": {"method": "b-gmm", "shared_dims": [4, 4]},'
                      ' "eval": {"num_queries": 50, "layers": ["join"]}, "paths": {"workdir": "w"}}')
    assert rc.train.method is MethodId.B_GMM and rc.train.shared_dims == (4, 4)
    assert rc.eval.num_queries == 50 and rc.eval.layers == ("join",)
    assert str(rc.workdir) == "w"


def test_load_missing_file(tmp_path):
    path = tmp_path / "nope.json"
    with pytest.raises(ConfigError, match="nope.json"):
        load_config(path)


def test_shipped_configs_parse():
    from pathlib import Path
    root = Path(__file__).resolve().parents[1] / "configs"
    for p in sorted(root.glob("*.json")):
        load_config(p)
