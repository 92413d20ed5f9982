import json

import pytest

from homophily_lab.config import ConfigValidationError, RunConfig
from homophily_lab.model import HomophilyMode


def test_empty_document_gives_defaults():
    cfg = RunConfig.from_dict({})
    assert cfg == RunConfig()
    assert cfg.model_params().c_far == 0.25
    assert len(cfg.networks()) == 57
    assert sum(n.n_students for n in cfg.networks()) == 5016
    assert cfg.seeds == (0,)
    assert cfg.homophily_mode is HomophilyMode.LEARNING


def test_roundtrip_and_hash(tmp_path):
    cfg = RunConfig.from_dict({"seed": 7, "n_seeds": 3, "mode": "preference",
                               "population": {"n_schools": 2, "students_per_network": 20},
                               "model": {"c_near": 0.05}})
    again = RunConfig.from_dict(cfg.to_dict())
    assert again == cfg and again.config_hash() == cfg.config_hash()
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    assert RunConfig.load(path) == cfg
    assert cfg.seeds == (7, 8, 9)
    assert cfg.override(seed=8).config_hash() != cfg.config_hash()
    assert cfg.override(seed=None) == cfg
    # key order in the document does not matter
    shuffled = dict(reversed(list(cfg.to_dict().items())))
    assert RunConfig.from_dict(shuffled).config_hash() == cfg.config_hash()


def test_explicit_networks():
    cfg = RunConfig.from_dict({"population": {"networks": [{"school": 1, "grade": 2, "n_students": 12}]}})
    nets = cfg.networks()
    assert len(nets) == 1 and nets[0].n_students == 12
    assert cfg.sim_config(3, replication=2).seed == 3


@pytest.mark.parametrize("doc, where", [
    ({"unknown": 1}, "<root>"),
    ({"model": {"p0": 1.5}}, "model/p0"),
    ({"population": {"poor_share": -0.1}}, "population/poor_share"),
    ({"mode": "other"}, "mode"),
    ({"d_range": [1, 1]}, "d_range"),
    ({"dorm_pattern": [0]}, "dorm_pattern/0"),
    ({"seed": -1}, "seed"),
    ({"population": {"networks": [{"school": 1}]}}, "population/networks/0"),
])
def test_schema_errors_name_location(doc, where):
    with pytest.raises(ConfigValidationError, match=where):
        RunConfig.from_dict(doc)


def test_model_restrictions_surface_as_config_errors():
    with pytest.raises(ConfigValidationError, match="p0 > c_far"):
        RunConfig.from_dict({"model": {"p0": 0.2}})
    with pytest.raises(ConfigValidationError, match="increasing"):
        RunConfig.from_dict({"model": {"lambda_map": [2, 1, 3, 4]}})


def test_load_errors(tmp_path):
    with pytest.raises(ConfigValidationError, match="cannot read"):
        RunConfig.load(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigValidationError, match="line 1"):
        RunConfig.load(bad)


def test_to_json_is_canonical():
    text = RunConfig().to_json()
    assert json.loads(text) == RunConfig().to_dict()
    assert text.endswith("\n")
