import json

import pytest

from planesplat.config import ConfigError, PipelineConfig, from_dict, load_config


def write(tmp_path, obj):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(obj) if not isinstance(obj, str) else obj)
    return p


def test_defaults_round_trip(tmp_path):
    cfg = load_config()
    again = load_config(write(tmp_path, cfg.to_dict()))
    assert again.to_dict() == cfg.to_dict()


def test_partial_config_keeps_other_defaults(tmp_path):
    cfg = load_config(write(tmp_path, {"gmt": {"eps_b": 2.0}, "seed": 9}))
    assert cfg.gmt.eps_b == 2.0 and cfg.gmt.eps_z == PipelineConfig().gmt.eps_z
    assert cfg.synth.seed == 9


@pytest.mark.parametrize("bad", [
    {"bogus": 1},
    {"gmt": {"eps_bb": 1.0}},
    {"iterations": "many"},
    {"iterations": 1.5},
    {"ablation": {"masks": 1}},
    {"synth": {"room": [1, 2]}},
    {"gmt": {"leaf_order": "sideways"}},
    {"eval": {"unassigned": "ignore"}},
    {"iterations": -1},
])
def test_strict_parsing_rejects(tmp_path, bad):
    with pytest.raises((ConfigError, ValueError)):
        load_config(write(tmp_path, bad))


def test_unknown_key_message_names_path():
    with pytest.raises(ConfigError, match=r"config\.gmt: unknown keys \['eps_bb'\]"):
        from_dict(PipelineConfig, {"gmt": {"eps_bb": 1.0}})


def test_invalid_json_and_non_object(tmp_path):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, "{not json"))
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, [1, 2]))


def test_integers_accepted_for_floats(tmp_path):
    assert load_config(write(tmp_path, {"learn": {"lr": 1}})).learn.lr == 1.0


def test_tilted_rectangles_parse(tmp_path):
    rect = {"center": [1, 1, 1], "axis_u": [1, 0, 0], "axis_v": [0, 1, 0], "half_u": 0.5, "half_v": 0.5}
    cfg = load_config(write(tmp_path, {"synth": {"tilted": [rect]}}))
    assert cfg.synth.tilted[0].center == (1.0, 1.0, 1.0)
