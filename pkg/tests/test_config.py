import json

import pytest

from descdet.config import ExperimentConfig
from descdet.errors import ConfigError


def test_defaults_round_trip(tmp_path):
    cfg = ExperimentConfig()
    cfg.train.m = 12.5
    cfg.save(tmp_path / "c.json")
    assert ExperimentConfig.load(tmp_path / "c.json") == cfg


def test_partial_sections_keep_defaults():
    cfg = ExperimentConfig.from_dict({"train": {"lr": 1, "mode": "noH"}})
    assert cfg.train.lr == 1.0 and isinstance(cfg.train.lr, float)
    assert cfg.train.mode == "noH" and cfg.world.dim == 16


@pytest.mark.parametrize(
    "doc, message",
    [
        ({"train": {"learning_rate": 0.1}}, "train.learning_rate"),
        ({"extras": {}}, "extras"),
        ({"train": {"n_iters": "ten"}}, "train.n_iters"),
        ({"train": {"n_iters": 1.5}}, "train.n_iters"),
        ({"train": {"reset_stats_each_cycle": 1}}, "train.reset_stats_each_cycle"),
        ({"train": {"mode": "turbo"}}, "train.mode"),
        ({"llm": {"backend": "http"}}, "llm.url"),
        ({"llm": {"backend": "replay"}}, "transcript_path"),
        ({"world": []}, "world"),
    ],
)
def test_rejections(doc, message):
    with pytest.raises(ConfigError, match=message.replace(".", r"\.")):
        ExperimentConfig.from_dict(doc)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        ExperimentConfig.load(tmp_path / "nope.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError, match="not valid JSON"):
        ExperimentConfig.load(tmp_path / "bad.json")


def test_nullable_margins():
    cfg = ExperimentConfig.from_dict({"train": {"m": 3, "n": None}})
    assert cfg.train.m == 3.0 and cfg.train.n is None
    assert json.loads(json.dumps(cfg.to_dict()))["train"]["n"] is None
