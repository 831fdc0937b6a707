"""Strict JSON config parsing for the command-line entry points."""

import json

import pytest

from rxf import config as cfgmod
from rxf.losses import DrcConfig
from rxf.trainer import TrainConfig


class TestLoadJson:
    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            cfgmod.load_json(tmp_path / "none.json")

    def test_non_object_root_rejected(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text("[1, 2]")
        with pytest.raises(ValueError, match="object"):
            cfgmod.load_json(path)


class TestSections:
    def test_unknown_keys_fail_loudly(self):
        with pytest.raises(ValueError, match="learning_rate"):
            cfgmod.train_from_dict({"learning_rate": 1e-3})
        with pytest.raises(ValueError, match="d_models"):
            cfgmod.image_encoder_from_dict({"d_models": 8})

    def test_lambda_spelling(self):
        cfg = cfgmod.drc_from_dict({"alpha": 0.6, "lambda": 0.5})
        assert cfg == DrcConfig(alpha=0.6, lam=0.5)

    def test_train_with_nested_drc(self):
        cfg = cfgmod.train_from_dict({"lr": 1e-3, "drc": {"gamma": 2.0, "lambda": 0.25}})
        assert cfg.lr == 1e-3 and cfg.drc.gamma == 2.0 and cfg.drc.lam == 0.25

    def test_empty_dicts_give_defaults(self):
        assert cfgmod.train_from_dict({}) == TrainConfig()
        assert cfgmod.synth_from_dict({}).images_per_env == 24

    def test_bench_nested_sections_and_tuples(self):
        cfg = cfgmod.bench_from_dict(
            {
                "synth": {"stream_dim": 8, "images_per_env": 8, "instructions_per_env": 2},
                "train": {"epochs": 2},
                "loss_kinds": ["drc"],
                "seeds": [0, 1],
                "k_values": [1, 2],
            }
        )
        assert cfg.synth.stream_dim == 8
        assert cfg.train.epochs == 2
        assert cfg.loss_kinds == ("drc",) and cfg.seeds == (0, 1) and cfg.k_values == (1, 2)


class TestRunConfig:
    def test_requires_manifest_paths(self):
        with pytest.raises(ValueError, match="train_manifest"):
            cfgmod.run_config_from_dict({"data": {"val_manifest": "x"}})
        with pytest.raises(ValueError, match="val_manifest"):
            cfgmod.run_config_from_dict({"data": {"train_manifest": "x"}})

    def test_unknown_top_level_key(self):
        doc = {"data": {"train_manifest": "a", "val_manifest": "b"}, "optimizer": {}}
        with pytest.raises(ValueError, match="optimizer"):
            cfgmod.run_config_from_dict(doc)

    def test_round_trip_through_file(self, tmp_path):
        doc = {
            "data": {"train_manifest": "a", "val_manifest": "b", "unlabeled_set": "u"},
            "train": {"lr": 0.01, "epochs": 3},
            "out_dir": "runs/x",
        }
        path = tmp_path / "run.json"
        path.write_text(json.dumps(doc))
        run = cfgmod.run_config_from_dict(cfgmod.load_json(path))
        assert run["train"].epochs == 3
        assert run["data"]["unlabeled_set"] == "u"
        assert run["out_dir"] == "runs/x"
        assert run["image_encoder"].d_model == 256
