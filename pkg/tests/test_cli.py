import dataclasses
import json

import numpy as np
import pytest

from resformer_mtl.cli import build_parser, main, resolve_config
from resformer_mtl.config import TrainConfig
from resformer_mtl.data import read_mask


def _stderr_json(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    return json.loads(err[-1])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--count", "6", "--val_count", "2", "--size", "32"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset):
    run = dataset / "run"
    rc = main([
        "train", "--tiny", "--epochs", "1", "--batch_size", "3",
        "--train_data", str(dataset / "data" / "train"), "--val_data", str(dataset / "data" / "val"),
        "--checkpoint_dir", str(run),
    ])
    assert rc == 0
    return run


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "train" in capsys.readouterr().out
    assert main(["train", "--help"]) == 0
    out = capsys.readouterr().out
    assert "--batch_size" in out and "--model.use_dfe" in out


def test_synth_layout(dataset):
    assert (dataset / "data" / "train" / "manifest.json").exists()
    assert len(list((dataset / "data" / "val" / "images").iterdir())) == 2
    assert not (dataset / "data" / "test").exists()


def test_train_writes_artifacts(trained):
    for name in ("best.ckpt", "last.ckpt", "metrics.jsonl", "config.json"):
        assert (trained / name).exists()
    cfg = json.loads((trained / "config.json").read_text())
    assert cfg["epochs"] == 1 and cfg["batch_size"] == 3


def test_evaluate_report_and_dump(dataset, trained, tmp_path, capsys):
    report = tmp_path / "report.json"
    dump = tmp_path / "preds.npz"
    rc = main([
        "evaluate", "--checkpoint", str(trained / "best.ckpt"), "--data", str(dataset / "data" / "val"),
        "--report", str(report), "--dump_predictions", str(dump),
    ])
    assert rc == 0
    assert "mean_dsc = " in capsys.readouterr().out
    doc = json.loads(report.read_text())
    assert {"micro_acc", "mean_dsc", "loss"} <= set(doc)
    arrays = np.load(dump)
    assert arrays["seg_probs"].shape == (2, 3, 32, 32)


def test_predict_writes_mask(dataset, trained, tmp_path):
    image = dataset / "data" / "train" / "images" / "00000.png"
    rc = main(["predict", "--checkpoint", str(trained / "last.ckpt"), "--image", str(image), "--out", str(tmp_path)])
    assert rc == 0
    masks = list(tmp_path.rglob("*.png"))
    assert masks and read_mask(masks[0]).shape == (32, 32)


def test_missing_checkpoint_structured_error(tmp_path, capsys):
    rc = main(["evaluate", "--checkpoint", str(tmp_path / "nope.ckpt"), "--data", str(tmp_path)])
    assert rc == 1
    err = _stderr_json(capsys)
    assert err["error"] == "checkpoint" and "nope.ckpt" in err["message"]


def test_invalid_flag_value_is_usage_error(capsys):
    assert main(["train", "--lr", "-1", "--train_data", "x"]) == 2
    assert _stderr_json(capsys)["error"] == "config"


def test_missing_train_data(capsys):
    assert main(["train", "--tiny"]) == 2
    assert "train_data" in _stderr_json(capsys)["message"]


def test_bad_dataset_reports_problems(tmp_path, capsys):
    (tmp_path / "manifest.json").write_text("{not json")
    rc = main(["train", "--tiny", "--epochs", "1", "--train_data", str(tmp_path), "--checkpoint_dir", str(tmp_path / "r")])
    assert rc == 1
    assert _stderr_json(capsys)["error"] == "data"


# -- configuration precedence ------------------------------------------------------------

def _resolve(argv):
    return resolve_config(build_parser().parse_args(["train", *argv]))


def test_defaults_follow_training_protocol():
    cfg = _resolve([])
    assert (cfg.batch_size, cfg.lr, cfg.epochs, cfg.weight_decay) == (8, 0.003, 100, 0.0001)
    assert tuple(cfg.betas) == (0.9, 0.999)


def test_config_file_then_flags(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"lr": 0.01, "epochs": 7, "model": {"variant": "sequential", "use_dfe": False}}))
    cfg = _resolve(["--config", str(path), "--epochs", "3", "--model.use_dfe", "true"])
    assert cfg.lr == 0.01 and cfg.epochs == 3
    assert cfg.model.variant == "sequential" and cfg.model.use_dfe is True


def test_every_train_field_has_a_flag():
    actions = {a.dest for a in build_parser()._subparsers._group_actions[0].choices["train"]._actions}
    for f in dataclasses.fields(TrainConfig):
        if f.name != "model":
            assert f.name in actions


@pytest.mark.parametrize("lam", [("0", "1"), ("0.25", "0")])
def test_ablation_flags_reachable(lam):
    cfg = _resolve(["--lambda_cls", lam[0], "--lambda_seg", lam[1], "--model.use_dfe", "false", "--model.variant", "parallel"])
    assert (cfg.lambda_cls, cfg.lambda_seg) == (float(lam[0]), float(lam[1]))
    assert cfg.model.use_dfe is False


def test_unknown_config_key(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"learning_rate": 0.1, "model": {"depth": 3}}))
    assert main(["train", "--config", str(path), "--train_data", "x"]) == 2
    err = _stderr_json(capsys)
    assert err["details"] == ["learning_rate", "model.depth"]
