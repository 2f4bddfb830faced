import json

import numpy as np
import pytest

from conftest import make_corpus, write_gray_png
from hqcnn import ConfigurationError, Convention, DatasetId, DecodeMode, EncodingGate, ShapeError, StaleCacheError
from hqcnn.cli import (cmd_ablate, cmd_dump_state, cmd_eval, cmd_preprocess, cmd_report, cmd_train, cmd_visualize,
                       main, parse_args)
from hqcnn.metrics import Rounding
from hqcnn.nn import HqcnnModel, default_layer_specs, load_checkpoint


def config_for(tmp_path, manifest, *extra, command="preprocess", out="out"):
    argv = [command, "--manifest", str(manifest), "--out", str(tmp_path / out), "--shots", "0", "--epochs", "1",
            "--seed", "3", *extra]
    return parse_args(argv)[1]


def test_parse_args_normalises_flags():
    command, config, _ = parse_args(["train", "--dataset", "d2", "--encoding", "RX", "--decode", "p0", "--shots",
                                     "500", "--seed", "7", "--rounding", "TRUNCATE", "--positive-class", "Covid19"])
    assert command == "train"
    assert config.dataset is DatasetId.D2
    assert config.quanv.encoding_gate is EncodingGate.RX
    assert config.quanv.decode is DecodeMode.PROBABILITY_OF_ZERO
    assert config.quanv.circuit_seed == 7 and config.quanv.shot_seed == 7
    assert config.train.seed == 7
    assert config.rounding is Rounding.TRUNCATE
    assert config.positive_class == "covid19"
    assert config.convention is Convention.STANDARD


def test_parse_args_defaults():
    _, config, args = parse_args(["ablate"])
    assert config.dataset is DatasetId.D1
    assert config.train.epochs == 20 and config.train.batch_size == 32 and config.train.learning_rate == 1e-4
    assert config.quanv.shots == 1000
    assert config.ingest.divisor == 255.0
    assert args.shots_list == [500, 1000]


@pytest.mark.parametrize("argv", [["train", "--dataset", "D9"], ["train", "--encoding", "rz"],
                                  ["train", "--decode", "x"], ["train", "--shots", "-2"]])
def test_parse_args_rejects_bad_values(argv):
    with pytest.raises(ConfigurationError):
        parse_args(argv)


def test_report_needs_runs():
    with pytest.raises(SystemExit):
        parse_args(["report"])


def test_config_is_serialisable():
    _, config, _ = parse_args(["train"])
    data = json.loads(json.dumps(config.to_dict()))
    assert data["quanv"]["encoding_gate"] == "RY"
    assert config.digest() == parse_args(["train"])[1].digest()


def test_preprocess_outputs(corpus, tmp_path):
    config = config_for(tmp_path, corpus)
    summary = cmd_preprocess(config)
    out = tmp_path / "out"
    assert summary["records"] == 24
    assert summary["splits"]["train"]["per_class"] == {"normal": 8, "covid19": 8}
    assert (out / "cache" / "train.qvc").exists() and (out / "cache" / "test.qvc").exists()
    run = json.loads((out / "run.json").read_text())
    assert run["rng"] == "PCG64"
    assert run["code_revision"] is None
    assert run["config"]["quanv"]["shots"] == 0
    assert run["stages"]["preprocess"]["train"] == summary["splits"]["train"]["checksum"]
    assert cmd_preprocess(config)["splits"] == summary["splits"]


def test_preprocess_audit(corpus, tmp_path):
    summary = cmd_preprocess(config_for(tmp_path, corpus), audit=True)
    assert summary["audit"]["counts"]["D1/train/normal"] == 8
    assert len(summary["audit"]["mismatches"]) == 4


def test_preprocess_needs_manifest(tmp_path):
    _, config, _ = parse_args(["preprocess", "--out", str(tmp_path)])
    with pytest.raises(ConfigurationError):
        cmd_preprocess(config)


def test_train_refuses_stale_or_missing_cache(corpus, tmp_path):
    with pytest.raises(StaleCacheError):
        cmd_train(config_for(tmp_path, corpus))
    cmd_preprocess(config_for(tmp_path, corpus))
    with pytest.raises(StaleCacheError):
        cmd_train(config_for(tmp_path, corpus, "--shots", "100"))


def test_caches_of_another_dataset_or_manifest_are_stale(tmp_path):
    d2 = make_corpus(tmp_path / "d2", labels=("covid19", "pneumonia"), n_train=2, n_test=2)
    d1 = make_corpus(tmp_path / "d1", n_train=2, n_test=1)
    cmd_preprocess(config_for(tmp_path, d2, "--dataset", "D2"))
    with pytest.raises(StaleCacheError):
        cmd_train(config_for(tmp_path, d1))
    with pytest.raises(StaleCacheError):
        cmd_train(config_for(tmp_path, d2, "--dataset", "D3"))
    cmd_train(config_for(tmp_path, d2, "--dataset", "D2"), verbose=False)
    with pytest.raises(StaleCacheError):
        cmd_eval(config_for(tmp_path, d1), checkpoint=str(tmp_path / "out" / "model.qvm"))


def test_later_stages_need_the_manifest(corpus, tmp_path):
    cmd_preprocess(config_for(tmp_path, corpus))
    _, config, _ = parse_args(["train", "--out", str(tmp_path / "out"), "--shots", "0", "--seed", "3"])
    with pytest.raises(ConfigurationError):
        cmd_train(config)


def test_train_and_eval(corpus, tmp_path):
    config = config_for(tmp_path, corpus, "--epochs", "2")
    cmd_preprocess(config)
    cmd_train(config, verbose=False)
    report = cmd_eval(config)
    out = tmp_path / "out"
    assert len((out / "epochs.csv").read_text().splitlines()) == 3
    assert (out / "learning_curve.svg").read_text().lstrip().startswith("<?xml")
    assert report.positive_class == "covid19"
    saved = json.loads((out / "report.json").read_text())
    assert saved["class_names"] == ["normal", "covid19"]
    assert sum(map(sum, saved["confusion"])) == 8
    assert (out / "report.csv").read_text().startswith("scope,acc,sns,spc,prc,f1")
    assert (out / "roc.csv").read_text().startswith("threshold,fpr,tpr")
    assert (out / "confusion.csv").exists() and (out / "confusion.svg").exists() and (out / "roc.svg").exists()
    assert set(json.loads((out / "run.json").read_text())["stages"]) == {"preprocess", "train", "eval"}


def test_zero_epochs_checkpoint_is_initialization(corpus, tmp_path):
    config = config_for(tmp_path, corpus, "--epochs", "0")
    cmd_preprocess(config)
    cmd_train(config, verbose=False)
    saved = load_checkpoint(tmp_path / "out" / "model.qvm")
    initial = HqcnnModel(default_layer_specs(2), seed=3)
    assert all(np.array_equal(p, q) for p, q in zip(saved.params, initial.params))
    assert (tmp_path / "out" / "epochs.csv").read_text() == "epoch,train_loss,train_acc,test_loss,test_acc\n"


def test_eval_checks_class_count_and_positive_class(corpus, tmp_path):
    config = config_for(tmp_path, corpus)
    cmd_preprocess(config)
    cmd_train(config, verbose=False)
    with pytest.raises(ShapeError):
        cmd_eval(config_for(tmp_path, corpus, "--dataset", "D3"))
    with pytest.raises(ConfigurationError):
        cmd_eval(config_for(tmp_path, corpus, "--positive-class", "pneumonia"))


def test_three_class_eval_writes_per_class_curves(tmp_path):
    manifest = make_corpus(tmp_path / "d3", labels=("normal", "covid19", "pneumonia"), n_train=4, n_test=2)
    config = config_for(tmp_path, manifest, "--dataset", "D3")
    cmd_preprocess(config)
    cmd_train(config, verbose=False)
    report = cmd_eval(config)
    assert report.positive_class is None
    assert set(report.per_class) == {"normal", "covid19", "pneumonia"}
    assert (tmp_path / "out" / "roc-pneumonia.csv").exists()


def test_ablate_grid(corpus, tmp_path):
    rows = cmd_ablate(config_for(tmp_path, corpus, out="a"), shots_list=[0, 0])
    assert [r[:2] for r in rows] == [["RY", "0"], ["RX", "0"]]
    lines = (tmp_path / "a" / "ablation.csv").read_text().splitlines()
    assert lines[0] == "gate,shots,acc,sns,spc,prc,f1"
    assert len(lines) == 3
    assert (tmp_path / "a" / "ablate" / "rx-0" / "report.json").exists()
    cmd_ablate(config_for(tmp_path, corpus, out="b"), shots_list=[0])
    assert (tmp_path / "b" / "ablation.csv").read_text() == (tmp_path / "a" / "ablation.csv").read_text()


def test_report_collects_runs(corpus, tmp_path):
    config = config_for(tmp_path, corpus)
    cmd_preprocess(config)
    cmd_train(config, verbose=False)
    cmd_eval(config)
    run = str(tmp_path / "out")
    _, report_config, _ = parse_args(["report", "--runs", run, run, "--out", str(tmp_path / "cmp")])
    rows = cmd_report(report_config, [run, run])
    assert len(rows) == 2
    assert json.loads((tmp_path / "cmp" / "run.json").read_text())["stages"]["report"]["runs"] == [run, run]
    lines = (tmp_path / "cmp" / "comparison.csv").read_text().splitlines()
    assert lines[0] == "run,dataset,gate,shots,positive,acc,sns,spc,prc,f1"
    assert lines[1].split(",")[1:5] == ["D1", "RY", "0", "covid19"]


def test_dump_state_and_visualize(tmp_path):
    write_gray_png(tmp_path / "x.png", np.arange(28 * 28).reshape(28, 28) % 256)
    config = config_for(tmp_path, tmp_path / "unused.csv")
    path = cmd_dump_state(config, str(tmp_path / "x.png"), 2, 3)
    lines = path.read_text().splitlines()
    assert lines[0] == "index,re,im" and len(lines) == 17
    amps = np.array([complex(float(r), float(i)) for _, r, i in (line.split(",") for line in lines[1:])])
    assert abs(np.vdot(amps, amps).real - 1.0) < 1e-12
    with pytest.raises(ConfigurationError):
        cmd_dump_state(config, str(tmp_path / "x.png"), 14, 0)
    png = cmd_visualize(config, str(tmp_path / "x.png"))
    assert png.read_bytes()[:4] == b"\x89PNG"
    stages = json.loads((tmp_path / "out" / "run.json").read_text())["stages"]
    assert stages["dump-state"]["patch"] == [2, 3]
    assert stages["visualize"]["feature_map"] == png.name


def test_main_exit_codes(tmp_path):
    write_gray_png(tmp_path / "x.png", np.zeros((28, 28)))
    with pytest.raises(SystemExit) as done:
        main(["dump-state", "--image", str(tmp_path / "x.png"), "--out", str(tmp_path)])
    assert done.value.code == 0
    with pytest.raises(RuntimeError):
        main(["train", "--dataset", "D9"])
    with pytest.raises(RuntimeError):
        main(["train", "--out", str(tmp_path / "empty")])
