import hashlib
import json

import numpy as np
import pytest

from repbias.bench import synth_dataset
from repbias.cli import RunConfig, main, merge_config
from repbias.errors import ValidationError
from repbias.micronet import MicroNet, default_config, load_model
from repbias.relations import read_annotations_csv
from repbias.seeding import substream
from repbias.tensor import load_tensor

SMALL = ["--samples", "120"]


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def dataset(tmp_path):
    d = tmp_path / "data"
    d.mkdir()
    assert main(["synth", "--out-dir", str(d), *SMALL]) == 0
    return d


@pytest.fixture
def trained(dataset):
    assert main(["train", "--data-dir", str(dataset), "--out-dir", str(dataset), "--epochs", "2"]) == 0
    return dataset


def test_synth_roundtrip(dataset):
    cfg = merge_config("synth", {}, {"samples": 120})
    images, table = synth_dataset(cfg.synth())
    assert np.array_equal(load_tensor(dataset / "images.bltn"), images)
    assert np.array_equal(read_annotations_csv(dataset / "annotations.csv").values, table.values)
    meta = json.loads((dataset / "synth.json").read_text())
    assert meta["config"]["samples"] == 120 and meta["config"]["noise"] == 0.3


def test_synth_same_seed_same_checksums(tmp_path, dataset):
    other = tmp_path / "again"
    other.mkdir()
    main(["synth", "--out-dir", str(other), *SMALL])
    for name in ("images.bltn", "annotations.csv", "relations.csv", "synth.json"):
        if name == "synth.json":
            a = json.loads((dataset / name).read_text())
            b = json.loads((other / name).read_text())
            a["config"]["out_dir"] = b["config"]["out_dir"] = None
            assert a == b
        else:
            assert digest(dataset / name) == digest(other / name)


def test_synth_with_bias(tmp_path):
    d = tmp_path / "b"
    d.mkdir()
    assert main(["synth", "--out-dir", str(d), *SMALL, "--bias-pair", "0,1", "--tau", "1"]) == 0
    t = read_annotations_csv(d / "annotations.csv")
    assert np.sum(t.values[:, 0] * t.values[:, 1] < 0) == 0


def test_missing_output_dir(tmp_path, capsys):
    assert main(["synth", "--out-dir", str(tmp_path / "nope")]) == 1
    err = capsys.readouterr().err
    assert "nope" in err and "PathError" in err


def test_train_zero_epochs_is_init(dataset):
    assert main(["train", "--data-dir", str(dataset), "--out-dir", str(dataset), "--epochs", "0"]) == 0
    net = load_model(dataset / "model.bltm")
    init = MicroNet.initialize(default_config(2, 16), substream(0, "init"))
    assert all(np.array_equal(a, b) for a, b in zip(net.parameter_arrays(), init.parameter_arrays()))
    assert (dataset / "model_train_log.csv").read_text() == "epoch,mean_loss\n"


def test_train_deterministic(trained, tmp_path):
    first = digest(trained / "model.bltm")
    other = tmp_path / "m2.bltm"
    main(["train", "--data-dir", str(trained), "--model", str(other), "--epochs", "2"])
    assert digest(other) == first
    assert len((trained / "model_train_log.csv").read_text().splitlines()) == 3


def test_train_divergence_exit_2(dataset, capsys):
    code = main(["train", "--data-dir", str(dataset), "--out-dir", str(dataset), "--epochs", "3",
                 "--learning-rate", "1e12", "--init-scale", "50"])
    err = capsys.readouterr().err
    assert code == 2 and "[train]" in err and "epoch" in err


def _diagnose(data, out, *extra):
    out.mkdir(exist_ok=True)
    return main(["diagnose", "--data-dir", str(data), "--out-dir", str(out), *extra])


def test_diagnose_outputs(trained, tmp_path):
    out = tmp_path / "r"
    assert _diagnose(trained, out, "--heatmaps", "2") == 0
    doc = json.loads((out / "report.json").read_text())
    assert doc["timestamp"]
    run = doc["config"]["run"]
    assert run["bins"] == 64 and run["smoothing"] == 0.5 and run["sigma_min"] == 0.05
    assert run["kl_percentile"] == 75.0 and run["near_zero"] == 0.2 and run["far"] == 0.2
    assert (out / "summary.csv").read_text().startswith("rank,kl,classification,description\n")
    hist = (out / "histograms" / "attr_1__attr_2.csv").read_text().splitlines()
    assert len(hist) == 65
    assert len(list((out / "heatmaps").glob("*.pgm"))) == 4


def test_diagnose_unknown_attribute_before_compute(trained, tmp_path, capsys):
    rel = tmp_path / "rel.csv"
    rel.write_text("attr_1,hat,not_related\n")
    code = _diagnose(trained, tmp_path / "r", "--relations", str(rel), "--model", str(tmp_path / "missing.bltm"))
    err = capsys.readouterr().err
    assert code == 1 and "UnknownAttribute" in err and "[load]" in err


def test_config_file_and_flag_precedence(dataset, tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"epochs": 1, "batch_size": 16}))
    main(["train", "--config", str(conf), "--data-dir", str(dataset), "--out-dir", str(dataset), "--epochs", "2"])
    assert len((dataset / "model_train_log.csv").read_text().splitlines()) == 3
    cfg = merge_config("train", {"epochs": 1, "batch_size": 16}, {"epochs": 2, "batch_size": None})
    assert cfg.epochs == 2 and cfg.batch_size == 16


def test_unknown_config_key_rejected():
    with pytest.raises(ValidationError):
        merge_config("train", {"epohcs": 3}, {})


def test_bad_config_file_exit_1(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text("{not json")
    assert main(["synth", "--config", str(conf), "--out-dir", str(tmp_path)]) == 1


def test_bad_flag_exit_1():
    with pytest.raises(SystemExit) as info:
        main(["diagnose", "--bogus"])
    assert info.value.code == 1


def test_heatmap_command(trained, tmp_path):
    out = tmp_path / "h"
    out.mkdir()
    assert main(["heatmap", "--data-dir", str(trained), "--out-dir", str(out), "--image-index", "3",
                 "--attribute", "attr_2"]) == 0
    assert [p.name for p in sorted(out.iterdir())] == ["s00003__attr_2.bltn", "s00003__attr_2.json",
                                                        "s00003__attr_2.pgm"]
    assert main(["heatmap", "--data-dir", str(trained), "--out-dir", str(out), "--image-index", "999"]) == 1


def test_experiment2_command(tmp_path):
    assert main(["experiment2", "--out-dir", str(tmp_path), "--seeds", "0,1", "--taus", "0,1",
                 "--samples", "100", "--epochs", "1"]) == 0
    rows = (tmp_path / "experiment2.csv").read_text().splitlines()
    assert rows[0] == "pair,tau,seed,kl,mean_cosine,sample_count" and len(rows) == 5
    summary = json.loads((tmp_path / "experiment2.json").read_text())
    assert summary["config"]["taus"] == [0.0, 1.0]


def test_experiment3_top_n_clamped(tmp_path):
    assert main(["experiment3", "--out-dir", str(tmp_path), "--seeds", "0", "--samples", "200",
                 "--epochs", "2", "--top-n", "50"]) == 0
    rows = (tmp_path / "experiment3.csv").read_text().splitlines()
    assert rows[0] == "seed,method,rank,mode,acc_ordinary,acc_mode,decrease"
    assert sum(1 for r in rows[1:] if ",entropy," in r) == 6


def test_run_config_defaults_match_modules():
    from repbias.micronet import TrainConfig
    from repbias.pipeline import DiagnosisConfig

    cfg = RunConfig()
    assert cfg.diagnosis() == DiagnosisConfig()
    t = cfg.training()
    d = TrainConfig()
    assert (t.learning_rate, t.epochs, t.batch_size, t.init_scale) == (d.learning_rate, d.epochs, d.batch_size,
                                                                        d.init_scale)
