import json
from pathlib import Path

import numpy as np
import pytest

from flowcon import cli
from flowcon.datasets import UNLABELED, FeatureDataset, read_features, write_features
from flowcon.errors import ConfigError
from flowcon.flow import init_model, save_checkpoint


def run_cli(*argv) -> int:
    return cli.main(list(argv))


def write_config(path: Path, **overrides) -> Path:
    base = {
        "train_features": "",
        "out_dir": "",
        "epochs": 2,
        "batch_size": 32,
        "seed": 3,
        "lr": 1e-3,
        "blocks": 2,
        "hidden": 8,
    }
    base.update(overrides)
    lines = ["# test run configuration"]
    lines += [f"{k} = {v}" for k, v in base.items()]
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture()
def moons_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("moons")
    assert run_cli("gen-synth", "--kind", "moons", "--n", "200", "--noise", "0.08",
                   "--n-ood", "60", "--seed", "7", "--out", str(out)) == 0
    return out


def test_gen_synth_moons_deterministic(tmp_path, moons_dir):
    again = tmp_path / "again"
    assert run_cli("gen-synth", "--kind", "moons", "--n", "200", "--noise", "0.08",
                   "--n-ood", "60", "--seed", "7", "--out", str(again)) == 0
    for name in ("id_train.fcft", "id_test.fcft", "ood.fcft"):
        assert (moons_dir / name).read_bytes() == (again / name).read_bytes()
    train = read_features(moons_dir / "id_train.fcft")
    test = read_features(moons_dir / "id_test.fcft")
    ood = read_features(moons_dir / "ood.fcft")
    assert len(train) == 160 and len(test) == 40 and len(ood) == 60
    assert np.all(ood.labels == UNLABELED)


def test_gen_synth_requires_out():
    with pytest.raises(SystemExit) as exc:
        run_cli("gen-synth", "--kind", "moons")
    assert exc.value.code == 2


def test_gen_synth_blobs_metadata_echo(tmp_path):
    out = tmp_path / "blobs"
    assert run_cli("gen-synth", "--kind", "blobs", "--k", "10", "--d", "16",
                   "--n-per-class", "20", "--seed", "1", "--out", str(out)) == 0
    for name in ("id_train.fcft", "id_test.fcft"):
        assert read_features(out / name).num_classes == 10
    assert read_features(out / "id_train.fcft").dim == 16


@pytest.fixture()
def trained_run(moons_dir, tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("run")
    cfg = write_config(run_dir / "run.cfg",
                       train_features=moons_dir / "id_train.fcft",
                       out_dir=run_dir / "out", epochs=3)
    assert run_cli("train", "--config", str(cfg)) == 0
    return run_dir / "out"


def test_train_writes_artifacts_and_header(trained_run):
    assert (trained_run / "model.fckp").exists()
    assert (trained_run / "prototypes.fcpt").exists()
    lines = (trained_run / "train_log.jsonl").read_text().splitlines()
    header = json.loads(lines[0])
    assert header["config"]["tau1"] == 1.5
    assert header["config"]["tau2"] == 0.1
    assert header["config"]["lambda"] == 0.07
    records = [json.loads(line) for line in lines[1:]]
    assert {r["epoch"] for r in records} == {0, 1, 2}


def test_train_reruns_byte_identical(moons_dir, tmp_path):
    outs = []
    for sub in ("a", "b"):
        cfg = write_config(tmp_path / f"{sub}.cfg",
                           train_features=moons_dir / "id_train.fcft",
                           out_dir=tmp_path / sub)
        assert run_cli("train", "--config", str(cfg)) == 0
        outs.append((tmp_path / sub / "model.fckp").read_bytes())
    assert outs[0] == outs[1]


def test_config_validation(tmp_path, moons_dir):
    bad = tmp_path / "bad.cfg"
    bad.write_text("train_features = x\nout_dir = y\nbogus_key = 1\n")
    assert run_cli("train", "--config", str(bad)) == 2

    bad.write_text("out_dir = y\n")
    assert run_cli("train", "--config", str(bad)) == 2

    bad.write_text("train_features = x\nout_dir = y\nbatch_size = 1\n")
    assert run_cli("train", "--config", str(bad)) == 2

    with pytest.raises(ConfigError):
        cli.parse_config(write_config(tmp_path / "dup.cfg"), ["nope=1"])


def test_train_dim_mismatch_exit_2(moons_dir, tmp_path):
    cfg = write_config(tmp_path / "run.cfg", train_features=moons_dir / "id_train.fcft",
                       out_dir=tmp_path / "out", dim=5)
    assert run_cli("train", "--config", str(cfg)) == 2


def test_eval_outputs_and_config_echo(trained_run, moons_dir, tmp_path):
    out = tmp_path / "eval"
    assert run_cli("eval", "--checkpoint", str(trained_run / "model.fckp"),
                   "--prototypes", str(trained_run / "prototypes.fcpt"),
                   "--id-test", str(moons_dir / "id_test.fcft"),
                   "--ood", f"boxa={moons_dir / 'ood.fcft'}",
                   "--ood", f"boxb={moons_dir / 'ood.fcft'}",
                   "--ratio", "0.5", "--seed", "11", "--out", str(out)) == 0
    jsons = sorted(p.name for p in out.glob("eval_*.json"))
    assert jsons == ["eval_boxa.json", "eval_boxb.json", "eval_mean.json"]
    assert sorted(p.name for p in out.glob("hist_*.csv")) == ["hist_boxa.csv", "hist_boxb.csv"]
    for name in jsons:
        report = json.loads((out / name).read_text())
        assert report["ratio"] == 0.5
        assert report["seed"] == 11
        for key in ("auroc", "aupr_s", "aupr_e", "fpr95"):
            assert 0.0 <= report[key] <= 1.0
    a = json.loads((out / "eval_boxa.json").read_text())
    b = json.loads((out / "eval_boxb.json").read_text())
    mean = json.loads((out / "eval_mean.json").read_text())
    assert a["auroc"] == b["auroc"] == mean["auroc"]


def test_eval_dim_mismatch_exit_2(trained_run, tmp_path):
    other = FeatureDataset(3, 2, np.zeros(4, np.uint32),
                           np.zeros((4, 3), np.float32))
    path = tmp_path / "other.fcft"
    write_features(other, path)
    assert run_cli("eval", "--checkpoint", str(trained_run / "model.fckp"),
                   "--prototypes", str(trained_run / "prototypes.fcpt"),
                   "--id-test", str(path), "--ood", str(path),
                   "--out", str(tmp_path / "e")) == 2


def test_export_hist_writes_only_csv(trained_run, moons_dir, tmp_path):
    out = tmp_path / "hist"
    assert run_cli("export-hist", "--checkpoint", str(trained_run / "model.fckp"),
                   "--prototypes", str(trained_run / "prototypes.fcpt"),
                   "--id-test", str(moons_dir / "id_test.fcft"),
                   "--ood", str(moons_dir / "ood.fcft"),
                   "--ratio", "0.5", "--out", str(out)) == 0
    assert list(out.glob("*.json")) == []
    assert (out / "hist_ood.csv").exists()


def test_classify_trained_blobs_accuracy(tmp_path):
    data = tmp_path / "data"
    assert run_cli("gen-synth", "--kind", "blobs", "--k", "3", "--d", "8",
                   "--n-per-class", "60", "--mean-scale", "8", "--sigma", "0.3",
                   "--seed", "5", "--out", str(data)) == 0
    cfg = write_config(tmp_path / "run.cfg", train_features=data / "id_train.fcft",
                       out_dir=tmp_path / "out", epochs=30, lr=1e-3, blocks=2)
    assert run_cli("train", "--config", str(cfg)) == 0
    out_json = tmp_path / "acc.json"
    assert run_cli("classify", "--checkpoint", str(tmp_path / "out" / "model.fckp"),
                   "--prototypes", str(tmp_path / "out" / "prototypes.fcpt"),
                   "--features", str(data / "id_test.fcft"),
                   "--out", str(out_json)) == 0
    payload = json.loads(out_json.read_text())
    assert payload["accuracy"] == 1.0
    assert payload["n_excluded_unlabeled"] == 0


def test_classify_all_unlabeled_exit_2(trained_run, moons_dir, tmp_path):
    assert run_cli("classify", "--checkpoint", str(trained_run / "model.fckp"),
                   "--prototypes", str(trained_run / "prototypes.fcpt"),
                   "--features", str(moons_dir / "ood.fcft")) == 2


def test_export_embed_identity_model(tmp_path, moons_dir):
    ckpt = tmp_path / "identity.fckp"
    save_checkpoint(init_model(2, 2, hidden=8, seed=0), ckpt)
    out = tmp_path / "embed.csv"
    assert run_cli("export-embed", "--checkpoint", str(ckpt),
                   "--in", f"id={moons_dir / 'id_test.fcft'}",
                   "--in", f"ood={moons_dir / 'ood.fcft'}",
                   "--out", str(out)) == 0
    lines = out.read_text().splitlines()
    id_test = read_features(moons_dir / "id_test.fcft")
    ood = read_features(moons_dir / "ood.fcft")
    assert len(lines) == 1 + len(id_test) + len(ood)
    assert lines[0] == "z0,z1,label,source"
    cells = lines[1].split(",")
    assert np.allclose([float(cells[0]), float(cells[1])], id_test.x64()[0], atol=1e-9)
    assert cells[3] == "id"
    ood_cells = lines[1 + len(id_test)].split(",")
    assert ood_cells[2] == "-1" and ood_cells[3] == "ood"


def test_sweep_reports_all_metrics_per_lambda(tmp_path, moons_dir):
    cfg = write_config(tmp_path / "sweep.cfg", train_features=moons_dir / "id_train.fcft",
                       out_dir=tmp_path / "unused", epochs=2)
    out = tmp_path / "sweep"
    assert run_cli("sweep", "--config", str(cfg), "--lambdas", "0.05,0.3",
                   "--id-test", str(moons_dir / "id_test.fcft"),
                   "--ood", str(moons_dir / "ood.fcft"),
                   "--ratio", "0.5", "--out", str(out)) == 0
    table = json.loads((out / "sweep.json").read_text())
    assert [row["lambda"] for row in table] == [0.05, 0.3]
    for row in table:
        for key in ("auroc", "aupr_s", "aupr_e", "fpr95"):
            assert 0.0 <= row[key] <= 1.0
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0] == "lambda,auroc,aupr_s,aupr_e,fpr95"
    assert len(lines) == 3


def test_train_divergence_exit_3(monkeypatch, moons_dir, tmp_path):
    from flowcon import train as train_mod
    from flowcon.errors import NumericError, TrainingDiverged

    def explode(*args, **kwargs):
        raise TrainingDiverged(0, 3, NumericError("non-finite forward value", node="#7:exp"))

    monkeypatch.setattr(train_mod, "fit", explode)
    cfg = write_config(tmp_path / "run.cfg", train_features=moons_dir / "id_train.fcft",
                       out_dir=tmp_path / "out")
    assert run_cli("train", "--config", str(cfg)) == 3
    log_lines = (tmp_path / "out" / "train_log.jsonl").read_text().splitlines()
    assert "error" in json.loads(log_lines[-1])
