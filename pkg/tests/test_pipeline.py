import json
import os

import numpy as np
import pytest

from honeymodel import cli
from honeymodel.attacks import PGD, AdversarialRecord, load_records, save_records
from honeymodel.data import LabeledDataset, synthetic_blobs, write_idx
from honeymodel.errors import ConfigError, InputError
from honeymodel.mmd import read_report_csv, separability
from honeymodel.nn import load_model
from honeymodel.pipeline import (MNIST_FILES, ExperimentConfig, cmd_attack, cmd_detect, cmd_mmd,
                                 cmd_scan, cmd_train, load_config)
from honeymodel.watermark import generate_key, save_key

SMALL = {
    "size_fraction": 0.25,
    "poison_fraction": 0.3,
    "records_per_attack": 40,
    "train": {"epochs": 3, "batch_size": 32, "learning_rate": 0.01, "hidden": [16]},
    "mmd": {"subsample_size": 10, "repetitions": 20},
}


def _quantised_blobs(n, seed):
    ds = synthetic_blobs(n, 16, 4, 0.5, seed=seed, spread=0.08)
    return LabeledDataset(np.rint(ds.samples * 255) / 255, ds.labels, 4)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("idx")
    write_idx(_quantised_blobs(150, 1), d / MNIST_FILES["train_images"],
              d / MNIST_FILES["train_labels"], 4, 4)
    write_idx(_quantised_blobs(60, 2), d / MNIST_FILES["test_images"],
              d / MNIST_FILES["test_labels"], 4, 4)
    return d


def small_config(data_dir, **overrides):
    body = json.loads(json.dumps(SMALL))
    body.update(overrides)
    return ExperimentConfig.from_dict(body).with_data_dir(data_dir)


def full_run(cfg, out):
    cmd_train(cfg, out)
    cmd_attack(cfg, out / "honeymodel.hnym", out / "key.json", out)
    cmd_attack(cfg, out / "baseline.hnym", out / "key.json", out, prefix="baseline_")
    cmd_detect(cfg, out / "honeymodel.hnym", out / "key.json", out / "records.hnyr", out)
    cmd_mmd(cfg, out / "records.hnyr", out / "baseline_records.hnyr", out)


def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(size_fraction=0.0).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig(poison_fraction=1.0).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"train": {"epochs": 0}}).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"nonsense": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"attacks": {"jsma": {"gamma": 2.0}}})


def test_config_file_round_trip(tmp_path):
    cfg = ExperimentConfig.from_dict(SMALL)
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    back = load_config(tmp_path / "c.json")
    assert back.to_dict() == cfg.to_dict()
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


def test_full_run_outputs_and_idempotence(data_dir, tmp_path):
    cfg = small_config(data_dir, seed=3)
    full_run(cfg, tmp_path / "a")
    full_run(small_config(data_dir, seed=3), tmp_path / "b")
    names = sorted(os.listdir(tmp_path / "a"))
    assert names == sorted(os.listdir(tmp_path / "b"))
    for n in ("key.json", "honeymodel.hnym", "baseline.hnym", "accuracy.csv", "records.hnyr",
              "records.csv", "reconstruction.csv", "detector.json", "detection.csv",
              "detection_counts.csv", "mmd_pgd.csv", "mmd_summary.csv"):
        assert n in names
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes(), n
    acc = (tmp_path / "a" / "accuracy.csv").read_text().splitlines()
    assert len(acc) == 3
    header = (tmp_path / "a" / "detection.csv").read_text().splitlines()[0].split(",")
    assert header[1:4] == ["cw_acc", "cw_fpr", "cw_tpr"] and header[-1] == "overall_tpr"
    report = read_report_csv(tmp_path / "a" / "mmd_pgd.csv")
    assert len(report.cross) == 20
    recs, fp = load_records(tmp_path / "a" / "records.hnyr")
    assert len(recs) == 120
    assert fp == json.loads((tmp_path / "a" / "train_summary.json").read_text())[
        "key_fingerprint"]


def test_zero_poison_matches_baseline(data_dir, tmp_path):
    cmd_train(small_config(data_dir, poison_fraction=0.0), tmp_path)
    honey = load_model(tmp_path / "honeymodel.hnym")
    base = load_model(tmp_path / "baseline.hnym")
    for (W, b), (W2, b2) in zip(honey.params, base.params):
        assert W.tobytes() == W2.tobytes() and b.tobytes() == b2.tobytes()


def test_attack_refuses_foreign_key(data_dir, tmp_path):
    cfg = small_config(data_dir)
    cmd_train(cfg, tmp_path, baseline=False)
    other = generate_key(16, 0.25, 1.0, entropy=99)
    save_key(other, tmp_path / "other.json")
    with pytest.raises(ConfigError, match="fingerprint"):
        cmd_attack(cfg, tmp_path / "honeymodel.hnym", tmp_path / "other.json", tmp_path)


def test_detect_rejects_all_benign_manifest(data_dir, tmp_path):
    cfg = small_config(data_dir)
    summary = cmd_train(cfg, tmp_path, baseline=False)
    failed = [AdversarialRecord(np.zeros(16), np.zeros(16), 0, 1, PGD, False, 5, i)
              for i in range(5)]
    save_records(failed, tmp_path / "failed.hnyr", key_fingerprint=summary["key_fingerprint"])
    with pytest.raises(InputError, match="no usable"):
        cmd_detect(cfg, tmp_path / "honeymodel.hnym", tmp_path / "key.json",
                   tmp_path / "failed.hnyr", tmp_path)


def test_mmd_same_records_are_inseparable(data_dir, tmp_path):
    cfg = small_config(data_dir, records_per_attack=60)
    cfg.mmd.repetitions = 300
    cmd_train(cfg, tmp_path, baseline=False)
    cmd_attack(cfg, tmp_path / "honeymodel.hnym", tmp_path / "key.json", tmp_path,
               names=[PGD])
    reports = cmd_mmd(cfg, tmp_path / "records.hnyr", tmp_path / "records.hnyr", tmp_path,
                      names=[PGD])
    assert separability(reports[PGD]) == pytest.approx(0.5, abs=0.08)


def test_mmd_population_too_small(data_dir, tmp_path):
    cfg = small_config(data_dir, records_per_attack=5)
    cmd_train(cfg, tmp_path, baseline=False)
    cmd_attack(cfg, tmp_path / "honeymodel.hnym", tmp_path / "key.json", tmp_path, names=[PGD])
    with pytest.raises(InputError):
        cmd_mmd(cfg, tmp_path / "records.hnyr", tmp_path / "records.hnyr", tmp_path, names=[PGD])


def test_single_point_scan_equals_train_then_attack(data_dir, tmp_path):
    cfg = small_config(data_dir, seed=5)
    results = cmd_scan(cfg, "poison", [0.2], tmp_path / "scan", count=20)
    point = tmp_path / "scan" / "poison_0.2000"
    direct = small_config(data_dir, seed=5, poison_fraction=0.2)
    cmd_train(direct, tmp_path / "direct", baseline=False)
    _, scores = cmd_attack(direct, tmp_path / "direct" / "honeymodel.hnym",
                           tmp_path / "direct" / "key.json", tmp_path / "direct", count=20)
    assert (point / "records.hnyr").read_bytes() == (
        tmp_path / "direct" / "records.hnyr").read_bytes()
    assert results[0]["recon_pgd"] == scores[PGD].mean
    rows = (tmp_path / "scan" / "scan_poison.csv").read_text().splitlines()
    assert rows[0] == "value,baseline_acc,honey_acc,recon_pgd,recon_jsma,recon_cw,error"
    assert len(rows) == 2


def test_scan_resumes_and_records_failures(data_dir, tmp_path):
    cfg = small_config(data_dir)
    out = tmp_path / "scan"
    cmd_scan(cfg, "size", [0.25, 0.5], out, count=10)
    marker = out / "size_0.5000" / "result.json"
    body = json.loads(marker.read_text())
    body["honey_acc"] = 0.123
    marker.write_text(json.dumps(body))
    again = cmd_scan(cfg, "size", [0.25, 0.5, 1.0], out, count=10)
    assert again[1]["honey_acc"] == 0.123
    assert (out / "size_1.0000" / "result.json").exists()
    # a point whose cycle fails is recorded and the scan continues
    bad = small_config(data_dir, records_per_attack=10)
    res = cmd_scan(bad, "poison", [0.1], tmp_path / "scan2", count=10_000)
    assert res[0]["error"] and res[0]["honey_acc"] is None
    with pytest.raises(ConfigError):
        cmd_scan(cfg, "poison", [], out)
    with pytest.raises(ConfigError):
        cmd_scan(cfg, "size", [0.0], out)


def _cli(*argv):
    return cli.main([str(a) for a in argv])


def test_cli_usage_errors(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main([])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["fly"])
    assert exc.value.code == 1


def test_cli_exit_codes(data_dir, tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(SMALL))
    base = ["--config", cfg_path, "--data-dir", data_dir, "--out", tmp_path / "run"]
    assert _cli(*base, "train", "--size", "0") == 1
    assert _cli("--config", cfg_path, "--data-dir", tmp_path / "missing", "--out",
                tmp_path / "x", "train") == 2
    assert _cli(*base, "--seed", 4, "train") == 0
    run = tmp_path / "run"
    assert _cli(*base, "attack", "--model", run / "honeymodel.hnym", "--key", run / "key.json",
                "--count", 30) == 0
    assert _cli(*base, "attack", "--model", run / "baseline.hnym", "--key", run / "key.json",
                "--count", 30, "--prefix", "baseline_") == 0
    assert _cli(*base, "detect", "--model", run / "honeymodel.hnym", "--key", run / "key.json",
                "--records", run / "records.hnyr") == 0
    assert _cli(*base, "mmd", "--honey", run / "records.hnyr", "--baseline",
                run / "baseline_records.hnyr", "--repetitions", 15) == 0
    assert len((run / "mmd_cw.csv").read_text().splitlines()) == 16
    (tmp_path / "junk.hnym").write_bytes(b"nope")
    assert _cli(*base, "attack", "--model", tmp_path / "junk.hnym", "--key",
                run / "key.json") == 2
    assert _cli(*base, "keygen", "--dim", 784, "--size", 0.1, "--key-out",
                tmp_path / "k.json") == 0
    assert _cli(*base, "attack", "--model", run / "honeymodel.hnym", "--key",
                tmp_path / "k.json") == 1
