"""Experiment configuration and the train / attack / detect / mmd / scan steps.

Each ``cmd_*`` function reads and writes plain files so the CLI and the tests
drive exactly the same code. Outputs carry no timestamps; rerunning a step
with the same configuration reproduces its files byte for byte.
"""

import csv
import dataclasses
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attacks as atk
from .data import load_idx
from .detection import (DetectorConfig, evaluate_detector, reconstruction_score,
                        save_detector, split_detection_data, train_detector,
                        write_counts_csv, write_metrics_csv)
from .errors import ConfigError, HoneyModelError, InputError
from .mmd import MEDIAN, MmdConfig, bootstrap_mmd, separability, write_report_csv
from .nn import TrainConfig, accuracy, build_mlp, load_model, save_model, train_epochs
from .seeds import derive_seed
from .watermark import PoisonConfig, generate_key, load_key, poison_dataset, save_key

log = logging.getLogger(__name__)

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


@dataclass
class TrainSettings:
    epochs: int = 1
    batch_size: int = 64
    learning_rate: float = 1e-3
    hidden: tuple = (256, 128)


@dataclass
class DetectorSettings:
    l2: float = 1e-4
    steps: int = 500
    learning_rate: float = 0.1
    threshold: float = 0.5
    eval_fraction: float = 0.3


@dataclass
class MmdSettings:
    subsample_size: int = 50
    repetitions: int = 1000
    bandwidth: object = MEDIAN
    space: str = "input"


@dataclass
class ExperimentConfig:
    train_images: str = None
    train_labels: str = None
    test_images: str = None
    test_labels: str = None
    seed: int = 0
    size_fraction: float = 0.25
    amplitude: float = 1.0
    poison_fraction: float = 0.4
    train: TrainSettings = field(default_factory=TrainSettings)
    attacks: atk.AttackParams = field(default_factory=atk.AttackParams)
    records_per_attack: int = 500
    include_failed: bool = False
    detector: DetectorSettings = field(default_factory=DetectorSettings)
    mmd: MmdSettings = field(default_factory=MmdSettings)
    jobs: int = 1

    def validate(self):
        if not 0.0 < self.size_fraction <= 1.0:
            raise ConfigError(f"size_fraction must lie in (0, 1], got {self.size_fraction}")
        if not 0.0 < self.amplitude <= 1.0:
            raise ConfigError(f"amplitude must lie in (0, 1], got {self.amplitude}")
        if not 0.0 <= self.poison_fraction < 1.0:
            raise ConfigError(f"poison_fraction must lie in [0, 1), got {self.poison_fraction}")
        if self.records_per_attack < 1:
            raise ConfigError("records_per_attack must be >= 1")
        if self.mmd.space not in ("input", "delta"):
            raise ConfigError(f"mmd.space must be 'input' or 'delta', got {self.mmd.space!r}")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        try:
            self.train_config()
            self.detector_config()
            self.mmd_config()
        except InputError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def with_data_dir(self, path):
        for name, filename in MNIST_FILES.items():
            setattr(self, name, str(Path(path) / filename))
        return self

    def train_config(self):
        t = self.train
        return TrainConfig(t.epochs, t.batch_size, t.learning_rate, derive_seed(self.seed, "shuffle"))

    def detector_config(self):
        d = self.detector
        return DetectorConfig(d.l2, d.steps, d.learning_rate, d.threshold,
                              derive_seed(self.seed, "detector"))

    def mmd_config(self):
        m = self.mmd
        return MmdConfig(m.bandwidth, m.subsample_size, m.repetitions, derive_seed(self.seed, "mmd"))

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, body):
        body = dict(body)
        try:
            sub = {
                "train": TrainSettings(**body.pop("train", {})),
                "detector": DetectorSettings(**body.pop("detector", {})),
                "mmd": MmdSettings(**body.pop("mmd", {})),
            }
            a = body.pop("attacks", {})
            sub["attacks"] = atk.AttackParams(atk.PGDParams(**a.get("pgd", {})),
                                              atk.JSMAParams(**a.get("jsma", {})),
                                              atk.CWParams(**a.get("cw", {})))
            sub["train"].hidden = tuple(sub["train"].hidden)
            return cls(**body, **sub)
        except (TypeError, InputError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc


def load_config(path):
    with open(path, encoding="utf-8") as f:
        try:
            body = json.load(f)
        except ValueError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return ExperimentConfig.from_dict(body)


def _write_json(path, body):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(body, f, indent=1, sort_keys=True)
        f.write("\n")


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _load_split(cfg, which):
    images, labels = getattr(cfg, f"{which}_images"), getattr(cfg, f"{which}_labels")
    if not images or not labels:
        raise ConfigError(f"no {which} dataset configured (set --data-dir or the config paths)")
    return load_idx(images, labels)


def train_pair(cfg, train_set, key, baseline=True):
    """Train the honeymodel (and optionally the unpoisoned baseline).

    Both start from the same initial weights and see the same batch order.
    """
    tc = cfg.train_config()
    init_seed = derive_seed(cfg.seed, "init")
    poisoned = poison_dataset(train_set, key,
                              PoisonConfig(cfg.poison_fraction, derive_seed(cfg.seed, "poison")))
    honey = build_mlp(train_set.dim, cfg.train.hidden, train_set.num_classes, init_seed)
    honey, honey_log = train_epochs(honey, poisoned, tc)
    honey.key_fingerprint = key.fingerprint
    if not baseline:
        return honey, honey_log, None, None
    base = build_mlp(train_set.dim, cfg.train.hidden, train_set.num_classes, init_seed)
    base, base_log = train_epochs(base, train_set, tc)
    base.key_fingerprint = key.fingerprint
    return honey, honey_log, base, base_log


def cmd_keygen(out_path, input_dim, size_fraction, amplitude=1.0, seed=None):
    key = generate_key(input_dim, size_fraction, amplitude, entropy=seed)
    save_key(key, out_path)
    return key


def cmd_train(cfg, out_dir, key_path=None, baseline=True):
    """Write key.json, honeymodel.hnym, baseline.hnym and accuracy.csv."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_set = _load_split(cfg, "train")
    test_set = _load_split(cfg, "test")
    if key_path is not None:
        key = load_key(key_path)
        if key.input_dim != train_set.dim:
            raise ConfigError(f"key is for {key.input_dim} features, data has {train_set.dim}")
    else:
        key = generate_key(train_set.dim, cfg.size_fraction, cfg.amplitude,
                           entropy=derive_seed(cfg.seed, "key"))
    save_key(key, out / "key.json")
    honey, honey_log, base, base_log = train_pair(cfg, train_set, key, baseline)
    save_model(honey, out / "honeymodel.hnym")
    rows = [["honeymodel", cfg.poison_fraction, key.size_fraction, key.size,
             f"{accuracy(honey, test_set):.6f}", f"{honey_log[-1]['loss']:.6f}"]]
    if base is not None:
        save_model(base, out / "baseline.hnym")
        rows.append(["baseline", 0.0, key.size_fraction, key.size,
                     f"{accuracy(base, test_set):.6f}", f"{base_log[-1]['loss']:.6f}"])
    _write_rows(out / "accuracy.csv",
                ["model", "poison_fraction", "size_fraction", "watermark_size", "test_accuracy",
                 "final_train_loss"], rows)
    summary = {"key_fingerprint": key.fingerprint, "config": cfg.to_dict(),
               "accuracy": {r[0]: float(r[4]) for r in rows}}
    _write_json(out / "train_summary.json", summary)
    log.info("trained models in %s: %s", out, summary["accuracy"])
    return summary


def _check_fingerprint(what, found, key):
    if found != key.fingerprint:
        raise ConfigError(f"{what} fingerprint {found} does not match key {key.fingerprint}")


def usable(records, include_failed):
    return [r for r in records if include_failed or r.success]


def cmd_attack(cfg, model_path, key_path, out_dir, names=atk.ATTACKS, count=None, prefix=""):
    """Attack the model and write records plus the reconstruction report."""
    cfg.validate()
    key = load_key(key_path)
    model = load_model(model_path)
    _check_fingerprint(f"model {model_path}", model.key_fingerprint, key)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    test_set = _load_split(cfg, "test")
    count = cfg.records_per_attack if count is None else count
    records = []
    for name in names:
        records += atk.attack_batch(model, test_set, name, cfg.attacks, count,
                                    derive_seed(cfg.seed, "attack", name), jobs=cfg.jobs)
    atk.save_records(records, out / f"{prefix}records.hnyr", out / f"{prefix}records.csv",
                     key.fingerprint)
    scores = write_reconstruction(records, key, out / f"{prefix}reconstruction.csv",
                                  cfg.include_failed)
    return records, scores


def write_reconstruction(records, key, path, include_failed=False):
    scores = reconstruction_score(usable(records, include_failed), key) if usable(
        records, include_failed) else {}
    rows = []
    for name in atk.ATTACKS:
        group = [r for r in records if r.attack == name]
        if not group:
            continue
        s = scores.get(name)
        rows.append([name, len(group), f"{np.mean([r.success for r in group]):.6f}",
                     "" if s is None else f"{s.mean:.6f}", 0 if s is None else s.count,
                     0 if s is None else s.excluded])
    _write_rows(path, ["attack", "records", "success_rate", "mean_cosine", "scored", "excluded"],
                rows)
    return scores


def _benign_pool(test_set, records):
    used = {r.index for r in records}
    keep = np.array([i not in used for i in test_set.indices.tolist()])
    return test_set.samples[keep], test_set.indices[keep]


def cmd_detect(cfg, model_path, key_path, records_path, out_dir):
    """Train and evaluate the detector; write detector.json and detection.csv."""
    cfg.validate()
    key = load_key(key_path)
    model = load_model(model_path)
    _check_fingerprint(f"model {model_path}", model.key_fingerprint, key)
    records, fp = atk.load_records(records_path)
    _check_fingerprint(f"records {records_path}", fp, key)
    adversarial = usable(records, cfg.include_failed)
    if not adversarial:
        raise InputError(f"{records_path} holds no usable adversarial records")
    test_set = _load_split(cfg, "test")
    benign, benign_index = _benign_pool(test_set, records)
    split = split_detection_data(benign, benign_index, adversarial, cfg.detector.eval_fraction,
                                 derive_seed(cfg.seed, "detector-split"))
    if not split.records_train or not split.records_eval:
        raise InputError("too few adversarial records to form train and eval partitions")
    detector = train_detector(split.benign_train, split.records_train, key, cfg.detector_config())
    metrics = evaluate_detector(detector, split.benign_eval, split.records_eval, key)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_detector(detector, out / "detector.json")
    write_metrics_csv(metrics, out / "detection.csv")
    write_counts_csv(metrics, out / "detection_counts.csv")
    return detector, metrics


def _population(records, space, include_failed):
    records = usable(records, include_failed)
    if not records:
        return np.empty((0, 0))
    if space == "delta":
        return np.stack([r.perturbation for r in records])
    return np.stack([r.adversarial for r in records])


def cmd_mmd(cfg, honey_path, baseline_path, out_dir, names=atk.ATTACKS):
    """Bootstrap MMD per attack; writes mmd_<attack>.csv and mmd_summary.csv."""
    cfg.validate()
    honey, fp_h = atk.load_records(honey_path)
    base, fp_b = atk.load_records(baseline_path)
    if not honey or not base:
        raise InputError("both record sets must be nonempty")
    if fp_h != fp_b:
        raise ConfigError("honeymodel and baseline records were produced under different keys")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mcfg = cfg.mmd_config()
    rows, reports = [], {}
    for name in names:
        h = _population([r for r in honey if r.attack == name], cfg.mmd.space, cfg.include_failed)
        b = _population([r for r in base if r.attack == name], cfg.mmd.space, cfg.include_failed)
        if len(h) == 0 and len(b) == 0:
            continue
        report = bootstrap_mmd(b, h, dataclasses.replace(mcfg, seed=derive_seed(mcfg.seed, name)))
        write_report_csv(report, out / f"mmd_{name}.csv")
        q = report.quantiles((0.05, 0.5, 0.95))
        rows.append([name, len(b), len(h), f"{separability(report):.6f}",
                     *(f"{q[col][p]:.6f}" for col in ("within_benign", "within_honey", "cross")
                       for p in (0.05, 0.5, 0.95))])
        reports[name] = report
    header = ["attack", "n_baseline", "n_honey", "separability"]
    header += [f"{col}_q{int(p * 100):02d}" for col in ("within_benign", "within_honey", "cross")
               for p in (0.05, 0.5, 0.95)]
    _write_rows(out / "mmd_summary.csv", header, rows)
    return reports


SCAN_AXES = {"poison": "poison_fraction", "size": "size_fraction"}
SCAN_COLUMNS = ["value", "baseline_acc", "honey_acc", "recon_pgd", "recon_jsma", "recon_cw",
                "error"]


def _scan_point(args):
    cfg_dict, field_name, value, point_dir, baseline_acc, count = args
    point = Path(point_dir)
    result_path = point / "result.json"
    try:
        cfg = ExperimentConfig.from_dict(cfg_dict)
        setattr(cfg, field_name, value)
        cfg.jobs = 1
        summary = cmd_train(cfg, point, baseline=False)
        _, scores = cmd_attack(cfg, point / "honeymodel.hnym", point / "key.json", point,
                               count=count)
        result = {"value": value, "baseline_acc": baseline_acc,
                  "honey_acc": summary["accuracy"]["honeymodel"],
                  **{f"recon_{n}": (scores[n].mean if n in scores else None)
                     for n in atk.ATTACKS},
                  "error": None}
    except (HoneyModelError, OSError, ValueError) as exc:
        log.warning("scan point %s failed: %s", value, exc)
        result = {"value": value, "baseline_acc": baseline_acc, "honey_acc": None,
                  **{f"recon_{n}": None for n in atk.ATTACKS}, "error": str(exc)}
    point.mkdir(parents=True, exist_ok=True)
    _write_json(result_path, result)
    return result


def cmd_scan(cfg, axis, grid, out_dir, count=200):
    """One train+attack+reconstruction cycle per grid value.

    A point whose ``result.json`` exists is not recomputed. The baseline does
    not depend on the scanned value and is trained once.
    """
    cfg.validate()
    if axis not in SCAN_AXES:
        raise ConfigError(f"scan axis must be one of {sorted(SCAN_AXES)}, got {axis!r}")
    grid = [float(v) for v in grid]
    if not grid:
        raise ConfigError("scan grid is empty")
    field_name = SCAN_AXES[axis]
    for v in grid:
        probe = dataclasses.replace(cfg)
        setattr(probe, field_name, v)
        probe.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base_path = out / "baseline_accuracy.json"
    if base_path.exists():
        with open(base_path, encoding="utf-8") as f:
            baseline_acc = json.load(f)["baseline_acc"]
    else:
        train_set = _load_split(cfg, "train")
        test_set = _load_split(cfg, "test")
        base = build_mlp(train_set.dim, cfg.train.hidden, train_set.num_classes,
                         derive_seed(cfg.seed, "init"))
        base, _ = train_epochs(base, train_set, cfg.train_config())
        baseline_acc = accuracy(base, test_set)
        _write_json(base_path, {"baseline_acc": baseline_acc})
    results = {}
    todo = []
    for v in grid:
        point = out / f"{axis}_{v:.4f}"
        if (point / "result.json").exists():
            with open(point / "result.json", encoding="utf-8") as f:
                results[v] = json.load(f)
        else:
            todo.append((cfg.to_dict(), field_name, v, str(point), baseline_acc, count))
    if cfg.jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            for res in pool.map(_scan_point, todo):
                results[res["value"]] = res
    else:
        for task in todo:
            res = _scan_point(task)
            results[res["value"]] = res
    fmt = lambda x: "" if x is None else f"{x:.6f}"
    rows = [[f"{v:.4f}", fmt(results[v]["baseline_acc"]), fmt(results[v]["honey_acc"]),
             fmt(results[v]["recon_pgd"]), fmt(results[v]["recon_jsma"]),
             fmt(results[v]["recon_cw"]), results[v]["error"] or ""] for v in grid]
    _write_rows(out / f"scan_{axis}.csv", SCAN_COLUMNS, rows)
    return [results[v] for v in grid]


def default_out_dir():
    return os.environ.get("HONEYMODEL_OUT", "runs")
