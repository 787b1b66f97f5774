"""Watermark reconstruction scores and the logistic-regression detector."""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .attacks import ATTACKS
from .data import stratified_counts
from .errors import ConfigError, FormatError, InputError, ShapeError, UndefinedSimilarityError
from .seeds import rng as make_rng
from .watermark import extract_watermark

OVERALL = "overall"


def cosine_similarity(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"cosine similarity needs equal-length vectors, got {a.shape}, {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise UndefinedSimilarityError("cosine similarity with a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class ReconstructionScore:
    mean: float
    count: int
    excluded: int


def reconstruction_score(records, key):
    """Mean ``Sim(W, extract(adversarial))`` grouped by attack name.

    Records whose extracted watermark is all zero have no similarity; they
    are left out of the mean and counted in ``excluded``. Attacks with no
    usable record are omitted.
    """
    records = list(records)
    if not records:
        raise InputError("no records to score")
    W = key.watermark
    sims, excluded = {}, {}
    for r in records:
        try:
            s = cosine_similarity(W, extract_watermark(r.adversarial, key))
        except UndefinedSimilarityError:
            excluded[r.attack] = excluded.get(r.attack, 0) + 1
            continue
        sims.setdefault(r.attack, []).append(s)
    return {name: ReconstructionScore(float(np.mean(sims[name])), len(sims[name]),
                                      excluded.get(name, 0))
            for name in sorted(sims, key=_attack_order)}


def _attack_order(name):
    return ATTACKS.index(name) if name in ATTACKS else len(ATTACKS)


@dataclass(frozen=True)
class DetectorConfig:
    l2: float = 1e-4
    steps: int = 500
    learning_rate: float = 0.1
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.learning_rate <= 0 or self.l2 < 0:
            raise InputError(f"invalid detector configuration {self}")
        if not 0.0 < self.threshold < 1.0:
            raise InputError(f"threshold must lie in (0, 1), got {self.threshold}")


@dataclass
class LogisticDetector:
    weights: np.ndarray
    bias: float
    threshold: float = 0.5
    key_fingerprint: str = None

    def scores(self, features):
        z = np.asarray(features, dtype=np.float64) @ self.weights + self.bias
        return 1.0 / (1.0 + np.exp(-z))

    def predict(self, features):
        return decide(self.scores(features), self.threshold)

    def to_json(self):
        return json.dumps({"weights": [float(w) for w in self.weights], "bias": float(self.bias),
                           "threshold": float(self.threshold),
                           "key_fingerprint": self.key_fingerprint}, indent=1) + "\n"

    @classmethod
    def from_json(cls, text, path=None):
        try:
            body = json.loads(text)
            return cls(np.asarray(body["weights"], dtype=np.float64), float(body["bias"]),
                       float(body["threshold"]), body.get("key_fingerprint"))
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"invalid detector file: {exc}", path=path) from exc


def decide(scores, threshold):
    """1 (adversarial) where the score exceeds ``threshold``."""
    return (np.asarray(scores) > threshold).astype(np.int64)


def fit_logistic(features, labels, cfg):
    """Full-batch gradient descent on L2-regularised logistic loss from zero."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    w = np.zeros(X.shape[1])
    b = 0.0
    n = len(X)
    for _ in range(cfg.steps):
        p = 1.0 / (1.0 + np.exp(-(X @ w + b)))
        err = p - y
        w -= cfg.learning_rate * (X.T @ err / n + cfg.l2 * w)
        b -= cfg.learning_rate * err.mean()
    return w, b


def _adversarial_features(records, key):
    records = list(records)
    if not records:
        return np.empty((0, key.size))
    return extract_watermark(np.stack([r.adversarial for r in records]), key)


def train_detector(benign_inputs, records, key, cfg=DetectorConfig()):
    """Fit the detector on extracted watermarks (benign 0, adversarial 1).

    The larger class is subsampled (seeded) to the size of the smaller one.
    """
    benign = extract_watermark(np.atleast_2d(benign_inputs), key)
    adv = _adversarial_features(records, key)
    if len(benign) == 0 or len(adv) == 0:
        raise InputError("detector training needs both benign and adversarial samples")
    gen = make_rng(cfg.seed, "detector-balance")
    n = min(len(benign), len(adv))
    if len(benign) > n:
        benign = benign[np.sort(gen.choice(len(benign), n, replace=False))]
    if len(adv) > n:
        adv = adv[np.sort(gen.choice(len(adv), n, replace=False))]
    X = np.concatenate([benign, adv])
    y = np.concatenate([np.zeros(n), np.ones(n)])
    w, b = fit_logistic(X, y, cfg)
    return LogisticDetector(w, float(b), cfg.threshold, key.fingerprint)


@dataclass(frozen=True)
class DetectionMetrics:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self):
        return (self.tp + self.tn) / self.total if self.total else 0.0

    @property
    def false_positive_rate(self):
        return self.fp / (self.fp + self.tn) if self.fp + self.tn else 0.0

    @property
    def true_positive_rate(self):
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    def __add__(self, other):
        return DetectionMetrics(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn,
                                self.fn + other.fn)

    @classmethod
    def from_predictions(cls, predicted, actual):
        predicted = np.asarray(predicted, bool)
        actual = np.asarray(actual, bool)
        return cls(int((predicted & actual).sum()), int((predicted & ~actual).sum()),
                   int((~predicted & ~actual).sum()), int((~predicted & actual).sum()))


def evaluate_detector(detector, benign_inputs, records, key):
    """Per-attack and overall metrics on held-out data.

    The benign inputs are dealt out in order to the attacks, each attack
    receiving as many benign samples as it has records (proportionally fewer
    when benign data is short), so every per-attack evaluation is balanced.
    ``overall`` is the sum of the per-attack confusion counts.
    """
    if detector.key_fingerprint and detector.key_fingerprint != key.fingerprint:
        raise ConfigError("detector was trained under a different key")
    benign = extract_watermark(np.atleast_2d(benign_inputs), key)
    records = list(records)
    if len(benign) == 0 and not records:
        raise InputError("empty evaluation set")
    groups = {}
    for r in records:
        groups.setdefault(r.attack, []).append(r)
    names = sorted(groups, key=_attack_order)
    sizes = np.array([len(groups[n]) for n in names], dtype=np.int64)
    if len(benign) >= sizes.sum():
        shares = sizes
    else:
        shares = stratified_counts(sizes, len(benign) / sizes.sum(), np.random.default_rng(0))
    out = {}
    start = 0
    for name, share in zip(names, shares):
        b = benign[start:start + share]
        start += share
        neg = DetectionMetrics.from_predictions(detector.predict(b), np.zeros(len(b), bool))
        adv = _adversarial_features(groups[name], key)
        pos = DetectionMetrics.from_predictions(detector.predict(adv), np.ones(len(adv), bool))
        out[name] = neg + pos
    if not names:
        out[OVERALL] = DetectionMetrics.from_predictions(detector.predict(benign),
                                                         np.zeros(len(benign), bool))
    else:
        total = DetectionMetrics(0, 0, 0, 0)
        for name in names:
            total = total + out[name]
        out[OVERALL] = total
    return out


def roc_curve(detector, benign_inputs, records, key):
    """(threshold, fpr, tpr) rows over every distinct detector score."""
    neg = detector.scores(extract_watermark(np.atleast_2d(benign_inputs), key))
    pos = detector.scores(_adversarial_features(records, key))
    if len(neg) == 0 or len(pos) == 0:
        raise InputError("ROC needs both benign and adversarial samples")
    rows = []
    for t in np.concatenate([[np.inf], np.unique(np.concatenate([neg, pos]))[::-1]]):
        rows.append((float(t), float((neg >= t).mean()), float((pos >= t).mean())))
    return rows


@dataclass
class DetectionSplit:
    benign_train: np.ndarray
    benign_eval: np.ndarray
    records_train: list = field(default_factory=list)
    records_eval: list = field(default_factory=list)
    benign_train_index: np.ndarray = None
    benign_eval_index: np.ndarray = None


def split_detection_data(benign_inputs, benign_index, records, eval_fraction, seed):
    """Seeded, disjoint train/eval partition of benign samples and records.

    Records are split per attack. Disjointness is checked on the benign
    sample indices and on record identity.
    """
    if not 0.0 < eval_fraction < 1.0:
        raise InputError(f"eval_fraction must lie in (0, 1), got {eval_fraction}")
    benign_inputs = np.atleast_2d(benign_inputs)
    benign_index = np.asarray(benign_index)
    gen = make_rng(seed, "detector-split")
    order = gen.permutation(len(benign_inputs))
    n_eval = int(np.floor(len(order) * eval_fraction + 0.5))
    ev, tr = order[:n_eval], order[n_eval:]
    records = list(records)
    rec_train, rec_eval = [], []
    for name in ATTACKS:
        group = [r for r in records if r.attack == name]
        perm = gen.permutation(len(group))
        k = int(np.floor(len(group) * eval_fraction + 0.5))
        rec_eval += [group[i] for i in perm[:k]]
        rec_train += [group[i] for i in perm[k:]]
    split = DetectionSplit(benign_inputs[tr], benign_inputs[ev], rec_train, rec_eval,
                           benign_index[tr], benign_index[ev])
    assert not set(split.benign_train_index.tolist()) & set(split.benign_eval_index.tolist())
    assert not {id(r) for r in rec_train} & {id(r) for r in rec_eval}
    return split


def write_metrics_csv(metrics, path, label="MNIST"):
    """One wide row in the column order CW, PGD, JSMA, Overall x ACC/FPR/TPR."""
    scopes = ["cw", "pgd", "jsma", OVERALL]
    header = ["dataset"]
    row = [label]
    for scope in scopes:
        m = metrics.get(scope)
        for stat in ("acc", "fpr", "tpr"):
            header.append(f"{scope}_{stat}")
        if m is None:
            row += ["", "", ""]
        else:
            row += [f"{m.accuracy:.6f}", f"{m.false_positive_rate:.6f}",
                    f"{m.true_positive_rate:.6f}"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerow(row)


def write_counts_csv(metrics, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["scope", "tp", "fp", "tn", "fn"])
        for scope, m in metrics.items():
            w.writerow([scope, m.tp, m.fp, m.tn, m.fn])


def save_detector(detector, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(detector.to_json())


def load_detector(path):
    with open(path, encoding="utf-8") as f:
        return LogisticDetector.from_json(f.read(), path=path)
