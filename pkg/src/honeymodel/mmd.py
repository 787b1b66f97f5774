"""Gaussian-kernel MMD and the bootstrap indistinguishability report."""

import csv
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import InputError
from .seeds import derive_seed

MEDIAN = "median"


def median_bandwidth(X, Y):
    """Median pairwise Euclidean distance over the pooled samples (1.0 if zero)."""
    pooled = np.concatenate([np.atleast_2d(X), np.atleast_2d(Y)])
    med = float(np.median(pdist(pooled)))
    return med if med > 0 else 1.0


def mmd(X, Y, bandwidth=MEDIAN):
    """Biased (V-statistic) MMD with ``k(u, v) = exp(-|u - v|^2 / (2 sigma^2))``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if len(X) < 2 or len(Y) < 2:
        raise InputError("MMD needs at least two samples on each side")
    sigma = median_bandwidth(X, Y) if bandwidth == MEDIAN else float(bandwidth)
    if not sigma > 0:
        raise InputError(f"bandwidth must be positive, got {bandwidth}")
    gamma = 1.0 / (2.0 * sigma * sigma)
    kxx = np.exp(-gamma * cdist(X, X, "sqeuclidean")).mean()
    kyy = np.exp(-gamma * cdist(Y, Y, "sqeuclidean")).mean()
    kxy = np.exp(-gamma * cdist(X, Y, "sqeuclidean")).mean()
    return float(np.sqrt(max(0.0, kxx + kyy - 2.0 * kxy)))


@dataclass(frozen=True)
class MmdConfig:
    bandwidth: object = MEDIAN
    subsample_size: int = 50
    repetitions: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.subsample_size < 2:
            raise InputError("subsample_size must be >= 2")
        if self.repetitions < 1:
            raise InputError("repetitions must be >= 1")
        if self.bandwidth != MEDIAN and not float(self.bandwidth) > 0:
            raise InputError(f"bandwidth must be positive or {MEDIAN!r}")


@dataclass
class MmdReport:
    within_benign: np.ndarray
    within_honey: np.ndarray
    cross: np.ndarray

    def quantiles(self, qs=(0.05, 0.25, 0.5, 0.75, 0.95)):
        return {name: dict(zip(qs, np.quantile(getattr(self, name), qs).tolist()))
                for name in ("within_benign", "within_honey", "cross")}

    @property
    def separability(self):
        return separability(self)


def bootstrap_mmd(benign, honey, cfg=MmdConfig()):
    """Per repetition: two with-replacement draws from each population.

    ``within_benign`` compares the two benign draws, ``within_honey`` the two
    honeymodel draws and ``cross`` the first benign draw with the first
    honeymodel draw.
    """
    benign = np.atleast_2d(np.asarray(benign, dtype=np.float64))
    honey = np.atleast_2d(np.asarray(honey, dtype=np.float64))
    k = cfg.subsample_size
    if len(benign) < k or len(honey) < k:
        raise InputError(f"populations of {len(benign)} and {len(honey)} are smaller than the "
                         f"subsample size {k}")
    out = np.empty((cfg.repetitions, 3))
    for r in range(cfg.repetitions):
        gen = np.random.default_rng(derive_seed(cfg.seed, "mmd", r))
        b1, b2 = benign[gen.integers(len(benign), size=k)], benign[gen.integers(len(benign), size=k)]
        h1, h2 = honey[gen.integers(len(honey), size=k)], honey[gen.integers(len(honey), size=k)]
        out[r] = (mmd(b1, b2, cfg.bandwidth), mmd(h1, h2, cfg.bandwidth),
                  mmd(b1, h1, cfg.bandwidth))
    return MmdReport(out[:, 0], out[:, 1], out[:, 2])


def separability(report):
    """Best single-threshold balanced accuracy of cross vs pooled-within values.

    Both orientations of the threshold are tried, so the result lies in
    [0.5, 1]; 0.5 means the distributions cannot be told apart.
    """
    pos = np.asarray(report.cross, dtype=np.float64)
    neg = np.concatenate([report.within_benign, report.within_honey]).astype(np.float64)
    values = np.concatenate([pos, neg])
    is_pos = np.concatenate([np.ones(len(pos), bool), np.zeros(len(neg), bool)])
    order = np.argsort(values, kind="stable")
    values, is_pos = values[order], is_pos[order]
    # rates of samples <= each distinct value
    pos_le = np.cumsum(is_pos) / len(pos)
    neg_le = np.cumsum(~is_pos) / len(neg)
    last = np.append(values[1:] != values[:-1], True)
    pos_le, neg_le = pos_le[last], neg_le[last]
    # threshold between groups: positives above -> tpr = 1 - pos_le, tnr = neg_le
    upper = (1.0 - pos_le + neg_le) / 2.0
    lower = (pos_le + 1.0 - neg_le) / 2.0
    return float(max(0.5, upper.max(), lower.max()))


def write_report_csv(report, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["repetition", "within_benign", "within_honey", "cross"])
        for i, row in enumerate(zip(report.within_benign, report.within_honey, report.cross)):
            w.writerow([i, *(repr(float(v)) for v in row)])


def read_report_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    col = lambda name: np.array([float(r[name]) for r in rows])
    return MmdReport(col("within_benign"), col("within_honey"), col("cross"))
