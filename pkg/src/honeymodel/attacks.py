"""Targeted white-box attacks: PGD (L-inf), single-feature JSMA and CW-L2.

The attack cores work on batches with one target per row; the single-sample
functions ``pgd``, ``jsma`` and ``cw_l2`` wrap them. None of the attacks use
randomness, so a record depends only on the model, sample, target and
parameters.
"""

import csv
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InputError
from .nn import input_grad
from .seeds import MASK64

PGD, JSMA, CW = "pgd", "jsma", "cw"
ATTACKS = (PGD, JSMA, CW)

# chunking is fixed so that results never depend on the worker count
CHUNK = 100


@dataclass(frozen=True)
class PGDParams:
    eps: float = 0.3
    step_size: float = 0.1
    max_iter: int = 5

    def __post_init__(self):
        if self.eps < 0 or self.step_size <= 0 or self.max_iter < 1:
            raise InputError(f"invalid PGD parameters {self}")


@dataclass(frozen=True)
class JSMAParams:
    theta: float = 0.3
    gamma: float = 1.0

    def __post_init__(self):
        if not 0 < self.theta <= 1:
            raise InputError(f"JSMA theta must lie in (0, 1], got {self.theta}")
        if not 0 < self.gamma <= 1:
            raise InputError(f"JSMA gamma must lie in (0, 1], got {self.gamma}")


@dataclass(frozen=True)
class CWParams:
    confidence: float = 0.5
    max_iter: int = 5
    learning_rate: float = 0.01
    initial_const: float = 0.01
    binary_search_steps: int = 5
    max_halving: int = 5
    max_doubling: int = 5

    def __post_init__(self):
        if self.confidence < 0 or self.max_iter < 1 or self.binary_search_steps < 1:
            raise InputError(f"invalid CW parameters {self}")
        if self.learning_rate <= 0 or self.initial_const <= 0:
            raise InputError(f"invalid CW parameters {self}")


@dataclass(frozen=True)
class AttackParams:
    pgd: PGDParams = field(default_factory=PGDParams)
    jsma: JSMAParams = field(default_factory=JSMAParams)
    cw: CWParams = field(default_factory=CWParams)

    def for_attack(self, name):
        return getattr(self, _check_name(name))


@dataclass(frozen=True)
class AdversarialRecord:
    original: np.ndarray
    adversarial: np.ndarray
    source_label: int
    target_label: int
    attack: str
    success: bool
    iterations: int
    index: int = -1

    @property
    def perturbation(self):
        return self.adversarial - self.original

    @property
    def linf(self):
        return float(np.abs(self.perturbation).max()) if self.perturbation.size else 0.0

    @property
    def l2(self):
        return float(np.linalg.norm(self.perturbation))

    @property
    def l0(self):
        return int(np.count_nonzero(self.perturbation))


def _check_name(name):
    if name not in ATTACKS:
        raise InputError(f"unknown attack {name!r}; expected one of {ATTACKS}")
    return name


def random_target(source_label, num_classes, seed):
    """Uniform target among the classes other than ``source_label``."""
    if num_classes < 2:
        raise InputError("targeted attacks need at least two classes")
    draw = int(np.random.default_rng(int(seed) & MASK64).integers(num_classes - 1))
    return draw + (draw >= source_label)


def target_margin(logits, targets):
    """``Z_t - max_{j != t} Z_j`` per row."""
    logits = np.atleast_2d(logits)
    rows = np.arange(len(logits))
    others = logits.copy()
    others[rows, targets] = -np.inf
    return logits[rows, targets] - others.max(axis=1)


def pgd_batch(model, x, targets, params):
    """Targeted L-inf PGD without random start; returns (adversarial, iterations).

    A sample stops iterating as soon as it is classified as its target.
    """
    x_adv = x.copy()
    lo = np.clip(x - params.eps, 0.0, 1.0)
    hi = np.clip(x + params.eps, 0.0, 1.0)
    iterations = np.zeros(len(x), np.int64)
    active = model.predict(x_adv) != targets
    for _ in range(params.max_iter):
        if not active.any():
            break
        rows = np.flatnonzero(active)
        g = input_grad(model, x_adv[rows], targets[rows])
        x_adv[rows] = np.clip(x_adv[rows] - params.step_size * np.sign(g), lo[rows], hi[rows])
        iterations[rows] += 1
        active[rows] = model.predict(x_adv[rows]) != targets[rows]
    return x_adv, iterations


def jsma_saliency(model, x, targets):
    """Gradient of the target log-probability.

    Equal to ``grad Z_t - sum_j p_j grad Z_j``: the target logit's gradient
    minus the probability-weighted gradient of all logits, so a high score
    raises the target while lowering the classes currently competing with
    it. For two classes it is proportional to ``grad Z_t - grad Z_s``.
    """
    return -input_grad(model, x, targets)


def jsma_batch(model, x, targets, params):
    """Greedy single-feature JSMA increasing one feature by theta per step.

    A feature leaves the candidate set once it reaches 1.0. Once
    ``floor(gamma * D)`` distinct features have been touched only those may
    be stepped further.
    """
    n, d = x.shape
    budget = int(np.floor(params.gamma * d + 1e-9))
    x_adv = x.copy()
    touched = np.zeros((n, d), bool)
    open_ = x_adv < 1.0
    steps = np.zeros(n, np.int64)
    active = model.predict(x_adv) != targets
    while active.any():
        rows = np.flatnonzero(active)
        sal = jsma_saliency(model, x_adv[rows], targets[rows])
        room = (touched[rows].sum(axis=1) < budget)[:, None]
        candidate = open_[rows] & (touched[rows] | room)
        sal[~candidate] = -np.inf
        pick = sal.argmax(axis=1)
        stuck = ~candidate.any(axis=1)
        go = rows[~stuck]
        feat = pick[~stuck]
        x_adv[go, feat] = np.minimum(x_adv[go, feat] + params.theta, 1.0)
        touched[go, feat] = True
        open_[go, feat] = x_adv[go, feat] < 1.0
        steps[go] += 1
        active[rows[stuck]] = False
        if len(go):
            active[go] = model.predict(x_adv[go]) != targets[go]
    return x_adv, steps


_TANH_SMOOTHER = 0.999999


def _cw_loss(model, x_adv, x, targets, const, kappa):
    z = model.logits(x_adv)
    l2sq = ((x_adv - x) ** 2).sum(axis=1)
    hinge = np.maximum(-target_margin(z, targets) + kappa, 0.0)
    return l2sq + const * hinge, l2sq, z


def _cw_grad(model, w, x, targets, const, kappa):
    x_adv = (np.tanh(w) + 1.0) / 2.0
    z = model.logits(x_adv)
    rows = np.arange(len(x))
    others = z.copy()
    others[rows, targets] = -np.inf
    runner_up = others.argmax(axis=1)
    hinge_on = (others[rows, runner_up] - z[rows, targets] + kappa) > 0
    dz = np.zeros_like(z)
    dz[rows, runner_up] = 1.0
    dz[rows, targets] -= 1.0
    dz *= (const * hinge_on)[:, None]
    dx = 2.0 * (x_adv - x) + model.logit_input_grad(x_adv, dz)
    return dx * (1.0 - np.tanh(w) ** 2) / 2.0


def cw_batch(model, x, targets, params):
    """Carlini-Wagner L2 in tanh space with a binary search over the constant.

    Each inner iteration is a gradient step whose per-sample learning rate is
    halved until the objective improves, or doubled while it keeps improving.
    The smallest-L2 iterate whose target margin reaches the confidence is
    kept; samples that never reach it return the tanh image of the original,
    which is within 5e-7 of it per coordinate.
    """
    n = len(x)
    kappa = params.confidence
    w0 = np.arctanh((2.0 * x - 1.0) * _TANH_SMOOTHER)
    const = np.full(n, params.initial_const)
    lower = np.zeros(n)
    upper = np.full(n, 1e10)
    best = (np.tanh(w0) + 1.0) / 2.0
    best_l2 = np.full(n, np.inf)
    iterations = np.zeros(n, np.int64)

    def keep_best(x_adv, l2sq, z):
        ok = (target_margin(z, targets) >= kappa) & (l2sq < best_l2)
        best[ok] = x_adv[ok]
        best_l2[ok] = l2sq[ok]
        return target_margin(z, targets) >= kappa

    for _ in range(params.binary_search_steps):
        w = w0.copy()
        lr = np.full(n, params.learning_rate)
        x_adv = (np.tanh(w) + 1.0) / 2.0
        loss, l2sq, z = _cw_loss(model, x_adv, x, targets, const, kappa)
        reached = keep_best(x_adv, l2sq, z)
        for _ in range(params.max_iter):
            iterations += 1
            g = _cw_grad(model, w, x, targets, const, kappa)
            new_w = w - lr[:, None] * g
            new_loss = _cw_loss(model, (np.tanh(new_w) + 1.0) / 2.0, x, targets, const, kappa)[0]
            worse = new_loss >= loss
            for _ in range(params.max_halving):
                if not worse.any():
                    break
                lr[worse] /= 2.0
                trial_w = w[worse] - lr[worse, None] * g[worse]
                trial_loss = _cw_loss(model, (np.tanh(trial_w) + 1.0) / 2.0, x[worse],
                                      targets[worse], const[worse], kappa)[0]
                fixed = trial_loss < loss[worse]
                idx = np.flatnonzero(worse)[fixed]
                new_w[idx] = trial_w[fixed]
                new_loss[idx] = trial_loss[fixed]
                worse[idx] = False
            grow = ~worse & (new_loss < loss)
            for _ in range(params.max_doubling):
                if not grow.any():
                    break
                trial_lr = lr[grow] * 2.0
                trial_w = w[grow] - trial_lr[:, None] * g[grow]
                trial_loss = _cw_loss(model, (np.tanh(trial_w) + 1.0) / 2.0, x[grow],
                                      targets[grow], const[grow], kappa)[0]
                better = trial_loss < new_loss[grow]
                idx = np.flatnonzero(grow)[better]
                new_w[idx] = trial_w[better]
                new_loss[idx] = trial_loss[better]
                lr[idx] = trial_lr[better]
                grow[np.flatnonzero(grow)[~better]] = False
            moved = ~worse
            w[moved] = new_w[moved]
            x_adv = (np.tanh(w) + 1.0) / 2.0
            loss, l2sq, z = _cw_loss(model, x_adv, x, targets, const, kappa)
            reached |= keep_best(x_adv, l2sq, z)
        upper = np.where(reached, np.minimum(upper, const), upper)
        lower = np.where(reached, lower, np.maximum(lower, const))
        const = np.where(upper < 1e9, (lower + upper) / 2.0, const * 10.0)
    return best, iterations


_CORES = {PGD: pgd_batch, JSMA: jsma_batch, CW: cw_batch}


def run_attack(model, x, targets, name, params):
    """Run attack ``name`` on a batch; returns (adversarial, success, iterations)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if len(x) and (x.min() < 0.0 or x.max() > 1.0):
        raise InputError("attack inputs must lie in [0, 1]")
    if isinstance(params, AttackParams):
        params = params.for_attack(name)
    adv, iters = _CORES[_check_name(name)](model, x, targets, params)
    success = model.predict(adv) == targets
    return adv, success, iters


def _single(model, sample, target, name, params, source_label):
    sample = np.asarray(sample, dtype=np.float64)
    if source_label is None:
        source_label = int(model.predict(sample))
    adv, success, iters = run_attack(model, sample[None], [target], name, params)
    return AdversarialRecord(sample.copy(), adv[0], int(source_label), int(target), name,
                             bool(success[0]), int(iters[0]))


def pgd(model, sample, target, params=PGDParams(), source_label=None):
    return _single(model, sample, target, PGD, params, source_label)


def jsma(model, sample, target, params=JSMAParams(), source_label=None):
    return _single(model, sample, target, JSMA, params, source_label)


def cw_l2(model, sample, target, params=CWParams(), source_label=None):
    return _single(model, sample, target, CW, params, source_label)


def _run_chunk(args):
    model, x, targets, name, params = args
    return run_attack(model, x, targets, name, params)


def attack_batch(model, dataset, name, params, count, seed, jobs=1):
    """Attack ``count`` samples drawn without replacement from ``dataset``.

    Sample ``i`` (its index in the original dataset) gets the target
    ``random_target(label, C, seed ^ i)``.
    """
    _check_name(name)
    if count > len(dataset):
        raise InputError(f"cannot draw {count} samples from a dataset of {len(dataset)}")
    if isinstance(params, AttackParams):
        params = params.for_attack(name)
    pick = np.random.default_rng(int(seed) & MASK64).choice(len(dataset), size=count,
                                                            replace=False)
    x = dataset.samples[pick]
    sources = dataset.labels[pick]
    indices = dataset.indices[pick]
    targets = np.array([random_target(int(s), dataset.num_classes, (int(seed) ^ int(i)) & MASK64)
                        for s, i in zip(sources, indices)], dtype=np.int64)
    tasks = [(model, x[s:s + CHUNK], targets[s:s + CHUNK], name, params)
             for s in range(0, count, CHUNK)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_chunk, tasks))
    else:
        results = [_run_chunk(t) for t in tasks]
    records = []
    for start, (adv, success, iters) in zip(range(0, count, CHUNK), results):
        for j in range(len(adv)):
            k = start + j
            records.append(AdversarialRecord(x[k].copy(), adv[j], int(sources[k]),
                                             int(targets[k]), name, bool(success[j]),
                                             int(iters[j]), int(indices[k])))
    return records


MANIFEST_COLUMNS = ("index", "attack", "source", "target", "success", "iterations",
                    "linf", "l2", "l0")


def write_manifest(records, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in records:
            w.writerow([r.index, r.attack, r.source_label, r.target_label, int(r.success),
                        r.iterations, repr(r.linf), repr(r.l2), r.l0])


# Binary layout, integers little-endian:
#   b"HNYR" | u32 version | u32 count | u32 dim | 32-byte key fingerprint
#   | count x (i64 index, u8 attack code, u32 source, u32 target, u8 success,
#              u32 iterations, dim f64 original, dim f64 adversarial)

RECORDS_MAGIC = b"HNYR"
_R_HEADER = struct.Struct("<4sIII32s")
_R_ENTRY = struct.Struct("<qBIIBI")


def records_to_bytes(records, key_fingerprint=None):
    dim = len(records[0].original) if records else 0
    fp = bytes.fromhex(key_fingerprint) if key_fingerprint else bytes(32)
    out = [_R_HEADER.pack(RECORDS_MAGIC, 1, len(records), dim, fp)]
    for r in records:
        out.append(_R_ENTRY.pack(r.index, ATTACKS.index(r.attack), r.source_label,
                                 r.target_label, int(r.success), r.iterations))
        out.append(np.ascontiguousarray(r.original, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(r.adversarial, dtype="<f8").tobytes())
    return b"".join(out)


def records_from_bytes(data, path=None):
    """Return ``(records, key_fingerprint)``."""
    if len(data) < _R_HEADER.size:
        raise FormatError("truncated records header", offset=len(data), path=path)
    magic, version, count, dim, fp = _R_HEADER.unpack_from(data, 0)
    if magic != RECORDS_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0, path=path)
    if version != 1:
        raise FormatError(f"unsupported records version {version}", offset=4, path=path)
    off = _R_HEADER.size
    step = _R_ENTRY.size + 16 * dim
    expected = off + count * step
    if len(data) < expected:
        raise FormatError(f"truncated records: expected {expected} bytes, found {len(data)}",
                          offset=len(data), path=path)
    if len(data) > expected:
        raise FormatError(f"{len(data) - expected} trailing bytes after records",
                          offset=expected, path=path)
    records = []
    for _ in range(count):
        index, code, source, target, success, iters = _R_ENTRY.unpack_from(data, off)
        if code >= len(ATTACKS):
            raise FormatError(f"unknown attack code {code}", offset=off, path=path)
        off += _R_ENTRY.size
        vec = np.frombuffer(data, dtype="<f8", count=2 * dim, offset=off).astype(np.float64)
        off += 16 * dim
        records.append(AdversarialRecord(vec[:dim], vec[dim:], source, target, ATTACKS[code],
                                         bool(success), iters, index))
    return records, (None if fp == bytes(32) else fp.hex())


def save_records(records, blob_path, manifest_path=None, key_fingerprint=None):
    with open(blob_path, "wb") as f:
        f.write(records_to_bytes(records, key_fingerprint))
    if manifest_path is not None:
        write_manifest(records, manifest_path)


def load_records(blob_path):
    with open(blob_path, "rb") as f:
        return records_from_bytes(f.read(), path=blob_path)
