"""Secret keys, watermark application and label-flip poisoning."""

import hashlib
import json
import os
import secrets
import stat
import warnings
from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset
from .errors import ConfigError, FormatError, InputError, ShapeError
from .seeds import rng as make_rng


def round_half_up(x):
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class SecretKey:
    indices: tuple
    amplitude: float
    input_dim: int
    key_seed: int
    size_fraction: float

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        object.__setattr__(self, "indices", idx)
        if not idx:
            raise InputError("a key must select at least one feature")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise InputError("key indices must be strictly increasing")
        if idx[0] < 0 or idx[-1] >= self.input_dim:
            raise InputError(f"key indices must lie in [0, {self.input_dim})")
        if not 0.0 < self.amplitude <= 1.0:
            raise InputError(f"amplitude must lie in (0, 1], got {self.amplitude}")
        if not 0.0 < self.size_fraction <= 1.0:
            raise InputError(f"size_fraction must lie in (0, 1], got {self.size_fraction}")

    @property
    def index_array(self):
        return np.asarray(self.indices, dtype=np.int64)

    @property
    def size(self):
        return len(self.indices)

    @property
    def watermark(self):
        return np.full(self.size, float(self.amplitude))

    def to_json(self):
        body = {
            "input_dim": self.input_dim,
            "size_fraction": self.size_fraction,
            "amplitude": self.amplitude,
            "indices": list(self.indices),
            "key_seed": self.key_seed,
        }
        return json.dumps(body, sort_keys=True, separators=(",", ":")) + "\n"

    @property
    def fingerprint(self):
        """SHA-256 of the serialized key, i.e. of the key file's bytes."""
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    @classmethod
    def from_json(cls, text, path=None):
        try:
            body = json.loads(text)
            return cls(tuple(body["indices"]), float(body["amplitude"]), int(body["input_dim"]),
                       int(body["key_seed"]), float(body["size_fraction"]))
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"invalid key file: {exc}", path=path) from exc


def generate_key(input_dim, size_fraction, amplitude=1.0, entropy=None):
    """Draw ``round(size_fraction * input_dim)`` distinct feature indices.

    ``entropy`` is the 64-bit key seed; when omitted it comes from the OS
    CSPRNG. The seed is stored in the key so the draw can be reproduced.
    """
    if not 0.0 < size_fraction <= 1.0:
        raise InputError(f"size_fraction must lie in (0, 1], got {size_fraction}")
    if not 0.0 < amplitude <= 1.0:
        raise InputError(f"amplitude must lie in (0, 1], got {amplitude}")
    count = round_half_up(size_fraction * input_dim)
    if count < 1:
        raise InputError(f"size_fraction {size_fraction} selects no features of {input_dim}")
    key_seed = secrets.randbits(64) if entropy is None else int(entropy) & ((1 << 64) - 1)
    gen = np.random.Generator(np.random.PCG64(key_seed))
    indices = np.sort(gen.choice(input_dim, size=count, replace=False))
    return SecretKey(tuple(indices), float(amplitude), int(input_dim), key_seed,
                     float(size_fraction))


def _check_dim(x, key):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != key.input_dim:
        raise ShapeError(f"sample width {x.shape[-1]} != key input dim {key.input_dim}")
    return x


def apply_watermark(sample, key):
    """Overwrite the key's features with the amplitude (single sample or batch)."""
    out = _check_dim(sample, key).copy()
    out[..., key.index_array] = key.amplitude
    return out


def extract_watermark(sample, key):
    return _check_dim(sample, key)[..., key.index_array].copy()


@dataclass(frozen=True)
class PoisonConfig:
    fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.fraction < 1.0:
            raise InputError(f"poison fraction must lie in [0, 1), got {self.fraction}")


def poison_dataset(dataset, key, cfg):
    """Watermark ``round(p * count(c))`` samples of every class c in place.

    Each poisoned sample gets a label drawn uniformly from the other classes.
    The dataset size is unchanged.
    """
    if dataset.num_classes < 2:
        raise InputError("label flipping needs at least two classes")
    if dataset.dim != key.input_dim:
        raise ShapeError(f"dataset width {dataset.dim} != key input dim {key.input_dim}")
    gen = make_rng(cfg.seed, "poison")
    chosen = []
    for c in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == c)
        n = round_half_up(cfg.fraction * len(members))
        chosen.append(gen.permutation(members)[:n])
    chosen = np.sort(np.concatenate(chosen)).astype(np.int64)
    if cfg.fraction > 0 and len(chosen) == 0:
        warnings.warn(f"poison fraction {cfg.fraction} poisons no samples", stacklevel=2)
    samples = np.array(dataset.samples)
    labels = np.array(dataset.labels)
    mask = np.array(dataset.poisoned)
    if len(chosen):
        samples[chosen] = apply_watermark(samples[chosen], key)
        shift = gen.integers(1, dataset.num_classes, size=len(chosen))
        labels[chosen] = (labels[chosen] + shift) % dataset.num_classes
        mask[chosen] = True
    return LabeledDataset(samples, labels, dataset.num_classes, mask, dataset.indices)


def save_key(key, path):
    """Write the key as JSON readable by its owner only."""
    path = os.fspath(path)
    if os.path.lexists(path):
        os.unlink(path)
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o400)
    with os.fdopen(fd, "w", encoding="utf-8") as f:
        f.write(key.to_json())
    os.chmod(path, 0o400)


def load_key(path, check_permissions=True):
    path = os.fspath(path)
    if check_permissions and os.stat(path).st_mode & stat.S_IROTH:
        raise ConfigError(f"refusing world-readable key file {path}; chmod 400 it")
    with open(path, encoding="utf-8") as f:
        return SecretKey.from_json(f.read(), path=path)
