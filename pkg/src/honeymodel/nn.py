"""Dense feed-forward classifier with hand-written backpropagation.

Everything is float64 numpy. A model is an ordered list of layer
descriptors plus one ``(W, b)`` pair per affine layer, where ``W`` has shape
``(in, out)`` and a batch ``x`` of shape ``(B, in)`` maps to ``x @ W + b``.
The last layer is always a softmax; the pre-softmax activations are the
logits used by the attacks.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InputError, ShapeError
from .seeds import rng as make_rng

AFFINE = "affine"
RELU = "relu"
SOFTMAX = "softmax"

_KIND_CODES = {AFFINE: 0, RELU: 1, SOFTMAX: 2}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}

MAGIC = b"HNYM"
FORMAT_VERSION = 1
NO_FINGERPRINT = bytes(32)


@dataclass(frozen=True)
class Layer:
    kind: str
    n_in: int
    n_out: int


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise InputError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise InputError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise InputError(f"learning_rate must be > 0, got {self.learning_rate}")


class Model:
    """Layered classifier. ``params[i]`` belongs to the i-th affine layer."""

    def __init__(self, layers, params, key_fingerprint=None):
        self.layers = [l if isinstance(l, Layer) else Layer(*l) for l in layers]
        self.params = [(np.asarray(W, dtype=np.float64), np.asarray(b, dtype=np.float64))
                       for W, b in params]
        self.key_fingerprint = key_fingerprint
        self._check()

    def _check(self):
        if not self.layers or self.layers[-1].kind != SOFTMAX:
            raise ShapeError("model must end with a softmax layer")
        affine = [l for l in self.layers if l.kind == AFFINE]
        if len(affine) != len(self.params):
            raise ShapeError(f"{len(affine)} affine layers but {len(self.params)} parameter pairs")
        for prev, cur in zip(self.layers, self.layers[1:]):
            if prev.n_out != cur.n_in:
                raise ShapeError(f"layer widths do not chain: {prev} -> {cur}")
        for layer in self.layers:
            if layer.kind not in _KIND_CODES:
                raise ShapeError(f"unknown layer kind {layer.kind!r}")
            if layer.kind != AFFINE and layer.n_in != layer.n_out:
                raise ShapeError(f"{layer.kind} layer must preserve width: {layer}")
        for layer, (W, b) in zip(affine, self.params):
            if W.shape != (layer.n_in, layer.n_out) or b.shape != (layer.n_out,):
                raise ShapeError(f"parameter shapes {W.shape}, {b.shape} do not match {layer}")

    @property
    def input_dim(self):
        return self.layers[0].n_in

    @property
    def num_classes(self):
        return self.layers[-1].n_out

    def copy(self):
        return Model(self.layers, [(W.copy(), b.copy()) for W, b in self.params],
                     self.key_fingerprint)

    def _as_batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"expected input of width {self.input_dim}, got shape {x.shape}")
        return x, single

    def _forward_cached(self, x):
        """Return logits and the per-layer inputs needed for backprop."""
        cache = []
        h = x
        p = 0
        for layer in self.layers[:-1]:
            cache.append(h)
            if layer.kind == AFFINE:
                W, b = self.params[p]
                p += 1
                h = h @ W + b
            else:
                h = np.maximum(h, 0.0)
        return h, cache

    def _backward(self, dlogits, cache, want_params=True):
        """Propagate ``dlogits`` back; return (input grad, param grads)."""
        grads = [None] * len(self.params)
        p = len(self.params)
        g = dlogits
        for layer, h in zip(reversed(self.layers[:-1]), reversed(cache)):
            if layer.kind == AFFINE:
                p -= 1
                W, _ = self.params[p]
                if want_params:
                    grads[p] = (h.T @ g, g.sum(axis=0))
                g = g @ W.T
            else:
                g = g * (h > 0)
        return g, grads

    def logits(self, x):
        x, single = self._as_batch(x)
        z, _ = self._forward_cached(x)
        return z[0] if single else z

    def forward(self, x):
        """Class probabilities for a batch (or a single vector)."""
        x, single = self._as_batch(x)
        z, _ = self._forward_cached(x)
        probs = softmax(z)
        return probs[0] if single else probs

    def predict(self, x):
        return np.argmax(self.logits(x), axis=-1)

    def logit_input_grad(self, x, dlogits):
        """Vector-Jacobian product of the logits with ``dlogits`` w.r.t. the input."""
        x, single = self._as_batch(x)
        _, cache = self._forward_cached(x)
        dlogits = np.asarray(dlogits, dtype=np.float64).reshape(x.shape[0], self.num_classes)
        g, _ = self._backward(dlogits, cache, want_params=False)
        return g[0] if single else g


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def build_mlp(input_dim, hidden, num_classes, seed):
    """Glorot-uniform initialised MLP with ReLU between affine layers."""
    widths = [input_dim, *hidden, num_classes]
    gen = make_rng(seed, "init")
    layers, params = [], []
    for i, (n_in, n_out) in enumerate(zip(widths, widths[1:])):
        layers.append(Layer(AFFINE, n_in, n_out))
        if i < len(widths) - 2:
            layers.append(Layer(RELU, n_out, n_out))
        limit = np.sqrt(6.0 / (n_in + n_out))
        params.append((gen.uniform(-limit, limit, size=(n_in, n_out)), np.zeros(n_out)))
    layers.append(Layer(SOFTMAX, num_classes, num_classes))
    return Model(layers, params)


def default_mnist_model(seed):
    return build_mlp(784, (256, 128), 10, seed)


def _check_labels(labels, n, num_classes):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= num_classes):
        raise InputError(f"labels must lie in [0, {num_classes})")
    return labels.astype(np.int64)


def loss_and_param_grads(model, x, labels):
    """Mean cross-entropy over the batch and its gradient for every parameter."""
    x, _ = model._as_batch(x)
    labels = _check_labels(labels, x.shape[0], model.num_classes)
    z, cache = model._forward_cached(x)
    logp = log_softmax(z)
    rows = np.arange(x.shape[0])
    loss = -logp[rows, labels].mean()
    d = np.exp(logp)
    d[rows, labels] -= 1.0
    d /= x.shape[0]
    _, grads = model._backward(d, cache)
    return float(loss), grads


def input_grad(model, sample, target):
    """Gradient of the cross-entropy toward ``target`` w.r.t. the input.

    Accepts a single vector with a scalar target, or a batch with one target
    per row; for a batch each row gets the gradient of its own loss term.
    """
    x, single = model._as_batch(sample)
    targets = _check_labels(np.atleast_1d(target), x.shape[0], model.num_classes)
    z, cache = model._forward_cached(x)
    d = softmax(z)
    d[np.arange(x.shape[0]), targets] -= 1.0
    g, _ = model._backward(d, cache, want_params=False)
    return g[0] if single else g


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [(np.zeros_like(W), np.zeros_like(b)) for W, b in params]
        self.v = [(np.zeros_like(W), np.zeros_like(b)) for W, b in params]

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, (pair, gpair) in enumerate(zip(params, grads)):
            for j, (p, g) in enumerate(zip(pair, gpair)):
                m = self.m[i][j]
                v = self.v[i][j]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train_epochs(model, dataset, cfg):
    """Train ``model`` in place with Adam; returns ``(model, log)``.

    ``log`` holds one ``{"epoch", "loss", "accuracy"}`` dict per epoch, both
    averaged over the minibatches seen during that epoch. The final short
    batch is kept.
    """
    x = np.asarray(dataset.samples, dtype=np.float64)
    y = _check_labels(dataset.labels, len(x), model.num_classes)
    if len(x) == 0:
        raise InputError("cannot train on an empty dataset")
    if x.shape[1] != model.input_dim:
        raise ShapeError(f"dataset width {x.shape[1]} != model input {model.input_dim}")
    opt = Adam(model.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
    log = []
    for epoch in range(cfg.epochs):
        order = make_rng(cfg.seed, "shuffle", epoch).permutation(len(x))
        total_loss = 0.0
        correct = 0
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = x[idx], y[idx]
            z, cache = model._forward_cached(xb)
            logp = log_softmax(z)
            rows = np.arange(len(idx))
            total_loss += -logp[rows, yb].sum()
            correct += int((z.argmax(axis=1) == yb).sum())
            d = np.exp(logp)
            d[rows, yb] -= 1.0
            d /= len(idx)
            _, grads = model._backward(d, cache)
            opt.step(model.params, grads)
        log.append({"epoch": epoch + 1, "loss": total_loss / len(x), "accuracy": correct / len(x)})
    return model, log


def accuracy(model, dataset, chunk=4096):
    x = np.asarray(dataset.samples, dtype=np.float64)
    y = np.asarray(dataset.labels)
    if len(x) == 0:
        raise InputError("accuracy of an empty dataset is undefined")
    correct = 0
    for start in range(0, len(x), chunk):
        correct += int((model.predict(x[start:start + chunk]) == y[start:start + chunk]).sum())
    return correct / len(x)


# Binary layout, all integers little-endian:
#   b"HNYM" | u32 version | u32 input_dim | u32 num_classes | u32 n_layers
#   | 32-byte key fingerprint (SHA-256, all zero when absent)
#   | n_layers x (u8 kind, u32 n_in, u32 n_out)
#   | per affine layer: W as n_in*n_out f64 row-major, then b as n_out f64

_HEADER = struct.Struct("<4sIIII32s")
_LAYER = struct.Struct("<BII")


def model_to_bytes(model):
    fp = bytes.fromhex(model.key_fingerprint) if model.key_fingerprint else NO_FINGERPRINT
    out = [_HEADER.pack(MAGIC, FORMAT_VERSION, model.input_dim, model.num_classes,
                        len(model.layers), fp)]
    for layer in model.layers:
        out.append(_LAYER.pack(_KIND_CODES[layer.kind], layer.n_in, layer.n_out))
    for W, b in model.params:
        out.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(out)


def model_from_bytes(data, path=None):
    if len(data) < _HEADER.size:
        raise FormatError("truncated model header", offset=len(data), path=path)
    magic, version, input_dim, num_classes, n_layers, fp = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0, path=path)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported model format version {version}", offset=4, path=path)
    off = _HEADER.size
    layers = []
    for _ in range(n_layers):
        if off + _LAYER.size > len(data):
            raise FormatError("truncated layer table", offset=off, path=path)
        code, n_in, n_out = _LAYER.unpack_from(data, off)
        if code not in _CODE_KINDS:
            raise FormatError(f"unknown layer code {code}", offset=off, path=path)
        layers.append(Layer(_CODE_KINDS[code], n_in, n_out))
        off += _LAYER.size
    params = []
    for layer in layers:
        if layer.kind != AFFINE:
            continue
        n = layer.n_in * layer.n_out + layer.n_out
        if off + 8 * n > len(data):
            raise FormatError("truncated parameter block", offset=off, path=path)
        flat = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(np.float64)
        params.append((flat[:layer.n_in * layer.n_out].reshape(layer.n_in, layer.n_out),
                       flat[layer.n_in * layer.n_out:].copy()))
        off += 8 * n
    if off != len(data):
        raise FormatError("trailing bytes after parameters", offset=off, path=path)
    model = Model(layers, params, None if fp == NO_FINGERPRINT else fp.hex())
    if model.input_dim != input_dim or model.num_classes != num_classes:
        raise FormatError("header dimensions disagree with layer table", offset=8, path=path)
    return model


def save_model(model, path):
    with open(path, "wb") as f:
        f.write(model_to_bytes(model))


def load_model(path):
    with open(path, "rb") as f:
        return model_from_bytes(f.read(), path=path)
