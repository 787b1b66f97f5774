"""Honeypot classifiers: watermark a model through label-flip poisoning and
catch adversaries whose attacks rebuild the watermark."""

from .attacks import AdversarialRecord, AttackParams, CWParams, JSMAParams, PGDParams
from .data import LabeledDataset, load_idx, shuffle_split, synthetic_blobs
from .detection import DetectionMetrics, LogisticDetector, cosine_similarity
from .mmd import MmdConfig, MmdReport, bootstrap_mmd, mmd, separability
from .nn import Model, TrainConfig, accuracy, build_mlp, default_mnist_model, train_epochs
from .watermark import PoisonConfig, SecretKey, apply_watermark, extract_watermark, generate_key

__version__ = "0.1.0"
