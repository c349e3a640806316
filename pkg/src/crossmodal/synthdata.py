"""Weakly aligned synthetic multimodal datasets.

Each class has one latent prototype.  Every example, in every modality, is
an independent draw ``prototype + noise`` pushed through that modality's
fixed random renderer, so modalities share labels but no example is paired
with any other.  Renderer families give the modalities different
statistics:

``linear_relu``
    random projection, ReLU, additive output noise (photo-like)
``sign_binary``
    random projection followed by an elementwise sign (line-drawing-like)
``sparse_tokens``
    indicator of the top-t coordinates of a random projection into a token
    space, mapped by a second projection to the modality's input dimension
    (description-like)
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

DATASET_MAGIC = b"XMD1"
RENDERERS = ("linear_relu", "sign_binary", "sparse_tokens")


class DataConfigError(ValueError):
    pass


class DatasetFormatError(ValueError):
    """Raised by :func:`read_dataset`; ``code`` distinguishes the failure."""

    def __init__(self, code: str, detail: str = ""):
        super().__init__(code if not detail else f"{code}: {detail}")
        self.code = code


@dataclass
class ModalityConfig:
    name: str
    input_dim: int
    renderer: str = "linear_relu"
    noise_std: float = 0.5
    # sparse_tokens only
    vocab_dim: int = 64
    tokens: int = 8

    def validate(self) -> None:
        if not self.name:
            raise DataConfigError("modality name must be non-empty")
        if self.renderer not in RENDERERS:
            raise DataConfigError(f"unknown renderer {self.renderer!r}")
        if self.input_dim < 1:
            raise DataConfigError(f"modality {self.name!r}: input_dim must be >= 1")
        if not self.noise_std >= 0:
            raise DataConfigError(f"modality {self.name!r}: noise_std must be >= 0")
        if self.renderer == "sparse_tokens" and not 1 <= self.tokens <= self.vocab_dim:
            raise DataConfigError(f"modality {self.name!r}: need 1 <= tokens <= vocab_dim")


def default_modalities() -> list[ModalityConfig]:
    return [
        ModalityConfig("nat", 128, "linear_relu", 0.6),
        ModalityConfig("clp", 128, "linear_relu", 0.4),
        ModalityConfig("spt", 128, "sparse_tokens", 0.3, vocab_dim=96, tokens=12),
        ModalityConfig("ldr", 128, "sign_binary", 0.4),
        ModalityConfig("dsc", 48, "sparse_tokens", 0.4, vocab_dim=64, tokens=8),
    ]


@dataclass
class GenConfig:
    num_classes: int = 10
    latent_dim: int = 16
    modalities: list[ModalityConfig] = field(default_factory=default_modalities)
    train_per_class_per_modality: int = 100
    val_per_class_per_modality: int = 10
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise DataConfigError("need at least 2 classes")
        if self.latent_dim < 1:
            raise DataConfigError("latent_dim must be >= 1")
        if not self.modalities:
            raise DataConfigError("need at least one modality")
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise DataConfigError("duplicate modality names")
        if self.train_per_class_per_modality < 1 or self.val_per_class_per_modality < 1:
            raise DataConfigError("per-class counts must be >= 1")
        for m in self.modalities:
            m.validate()

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Split:
    x: np.ndarray       # (N, input_dim) float64
    labels: np.ndarray  # (N,) int64

    def __len__(self) -> int:
        return self.labels.size


@dataclass
class Dataset:
    num_classes: int
    dims: dict[str, int]
    train: dict[str, Split]
    val: dict[str, Split]

    @property
    def modalities(self) -> list[str]:
        return list(self.dims)

    def equals(self, other: "Dataset") -> bool:
        if self.num_classes != other.num_classes or self.dims != other.dims:
            return False
        for a, b in ((self.train, other.train), (self.val, other.val)):
            for m in self.dims:
                if a[m].x.tobytes() != b[m].x.tobytes() or a[m].labels.tobytes() != b[m].labels.tobytes():
                    return False
        return True


def _modality_rng(seed: int, name: str, stream: int) -> np.random.Generator:
    # keyed by name, so modality order never changes what a modality draws
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8")), stream])


def _render(m: ModalityConfig, latent: np.ndarray, seed: int, rng: np.random.Generator) -> np.ndarray:
    n, latent_dim = latent.shape
    prng = _modality_rng(seed, m.name, 0)
    if m.renderer == "linear_relu":
        a = prng.normal(0.0, 1.0 / np.sqrt(latent_dim), size=(m.input_dim, latent_dim))
        return np.maximum(latent @ a.T, 0.0) + m.noise_std * rng.standard_normal((n, m.input_dim))
    if m.renderer == "sign_binary":
        a = prng.normal(0.0, 1.0 / np.sqrt(latent_dim), size=(m.input_dim, latent_dim))
        return np.sign(latent @ a.T)
    b = prng.normal(0.0, 1.0 / np.sqrt(latent_dim), size=(m.vocab_dim, latent_dim))
    c = prng.normal(0.0, 1.0 / np.sqrt(m.tokens), size=(m.input_dim, m.vocab_dim))
    scores = latent @ b.T + m.noise_std * rng.standard_normal((n, m.vocab_dim))
    top = np.argsort(-scores, axis=1, kind="stable")[:, : m.tokens]
    indicator = np.zeros((n, m.vocab_dim))
    np.put_along_axis(indicator, top, 1.0, axis=1)
    return indicator @ c.T


def _draw_split(cfg: GenConfig, m: ModalityConfig, protos: np.ndarray, per_class: int, stream: int) -> Split:
    rng = _modality_rng(cfg.seed, m.name, stream)
    labels = np.repeat(np.arange(cfg.num_classes), per_class)
    latent = protos[labels] + m.noise_std * rng.standard_normal((labels.size, cfg.latent_dim))
    x = _render(m, latent, cfg.seed, rng)
    return Split(np.ascontiguousarray(x, dtype=np.float64), labels.astype(np.int64))


def generate(cfg: GenConfig) -> Dataset:
    cfg.validate()
    protos = np.random.default_rng([cfg.seed, 0]).standard_normal((cfg.num_classes, cfg.latent_dim))
    train, val = {}, {}
    for m in cfg.modalities:
        train[m.name] = _draw_split(cfg, m, protos, cfg.train_per_class_per_modality, 1)
        val[m.name] = _draw_split(cfg, m, protos, cfg.val_per_class_per_modality, 2)
    return Dataset(cfg.num_classes, {m.name: m.input_dim for m in cfg.modalities}, train, val)


def centroid_accuracy(ds: Dataset, modality: str) -> float:
    """Validation accuracy of a nearest-class-centroid classifier fit on train."""
    tr, va = ds.train[modality], ds.val[modality]
    centroids = np.stack([tr.x[tr.labels == c].mean(axis=0) for c in range(ds.num_classes)])
    d2 = ((va.x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(d2.argmin(axis=1) == va.labels))


# --- XMD1 file ----------------------------------------------------------

def dataset_bytes(ds: Dataset) -> bytes:
    out = bytearray(DATASET_MAGIC)
    out += struct.pack("<II", ds.num_classes, len(ds.dims))
    for name, dim in ds.dims.items():
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw + struct.pack("<I", dim)
    for split in (ds.train, ds.val):
        for name, dim in ds.dims.items():
            s = split[name]
            if s.x.ndim != 2 or s.x.shape[1] != dim:
                raise DatasetFormatError("dim mismatch", f"modality {name!r}")
            out += struct.pack("<I", len(s))
            for label, row in zip(s.labels, s.x):
                out += struct.pack("<I", int(label))
                out += np.ascontiguousarray(row, dtype="<f8").tobytes()
    return bytes(out)


def write_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def read_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    if buf[:4] != DATASET_MAGIC:
        raise DatasetFormatError("bad magic")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise DatasetFormatError("truncated file")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    num_classes, n_mod = struct.unpack("<II", take(8))
    dims: dict[str, int] = {}
    for _ in range(n_mod):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (dim,) = struct.unpack("<I", take(4))
        if dim < 1:
            raise DatasetFormatError("dim mismatch", f"modality {name!r} has dim 0")
        dims[name] = dim
    splits: list[dict[str, Split]] = [{}, {}]
    for split in splits:
        for name, dim in dims.items():
            (count,) = struct.unpack("<I", take(4))
            row = np.dtype([("label", "<u4"), ("x", "<f8", (dim,))])
            arr = np.frombuffer(take(row.itemsize * count), dtype=row)
            labels = arr["label"].astype(np.int64)
            if np.any(labels >= num_classes):
                raise DatasetFormatError("label out of range", f"modality {name!r}")
            split[name] = Split(arr["x"].astype(np.float64).reshape(count, dim), labels)
    if pos != len(buf):
        raise DatasetFormatError("dim mismatch", "trailing bytes after final row")
    return Dataset(num_classes, dims, splits[0], splits[1])


def manifest(ds: Dataset, cfg: GenConfig) -> dict:
    return {
        "seed": cfg.seed,
        "num_classes": ds.num_classes,
        "latent_dim": cfg.latent_dim,
        "modalities": [
            {
                "name": m.name,
                "dim": m.input_dim,
                "renderer": m.renderer,
                "noise_std": m.noise_std,
                "train": len(ds.train[m.name]),
                "val": len(ds.val[m.name]),
            }
            for m in cfg.modalities
        ],
    }


def write_manifest(ds: Dataset, cfg: GenConfig, path) -> None:
    Path(path).write_text(json.dumps(manifest(ds, cfg), indent=2, sort_keys=True) + "\n")
