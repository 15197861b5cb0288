"""Reproducible synthetic tri-modal regression data plus binary dataset I/O.

Each sample carries a latent sentiment y ~ U(-3, 3). A nonlinear basis
phi(y) = [y, y^2, sin y, tanh y, 1] is mixed into each modality by a fixed
per-(seed, modality) random matrix, then white noise is added at a scale
chosen so the per-entry signal-to-noise ratio matches the modality's spec.
Text defaults to a higher SNR than audio/vision so that a clean text-only
probe beats the other single-modality probes.

File format (little-endian, magic "QMDS", version 1):
  magic 4s | version u16
  seed i64 | n_train u32 | n_val u32 | n_test u32 | n_modalities u16
  per modality: name_len u8, name utf-8, seq_len u32, dim u32, snr f64
  then samples in train/val/test order:
    label f64, then per modality seq_len*dim f64 row-major
load(save(ds)) is bit-exact; the fingerprint is the SHA-256 of the header.
"""

import hashlib
import math
import struct
from dataclasses import dataclass

import numpy as np

from .degradation import AUDIO, MODALITIES, TEXT, VISION
from .errors import FormatError, ValidationError, VersionError
from .numerics import SeededRng

MAGIC = b"QMDS"
FORMAT_VERSION = 1

_BASIS_DIM = 5


def _basis(y):
    return np.array([y, y * y, math.sin(y), math.tanh(y), 1.0])


def _basis_covariance():
    """Covariance of phi(y) under y ~ U(-3, 3), via Gauss-Legendre quadrature."""
    nodes, weights = np.polynomial.legendre.leggauss(64)
    ys = 3.0 * nodes
    w = weights / 2.0  # integrates the uniform density over [-3, 3]
    phis = np.stack([_basis(y) for y in ys])
    mean = w @ phis
    second = phis.T @ (phis * w[:, None])
    return second - np.outer(mean, mean)


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    seq_len: int
    dim: int
    snr: float

    def __post_init__(self):
        if self.seq_len <= 0 or self.dim <= 0:
            raise ValidationError(f"modality {self.name}: dims must be positive")
        if not (self.snr > 0):
            raise ValidationError(f"modality {self.name}: snr must be positive (inf allowed)")


@dataclass(frozen=True)
class DatasetSpec:
    n_train: int
    n_val: int
    n_test: int
    modalities: tuple
    seed: int = 1111

    def __post_init__(self):
        for n, label in ((self.n_train, "n_train"), (self.n_val, "n_val"), (self.n_test, "n_test")):
            if n <= 0:
                raise ValidationError(f"{label} must be positive, got {n}")
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names) or not names:
            raise ValidationError("modalities must be nonempty and uniquely named")

    @property
    def n_total(self):
        return self.n_train + self.n_val + self.n_test


def default_spec(n_train=512, n_val=128, n_test=512, seed=1111):
    """Desk-scale defaults: text carries the strongest signal."""
    return DatasetSpec(
        n_train=n_train,
        n_val=n_val,
        n_test=n_test,
        modalities=(
            ModalitySpec(TEXT, seq_len=8, dim=32, snr=4.0),
            ModalitySpec(AUDIO, seq_len=8, dim=16, snr=1.0),
            ModalitySpec(VISION, seq_len=8, dim=16, snr=1.0),
        ),
        seed=seed,
    )


@dataclass(frozen=True)
class Sample:
    features: dict  # modality name -> (seq_len, dim) float64 array
    label: float

    def with_features(self, feats):
        return Sample(dict(feats), self.label)


@dataclass(frozen=True)
class Dataset:
    train: tuple
    val: tuple
    test: tuple
    spec: DatasetSpec

    @property
    def fingerprint(self):
        return hashlib.sha256(_encode_header(self.spec)).hexdigest()


def _mixing_matrices(spec):
    """Fixed per-(seed, modality) mixing matrix and noise scale."""
    cov = _basis_covariance()
    rng = SeededRng(spec.seed)
    mixing = {}
    for mod in spec.modalities:
        M = rng.split("mixing", mod.name).standard_normal((mod.dim, _BASIS_DIM))
        signal_var = float(np.einsum("ij,jk,ik->i", M, cov, M).mean())
        rho = 0.0 if math.isinf(mod.snr) else math.sqrt(signal_var / mod.snr)
        mixing[mod.name] = (M, rho)
    return mixing


def generate(spec):
    """Deterministically generate a dataset from its spec."""
    mixing = _mixing_matrices(spec)
    rng = SeededRng(spec.seed)
    labels = rng.split("labels").uniform(-3.0, 3.0, size=spec.n_total)

    samples = []
    for i in range(spec.n_total):
        y = float(labels[i])
        phi = _basis(y)
        feats = {}
        for mod in spec.modalities:
            M, rho = mixing[mod.name]
            clean = M @ phi
            noise = rng.split("sample", i, mod.name).standard_normal((mod.seq_len, mod.dim))
            feats[mod.name] = clean[None, :] + rho * noise
        samples.append(Sample(feats, y))

    a, b = spec.n_train, spec.n_train + spec.n_val
    return Dataset(tuple(samples[:a]), tuple(samples[a:b]), tuple(samples[b:]), spec)


def _encode_header(spec):
    parts = [MAGIC, struct.pack("<H", FORMAT_VERSION)]
    parts.append(struct.pack("<qIIIH", spec.seed, spec.n_train, spec.n_val, spec.n_test,
                             len(spec.modalities)))
    for mod in spec.modalities:
        name = mod.name.encode("utf-8")
        parts.append(struct.pack("<B", len(name)))
        parts.append(name)
        parts.append(struct.pack("<IId", mod.seq_len, mod.dim, mod.snr))
    return b"".join(parts)


def save(dataset, path):
    """Write the dataset in QMDS v1 format."""
    with open(path, "wb") as fh:
        fh.write(_encode_header(dataset.spec))
        for split in (dataset.train, dataset.val, dataset.test):
            for sample in split:
                fh.write(struct.pack("<d", sample.label))
                for mod in dataset.spec.modalities:
                    fh.write(np.ascontiguousarray(sample.features[mod.name]).tobytes())


class _Reader:
    def __init__(self, data):
        self.data = data
        self.offset = 0

    def take(self, n, what):
        if self.offset + n > len(self.data):
            raise FormatError(f"truncated file while reading {what}", offset=self.offset)
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load(path):
    """Read a QMDS file back into a Dataset; bit-exact round trip with save()."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())

    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    (version,) = reader.unpack("<H", "version")
    if version != FORMAT_VERSION:
        raise VersionError(version, FORMAT_VERSION)

    seed, n_train, n_val, n_test, n_mod = reader.unpack("<qIIIH", "spec block")
    modalities = []
    for _ in range(n_mod):
        (name_len,) = reader.unpack("<B", "modality name length")
        name = reader.take(name_len, "modality name").decode("utf-8")
        seq_len, dim, snr = reader.unpack("<IId", "modality dims")
        modalities.append(ModalitySpec(name, seq_len, dim, snr))
    spec = DatasetSpec(n_train, n_val, n_test, tuple(modalities), seed)

    samples = []
    for i in range(spec.n_total):
        (label,) = reader.unpack("<d", f"sample {i} label")
        feats = {}
        for mod in spec.modalities:
            count = mod.seq_len * mod.dim
            raw = reader.take(count * 8, f"sample {i} modality {mod.name}")
            feats[mod.name] = np.frombuffer(raw, dtype="<f8").reshape(mod.seq_len, mod.dim).copy()
        samples.append(Sample(feats, label))
    if reader.offset != len(reader.data):
        raise FormatError("trailing bytes after last sample", offset=reader.offset)

    a, b = spec.n_train, spec.n_train + spec.n_val
    return Dataset(tuple(samples[:a]), tuple(samples[a:b]), tuple(samples[b:]), spec)
