"""Dense kernel set: affine maps, stable activations, a finite-difference
gradient oracle, and a counter-based seeded RNG with labeled substreams.

Everything is float64. All functions are pure; SeededRng instances are
single-owner (hand a split() substream to each parallel consumer).
"""

import hashlib

import numpy as np

from .errors import OracleError, ValidationError


def _as_vector(v, name="vector"):
    a = np.asarray(v, dtype=np.float64)
    if a.ndim != 1 or a.size == 0:
        raise ValidationError(f"{name} must be a non-empty 1-d array, got shape {a.shape}")
    return a


def _as_matrix(m, name="matrix"):
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValidationError(f"{name} must be a 2-d array, got shape {a.shape}")
    return a


def affine(W, b, x):
    """W @ x + b with explicit shape checks."""
    W = _as_matrix(W, "W")
    b = _as_vector(b, "b")
    x = _as_vector(x, "x")
    if W.shape[1] != x.shape[0]:
        raise ValidationError(f"affine: W has {W.shape[1]} cols but x has length {x.shape[0]}")
    if W.shape[0] != b.shape[0]:
        raise ValidationError(f"affine: W has {W.shape[0]} rows but b has length {b.shape[0]}")
    return W @ x + b


def softmax(v):
    """Max-subtracted softmax; entries positive, sum 1."""
    v = _as_vector(v, "softmax input")
    z = np.exp(v - v.max())
    return z / z.sum()


def softplus(v):
    """ln(1 + e^v), overflow-safe (== v for large v, e^v for very negative v)."""
    v = np.asarray(v, dtype=np.float64)
    return np.logaddexp(0.0, v)


def sigmoid(v):
    """Numerically stable logistic function."""
    v = np.asarray(v, dtype=np.float64)
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def glu(x, Wa, ba, Wb, bb, Wo, bo):
    """Gated linear unit: Wo @ ((Wa x + ba) * sigmoid(Wb x + bb)) + bo."""
    a = affine(Wa, ba, x)
    gate = sigmoid(affine(Wb, bb, x))
    return affine(Wo, bo, a * gate)


def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValidationError(f"finite_diff_grad: step must be positive, got {h}")
    x = np.array(x, dtype=np.float64)  # owned contiguous copy; perturbed in place below
    grad = np.zeros_like(x)
    flat = x.ravel()
    g = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite evaluation at coordinate {i}: f(+h)={fp}, f(-h)={fm}")
        g[i] = (fp - fm) / (2.0 * h)
    return grad


def _derive_key(seed, path):
    """128-bit Philox key from (seed, substream path) via SHA-256.

    Stable across processes and platforms, unlike Python's str hash.
    """
    hasher = hashlib.sha256(b"qamoe-rng")
    hasher.update(int(seed).to_bytes(8, "little", signed=True))
    for label in path:
        hasher.update(b"/")
        hasher.update(str(label).encode("utf-8"))
    return int.from_bytes(hasher.digest()[:16], "little")


class SeededRng:
    """Counter-based RNG (Philox) with labeled substreams.

    split("degradation") returns an independent stream whose output depends
    only on (seed, label path), so adding draws to one consumer never
    perturbs another.
    """

    def __init__(self, seed, _path=()):
        self.seed = int(seed)
        self._path = tuple(_path)
        self._gen = np.random.Generator(np.random.Philox(key=_derive_key(seed, self._path)))

    def split(self, *labels):
        """Independent substream named by one or more labels (strs or ints)."""
        if not labels:
            raise ValidationError("split() needs at least one label")
        return SeededRng(self.seed, self._path + tuple(labels))

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def standard_normal(self, size=None):
        return self._gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, path={'/'.join(map(str, self._path)) or '<root>'})"
