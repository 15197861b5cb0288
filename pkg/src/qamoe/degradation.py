"""Stochastic degradation of multimodal features.

A sample is corrupted in two stages: modality-specific noise scaled by a
coefficient lambda (token dropout for text, additive white Gaussian noise
for continuous modalities), then whole-modality masking at rate eta. A
modality zeroed by the mask stays exactly zero no matter what noise was
added first.

Protocols select which axis is exercised:
  FixedMissing      deterministic availability subset, no randomness
  RandomMissing     Bernoulli(eta) masking only, features untouched
  NoiseOnly         noise at lambda only, never missing
  StochasticMixture (lambda, eta) drawn uniformly from ranges
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .numerics import SeededRng

TEXT = "text"
AUDIO = "audio"
VISION = "vision"
MODALITIES = (TEXT, AUDIO, VISION)


def _check_unit(value, key):
    if not (0.0 <= value <= 1.0):
        raise ValidationError(f"{key} must lie in [0, 1], got {value}")
    return float(value)


def _check_range(rng_pair, key):
    lo, hi = float(rng_pair[0]), float(rng_pair[1])
    _check_unit(lo, f"{key} lower bound")
    _check_unit(hi, f"{key} upper bound")
    if lo > hi:
        raise ValidationError(f"{key} bounds out of order: ({lo}, {hi})")
    return (lo, hi)


@dataclass(frozen=True)
class FixedMissing:
    """Only the named modalities are available; the rest are zeroed."""

    available: frozenset

    def __post_init__(self):
        object.__setattr__(self, "available", frozenset(self.available))
        if not self.available:
            raise ValidationError("FixedMissing needs a nonempty available subset")

    name = "fixed_missing"


@dataclass(frozen=True)
class RandomMissing:
    """Each modality independently dropped with probability eta."""

    eta: float

    def __post_init__(self):
        _check_unit(self.eta, "eta")

    name = "random_missing"


@dataclass(frozen=True)
class NoiseOnly:
    """Noise at intensity lam, all modalities always present."""

    lam: float

    def __post_init__(self):
        _check_unit(self.lam, "lambda")

    name = "noise_only"


@dataclass(frozen=True)
class StochasticMixture:
    """(lambda, eta) sampled uniformly from the given ranges per draw."""

    lambda_range: tuple = (0.0, 1.0)
    eta_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "lambda_range", _check_range(self.lambda_range, "lambda_range"))
        object.__setattr__(self, "eta_range", _check_range(self.eta_range, "eta_range"))

    name = "stochastic_mixture"


@dataclass(frozen=True)
class DegradationSpec:
    """Point degradation settings plus the protocol they came from.

    lambda_per_modality and eta are the operative values consumed by
    degrade_sample; the protocol records how evaluation should resolve
    them (fixed subset, per-sample draw, ...). seed makes every
    degradation run reproducible.
    """

    lambda_per_modality: dict
    eta: float
    protocol: object
    seed: int = 0

    def __post_init__(self):
        for m, lam in self.lambda_per_modality.items():
            _check_unit(lam, f"lambda[{m}]")
        _check_unit(self.eta, "eta")

    @staticmethod
    def clean(modalities=MODALITIES, seed=0):
        return DegradationSpec({m: 0.0 for m in modalities}, 0.0, NoiseOnly(0.0), seed)

    @staticmethod
    def point(lam, eta, modalities=MODALITIES, seed=0):
        """Uniform lambda across modalities at a fixed (lambda, eta) grid point."""
        proto = StochasticMixture((lam, lam), (eta, eta))
        return DegradationSpec({m: lam for m in modalities}, eta, proto, seed)


@dataclass(frozen=True)
class ReferenceStats:
    """Per-modality scalar feature std, computed from the training split only."""

    sigma_ref: dict = field(default_factory=dict)


def compute_reference_stats(train_samples):
    """Population std of all scalar entries of each modality over the split."""
    if not train_samples:
        raise ValidationError("reference stats need a nonempty training split")
    sigma = {}
    for m in train_samples[0].features:
        stacked = np.concatenate([s.features[m].ravel() for s in train_samples])
        sigma[m] = float(stacked.std())  # population (ddof=0)
    return ReferenceStats(sigma)


def apply_awgn(u, lam, sigma_ref, rng):
    """Add N(0, (lam*sigma_ref)^2) noise elementwise; lam == 0 is bit-exact identity."""
    _check_unit(lam, "lambda")
    if sigma_ref < 0:
        raise ValidationError(f"sigma_ref must be nonnegative, got {sigma_ref}")
    if lam == 0.0 or sigma_ref == 0.0:
        return u
    return u + rng.normal(0.0, lam * sigma_ref, size=u.shape)


def apply_token_dropout(u_text, lam, rng):
    """Zero each row (token) independently with probability lam."""
    _check_unit(lam, "lambda")
    if lam == 0.0:
        return u_text
    keep = rng.random(u_text.shape[0]) >= lam
    return u_text * keep[:, None]


def apply_missingness(sample, eta, rng):
    """Zero entire modalities independently with probability eta; returns (sample, mask)."""
    _check_unit(eta, "eta")
    mask = {}
    feats = {}
    for m, u in sample.features.items():
        missing = bool(rng.random() < eta) if eta > 0.0 else False
        mask[m] = missing
        feats[m] = np.zeros_like(u) if missing else u
    return sample.with_features(feats), mask


def sample_batch_coeffs(protocol, rng):
    """Draw one (lambda, eta) pair shared by every sample of a batch."""
    if not isinstance(protocol, StochasticMixture):
        raise ValidationError(f"protocol {protocol.name} does not sample batch coefficients")
    lo, hi = protocol.lambda_range
    lam = lo if lo == hi else float(rng.uniform(lo, hi))
    lo, hi = protocol.eta_range
    eta = lo if lo == hi else float(rng.uniform(lo, hi))
    return lam, eta


def degrade_sample(sample, spec, stats, rng):
    """Noise first (per Eq.-of-motion order), then masking; returns (sample, mask).

    Text gets token dropout at lambda; other modalities get AWGN at
    lambda * sigma_ref. FixedMissing zeroes exactly the complement of the
    available subset with no randomness.
    """
    feats = {}
    for m, u in sample.features.items():
        lam = spec.lambda_per_modality.get(m, 0.0)
        if m == TEXT:
            feats[m] = apply_token_dropout(u, lam, rng.split("noise", m))
        else:
            feats[m] = apply_awgn(u, lam, stats.sigma_ref.get(m, 0.0), rng.split("noise", m))
    noisy = sample.with_features(feats)

    if isinstance(spec.protocol, FixedMissing):
        mask = {m: m not in spec.protocol.available for m in noisy.features}
        zeroed = {m: (np.zeros_like(u) if mask[m] else u) for m, u in noisy.features.items()}
        return noisy.with_features(zeroed), mask
    if isinstance(spec.protocol, NoiseOnly):
        return noisy, {m: False for m in noisy.features}
    return apply_missingness(noisy, spec.eta, rng.split("missing"))


def resolve_point(spec, rng):
    """Resolve a protocol into the (lambda map, eta) to apply to one sample."""
    proto = spec.protocol
    if isinstance(proto, FixedMissing):
        return spec.lambda_per_modality, spec.eta
    if isinstance(proto, RandomMissing):
        return {m: 0.0 for m in spec.lambda_per_modality}, proto.eta
    if isinstance(proto, NoiseOnly):
        return spec.lambda_per_modality, 0.0
    lam, eta = sample_batch_coeffs(proto, rng)
    return {m: lam for m in spec.lambda_per_modality}, eta


def degrade_split(samples, spec, stats, base_rng=None):
    """Degrade a list of samples per-sample-reproducibly; returns (samples, masks).

    StochasticMixture draws an independent (lambda, eta) point per sample,
    which is how heterogeneous mixed-defect test sets are built. Other
    protocols apply the spec's values uniformly.
    """
    root = base_rng if base_rng is not None else SeededRng(spec.seed)
    out, masks = [], []
    for i, sample in enumerate(samples):
        rng = root.split("sample", i)
        lam_map, eta = resolve_point(spec, rng.split("coeffs"))
        point = DegradationSpec(lam_map, eta, spec.protocol, spec.seed)
        degraded, mask = degrade_sample(sample, point, stats, rng)
        out.append(degraded)
        masks.append(mask)
    return out, masks
