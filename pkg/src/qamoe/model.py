"""Quality-aware mixture-of-experts forward pass.

Per modality: temporal mean pooling + input projection, a probabilistic
head (mu, softplus variance), a scalar quality score r = 1/(1 + mean var),
softmax routing over a shared bank of GLU experts with top-k sparsity, and
aggregation y_m = r * (gated expert mixture) + (1 - r) * y_prior. Modality
outputs are concatenated, fused by one affine layer, and read out by a
dual head: prediction y_hat and log-variance s.

The forward pass is pure; every intermediate needed by the hand-derived
backward pass (training module) is retained on the ForwardTrace.

Checkpoint format (little-endian, magic "QMCK", version 1):
  magic 4s | version u16
  d_model u32 | n_experts u32 | top_k u32 | glu_hidden u32
  variant u8 | prior_per_modality u8 | n_modalities u16
  per modality: name_len u8, name utf-8, input_dim u32
  then every tensor in param_names() order: ndim u8, dims u32 each, f64 data
"""

import hashlib
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ValidationError, VersionError
from .numerics import affine, sigmoid, softmax, softplus

MAGIC = b"QMCK"
FORMAT_VERSION = 1

VARIANT_FULL = "full"
VARIANT_NO_QUALITY_GATING = "no_quality_gating"
VARIANT_NO_VARIANCE = "no_variance"
VARIANT_NO_PRIOR = "no_prior"
VARIANTS = (VARIANT_FULL, VARIANT_NO_QUALITY_GATING, VARIANT_NO_VARIANCE, VARIANT_NO_PRIOR)

# initial per-coordinate variance: softplus(b_sigma) = 0.1, so r starts near 0.91
_INIT_VAR = 0.1


@dataclass(frozen=True)
class ModelConfig:
    modalities: tuple  # ordered (name, input_dim) pairs
    d_model: int = 32
    n_experts: int = 8
    top_k: int = 3
    glu_hidden: int = 0  # 0 means 2 * d_model
    variant: str = VARIANT_FULL
    prior_per_modality: bool = False

    def __post_init__(self):
        if self.d_model <= 0:
            raise ValidationError(f"d_model must be positive, got {self.d_model}")
        if not (1 <= self.top_k <= self.n_experts):
            raise ValidationError(f"need 1 <= top_k <= n_experts, got k={self.top_k}, N={self.n_experts}")
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}")
        if not self.modalities:
            raise ValidationError("model needs at least one modality")
        if self.glu_hidden == 0:
            object.__setattr__(self, "glu_hidden", 2 * self.d_model)

    @property
    def modality_names(self):
        return tuple(name for name, _ in self.modalities)

    @staticmethod
    def for_dataset(dataset_spec, **kwargs):
        mods = tuple((m.name, m.dim) for m in dataset_spec.modalities)
        return ModelConfig(modalities=mods, **kwargs)


def param_names(cfg):
    """Canonical declaration order of every learnable tensor."""
    names = []
    for mod, _ in cfg.modalities:
        names += [f"{mod}.proj_W", f"{mod}.proj_b", f"{mod}.mu_W", f"{mod}.mu_b"]
        if cfg.variant != VARIANT_NO_VARIANCE:
            names += [f"{mod}.sigma_W", f"{mod}.sigma_b"]
    names.append("router_W")
    for i in range(cfg.n_experts):
        names += [f"expert{i}.a_W", f"expert{i}.a_b", f"expert{i}.g_W", f"expert{i}.g_b",
                  f"expert{i}.o_W", f"expert{i}.o_b"]
    if cfg.prior_per_modality:
        names += [f"{mod}.y_prior" for mod, _ in cfg.modalities]
    else:
        names.append("y_prior")
    names += ["fusion_W", "fusion_b", "head_y_W", "head_y_b", "head_s_W", "head_s_b"]
    return names


def param_shapes(cfg):
    d, h, n_mod = cfg.d_model, cfg.glu_hidden, len(cfg.modalities)
    shapes = {}
    for mod, in_dim in cfg.modalities:
        shapes[f"{mod}.proj_W"] = (d, in_dim)
        shapes[f"{mod}.proj_b"] = (d,)
        shapes[f"{mod}.mu_W"] = (d, d)
        shapes[f"{mod}.mu_b"] = (d,)
        shapes[f"{mod}.sigma_W"] = (d, d)
        shapes[f"{mod}.sigma_b"] = (d,)
        shapes[f"{mod}.y_prior"] = (d,)
    shapes["router_W"] = (cfg.n_experts, d)
    for i in range(cfg.n_experts):
        shapes[f"expert{i}.a_W"] = (h, d)
        shapes[f"expert{i}.a_b"] = (h,)
        shapes[f"expert{i}.g_W"] = (h, d)
        shapes[f"expert{i}.g_b"] = (h,)
        shapes[f"expert{i}.o_W"] = (d, h)
        shapes[f"expert{i}.o_b"] = (d,)
    shapes["y_prior"] = (d,)
    shapes["fusion_W"] = (d, n_mod * d)
    shapes["fusion_b"] = (d,)
    shapes["head_y_W"] = (1, d)
    shapes["head_y_b"] = (1,)
    shapes["head_s_W"] = (1, d)
    shapes["head_s_b"] = (1,)
    return {name: shapes[name] for name in param_names(cfg)}


def init_params(cfg, rng):
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, mild initial confidence."""
    sigma_bias = math.log(math.expm1(_INIT_VAR))  # softplus inverse
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("_W"):
            bound = 1.0 / math.sqrt(shape[1])
            params[name] = rng.split("init", name).uniform(-bound, bound, size=shape)
        elif name.endswith("sigma_b"):
            params[name] = np.full(shape, sigma_bias)
        else:
            params[name] = np.zeros(shape)
    return params


def validate_params(cfg, params):
    shapes = param_shapes(cfg)
    if set(params) != set(shapes):
        missing = set(shapes) - set(params)
        extra = set(params) - set(shapes)
        raise ValidationError(f"parameter set mismatch (missing {sorted(missing)}, extra {sorted(extra)})")
    for name, t in params.items():
        if t.shape != shapes[name]:
            raise ValidationError(f"{name}: expected shape {shapes[name]}, got {t.shape}")
        if not np.all(np.isfinite(t)):
            raise ValidationError(f"{name}: non-finite entries")


def clone_params(params):
    return {name: t.copy() for name, t in params.items()}


def params_fingerprint(params):
    hasher = hashlib.sha256()
    for name in sorted(params):
        hasher.update(name.encode())
        hasher.update(params[name].tobytes())
    return hasher.hexdigest()


# ---------------------------------------------------------------------------
# forward-pass operations


def _temporal_mean(u):
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2 or u.shape[0] == 0:
        raise ValidationError(f"pooling expects a nonempty (T, d) matrix, got shape {u.shape}")
    return u.mean(axis=0)


def pool(u, proj_W, proj_b):
    """Temporal mean over rows, then affine projection to the model width."""
    return affine(proj_W, proj_b, _temporal_mean(u))


@dataclass(frozen=True)
class GaussianLatent:
    mu: np.ndarray
    var: np.ndarray


def encode_probabilistic(x, mu_W, mu_b, sigma_W, sigma_b):
    """mu = W x + b; var = softplus(W' x + b'), strictly positive."""
    mu = affine(mu_W, mu_b, x)
    var = softplus(affine(sigma_W, sigma_b, x))
    return GaussianLatent(mu, var)


def quality_score(latent):
    """r = 1 / (1 + mean variance), in (0, 1), decreasing in every coordinate."""
    return 1.0 / (1.0 + float(latent.var.mean()))


def route(mu, router_W, k):
    """Dense softmax gate plus renormalized top-k sparse gate.

    Ties keep the lowest expert index. The sparse gate has exactly k
    nonzeros summing to one.
    """
    n = router_W.shape[0]
    if not (1 <= k <= n):
        raise ValidationError(f"route: need 1 <= k <= {n}, got {k}")
    dense = softmax(router_W @ mu)
    topk = np.argsort(-dense, kind="stable")[:k]
    sparse = np.zeros_like(dense)
    sparse[topk] = dense[topk] / dense[topk].sum()
    return dense, sparse


def aggregate(r, sparse_gate, expert_outs, y_prior):
    """Convex interpolation between the gated expert mixture and the prior."""
    mixture = np.zeros_like(y_prior)
    for weight, out in zip(sparse_gate, expert_outs):
        if weight != 0.0:
            mixture = mixture + weight * out
    return r * mixture + (1.0 - r) * y_prior


def fuse(y_per_modality, fusion_W, fusion_b):
    """Concatenate modality outputs in config order and project back to d_model."""
    cat = np.concatenate(list(y_per_modality))
    if fusion_W.shape[1] != cat.shape[0]:
        raise ValidationError(
            f"fuse: got {cat.shape[0]} concatenated dims, fusion layer expects {fusion_W.shape[1]}")
    return affine(fusion_W, fusion_b, cat)


def predict(h, head_y_W, head_y_b, head_s_W, head_s_b):
    """Dual readout: scalar prediction and unconstrained log-variance."""
    y_hat = float(head_y_W @ h + head_y_b)
    s = float(head_s_W @ h + head_s_b)
    return y_hat, s


# ---------------------------------------------------------------------------
# full forward pass with retained trace


@dataclass
class ModalityTrace:
    pooled_raw: np.ndarray      # mean over rows of the input, before projection
    x: np.ndarray               # projected (and, in training, dropped-out) input
    x_drop_scale: np.ndarray    # dropout multiplier applied to x (ones in eval)
    latent: GaussianLatent
    sigma_pre: np.ndarray       # pre-softplus activation (None for no_variance)
    r: float                    # quality used in aggregation (forced 1 by variants)
    dense_gate: np.ndarray
    sparse_gate: np.ndarray
    topk: np.ndarray
    expert_hidden: dict         # expert index -> (a, gate_pre, gate, hidden, out)
    mixture: np.ndarray
    prior: np.ndarray
    y_m: np.ndarray


@dataclass
class ForwardTrace:
    per_modality: dict = field(default_factory=dict)
    h_concat: np.ndarray = None
    h: np.ndarray = None                # fused vector the heads consume
    h_drop_scale: np.ndarray = None
    y_hat: float = 0.0
    s_final: float = 0.0
    training: bool = False


def _glu_forward(params, i, x):
    a = affine(params[f"expert{i}.a_W"], params[f"expert{i}.a_b"], x)
    gate_pre = affine(params[f"expert{i}.g_W"], params[f"expert{i}.g_b"], x)
    gate = sigmoid(gate_pre)
    hidden = a * gate
    out = affine(params[f"expert{i}.o_W"], params[f"expert{i}.o_b"], hidden)
    return a, gate_pre, gate, hidden, out


def _dropout_scale(shape, rate, rng):
    if rate <= 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def forward(sample, params, cfg, training=False, dropout_rate=0.0, dropout_rng=None):
    """Run one sample through the model, retaining all intermediates.

    Dropout (on pooled inputs and on the fused vector) is active only when
    training=True and needs an RNG; evaluation is deterministic.
    """
    if training and dropout_rate > 0.0 and dropout_rng is None:
        raise ValidationError("training-mode dropout needs an rng")
    trace = ForwardTrace(training=training)
    forced_r = cfg.variant in (VARIANT_NO_QUALITY_GATING, VARIANT_NO_VARIANCE)

    y_per_modality = []
    for mod, _ in cfg.modalities:
        pooled_raw = _temporal_mean(sample.features[mod])
        x = affine(params[f"{mod}.proj_W"], params[f"{mod}.proj_b"], pooled_raw)
        if training and dropout_rate > 0.0:
            scale = _dropout_scale(x.shape, dropout_rate, dropout_rng.split("x", mod))
        else:
            scale = np.ones_like(x)
        x = x * scale

        mu = affine(params[f"{mod}.mu_W"], params[f"{mod}.mu_b"], x)
        if cfg.variant == VARIANT_NO_VARIANCE:
            sigma_pre = None
            latent = GaussianLatent(mu, np.ones_like(mu))
        else:
            sigma_pre = affine(params[f"{mod}.sigma_W"], params[f"{mod}.sigma_b"], x)
            latent = GaussianLatent(mu, softplus(sigma_pre))
        r = 1.0 if forced_r else quality_score(latent)

        dense, sparse = route(mu, params["router_W"], cfg.top_k)
        expert_hidden = {}
        mixture = np.zeros(cfg.d_model)
        for i in np.flatnonzero(sparse):
            cached = _glu_forward(params, int(i), mu)
            expert_hidden[int(i)] = cached
            mixture = mixture + sparse[i] * cached[4]

        if cfg.variant == VARIANT_NO_PRIOR:
            prior = np.zeros(cfg.d_model)
        elif cfg.prior_per_modality:
            prior = params[f"{mod}.y_prior"]
        else:
            prior = params["y_prior"]
        y_m = r * mixture + (1.0 - r) * prior

        trace.per_modality[mod] = ModalityTrace(
            pooled_raw=pooled_raw, x=x, x_drop_scale=scale, latent=latent,
            sigma_pre=sigma_pre, r=r, dense_gate=dense, sparse_gate=sparse,
            topk=np.flatnonzero(sparse), expert_hidden=expert_hidden,
            mixture=mixture, prior=prior, y_m=y_m)
        y_per_modality.append(y_m)

    h = fuse(y_per_modality, params["fusion_W"], params["fusion_b"])
    trace.h_concat = np.concatenate(y_per_modality)
    if training and dropout_rate > 0.0:
        trace.h_drop_scale = _dropout_scale(h.shape, dropout_rate, dropout_rng.split("h"))
    else:
        trace.h_drop_scale = np.ones_like(h)
    trace.h = h * trace.h_drop_scale

    trace.y_hat, trace.s_final = predict(
        trace.h, params["head_y_W"], params["head_y_b"], params["head_s_W"], params["head_s_b"])
    return trace


# ---------------------------------------------------------------------------
# checkpoint I/O

_VARIANT_CODES = {name: i for i, name in enumerate(VARIANTS)}


def save_checkpoint(params, cfg, path):
    validate_params(cfg, params)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", FORMAT_VERSION))
        fh.write(struct.pack("<IIII", cfg.d_model, cfg.n_experts, cfg.top_k, cfg.glu_hidden))
        fh.write(struct.pack("<BBH", _VARIANT_CODES[cfg.variant], int(cfg.prior_per_modality),
                             len(cfg.modalities)))
        for name, in_dim in cfg.modalities:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<B", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", in_dim))
        for name in param_names(cfg):
            t = params[name]
            fh.write(struct.pack("<B", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t).tobytes())


def load_checkpoint(path):
    """Returns (params, cfg); save(load(p)) is bit-exact."""
    from .synthdata import _Reader  # same binary reader

    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    (version,) = reader.unpack("<H", "version")
    if version != FORMAT_VERSION:
        raise VersionError(version, FORMAT_VERSION)

    d_model, n_experts, top_k, glu_hidden = reader.unpack("<IIII", "model dims")
    variant_code, per_modality, n_mod = reader.unpack("<BBH", "model flags")
    if variant_code >= len(VARIANTS):
        raise FormatError(f"unknown variant code {variant_code}", offset=reader.offset)
    modalities = []
    for _ in range(n_mod):
        (name_len,) = reader.unpack("<B", "modality name length")
        name = reader.take(name_len, "modality name").decode("utf-8")
        (in_dim,) = reader.unpack("<I", "modality input dim")
        modalities.append((name, in_dim))
    cfg = ModelConfig(modalities=tuple(modalities), d_model=d_model, n_experts=n_experts,
                      top_k=top_k, glu_hidden=glu_hidden, variant=VARIANTS[variant_code],
                      prior_per_modality=bool(per_modality))

    params = {}
    for name in param_names(cfg):
        (ndim,) = reader.unpack("<B", f"{name} ndim")
        shape = reader.unpack(f"<{ndim}I", f"{name} shape")
        count = int(np.prod(shape)) if ndim else 1
        raw = reader.take(count * 8, f"{name} data")
        params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    if reader.offset != len(reader.data):
        raise FormatError("trailing bytes after last tensor", offset=reader.offset)
    validate_params(cfg, params)
    return params, cfg
