"""Heteroscedastic NLL objective, hand-derived backpropagation, Adam with
global-norm clipping, and the spectrum-aware training loop.

The per-sample loss is 0.5 * exp(-s) * (y - y_hat)^2 + 0.5 * s with the
log-variance s clamped to [-10, 10] before exponentiation. backward()
reproduces the exact analytic gradient of that loss through every path of
the forward trace: both heads, fusion, the quality interpolation (including
the r -> variance -> sigma-head chain), the renormalized sparse gate, the
surviving expert GLUs, and the mu chain. Dropped experts and sparsified
gate entries receive zero gradient.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import degradation as deg
from .errors import TrainingDivergenceError, ValidationError
from .model import (VARIANT_NO_PRIOR, VARIANT_NO_QUALITY_GATING, VARIANT_NO_VARIANCE,
                    clone_params, forward, init_params, param_shapes, sigmoid)
from .numerics import SeededRng

S_CLAMP = 10.0

MODE_CLEAN = "clean"
MODE_SPECTRUM = "spectrum"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 1e-5
    grad_clip: float = 1.0
    dropout: float = 0.1
    seed: int = 1111
    mode: str = MODE_SPECTRUM

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValidationError("epochs and batch_size must be positive")
        if self.grad_clip <= 0:
            raise ValidationError("grad_clip must be positive")
        if not (0.0 <= self.dropout < 1.0):
            raise ValidationError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.mode not in (MODE_CLEAN, MODE_SPECTRUM):
            raise ValidationError(f"unknown training mode {self.mode!r}")


def nll_loss(y_hat, s, y):
    """Gaussian NLL with learned log-variance (exponent clamped)."""
    s_c = min(max(s, -S_CLAMP), S_CLAMP)
    resid = y - y_hat
    return 0.5 * math.exp(-s_c) * resid * resid + 0.5 * s


def loss_grad_s(y_hat, s, y):
    """d loss / d s; vanishes exactly at s = ln((y - y_hat)^2)."""
    resid = y - y_hat
    inside = -S_CLAMP < s < S_CLAMP
    return (-0.5 * math.exp(-s) * resid * resid if inside else 0.0) + 0.5


def zero_grads(cfg):
    return {name: np.zeros(shape) for name, shape in param_shapes(cfg).items()}


def _glu_backward(params, grads, i, x, cached, d_out):
    """Accumulates expert-i GLU gradients; returns d loss / d x."""
    a, gate_pre, gate, hidden, _ = cached
    grads[f"expert{i}.o_W"] += np.outer(d_out, hidden)
    grads[f"expert{i}.o_b"] += d_out
    d_hidden = params[f"expert{i}.o_W"].T @ d_out
    d_a = d_hidden * gate
    d_gate_pre = d_hidden * a * gate * (1.0 - gate)
    grads[f"expert{i}.a_W"] += np.outer(d_a, x)
    grads[f"expert{i}.a_b"] += d_a
    grads[f"expert{i}.g_W"] += np.outer(d_gate_pre, x)
    grads[f"expert{i}.g_b"] += d_gate_pre
    return params[f"expert{i}.a_W"].T @ d_a + params[f"expert{i}.g_W"].T @ d_gate_pre


def backward(trace, params, cfg, y, grads=None):
    """Analytic gradient of the per-sample NLL w.r.t. every parameter tensor."""
    if set(trace.per_modality) != set(cfg.modality_names):
        raise ValidationError("trace does not match the model's modalities")
    if grads is None:
        grads = zero_grads(cfg)

    resid = trace.y_hat - y
    s = trace.s_final
    e_term = math.exp(-min(max(s, -S_CLAMP), S_CLAMP))
    d_y_hat = e_term * resid
    d_s = (-0.5 * e_term * resid * resid if -S_CLAMP < s < S_CLAMP else 0.0) + 0.5

    grads["head_y_W"] += d_y_hat * trace.h[None, :]
    grads["head_y_b"] += np.array([d_y_hat])
    grads["head_s_W"] += d_s * trace.h[None, :]
    grads["head_s_b"] += np.array([d_s])

    d_h = d_y_hat * params["head_y_W"][0] + d_s * params["head_s_W"][0]
    d_h = d_h * trace.h_drop_scale
    grads["fusion_W"] += np.outer(d_h, trace.h_concat)
    grads["fusion_b"] += d_h
    d_concat = params["fusion_W"].T @ d_h

    d = cfg.d_model
    for j, mod in enumerate(cfg.modality_names):
        mt = trace.per_modality[mod]
        d_ym = d_concat[j * d:(j + 1) * d]

        d_mix = mt.r * d_ym
        if cfg.variant != VARIANT_NO_PRIOR:
            prior_name = f"{mod}.y_prior" if cfg.prior_per_modality else "y_prior"
            grads[prior_name] += (1.0 - mt.r) * d_ym

        d_mu = np.zeros(d)
        d_gate_sparse = {}
        for i, cached in mt.expert_hidden.items():
            w = mt.sparse_gate[i]
            d_gate_sparse[i] = float(d_mix @ cached[4])
            d_mu += _glu_backward(params, grads, i, mt.latent.mu, cached, w * d_mix)

        # renormalized top-k gate: gs_i = g_i / sum_K g; dropped entries get no gradient
        gsum = float(mt.dense_gate[mt.topk].sum())
        inner = sum(d_gate_sparse[i] * mt.sparse_gate[i] for i in d_gate_sparse)
        d_dense = np.zeros_like(mt.dense_gate)
        for i in d_gate_sparse:
            d_dense[i] = (d_gate_sparse[i] - inner) / gsum
        # softmax jacobian
        d_logits = mt.dense_gate * (d_dense - float(d_dense @ mt.dense_gate))
        grads["router_W"] += np.outer(d_logits, mt.latent.mu)
        d_mu += params["router_W"].T @ d_logits

        d_x = np.zeros(d)
        if cfg.variant not in (VARIANT_NO_QUALITY_GATING, VARIANT_NO_VARIANCE):
            # r = 1 / (1 + mean var):  dr/dvar_k = -r^2 / d
            d_r = float(d_ym @ (mt.mixture - mt.prior))
            d_var = np.full(d, -d_r * mt.r * mt.r / d)
            d_sigma_pre = d_var * sigmoid(mt.sigma_pre)
            grads[f"{mod}.sigma_W"] += np.outer(d_sigma_pre, mt.x)
            grads[f"{mod}.sigma_b"] += d_sigma_pre
            d_x += params[f"{mod}.sigma_W"].T @ d_sigma_pre

        grads[f"{mod}.mu_W"] += np.outer(d_mu, mt.x)
        grads[f"{mod}.mu_b"] += d_mu
        d_x += params[f"{mod}.mu_W"].T @ d_mu

        d_x = d_x * mt.x_drop_scale
        grads[f"{mod}.proj_W"] += np.outer(d_x, mt.pooled_raw)
        grads[f"{mod}.proj_b"] += d_x

    return grads


def scale_grads(grads, factor):
    for t in grads.values():
        t *= factor
    return grads


def global_norm(grads):
    return math.sqrt(sum(float((t * t).sum()) for t in grads.values()))


def clip_grads(grads, max_norm):
    """Scale all tensors so the global norm is at most max_norm."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale_grads(grads, max_norm / norm)
    return grads


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @staticmethod
    def for_config(cfg):
        shapes = param_shapes(cfg)
        return OptimizerState({n: np.zeros(s) for n, s in shapes.items()},
                              {n: np.zeros(s) for n, s in shapes.items()})


def _decayable(name):
    # biases and the prior fallback are excluded from weight decay
    return name.endswith("_W")


def adam_step(params, grads, state, cfg, lr=None):
    """In-place Adam update with bias correction and decoupled weight decay.

    Gradients must already be clipped; non-finite gradients abort the run.
    """
    lr = cfg.lr if lr is None else lr
    b1, b2 = cfg.betas
    eps = 1e-8
    state.step += 1
    t = state.step
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient in {name} at step {t}")
        if cfg.weight_decay > 0.0 and _decayable(name):
            params[name] *= 1.0 - lr * cfg.weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        params[name] -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


def cosine_lr(base_lr, epoch, total_epochs):
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * epoch / total_epochs))


@dataclass
class LossReport:
    epoch: int
    train_loss: float
    val_mae: float
    mean_r: dict
    lambda_mean: float
    eta_mean: float


@dataclass
class TrainResult:
    params: dict
    reports: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_mae: float = math.inf


_TRAIN_PROTOCOL = deg.StochasticMixture((0.0, 1.0), (0.0, 1.0))


def _degrade_batch(samples, lam, eta, stats, rng):
    spec = deg.DegradationSpec({m: lam for m in samples[0].features}, eta,
                               deg.StochasticMixture((lam, lam), (eta, eta)))
    return [deg.degrade_sample(s, spec, stats, rng.split("sample", j))[0]
            for j, s in enumerate(samples)]


def _val_mae(samples, params, cfg):
    errs = [abs(forward(s, params, cfg).y_hat - s.label) for s in samples]
    return float(np.mean(errs))


def train(dataset, model_cfg, train_cfg):
    """Train on the dataset's train split; select the best epoch by val MAE.

    Spectrum mode draws one (lambda, eta) per batch, degrades the batch
    with it, and evaluates validation MAE on a per-sample-degraded copy of
    the val split (fixed once per run). Clean mode never touches the
    degradation module. Fully deterministic given (dataset, configs, seed).
    """
    rng = SeededRng(train_cfg.seed)
    params = init_params(model_cfg, rng.split("init"))
    state = OptimizerState.for_config(model_cfg)

    train_samples = list(dataset.train)
    spectrum = train_cfg.mode == MODE_SPECTRUM
    if spectrum:
        stats = deg.compute_reference_stats(train_samples)
        spec = deg.DegradationSpec({m: 0.0 for m in model_cfg.modality_names}, 0.0,
                                   _TRAIN_PROTOCOL, train_cfg.seed)
        val_samples, _ = deg.degrade_split(list(dataset.val), spec, stats,
                                           base_rng=rng.split("val-degradation"))
    else:
        stats = None
        val_samples = list(dataset.val)

    shuffle_rng = rng.split("data")
    deg_rng = rng.split("degradation")
    drop_rng = rng.split("dropout")

    result = TrainResult(params=clone_params(params))
    step = 0
    for epoch in range(train_cfg.epochs):
        lr = cosine_lr(train_cfg.lr, epoch, train_cfg.epochs)
        order = shuffle_rng.split("epoch", epoch).permutation(len(train_samples))
        losses = []
        r_sums = {m: 0.0 for m in model_cfg.modality_names}
        r_count = 0
        lam_sum = eta_sum = 0.0
        n_batches = 0

        for start in range(0, len(order), train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            batch = [train_samples[i] for i in idx]
            if spectrum:
                step_rng = deg_rng.split("step", step)
                lam, eta = deg.sample_batch_coeffs(_TRAIN_PROTOCOL, step_rng.split("coeffs"))
                batch = _degrade_batch(batch, lam, eta, stats, step_rng)
                lam_sum += lam
                eta_sum += eta
            n_batches += 1

            grads = zero_grads(model_cfg)
            batch_loss = 0.0
            for j, sample in enumerate(batch):
                trace = forward(sample, params, model_cfg, training=True,
                                dropout_rate=train_cfg.dropout,
                                dropout_rng=drop_rng.split("step", step, j))
                batch_loss += nll_loss(trace.y_hat, trace.s_final, sample.label)
                backward(trace, params, model_cfg, sample.label, grads)
                for m, mt in trace.per_modality.items():
                    r_sums[m] += mt.r
                r_count += 1
            scale_grads(grads, 1.0 / len(batch))
            clip_grads(grads, train_cfg.grad_clip)
            adam_step(params, grads, state, train_cfg, lr=lr)
            losses.append(batch_loss / len(batch))
            step += 1

        val_mae = _val_mae(val_samples, params, model_cfg)
        report = LossReport(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            val_mae=val_mae,
            mean_r={m: r_sums[m] / max(r_count, 1) for m in r_sums},
            lambda_mean=lam_sum / n_batches if spectrum else 0.0,
            eta_mean=eta_sum / n_batches if spectrum else 0.0,
        )
        result.reports.append(report)
        if val_mae < result.best_val_mae:
            result.best_val_mae = val_mae
            result.best_epoch = epoch
            result.params = clone_params(params)

    return result


# ---------------------------------------------------------------------------
# gradient oracle suite


def gradient_check(params, cfg, sample, h=1e-5, floor=1e-6):
    """Max relative error between backward() and central finite differences.

    The error for one entry is |a - n| / max(|a|, |n|, floor); the floor
    keeps legitimately zero gradients (dropped experts) from dividing by
    finite-difference roundoff.
    """
    from .numerics import finite_diff_grad

    trace = forward(sample, params, cfg)
    analytic = backward(trace, params, cfg, sample.label)

    worst = 0.0
    work = clone_params(params)
    for name in analytic:
        def loss_of(tensor, name=name):
            work[name] = tensor.reshape(work[name].shape)
            t = forward(sample, work, cfg)
            return nll_loss(t.y_hat, t.s_final, sample.label)

        numeric = finite_diff_grad(loss_of, work[name].ravel(), h=h)
        work[name] = params[name].copy()
        a = analytic[name].ravel()
        n = numeric.ravel()
        rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(rel.max()))
    return worst


def gradient_check_suite(draws=20, d_model=8, n_experts=4, top_k=2, seed=2024, h=1e-5):
    """Run the oracle over fresh random (params, sample) draws.

    Returns the list of per-draw max relative errors.
    """
    from .model import ModelConfig
    from .synthdata import Sample

    cfg = ModelConfig(modalities=(("text", 6), ("audio", 5), ("vision", 4)),
                      d_model=d_model, n_experts=n_experts, top_k=top_k)
    root = SeededRng(seed)
    errors = []
    for draw in range(draws):
        rng = root.split("draw", draw)
        params = init_params(cfg, rng.split("params"))
        for name, t in params.items():  # jitter so biases are random too
            t += 0.05 * rng.split("jitter", name).standard_normal(t.shape)
        feats = {name: rng.split("feat", name).standard_normal((3, dim))
                 for name, dim in cfg.modalities}
        label = float(rng.split("label").uniform(-3.0, 3.0))
        errors.append(gradient_check(params, cfg, Sample(feats, label), h=h))
    return errors


def write_loss_csv(reports, path, modality_names):
    header = ["epoch", "train_loss", "val_mae"]
    header += [f"mean_r_{m}" for m in modality_names]
    header += ["lambda_mean", "eta_mean"]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for rep in reports:
            row = [str(rep.epoch), f"{rep.train_loss:.6f}", f"{rep.val_mae:.6f}"]
            row += [f"{rep.mean_r[m]:.6f}" for m in modality_names]
            row += [f"{rep.lambda_mean:.6f}", f"{rep.eta_mean:.6f}"]
            fh.write(",".join(row) + "\n")
