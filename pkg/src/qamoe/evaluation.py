"""Metrics, degradation-protocol evaluation, and the reliability grid.

ACC7 bins a continuous score into the seven integer classes -3..3 (round
half away from zero). Binary metrics follow the dominant sentiment
protocol: samples labeled exactly 0 are excluded and the positive class is
"score > 0". The grid sweep evaluates one frozen checkpoint over every
(noise intensity, missing rate) cell and writes Table-style CSVs.
"""

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import degradation as deg
from .errors import UndefinedMetricError, ValidationError
from .model import forward, params_fingerprint
from .training import nll_loss, train

DEFAULT_LEVELS = tuple(round(0.1 * i, 1) for i in range(8))  # 0.0 .. 0.7


@dataclass(frozen=True)
class MetricsRecord:
    acc7: float
    acc2: float
    f1: float
    mae: float
    corr: float
    n: int


@dataclass(frozen=True)
class GridSpec:
    lambda_values: tuple = DEFAULT_LEVELS
    eta_values: tuple = DEFAULT_LEVELS
    seed: int = 1111

    def __post_init__(self):
        for axis, vals in (("lambda", self.lambda_values), ("eta", self.eta_values)):
            arr = list(vals)
            if not arr or any(not (0.0 <= v <= 1.0) for v in arr):
                raise ValidationError(f"{axis}_values must be nonempty and within [0, 1]")
            if any(b <= a for a, b in zip(arr, arr[1:])):
                raise ValidationError(f"{axis}_values must be strictly increasing")


@dataclass(frozen=True)
class GridResult:
    records: tuple  # records[i_eta][i_lambda] -> MetricsRecord
    spec: GridSpec
    checkpoint_fingerprint: str


def acc7_bin(score):
    """Round half away from zero, clamped to the class range [-3, 3]."""
    k = math.floor(abs(score) + 0.5)
    return int(max(-3, min(3, int(math.copysign(k, score)))))


def binary_metrics(preds, labels):
    """(acc2, f1) over the nonzero-label subset; positive class is > 0."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape:
        raise ValidationError("preds and labels must have equal length")
    keep = labels != 0.0
    if not keep.any():
        raise UndefinedMetricError("binary metrics need at least one nonzero label")
    p = preds[keep] > 0.0
    t = labels[keep] > 0.0
    acc2 = float((p == t).mean())
    tp = float(np.sum(p & t))
    fp = float(np.sum(p & ~t))
    fn = float(np.sum(~p & t))
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return acc2, f1


def mae(preds, labels):
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape:
        raise ValidationError("preds and labels must have equal length")
    return float(np.abs(preds - labels).mean())


def pearson_corr(preds, labels):
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape or preds.size < 2:
        raise ValidationError("correlation needs two equal-length arrays of size >= 2")
    ps = preds - preds.mean()
    ls = labels - labels.mean()
    denom = math.sqrt(float(ps @ ps) * float(ls @ ls))
    if denom == 0.0:
        raise UndefinedMetricError("correlation undefined for zero-variance input")
    return float(ps @ ls) / denom


def compute_metrics(preds, labels):
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    acc7 = float(np.mean([acc7_bin(p) == acc7_bin(t) for p, t in zip(preds, labels)]))
    acc2, f1 = binary_metrics(preds, labels)
    return MetricsRecord(acc7=acc7, acc2=acc2, f1=f1, mae=mae(preds, labels),
                         corr=pearson_corr(preds, labels), n=len(preds))


def evaluate(params, cfg, samples, spec, stats):
    """Degrade the split per the spec (with its seed), then score eval-mode forwards."""
    degraded, _ = deg.degrade_split(list(samples), spec, stats)
    preds = [forward(s, params, cfg).y_hat for s in degraded]
    labels = [s.label for s in samples]
    return compute_metrics(preds, labels)


def evaluate_loss(params, cfg, samples, spec, stats):
    """Mean NLL under a degradation spec (diagnostic companion to evaluate)."""
    degraded, _ = deg.degrade_split(list(samples), spec, stats)
    losses = []
    for s in degraded:
        t = forward(s, params, cfg)
        losses.append(nll_loss(t.y_hat, t.s_final, s.label))
    return float(np.mean(losses))


def grid_sweep(params, cfg, test_samples, stats, grid):
    """Evaluate one checkpoint on every (eta, lambda) cell of the grid.

    Cell seeds are the grid seed offset by the row-major cell index, so any
    cell can be reproduced in isolation. Lambda applies uniformly to all
    modalities.
    """
    fingerprint = params_fingerprint(params)
    rows = []
    for i_eta, eta in enumerate(grid.eta_values):
        row = []
        for i_lam, lam in enumerate(grid.lambda_values):
            cell_index = i_eta * len(grid.lambda_values) + i_lam
            spec = deg.DegradationSpec.point(lam, eta, modalities=cfg.modality_names,
                                             seed=grid.seed + cell_index)
            try:
                row.append(evaluate(params, cfg, test_samples, spec, stats))
            except UndefinedMetricError as exc:
                raise UndefinedMetricError(
                    f"grid cell (lambda={lam}, eta={eta}): {exc}") from exc
        rows.append(tuple(row))
    return GridResult(tuple(rows), grid, fingerprint)


ABLATION_VARIANTS = ("full", "no_quality_gating", "no_variance", "no_prior")


def mixture_eval_spec(modality_names, seed):
    """Heterogeneous mixed-defect evaluation: per-sample (lambda, eta) draws."""
    return deg.DegradationSpec({m: 0.0 for m in modality_names}, 0.0,
                               deg.StochasticMixture(), seed)


def ablate(variant, dataset, model_cfg, train_cfg, eval_seed=None):
    """Train the given variant under the stochastic-mixture protocol and
    score it on a heterogeneous mixed-degradation test set."""
    if variant not in ABLATION_VARIANTS:
        raise ValidationError(f"unknown ablation variant {variant!r}")
    cfg = replace(model_cfg, variant=variant)
    result = train(dataset, cfg, train_cfg)
    stats = deg.compute_reference_stats(list(dataset.train))
    seed = train_cfg.seed if eval_seed is None else eval_seed
    spec = mixture_eval_spec(cfg.modality_names, seed)
    return evaluate(result.params, cfg, list(dataset.test), spec, stats)


# ---------------------------------------------------------------------------
# CSV emission (UTF-8, comma-separated, LF endings)


def _fmt_level(v):
    s = f"{v:g}"
    return s if "." in s or "e" in s else s + ".0"


def _write_matrix_csv(path, grid, cell_fn):
    lams = [_fmt_level(v) for v in grid.spec.lambda_values]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("eta\\lambda," + ",".join(lams) + "\n")
        for eta, row in zip(grid.spec.eta_values, grid.records):
            fh.write(_fmt_level(eta) + "," + ",".join(cell_fn(rec) for rec in row) + "\n")


def write_grid_csvs(grid, out_dir):
    """Main ACC7 grid (percent, 2 decimals) plus companion per-metric files."""
    out = Path(out_dir)
    written = {}
    specs = {
        "grid_acc7.csv": lambda r: f"{100.0 * r.acc7:.2f}",
        "grid_acc2.csv": lambda r: f"{100.0 * r.acc2:.2f}",
        "grid_f1.csv": lambda r: f"{100.0 * r.f1:.2f}",
        "grid_mae.csv": lambda r: f"{r.mae:.4f}",
        "grid_corr.csv": lambda r: f"{r.corr:.4f}",
    }
    for name, fn in specs.items():
        path = out / name
        _write_matrix_csv(path, grid, fn)
        written[name] = path
    return written


def write_metrics_csv(records, path, row_labels=None, label_header="condition"):
    """One MetricsRecord per row."""
    records = list(records)
    labels = list(row_labels) if row_labels is not None else [str(i) for i in range(len(records))]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{label_header},acc7,acc2,f1,mae,corr,n\n")
        for label, r in zip(labels, records):
            fh.write(f"{label},{100.0 * r.acc7:.2f},{100.0 * r.acc2:.2f},{100.0 * r.f1:.2f},"
                     f"{r.mae:.4f},{r.corr:.4f},{r.n}\n")


def dump_gating(params, cfg, samples, spec, stats, path):
    """Per-sample routing dump: sample_id, modality, quality r, dense gate g_1..g_N."""
    degraded, _ = deg.degrade_split(list(samples), spec, stats)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        gate_cols = ",".join(f"g_{i + 1}" for i in range(cfg.n_experts))
        fh.write(f"sample_id,modality,r,{gate_cols}\n")
        for sid, s in enumerate(degraded):
            trace = forward(s, params, cfg)
            for mod in cfg.modality_names:
                mt = trace.per_modality[mod]
                gates = ",".join(f"{g:.6f}" for g in mt.dense_gate)
                fh.write(f"{sid},{mod},{mt.r:.6f},{gates}\n")
