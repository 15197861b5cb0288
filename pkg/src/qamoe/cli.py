"""Command-line entry point.

Subcommands: gen, train, eval, grid, ablate, gradcheck. Every run is
driven by a flat INI-style config file (sections of key=value lines) plus
a handful of flags; --seed overrides the relevant config seed and the
QAMOE_OUT environment variable overrides the output directory. Re-running
any command with the same config and seed reproduces its outputs byte for
byte.

Exit codes: 0 ok, 2 usage, 3 validation, 4 file format / I/O,
5 training divergence, 6 gradient check failure.
"""

import argparse
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import degradation as deg
from . import evaluation, synthdata, training
from .errors import (FormatError, QamoeError, TrainingDivergenceError, ValidationError,
                     VersionError)
from .model import (ModelConfig, VARIANTS, load_checkpoint, params_fingerprint,
                    save_checkpoint)

_INITIALS = {"t": deg.TEXT, "a": deg.AUDIO, "v": deg.VISION}

DEFAULT_CONFIG = """\
# qamoe run configuration (defaults)

[dataset]
n_train = 512
n_val = 128
n_test = 512
seed = 1111
text_seq_len = 8
text_dim = 32
text_snr = 4.0
audio_seq_len = 8
audio_dim = 16
audio_snr = 1.0
vision_seq_len = 8
vision_dim = 16
vision_snr = 1.0

[model]
d_model = 32
n_experts = 8
top_k = 3
glu_hidden = 0
variant = full
prior_per_modality = false

[train]
epochs = 30
batch_size = 16
lr = 0.001
beta1 = 0.9
beta2 = 0.999
weight_decay = 0.00001
grad_clip = 1.0
dropout = 0.1
seed = 1111
mode = spectrum

[degradation]
protocol = stochastic_mixture
lambda = 0.0
eta = 0.0
seed = 1111

[grid]
lambda_values = 0.0,0.1,0.2,0.3,0.4,0.5,0.6,0.7
eta_values = 0.0,0.1,0.2,0.3,0.4,0.5,0.6,0.7
seed = 1111

[output]
dir = out
"""

_KNOWN_KEYS = {
    "dataset": {"n_train", "n_val", "n_test", "seed",
                "text_seq_len", "text_dim", "text_snr",
                "audio_seq_len", "audio_dim", "audio_snr",
                "vision_seq_len", "vision_dim", "vision_snr"},
    "model": {"d_model", "n_experts", "top_k", "glu_hidden", "variant", "prior_per_modality"},
    "train": {"epochs", "batch_size", "lr", "beta1", "beta2", "weight_decay", "grad_clip",
              "dropout", "seed", "mode"},
    "degradation": {"protocol", "lambda", "lambda_text", "lambda_audio", "lambda_vision",
                    "eta", "lambda_min", "lambda_max", "eta_min", "eta_max", "available",
                    "seed"},
    "grid": {"lambda_values", "eta_values", "seed"},
    "output": {"dir"},
}


class RunConfig:
    """Parsed config file: raw[(section, key)] -> (value, line number)."""

    def __init__(self, raw, path):
        self.raw = raw
        self.path = path

    def get(self, section, key, default=None):
        entry = self.raw.get((section, key))
        return default if entry is None else entry[0]

    def context(self, section, key):
        entry = self.raw.get((section, key))
        if entry is None:
            return f"{self.path} [{section}] {key}"
        return f"{self.path}:{entry[1]} [{section}] {key}"

    def value(self, section, key, convert, default):
        entry = self.raw.get((section, key))
        if entry is None:
            return default
        try:
            return convert(entry[0])
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"{self.context(section, key)}: {exc}") from exc

    def unit_interval(self, section, key, default):
        v = self.value(section, key, float, default)
        if not (0.0 <= v <= 1.0):
            raise ValidationError(f"{self.context(section, key)}: value {v} outside [0, 1]")
        return v


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_float_list(text):
    return tuple(float(p) for p in text.split(",") if p.strip())


def parse_config(path):
    """Flat INI subset: [section] headers and key = value lines.

    Unknown sections or keys are rejected with their line number.
    """
    raw = {}
    section = None
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise FormatError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith(("#", ";")):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip().lower()
            if section not in _KNOWN_KEYS:
                raise ValidationError(f"{path}:{lineno}: unknown section [{section}]")
            continue
        if "=" not in stripped:
            raise ValidationError(f"{path}:{lineno}: expected key = value, got {stripped!r}")
        if section is None:
            raise ValidationError(f"{path}:{lineno}: key outside any [section]")
        key, _, value = stripped.partition("=")
        key = key.strip().lower()
        if key not in _KNOWN_KEYS[section]:
            raise ValidationError(f"{path}:{lineno}: unknown key {key!r} in [{section}]")
        raw[(section, key)] = (value.strip(), lineno)
    return RunConfig(raw, str(path))


def dataset_spec_from(cfg, seed_override=None):
    mods = []
    for name, default_dim, default_snr in ((deg.TEXT, 32, 4.0), (deg.AUDIO, 16, 1.0),
                                           (deg.VISION, 16, 1.0)):
        mods.append(synthdata.ModalitySpec(
            name,
            seq_len=cfg.value("dataset", f"{name}_seq_len", int, 8),
            dim=cfg.value("dataset", f"{name}_dim", int, default_dim),
            snr=cfg.value("dataset", f"{name}_snr", float, default_snr)))
    seed = seed_override if seed_override is not None else cfg.value("dataset", "seed", int, 1111)
    return synthdata.DatasetSpec(
        n_train=cfg.value("dataset", "n_train", int, 512),
        n_val=cfg.value("dataset", "n_val", int, 128),
        n_test=cfg.value("dataset", "n_test", int, 512),
        modalities=tuple(mods),
        seed=seed)


def model_config_from(cfg, dataset_spec):
    return ModelConfig.for_dataset(
        dataset_spec,
        d_model=cfg.value("model", "d_model", int, 32),
        n_experts=cfg.value("model", "n_experts", int, 8),
        top_k=cfg.value("model", "top_k", int, 3),
        glu_hidden=cfg.value("model", "glu_hidden", int, 0),
        variant=cfg.get("model", "variant", "full"),
        prior_per_modality=cfg.value("model", "prior_per_modality", _parse_bool, False))


def train_config_from(cfg, mode=None, seed_override=None):
    return training.TrainConfig(
        epochs=cfg.value("train", "epochs", int, 30),
        batch_size=cfg.value("train", "batch_size", int, 16),
        lr=cfg.value("train", "lr", float, 1e-3),
        betas=(cfg.value("train", "beta1", float, 0.9),
               cfg.value("train", "beta2", float, 0.999)),
        weight_decay=cfg.value("train", "weight_decay", float, 1e-5),
        grad_clip=cfg.value("train", "grad_clip", float, 1.0),
        dropout=cfg.value("train", "dropout", float, 0.1),
        seed=seed_override if seed_override is not None else cfg.value("train", "seed", int, 1111),
        mode=mode if mode is not None else cfg.get("train", "mode", training.MODE_SPECTRUM))


def degradation_spec_from(cfg, modality_names, protocol=None, args=None, seed_override=None):
    """Build the evaluation DegradationSpec for `qamoe eval`."""
    seed = seed_override if seed_override is not None else cfg.value("degradation", "seed", int, 1111)
    if args is not None and args.lam is not None:
        lam_map = {m: args.lam for m in modality_names}
    else:
        lam_default = cfg.unit_interval("degradation", "lambda", 0.0)
        lam_map = {m: cfg.unit_interval("degradation", f"lambda_{m}", lam_default)
                   for m in modality_names}
    if args is not None and args.eta is not None:
        eta = args.eta
    else:
        eta = cfg.unit_interval("degradation", "eta", 0.0)

    if protocol == "I":
        available = args.available if args is not None else None
        if available:
            subset = frozenset(_INITIALS.get(p.strip(), p.strip()) for p in available.split(","))
            unknown = subset - set(modality_names)
            if unknown:
                raise ValidationError(f"--available names unknown modalities: {sorted(unknown)}")
            proto = deg.FixedMissing(subset)
        else:
            proto = deg.RandomMissing(eta)
        return deg.DegradationSpec({m: 0.0 for m in modality_names}, eta, proto, seed)
    if protocol == "II":
        return deg.DegradationSpec(lam_map, 0.0, deg.NoiseOnly(max(lam_map.values())), seed)
    if protocol == "III":
        lam_range = (cfg.unit_interval("degradation", "lambda_min", 0.0),
                     cfg.unit_interval("degradation", "lambda_max", 1.0))
        eta_range = (cfg.unit_interval("degradation", "eta_min", 0.0),
                     cfg.unit_interval("degradation", "eta_max", 1.0))
        proto = deg.StochasticMixture(lam_range, eta_range)
        return deg.DegradationSpec(lam_map, eta, proto, seed)
    raise ValidationError(f"unknown protocol {protocol!r} (expected I, II or III)")


def grid_spec_from(cfg, seed_override=None):
    return evaluation.GridSpec(
        lambda_values=cfg.value("grid", "lambda_values", _parse_float_list,
                                evaluation.DEFAULT_LEVELS),
        eta_values=cfg.value("grid", "eta_values", _parse_float_list,
                             evaluation.DEFAULT_LEVELS),
        seed=seed_override if seed_override is not None else cfg.value("grid", "seed", int, 1111))


def _out_dir(cfg, args):
    out = cfg.get("output", "dir", "out")
    if getattr(args, "out", None):
        out = args.out
    env = os.environ.get("QAMOE_OUT")
    if env:
        out = env
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _dataset_path(args, out_dir):
    if getattr(args, "dataset", None):
        return Path(args.dataset)
    return out_dir / "dataset.qmds"


def _load_dataset(path):
    if not Path(path).exists():
        raise FormatError(f"dataset file not found: {path}")
    return synthdata.load(path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args):
    cfg = parse_config(args.config)
    spec = dataset_spec_from(cfg, seed_override=args.seed)
    out = _out_dir(cfg, args)
    dataset = synthdata.generate(spec)
    path = _dataset_path(args, out)
    synthdata.save(dataset, path)
    Path(f"{path}.fingerprint").write_text(dataset.fingerprint + "\n", encoding="utf-8")
    print(f"wrote {path} ({spec.n_total} samples, fingerprint {dataset.fingerprint[:12]})")
    return 0


def cmd_train(args):
    cfg = parse_config(args.config)
    out = _out_dir(cfg, args)
    dataset = _load_dataset(_dataset_path(args, out))
    model_cfg = model_config_from(cfg, dataset.spec)
    train_cfg = train_config_from(cfg, mode=args.mode, seed_override=args.seed)
    if args.lr is not None:
        train_cfg = replace(train_cfg, lr=args.lr)

    result = training.train(dataset, model_cfg, train_cfg)
    ckpt = out / "checkpoint.qmck"
    save_checkpoint(result.params, model_cfg, ckpt)
    training.write_loss_csv(result.reports, out / "train_log.csv", model_cfg.modality_names)
    first, last = result.reports[0], result.reports[-1]
    print(f"wrote {ckpt} (best epoch {result.best_epoch}, val MAE {result.best_val_mae:.4f}; "
          f"train loss {first.train_loss:.4f} -> {last.train_loss:.4f})")
    return 0


def cmd_eval(args):
    cfg = parse_config(args.config)
    out = _out_dir(cfg, args)
    params, model_cfg = load_checkpoint(args.checkpoint)
    dataset = _load_dataset(_dataset_path(args, out))
    spec = degradation_spec_from(cfg, model_cfg.modality_names, protocol=args.protocol,
                                 args=args, seed_override=args.seed)
    stats = deg.compute_reference_stats(list(dataset.train))
    record = evaluation.evaluate(params, model_cfg, list(dataset.test), spec, stats)
    tag = args.protocol
    if args.protocol == "I" and args.available:
        tag += "_" + "".join(sorted(p.strip() for p in args.available.split(",")))
    metrics_path = out / f"eval_protocol_{tag}.csv"
    evaluation.write_metrics_csv([record], metrics_path, row_labels=[tag], label_header="protocol")
    evaluation.dump_gating(params, model_cfg, list(dataset.test), spec, stats,
                           out / f"gating_protocol_{tag}.csv")
    print(f"wrote {metrics_path}: acc7={100 * record.acc7:.2f} acc2={100 * record.acc2:.2f} "
          f"f1={100 * record.f1:.2f} mae={record.mae:.4f} corr={record.corr:.4f} n={record.n}")
    return 0


def cmd_grid(args):
    cfg = parse_config(args.config)
    out = _out_dir(cfg, args)
    params, model_cfg = load_checkpoint(args.checkpoint)
    dataset = _load_dataset(_dataset_path(args, out))
    grid = grid_spec_from(cfg, seed_override=args.seed)
    stats = deg.compute_reference_stats(list(dataset.train))
    test = list(dataset.test)

    if args.jobs > 1:
        cells = [(eta, lam) for eta in grid.eta_values for lam in grid.lambda_values]

        def run_cell(pair):
            eta, lam = pair
            idx = (grid.eta_values.index(eta) * len(grid.lambda_values)
                   + grid.lambda_values.index(lam))
            spec = deg.DegradationSpec.point(lam, eta, modalities=model_cfg.modality_names,
                                             seed=grid.seed + idx)
            return evaluation.evaluate(params, model_cfg, test, spec, stats)

        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            flat = list(pool.map(run_cell, cells))
        w = len(grid.lambda_values)
        rows = tuple(tuple(flat[i * w:(i + 1) * w]) for i in range(len(grid.eta_values)))
        result = evaluation.GridResult(rows, grid, params_fingerprint(params))
    else:
        result = evaluation.grid_sweep(params, model_cfg, test, stats, grid)

    written = evaluation.write_grid_csvs(result, out)
    print(f"wrote {len(written)} grid CSVs to {out} "
          f"({len(grid.eta_values)}x{len(grid.lambda_values)} cells, "
          f"checkpoint {result.checkpoint_fingerprint[:12]})")
    return 0


def cmd_ablate(args):
    cfg = parse_config(args.config)
    out = _out_dir(cfg, args)
    dataset = _load_dataset(_dataset_path(args, out))
    model_cfg = model_config_from(cfg, dataset.spec)
    train_cfg = train_config_from(cfg, mode=training.MODE_SPECTRUM, seed_override=args.seed)
    record = evaluation.ablate(args.variant, dataset, model_cfg, train_cfg)
    path = out / f"ablate_{args.variant}.csv"
    evaluation.write_metrics_csv([record], path, row_labels=[args.variant],
                                 label_header="variant")
    print(f"wrote {path}: mae={record.mae:.4f} acc7={100 * record.acc7:.2f}")
    return 0


def cmd_gradcheck(args):
    start = time.time()
    errors = training.gradient_check_suite(draws=args.draws, seed=args.seed)
    worst = max(errors)
    elapsed = time.time() - start
    ok = worst <= args.tolerance
    status = "PASS" if ok else "FAIL"
    print(f"{status}: {len(errors)} draws, max relative error {worst:.3e} "
          f"(tolerance {args.tolerance:.0e}), {elapsed:.1f}s")
    return 0 if ok else 6


def build_parser():
    parser = argparse.ArgumentParser(prog="qamoe",
                                     description="quality-aware mixture-of-experts pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="path to INI config file")
        p.add_argument("--out", help="output directory (QAMOE_OUT env var wins)")
        p.add_argument("--seed", type=int, help="override the command's config seed")

    p = sub.add_parser("gen", help="generate the synthetic dataset file")
    add_common(p)
    p.add_argument("--dataset", help="dataset file path (default <out>/dataset.qmds)")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train a checkpoint")
    add_common(p)
    p.add_argument("--mode", choices=(training.MODE_CLEAN, training.MODE_SPECTRUM))
    p.add_argument("--dataset", help="dataset file path")
    p.add_argument("--lr", type=float, help="override learning rate")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint under one protocol")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--protocol", required=True, choices=("I", "II", "III"))
    p.add_argument("--available", help="protocol I fixed subset, e.g. t,a")
    p.add_argument("--eta", type=float, help="protocol I random missing rate")
    p.add_argument("--lam", type=float, help="protocol II noise intensity")
    p.add_argument("--dataset", help="dataset file path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("grid", help="one-checkpoint-for-all reliability grid")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="dataset file path")
    p.add_argument("--jobs", type=int, default=1, help="worker threads for grid cells")
    p.set_defaults(fn=cmd_grid)

    p = sub.add_parser("ablate", help="train and evaluate an ablation variant")
    add_common(p)
    p.add_argument("--variant", required=True, choices=VARIANTS)
    p.add_argument("--dataset", help="dataset file path")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient oracle suite")
    p.add_argument("--draws", type=int, default=20)
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ValidationError as exc:
        print(f"error ({args.command}): {exc}", file=sys.stderr)
        return 3
    except (FormatError, VersionError, OSError) as exc:
        print(f"error ({args.command}): {exc}", file=sys.stderr)
        return 4
    except TrainingDivergenceError as exc:
        print(f"error ({args.command}): {exc}", file=sys.stderr)
        return 5
    except QamoeError as exc:
        print(f"error ({args.command}): {exc}", file=sys.stderr)
        return 1


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
