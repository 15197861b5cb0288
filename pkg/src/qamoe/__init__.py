"""Quality-aware mixture-of-experts on synthetic degraded multimodal data.

Modules:
  numerics     dense kernels, activations, finite-difference oracle, seeded RNG
  degradation  noise / missingness corruption and evaluation protocols
  synthdata    synthetic tri-modal dataset generation and binary I/O
  model        the QA-MoE forward pass and checkpoint I/O
  training     NLL objective, hand-derived backprop, Adam, training loop
  evaluation   metrics, protocol evaluation, reliability grid, ablations
  cli          `qamoe` command-line entry point
"""

from .degradation import (AUDIO, MODALITIES, TEXT, VISION, DegradationSpec, FixedMissing,
                          NoiseOnly, RandomMissing, StochasticMixture)
from .evaluation import GridSpec, MetricsRecord, evaluate, grid_sweep
from .model import ModelConfig, forward, load_checkpoint, save_checkpoint
from .numerics import SeededRng
from .synthdata import Dataset, DatasetSpec, ModalitySpec, Sample, default_spec, generate
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AUDIO", "MODALITIES", "TEXT", "VISION",
    "Dataset", "DatasetSpec", "DegradationSpec", "FixedMissing", "GridSpec",
    "MetricsRecord", "ModalitySpec", "ModelConfig", "NoiseOnly", "RandomMissing",
    "Sample", "SeededRng", "StochasticMixture", "TrainConfig",
    "default_spec", "evaluate", "forward", "generate", "grid_sweep",
    "load_checkpoint", "save_checkpoint", "train",
]
