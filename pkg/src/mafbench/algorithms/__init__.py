"""Training objectives, hyperparameter spaces and the shared training loop."""

from .hparams import DG_ALGORITHMS, IMPLEMENTED, MML_ALGORITHMS, default_or_sample_hparams, trial_hparams
from .training import AlgorithmSpec, Checkpoint, RunRecord, train_protocols, train_run

__all__ = [
    "AlgorithmSpec", "Checkpoint", "RunRecord", "train_protocols", "train_run",
    "default_or_sample_hparams", "trial_hparams", "IMPLEMENTED", "MML_ALGORITHMS", "DG_ALGORITHMS",
]
