"""
Training backend and MNIST ingestion.
"""

from .mnist_idx import Batch, Dataset, load_mnist, synthetic_dataset
from .trainer import TrainConfig, Trainer, backward, evaluate, forward, sgd_step, solve_subproblem1

__all__ = [
    'Batch', 'Dataset', 'TrainConfig', 'Trainer', 'backward', 'evaluate', 'forward',
    'load_mnist', 'sgd_step', 'solve_subproblem1', 'synthetic_dataset',
]
