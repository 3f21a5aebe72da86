"""Deterministic single-machine simulator of federated learning with
model decoupling and conditional generators, plus classic baselines and a
gradient-inversion privacy auditor.

The package is organized as a small numpy library:

- :mod:`fedmdcg.autograd` - float64 tensors with reverse-mode autodiff
- :mod:`fedmdcg.data` - dataset readers, Dirichlet partitioning, counters
- :mod:`fedmdcg.models` - extractor / classifier / generator architectures
- :mod:`fedmdcg.losses` - client and server training objectives
- :mod:`fedmdcg.protocol` - the federated round loop and aggregation
- :mod:`fedmdcg.baselines` - FedAvg, LT, FedPer, LG-FedAvg
- :mod:`fedmdcg.evaluation` - accuracies, consistency metric, PCA, CSVs
- :mod:`fedmdcg.attack` - PSNR and the gradient-matching reconstruction
- :mod:`fedmdcg.cli` - the ``fedmdcg`` command
"""

from .autograd import Tensor, no_grad
from .data import (Dataset, LabelCounter, LabelDistribution, PartitionSpec,
                   aggregate_label_distribution, count_labels,
                   dirichlet_partition, load_cifar10, load_idx, make_blobs,
                   split_test_evenly)
from .losses import HyperParams
from .models import (ClientModel, GeneratorParams, ModelSpec,
                     deserialize_params, serialize_params)
from .optim import AdamState, adam_step, sgd_step
from .params import ParamSet, weighted_average
from .protocol import RunConfig, ramp_lambda, run_protocol
from .baselines import run_baseline
from .evaluation import MetricsLog, RoundRecord, pca_2d
from .attack import AttackConfig, dlg_attack, psnr
from .rng import RngStream, named_generator

__version__ = "0.1.0"

__all__ = [
    "Tensor", "no_grad", "Dataset", "LabelCounter", "LabelDistribution",
    "PartitionSpec", "aggregate_label_distribution", "count_labels",
    "dirichlet_partition", "load_cifar10", "load_idx", "make_blobs",
    "split_test_evenly", "HyperParams", "ClientModel", "GeneratorParams",
    "ModelSpec", "deserialize_params", "serialize_params", "AdamState",
    "adam_step", "sgd_step", "ParamSet", "weighted_average", "RunConfig",
    "ramp_lambda", "run_protocol", "run_baseline", "MetricsLog",
    "RoundRecord", "pca_2d", "AttackConfig", "dlg_attack", "psnr",
    "RngStream", "named_generator",
]
