"""Comparison methods on the same data, models, streams and metrics.

Each baseline runs plain cross-entropy local training and differs only in
which model components are shared with the server and averaged there:
FedAvg shares everything, FedPer only the feature extractor, LG-FedAvg
only the classifier, and LT shares nothing. Because they consume the same
partition, the same common initialization and the same per-round batch
streams as the full protocol, metric differences are attributable to the
method alone; with all distillation coefficients at zero the protocol in
plain-averaging mode reproduces LG-FedAvg bit for bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset, LabelDistribution, count_labels, split_test_evenly
from .evaluation import (MetricsLog, RoundRecord, global_test_accuracy,
                         local_test_accuracy)
from .losses import HyperParams
from .models import ClientModel, init_classifier, init_extractor
from .params import weighted_average
from .protocol import (ClientState, NonFiniteLossError, RunConfig,
                       build_datasets, build_model_spec, client_model_update,
                       partition_with_retry)
from .rng import RngStream

BASELINES = ("fedavg", "lt", "fedper", "lgfedavg")


@dataclass(frozen=True)
class SharingPolicy:
    """Which model components a method uploads and receives."""

    method: str
    shares: frozenset

    @classmethod
    def for_method(cls, method: str) -> "SharingPolicy":
        table = {
            "fedavg": frozenset({"extractor", "classifier"}),
            "lt": frozenset(),
            "fedper": frozenset({"extractor"}),
            "lgfedavg": frozenset({"classifier"}),
        }
        if method not in table:
            raise ValueError(f"unknown baseline {method!r}; choose from {BASELINES}")
        return cls(method, table[method])


def run_baseline(method: str, config: RunConfig, train: Dataset | None = None,
                 test: Dataset | None = None,
                 capture: dict | None = None) -> MetricsLog:
    """Run one baseline for ``config.rounds`` rounds; deterministic."""
    policy = SharingPolicy.for_method(method)
    if train is None or test is None:
        train, test = build_datasets(config)
    spec = build_model_spec(config, train)
    parts = partition_with_retry(train, config)
    shards = split_test_evenly(test, config.clients, config.seed)

    # plain-CE trainer: all distillation coefficients pinned to zero
    ce_config = replace(config, agg_mode="ave",
                        hyper=HyperParams(0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
                                          config.hyper.ramp_exponent))
    uniform = LabelDistribution(np.full(spec.class_count, 1.0 / spec.class_count))

    clients = []
    for i in range(config.clients):
        model = ClientModel(
            init_extractor(spec, RngStream("init/extractor", config.seed)),
            init_classifier(spec, RngStream("init/classifier", config.seed)))
        clients.append(ClientState(i, model, None, None, parts[i],
                                   count_labels(train, parts[i]), None, None))

    shared = {
        "extractor": init_extractor(spec, RngStream("init/extractor", config.seed)),
        "classifier": init_classifier(spec, RngStream("init/classifier", config.seed)),
    }

    log = MetricsLog(method=method, seed=config.seed)
    for round_idx in range(1, config.rounds + 1):
        t0 = time.perf_counter()
        try:
            trace = 0.0
            for state in clients:
                if "extractor" in policy.shares:
                    state.model.extractor = shared["extractor"].copy()
                if "classifier" in policy.shares:
                    state.model.classifier = shared["classifier"].copy()
                trace += client_model_update(spec, ce_config, state, None,
                                             uniform, train, round_idx)
            sizes = [float(s.counter.total) for s in clients]
            if "extractor" in policy.shares:
                shared["extractor"] = weighted_average(
                    [s.model.extractor for s in clients], sizes)
            if "classifier" in policy.shares:
                shared["classifier"] = weighted_average(
                    [s.model.classifier for s in clients], sizes)
        except (NonFiniteLossError, FloatingPointError) as err:
            log.aborted = f"round {round_idx}: {err}"
            break
        models = [s.model for s in clients]
        sizes = [float(s.counter.total) for s in clients]
        log.records.append(RoundRecord(
            round_idx=round_idx,
            local_acc=local_test_accuracy(spec, models, test, shards,
                                          config.eval_batch),
            global_acc=global_test_accuracy(spec, models, sizes, test,
                                            config.eval_batch),
            gd_loss=float("nan"),
            model_loss=trace / config.clients,
            gen_loss=float("nan"),
            server_loss=float("nan"),
            per_client_gd=[],
            wall_sec=time.perf_counter() - t0))
    if capture is not None:
        capture.update(clients=clients, shared=shared, spec=spec,
                       partition=parts)
    return log
