"""The federated round loop: client two-stage training, upload, and
server-side aggregation in one of four manners.

Every round broadcasts the global generator, global classifier and the
pooled label distribution; each client overwrites its classifier with the
broadcast one, runs local model steps, then local generator steps, and
uploads its generator, classifier and label counter. The server averages
the uploads by sample count and, in the distillation modes, refines the
averaged pair with crossed data-free distillation steps.

Clients and server share a common initialization (standard FL practice),
and all randomness flows through streams keyed by purpose, client id and
round, so runs are bit-reproducible and client order is irrelevant.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autograd import Tensor, one_hot
from .data import (Dataset, LabelCounter, LabelDistribution, PartitionSpec,
                   aggregate_label_distribution, count_labels,
                   dirichlet_partition, load_cifar10, load_idx, make_blobs,
                   split_test_evenly)
from .evaluation import (MetricsLog, RoundRecord, gd_consistency_loss,
                         global_test_accuracy, local_test_accuracy)
from .losses import (HyperParams, diversity_loss, distill_from_global_losses,
                     distill_to_generator_losses, generated_sample_ce,
                     generator_update_objective, model_update_objective,
                     server_distillation_losses)
from .models import (GeneratorParams, ClientModel, ModelSpec, init_classifier,
                     init_extractor, init_generator)
from .optim import AdamState, adam_step, sgd_step
from .params import ParamSet, weighted_average
from .rng import RngStream

AGG_MODES = ("ave_star", "ave", "kd", "kdc")
PARTITION_RETRIES = 100


class NonFiniteLossError(RuntimeError):
    """Training produced a non-finite objective; the run is aborted."""


@dataclass(frozen=True)
class RunConfig:
    """All protocol hyperparameters for one run."""

    rounds: int = 30
    clients: int = 5
    client_steps: int = 20
    server_steps: int = 50
    batch: int = 64
    lr_model: float = 0.01
    lr_gen: float = 3e-4
    lr_server: float = 3e-4
    weight_decay: float = 1e-4
    noise_dim: int = 128
    hyper: HyperParams = field(default_factory=HyperParams)
    agg_mode: str = "kdc"
    omega: float = 1.0
    seed: int = 0
    dataset: str = "blobs"
    backbone: str = "mlp"
    generator_hidden: int = 256
    div_variant: int = 2
    detach_teacher_branch: bool = False
    probe_batch: int = 256
    eval_batch: int = 512
    data_dir: str | None = None
    train_subset: int | None = None
    test_subset: int | None = None
    blobs_classes: int = 4
    blobs_dim: int = 8
    blobs_per_class: int = 250
    blobs_test_per_class: int = 100
    blobs_separation: float = 5.0

    def __post_init__(self):
        if self.rounds < 1 or self.clients < 1:
            raise ValueError("rounds and clients must be >= 1")
        if self.client_steps < 1 or self.server_steps < 1:
            raise ValueError("step counts must be >= 1")
        if self.batch < 2:
            raise ValueError("batch must be >= 2 (generator batch norm)")
        if min(self.lr_model, self.lr_gen, self.lr_server) <= 0:
            raise ValueError("learning rates must be positive")
        if self.agg_mode not in AGG_MODES:
            raise ValueError(f"agg_mode must be one of {AGG_MODES}")
        if self.div_variant not in (0, 1, 2):
            raise ValueError("div_variant must be 0, 1 or 2")
        if self.omega <= 0:
            raise ValueError("omega must be positive")


def effective_hyper(config: RunConfig) -> HyperParams:
    """The plain-average-star mode keeps only the latent-level transfer on
    the client, so its logit-level coefficients are forced to zero."""
    if config.agg_mode == "ave_star":
        return replace(config.hyper, lambda1=0.0, lambda3=0.0)
    return config.hyper


def ramp_lambda(pre_value: float, round_idx: int, rounds: int, d: float) -> float:
    """Coefficient schedule pre * ((r-1)/R)^d, zero at the first round."""
    if not 1 <= round_idx <= rounds:
        raise ValueError(f"round {round_idx} outside [1, {rounds}]")
    return pre_value * ((round_idx - 1) / rounds) ** d


@dataclass
class ClientState:
    """Everything a client keeps between rounds."""

    client_id: int
    model: ClientModel
    generator: GeneratorParams
    gen_opt: AdamState
    indices: np.ndarray
    counter: LabelCounter
    probe_z: np.ndarray
    probe_y: np.ndarray


@dataclass(frozen=True)
class ClientUpload:
    """What travels to the server: never the feature extractor."""

    client_id: int
    generator: GeneratorParams
    classifier: ParamSet
    counter: LabelCounter


@dataclass
class RoundState:
    """Server-side view of the protocol between rounds."""

    round_idx: int
    global_generator: GeneratorParams
    global_classifier: ParamSet
    label_dist: LabelDistribution


def _finite_or_raise(value: float, what: str) -> float:
    if not np.isfinite(value):
        raise NonFiniteLossError(f"non-finite loss in {what}: {value}")
    return value


def client_model_update(spec: ModelSpec, config: RunConfig, state: ClientState,
                        global_gen: GeneratorParams | None,
                        label_dist: LabelDistribution, train: Dataset,
                        round_idx: int) -> float:
    """Local model steps on the combined objective with round-ramped
    coefficients; the broadcast classifier must already be installed.
    Returns the mean objective value over the steps."""
    hyper = effective_hyper(config)
    lam1 = ramp_lambda(hyper.lambda1, round_idx, config.rounds, hyper.ramp_exponent)
    lam2 = ramp_lambda(hyper.lambda2, round_idx, config.rounds, hyper.ramp_exponent)
    lam3 = ramp_lambda(hyper.lambda3, round_idx, config.rounds, hyper.ramp_exponent)
    if state.indices.size == 0:
        raise ValueError(f"client {state.client_id} has no local data")
    rng = RngStream(f"model/client{state.client_id}/round{round_idx}", config.seed)
    model = state.model
    trace = 0.0
    for _ in range(config.client_steps):
        idx = rng.choice(state.indices, config.batch)
        x = Tensor(train.images[idx])
        y = train.labels[idx]
        need_mse, need_kl = lam2 > 0.0, lam3 > 0.0
        z = (Tensor(rng.normal((config.batch, spec.noise_dim)))
             if (need_mse or need_kl) else None)
        l_ce, l_mse, l_kl = distill_from_global_losses(
            spec, model, global_gen, x, y, z,
            detach_teacher=config.detach_teacher_branch,
            need_mse=need_mse, need_kl=need_kl)
        l_gce = None
        if lam1 > 0.0:
            z2 = Tensor(rng.normal((config.batch, spec.noise_dim)))
            yhat = rng.choice(spec.class_count, config.batch, p=label_dist.probs)
            l_gce = generated_sample_ce(spec, model, global_gen, z2, yhat)
        total = model_update_objective(l_ce, l_gce, l_mse, l_kl, lam1, lam2, lam3)
        trace += _finite_or_raise(total.item(),
                                  f"model update (client {state.client_id}, "
                                  f"round {round_idx})")
        model.extractor.zero_grad()
        model.classifier.zero_grad()
        total.backward()
        sgd_step(model.extractor, model.extractor.grads(), config.lr_model,
                 config.weight_decay)
        sgd_step(model.classifier, model.classifier.grads(), config.lr_model,
                 config.weight_decay)
    return trace / config.client_steps


def client_generator_update(spec: ModelSpec, config: RunConfig,
                            state: ClientState, train: Dataset,
                            round_idx: int) -> float:
    """Local generator steps distilling the frozen, freshly trained local
    model; only the generator parameters move. Returns the mean objective."""
    hyper = effective_hyper(config)
    rng = RngStream(f"gen/client{state.client_id}/round{round_idx}", config.seed)
    trace = 0.0
    for _ in range(config.client_steps):
        idx = rng.choice(state.indices, config.batch)
        x = Tensor(train.images[idx])
        y = train.labels[idx]
        z = Tensor(rng.normal((config.batch, spec.noise_dim)))
        l_mse, l_kl, l_ce, g_out = distill_to_generator_losses(
            spec, state.model, state.generator, x, y, z,
            need_mse=hyper.lambda4 > 0.0, need_ce=hyper.lambda5 > 0.0)
        l_div = None
        if hyper.lambda6 > 0.0:
            l_div = diversity_loss(config.div_variant, z,
                                   one_hot(y, spec.class_count), g_out)
        total = generator_update_objective(l_kl, l_mse, l_ce, l_div,
                                           hyper.lambda4, hyper.lambda5,
                                           hyper.lambda6)
        trace += _finite_or_raise(total.item(),
                                  f"generator update (client {state.client_id}, "
                                  f"round {round_idx})")
        state.generator.zero_grad()
        total.backward()
        adam_step(state.generator, state.generator.grads(), state.gen_opt,
                  config.lr_gen, weight_decay=config.weight_decay)
    return trace / config.client_steps


def server_aggregate(spec: ModelSpec, config: RunConfig,
                     uploads: list[ClientUpload],
                     round_idx: int) -> tuple[GeneratorParams, ParamSet,
                                              LabelDistribution, float]:
    """Pool counters, average uploads, then (in the distillation modes)
    refine the averaged pair with crossed distillation steps.

    Returns the new global generator, classifier, label distribution and
    the mean server loss (NaN for the plain averaging modes).
    """
    uploads = sorted(uploads, key=lambda u: u.client_id)
    counters = [u.counter for u in uploads]
    label_dist = aggregate_label_distribution(counters)
    weights = [float(u.counter.total) for u in uploads]
    gen = weighted_average([u.generator for u in uploads], weights)
    clf = weighted_average([u.classifier for u in uploads], weights)
    if config.agg_mode in ("ave", "ave_star"):
        return gen, clf, label_dist, float("nan")

    client_gens = [u.generator for u in uploads]
    client_clfs = [u.classifier for u in uploads]
    rng = RngStream(f"server/round{round_idx}", config.seed)
    gen_opt, clf_opt = AdamState(), AdamState()
    trace = 0.0
    for _ in range(config.server_steps):
        z = Tensor(rng.normal((config.batch, spec.noise_dim)))
        yhat = rng.choice(spec.class_count, config.batch, p=label_dist.probs)
        l1, l2, l3 = server_distillation_losses(
            spec, gen, clf, client_gens, client_clfs, counters, z, yhat)
        total = l1 if config.agg_mode == "kd" else l1 + l2 + l3
        trace += _finite_or_raise(total.item(), f"server step (round {round_idx})")
        gen.zero_grad()
        clf.zero_grad()
        total.backward()
        adam_step(gen, gen.grads(), gen_opt, config.lr_server,
                  weight_decay=config.weight_decay)
        adam_step(clf, clf.grads(), clf_opt, config.lr_server,
                  weight_decay=config.weight_decay)
    return gen, clf, label_dist, trace / config.server_steps


def partition_with_retry(train: Dataset, config: RunConfig) -> list[np.ndarray]:
    """Dirichlet partition, redrawn with a derived seed until no client is
    empty (bounded attempts)."""
    for attempt in range(PARTITION_RETRIES):
        seed = config.seed if attempt == 0 else config.seed + (attempt << 32)
        parts = dirichlet_partition(
            train, PartitionSpec(config.omega, config.clients, seed))
        if all(p.size > 0 for p in parts):
            return parts
    raise RuntimeError(f"no non-empty partition after {PARTITION_RETRIES} attempts")


def build_model_spec(config: RunConfig, train: Dataset) -> ModelSpec:
    return ModelSpec(config.backbone, tuple(train.sample_shape),
                     train.class_count, noise_dim=config.noise_dim,
                     generator_hidden=config.generator_hidden)


def init_clients(spec: ModelSpec, config: RunConfig, train: Dataset,
                 parts: list[np.ndarray]) -> list[ClientState]:
    """Per-client state with the common initialization shared by the server."""
    states = []
    for i in range(config.clients):
        model = ClientModel(
            init_extractor(spec, RngStream("init/extractor", config.seed)),
            init_classifier(spec, RngStream("init/classifier", config.seed)))
        gen = init_generator(spec, RngStream("init/generator", config.seed))
        counter = count_labels(train, parts[i])
        probe = RngStream(f"probe/client{i}", config.seed)
        probe_z = probe.normal((config.probe_batch, spec.noise_dim))
        local_probs = counter.counts / counter.total
        probe_y = probe.choice(spec.class_count, config.probe_batch, p=local_probs)
        states.append(ClientState(i, model, gen, AdamState(), parts[i],
                                  counter, probe_z, probe_y))
    return states


def run_protocol(config: RunConfig, train: Dataset | None = None,
                 test: Dataset | None = None, capture: dict | None = None) -> MetricsLog:
    """Execute the full protocol for ``config.rounds`` rounds.

    Fully deterministic given the config; a non-finite loss aborts the run
    and leaves the completed rounds plus a diagnostic in the log. Pass a
    dict as ``capture`` to receive the final client states and global
    parameters (for checkpointing).
    """
    if train is None or test is None:
        train, test = build_datasets(config)
    spec = build_model_spec(config, train)
    parts = partition_with_retry(train, config)
    shards = split_test_evenly(test, config.clients, config.seed)
    clients = init_clients(spec, config, train, parts)

    global_gen = init_generator(spec, RngStream("init/generator", config.seed))
    global_clf = init_classifier(spec, RngStream("init/classifier", config.seed))
    label_dist = LabelDistribution(np.full(spec.class_count,
                                           1.0 / spec.class_count))

    log = MetricsLog(method=f"fedmdcg-{config.agg_mode}", seed=config.seed)
    for round_idx in range(1, config.rounds + 1):
        t0 = time.perf_counter()
        try:
            uploads = []
            model_trace = gen_trace = 0.0
            for state in clients:
                state.model.classifier = global_clf.copy()
                model_trace += client_model_update(
                    spec, config, state, global_gen, label_dist, train, round_idx)
                gen_trace += client_generator_update(
                    spec, config, state, train, round_idx)
                uploads.append(ClientUpload(state.client_id, state.generator,
                                            state.model.classifier,
                                            state.counter))
            global_gen, global_clf, label_dist, server_trace = server_aggregate(
                spec, config, uploads, round_idx)
        except (NonFiniteLossError, FloatingPointError) as err:
            log.aborted = f"round {round_idx}: {err}"
            break
        models = [s.model for s in clients]
        sizes = [float(s.counter.total) for s in clients]
        gd = [gd_consistency_loss(spec, s.model, s.generator,
                                  s.probe_z, s.probe_y) for s in clients]
        log.records.append(RoundRecord(
            round_idx=round_idx,
            local_acc=local_test_accuracy(spec, models, test, shards,
                                          config.eval_batch),
            global_acc=global_test_accuracy(spec, models, sizes, test,
                                            config.eval_batch),
            gd_loss=float(np.mean(gd)),
            model_loss=model_trace / config.clients,
            gen_loss=gen_trace / config.clients,
            server_loss=server_trace,
            per_client_gd=gd,
            wall_sec=time.perf_counter() - t0))
    if capture is not None:
        capture.update(clients=clients, global_generator=global_gen,
                       global_classifier=global_clf, spec=spec,
                       partition=parts, label_dist=label_dist)
    return log


# -- dataset resolution ------------------------------------------------------


def resolve_data_dir(config: RunConfig) -> Path:
    root = config.data_dir or os.environ.get("FEDMDCG_DATA_DIR") or "data"
    return Path(root)


def _maybe_subset(ds: Dataset, size: int | None, seed: int, tag: str) -> Dataset:
    if size is None or size >= len(ds):
        return ds
    rng = RngStream(f"subset/{tag}", seed)
    idx = np.sort(rng.choice(len(ds), size, replace=False))
    return ds.subset(idx)


def build_datasets(config: RunConfig) -> tuple[Dataset, Dataset]:
    """Materialize the (train, test) pair named by the config."""
    name = config.dataset.lower()
    if name == "blobs":
        train = make_blobs(config.blobs_classes, config.blobs_dim,
                           config.blobs_per_class, config.blobs_separation,
                           config.seed, name="train")
        test = make_blobs(config.blobs_classes, config.blobs_dim,
                          config.blobs_test_per_class, config.blobs_separation,
                          config.seed, name="test")
    elif name in ("fmnist", "emnist", "mnist"):
        root = resolve_data_dir(config) / name
        train = load_idx(root, "train", name=name)
        test = load_idx(root, "test", name=name)
    elif name == "cifar10":
        root = resolve_data_dir(config) / name
        train = load_cifar10(root, "train")
        test = load_cifar10(root, "test")
    else:
        raise ValueError(f"unknown dataset {config.dataset!r}")
    train = _maybe_subset(train, config.train_subset, config.seed, "train")
    test = _maybe_subset(test, config.test_subset, config.seed, "test")
    return train, test
