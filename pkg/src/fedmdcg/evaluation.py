"""Metrics, CSV persistence, PCA projection and the generator-diversity
visualization pipeline.

Local test accuracy evaluates each client's own full model on its test
shard; global test accuracy evaluates the sample-weighted average of all
client models ("virtual global model") on the whole test set. The
generator/classifier consistency loss is the classification loss of a
client's classifier on its own generator's outputs over a fixed probe
batch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import Dataset
from .losses import (ce_loss, diversity_loss, distill_to_generator_losses,
                     generator_update_objective)
from .models import (GeneratorParams, ClientModel, ModelSpec,
                     classifier_forward, extractor_forward, generator_forward,
                     init_classifier, init_extractor, init_generator,
                     model_forward)
from .optim import AdamState, adam_step, sgd_step
from .params import weighted_average
from .rng import RngStream

CSV_EOL = "\n"


@dataclass
class RoundRecord:
    round_idx: int
    local_acc: float
    global_acc: float
    gd_loss: float
    model_loss: float
    gen_loss: float
    server_loss: float
    per_client_gd: list[float] = field(default_factory=list)
    wall_sec: float = 0.0


@dataclass
class MetricsLog:
    method: str
    seed: int
    records: list[RoundRecord] = field(default_factory=list)
    aborted: str | None = None

    def final(self) -> RoundRecord:
        if not self.records:
            raise ValueError("no completed rounds")
        return self.records[-1]


# -- accuracies --------------------------------------------------------------


def accuracy(spec: ModelSpec, model: ClientModel, ds: Dataset,
             eval_batch: int = 512) -> float:
    """Fraction of correct argmax predictions over a dataset."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    with ag.no_grad():
        for start in range(0, len(ds), eval_batch):
            stop = min(start + eval_batch, len(ds))
            logits = model_forward(spec, model, Tensor(ds.images[start:stop]))
            correct += int((logits.data.argmax(axis=1)
                            == ds.labels[start:stop]).sum())
    return correct / len(ds)


def local_test_accuracy(spec: ModelSpec, models: list[ClientModel],
                        test: Dataset, shards: list[np.ndarray],
                        eval_batch: int = 512) -> float:
    """Mean over clients of each local model's accuracy on its own shard."""
    return float(np.mean([accuracy(spec, m, test.subset(shard), eval_batch)
                          for m, shard in zip(models, shards)]))


def global_test_accuracy(spec: ModelSpec, models: list[ClientModel],
                         weights: list[float], test: Dataset,
                         eval_batch: int = 512) -> float:
    """Accuracy of the sample-weighted average of all client models."""
    virtual = ClientModel(
        weighted_average([m.extractor for m in models], weights),
        weighted_average([m.classifier for m in models], weights))
    return accuracy(spec, virtual, test, eval_batch)


def gd_consistency_loss(spec: ModelSpec, model: ClientModel,
                        generator: GeneratorParams, probe_z: np.ndarray,
                        probe_y: np.ndarray) -> float:
    """Classification loss of the client's classifier on its generator's
    outputs, over a fixed probe batch (generator in eval mode)."""
    with ag.no_grad():
        out = generator_forward(spec, generator, Tensor(probe_z),
                                ag.one_hot(probe_y, spec.class_count),
                                train=False)
        logits = classifier_forward(spec, model.classifier, out)
        return ce_loss(logits, probe_y).item()


# -- PCA and the diversity visualization -------------------------------------


def pca_2d(points: np.ndarray, basis: np.ndarray | None = None):
    """Project rows onto the top-2 principal axes.

    Returns ``(scores, basis)`` where basis rows are the component vectors
    with a deterministic sign (first non-negligible entry positive). Pass
    a basis back in to project new points into the same plane.
    """
    pts = np.asarray(points, dtype=np.float64)
    centered = pts - pts.mean(axis=0, keepdims=True)
    if basis is None:
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        basis = vt[:2].copy()
        for j in range(basis.shape[0]):
            nz = np.flatnonzero(np.abs(basis[j]) > 1e-12)
            if nz.size and basis[j, nz[0]] < 0:
                basis[j] = -basis[j]
    return centered @ basis.T, basis


def within_class_spread(outputs: np.ndarray, labels: np.ndarray) -> float:
    """Mean pairwise distance inside each class, averaged over classes."""
    spreads = []
    for y in np.unique(labels):
        pts = outputs[labels == y]
        if len(pts) < 2:
            continue
        d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
        iu = np.triu_indices(len(pts), k=1)
        spreads.append(d[iu].mean())
    if not spreads:
        raise ValueError("no class with at least two samples")
    return float(np.mean(spreads))


@dataclass
class ToyVizResult:
    rows: list[tuple[str, int, float, float]]
    teacher_latents: np.ndarray
    generated: np.ndarray
    generated_labels: np.ndarray

    @property
    def generated_spread(self) -> float:
        return within_class_spread(self.generated, self.generated_labels)


def toy_divloss_pipeline(train: Dataset, test: Dataset, spec: ModelSpec,
                         variant: int | None, seed: int,
                         teacher_steps: int = 300, gen_steps: int = 400,
                         batch: int = 64, lr_teacher: float = 0.05,
                         lr_gen: float = 1e-3,
                         diversity_weight: float = 1.0) -> ToyVizResult:
    """Train a teacher, distill it into a generator with (or without) a
    diversity constraint, and project both output clouds to 2-D.

    The PCA plane is fitted on the teacher latents and reused for the
    generated points so the two clouds are directly comparable.
    """
    teacher = ClientModel(
        init_extractor(spec, RngStream("toyviz/init-extractor", seed)),
        init_classifier(spec, RngStream("toyviz/init-classifier", seed)))
    rng_t = RngStream("toyviz/teacher", seed)
    for _ in range(teacher_steps):
        idx = rng_t.choice(len(train), batch)
        logits = model_forward(spec, teacher, Tensor(train.images[idx]))
        loss = ce_loss(logits, train.labels[idx])
        teacher.extractor.zero_grad()
        teacher.classifier.zero_grad()
        loss.backward()
        sgd_step(teacher.extractor, teacher.extractor.grads(), lr_teacher)
        sgd_step(teacher.classifier, teacher.classifier.grads(), lr_teacher)

    generator = init_generator(spec, RngStream("toyviz/init-generator", seed))
    opt = AdamState()
    rng_g = RngStream("toyviz/generator", seed)
    lam6 = diversity_weight if variant is not None else 0.0
    for _ in range(gen_steps):
        idx = rng_g.choice(len(train), batch)
        x = Tensor(train.images[idx])
        y = train.labels[idx]
        z = Tensor(rng_g.normal((batch, spec.noise_dim)))
        l_mse, l_kl, l_ce, g_out = distill_to_generator_losses(
            spec, teacher, generator, x, y, z)
        l_div = (diversity_loss(variant, z, ag.one_hot(y, spec.class_count), g_out)
                 if variant is not None else None)
        total = generator_update_objective(l_kl, l_mse, l_ce, l_div,
                                           1.0, 1.0, lam6)
        generator.zero_grad()
        total.backward()
        adam_step(generator, generator.grads(), opt, lr_gen)

    with ag.no_grad():
        latents = extractor_forward(spec, teacher.extractor,
                                    Tensor(test.images)).data
        rng_s = RngStream("toyviz/sample", seed)
        gen_labels = rng_s.choice(spec.class_count, len(test))
        z = Tensor(rng_s.normal((len(test), spec.noise_dim)))
        generated = generator_forward(spec, generator, z,
                                      ag.one_hot(gen_labels, spec.class_count),
                                      train=False).data

    scores_t, basis = pca_2d(latents)
    centered_gen = generated - latents.mean(axis=0, keepdims=True)
    scores_g = centered_gen @ basis.T
    rows = [("teacher", int(y), float(p[0]), float(p[1]))
            for y, p in zip(test.labels, scores_t)]
    rows += [("generated", int(y), float(p[0]), float(p[1]))
             for y, p in zip(gen_labels, scores_g)]
    return ToyVizResult(rows, latents, generated, gen_labels)


# -- CSV persistence ----------------------------------------------------------

ABORT_MARKER = "aborted"


def metrics_header(n_clients: int) -> list[str]:
    return (["round", "local_acc", "global_acc", "gd_loss", "model_loss",
             "gen_loss", "server_loss"]
            + [f"gd_client{i}" for i in range(n_clients)])


def write_metrics_csv(path, log: MetricsLog) -> None:
    """Per-round metrics; wall-clock is deliberately excluded so repeated
    runs with the same config produce byte-identical files."""
    n_clients = len(log.records[0].per_client_gd) if log.records else 0
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator=CSV_EOL)
        writer.writerow(metrics_header(n_clients))
        for rec in log.records:
            writer.writerow([rec.round_idx, rec.local_acc, rec.global_acc,
                             rec.gd_loss, rec.model_loss, rec.gen_loss,
                             rec.server_loss] + list(rec.per_client_gd))
        if log.aborted is not None:
            writer.writerow([ABORT_MARKER, log.aborted])


def read_metrics_csv(path, method: str = "", seed: int = 0) -> MetricsLog:
    log = MetricsLog(method=method, seed=seed)
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        n_clients = sum(1 for h in header if h.startswith("gd_client"))
        for row in reader:
            if row and row[0] == ABORT_MARKER:
                log.aborted = row[1] if len(row) > 1 else ""
                continue
            vals = [float(v) for v in row[1:7]]
            log.records.append(RoundRecord(
                round_idx=int(row[0]), local_acc=vals[0], global_acc=vals[1],
                gd_loss=vals[2], model_loss=vals[3], gen_loss=vals[4],
                server_loss=vals[5],
                per_client_gd=[float(v) for v in row[7:7 + n_clients]]))
    return log


def write_rows_csv(path, header: list[str], rows: list) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator=CSV_EOL)
        writer.writerow(header)
        writer.writerows(rows)


def read_rows_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        return header, [row for row in reader]
