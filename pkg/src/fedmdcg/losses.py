"""Differentiable training objectives for clients and server.

Client side: a model update that distills from the frozen global
generator at both the latent level (squared error) and the logit level
(KL), plus a classification term on generated samples; then a generator
update that distills the frozen local model into the local generator,
with a diversity penalty to keep its outputs spread out.

Server side: crossed distillation losses that train the averaged global
generator and classifier against every frozen client pair, weighting each
client by its per-class sample share.

All losses reduce with batch means. Teachers are frozen by construction,
so their parameters never receive gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import LabelCounter
from .models import (GeneratorParams, ClientModel, ModelSpec,
                     classifier_forward, extractor_forward, generator_forward)
from .params import ParamSet


@dataclass(frozen=True)
class HyperParams:
    """Loss-balancing coefficients and the ramp exponent for the first three."""

    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 1.0
    lambda5: float = 1.0
    lambda6: float = 1.0
    ramp_exponent: float = 1.0

    def __post_init__(self):
        values = (self.lambda1, self.lambda2, self.lambda3,
                  self.lambda4, self.lambda5, self.lambda6)
        if any(v < 0 for v in values):
            raise ValueError("loss coefficients must be non-negative")
        if self.ramp_exponent <= 0:
            raise ValueError("ramp exponent must be positive")


# -- elementary losses -----------------------------------------------------


def ce_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer labels, via log-sum-exp."""
    return -ag.gather_rows(ag.log_softmax(logits), labels).mean()


def soft_ce_loss(logits: Tensor, target_probs: Tensor) -> Tensor:
    """Mean cross-entropy against a row-stochastic soft target."""
    return -(target_probs * ag.log_softmax(logits)).sum(axis=1).mean()


def kl_rows(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    """Per-row KL(softmax(p) || softmax(q)), differentiable in both."""
    return ag.kl_div_rows(p_logits, q_logits)


def kl_loss(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    return kl_rows(p_logits, q_logits).mean()


def mse_latent(a: Tensor, b: Tensor) -> Tensor:
    """Mean over the batch of the squared Euclidean row distance."""
    d = a - b
    return (d * d).sum(axis=1).mean()


def _pairwise_l2(a: Tensor) -> Tensor:
    """All-pairs Euclidean distances via the Gram identity.

    Distances whose squared value falls below a tiny threshold (coincident
    rows, including the diagonal) are fixed at exactly zero with a zero
    gradient, which keeps the loss finite when outputs collapse.
    """
    n = a.shape[0]
    sq = (a * a).sum(axis=1, keepdims=True)
    d2 = ag.relu(sq + ag.reshape(sq, (1, n)) - 2.0 * ag.matmul(a, a.transpose()))
    mask = d2.data > 1e-12
    return ag.where(mask, ag.sqrt(ag.where(mask, d2, Tensor(np.float64(1.0)))),
                    Tensor(np.float64(0.0)))


def diversity_loss(variant: int, z: Tensor, y_onehot: Tensor, f: Tensor) -> Tensor:
    """Exponential penalty on weighted pairwise output distances.

    The exponent is -(1/B^2) * sum_jk ||f_j - f_k|| * W_jk with
    variant 0: W = ||z_j - z_k||, variant 1: W measured on [z; y], and
    variant 2: W = ||z_j - z_k|| * exp(L1(y_j, y_k)), which up-weights
    pairs from different classes. Values lie in (0, 1].
    """
    if variant not in (0, 1, 2):
        raise ValueError(f"unknown diversity variant {variant}")
    b = f.shape[0]
    if b < 1:
        raise ValueError("diversity loss needs a non-empty batch")
    dist_f = _pairwise_l2(f)
    if variant == 0:
        w = _pairwise_l2(z)
    elif variant == 1:
        w = _pairwise_l2(ag.concat([z, y_onehot], axis=1))
    else:
        n, c = y_onehot.shape
        ydiff = ag.reshape(y_onehot, (n, 1, c)) - ag.reshape(y_onehot, (1, n, c))
        l1 = ag.absolute(ydiff).sum(axis=-1)
        w = _pairwise_l2(z) * ag.exp(l1)
    exponent = -(dist_f * w).sum() * (1.0 / (b * b))
    return ag.exp(exponent)


# -- client model update (trains extractor + classifier) --------------------


def distill_from_global_losses(spec: ModelSpec, model: ClientModel,
                               global_gen: GeneratorParams, x: Tensor,
                               y: np.ndarray, z: Tensor,
                               detach_teacher: bool = False,
                               need_mse: bool = True, need_kl: bool = True):
    """Classification loss plus latent/logit distillation from the frozen
    global generator. Returns ``(l_ce, l_mse, l_kl)``; skipped terms are None.
    """
    feats = extractor_forward(spec, model.extractor, x)
    logits_real = classifier_forward(spec, model.classifier, feats)
    l_ce = ce_loss(logits_real, y)
    l_mse = l_kl = None
    if need_mse or need_kl:
        gen = global_gen.frozen()
        g_out = generator_forward(spec, gen, z, ag.one_hot(y, spec.class_count),
                                  train=False)
        if need_mse:
            l_mse = mse_latent(feats, g_out)
        if need_kl:
            logits_gen = classifier_forward(spec, model.classifier, g_out)
            if detach_teacher:
                logits_gen = logits_gen.detach()
            l_kl = kl_loss(logits_real, logits_gen)
    return l_ce, l_mse, l_kl


def generated_sample_ce(spec: ModelSpec, model: ClientModel,
                        global_gen: GeneratorParams, z2: Tensor,
                        yhat: np.ndarray) -> Tensor:
    """Classification loss on a resampled generated batch; the path skips
    the extractor, so only the classifier receives gradients."""
    gen = global_gen.frozen()
    g_out = generator_forward(spec, gen, z2, ag.one_hot(yhat, spec.class_count),
                              train=False)
    return ce_loss(classifier_forward(spec, model.classifier, g_out), yhat)


def model_update_objective(l_ce: Tensor, l_gen_ce, l_mse, l_kl,
                           lam1: float, lam2: float, lam3: float) -> Tensor:
    """Weighted sum for the local model update; None terms require a zero
    coefficient and contribute nothing."""
    total = l_ce
    for lam, term, name in ((lam1, l_gen_ce, "generated-ce"),
                            (lam2, l_mse, "latent-mse"),
                            (lam3, l_kl, "logit-kl")):
        if term is None:
            if lam != 0.0:
                raise ValueError(f"{name} term missing but coefficient is {lam}")
            continue
        total = total + lam * term
    return total


# -- client generator update (trains the local generator only) --------------


def distill_to_generator_losses(spec: ModelSpec, model: ClientModel,
                                gen: GeneratorParams, x: Tensor,
                                y: np.ndarray, z: Tensor,
                                need_mse: bool = True, need_ce: bool = True):
    """Latent/logit/classification losses teaching the local generator to
    mimic the frozen local model.

    Returns ``(l_mse, l_kl, l_ce, g_out)``; the generator output batch is
    exposed so the caller can feed it to the diversity penalty without a
    second forward pass.
    """
    frozen = ClientModel(model.extractor.frozen(), model.classifier.frozen())
    y1h = ag.one_hot(y, spec.class_count)
    g_out = generator_forward(spec, gen, z, y1h, train=True)
    logits_student = classifier_forward(spec, frozen.classifier, g_out)
    with ag.no_grad():
        feats_teacher = extractor_forward(spec, frozen.extractor, x)
        logits_teacher = classifier_forward(spec, frozen.classifier, feats_teacher)
    l_mse = mse_latent(g_out, feats_teacher) if need_mse else None
    l_kl = kl_loss(logits_student, logits_teacher)
    l_ce = ce_loss(logits_student, y) if need_ce else None
    return l_mse, l_kl, l_ce, g_out


def generator_update_objective(l_kl: Tensor, l_mse, l_ce, l_div,
                               lam4: float, lam5: float, lam6: float) -> Tensor:
    """Weighted sum for the local generator update; the logit-KL term has a
    fixed unit coefficient."""
    total = l_kl
    for lam, term, name in ((lam4, l_mse, "latent-mse"),
                            (lam5, l_ce, "generated-ce"),
                            (lam6, l_div, "diversity")):
        if term is None:
            if lam != 0.0:
                raise ValueError(f"{name} term missing but coefficient is {lam}")
            continue
        total = total + lam * term
    return total


# -- server crossed distillation (trains global generator + classifier) -----


def client_share_weights(counters: list[LabelCounter], yhat: np.ndarray) -> np.ndarray:
    """Per-sample client weights: client i's share of the sampled class.

    Shaped (N, B); every column sums to one. A sampled class with zero
    total count is an error (the label sampler excludes such classes).
    """
    counts = np.stack([c.counts for c in counters]).astype(np.float64)
    totals = counts.sum(axis=0)
    if (totals[yhat] == 0).any():
        raise ValueError("sampled a class with zero total count")
    return counts[:, yhat] / totals[yhat]


def server_distillation_losses(spec: ModelSpec, global_gen: GeneratorParams,
                               global_clf: ParamSet,
                               client_gens: list[GeneratorParams],
                               client_clfs: list[ParamSet],
                               counters: list[LabelCounter],
                               z: Tensor, yhat: np.ndarray):
    """The three crossed distillation terms over one sampled batch.

    Term 1 aligns global(generator+classifier) with each client pair;
    terms 2 and 3 cross the generators and classifiers so the global parts
    also fit the client parts directly. Client parameters are frozen;
    every generator runs in eval mode so that a server identical to its
    single client is an exact fixed point.
    """
    n = len(client_gens)
    if not (n == len(client_clfs) == len(counters)):
        raise ValueError("client lists must align")
    b = z.shape[0]
    tau = client_share_weights(counters, yhat)
    y1h = ag.one_hot(yhat, spec.class_count)
    g_out = generator_forward(spec, global_gen, z, y1h, train=False)

    # teacher outputs are constants: plain forward passes
    with ag.no_grad():
        gi_outs, teacher_logits = [], []
        for gen_i, clf_i in zip(client_gens, client_clfs):
            gi = generator_forward(spec, gen_i.frozen(), z, y1h, train=False)
            gi_outs.append(gi.data)
            teacher_logits.append(
                classifier_forward(spec, clf_i.frozen(), gi).data)

    # the trainee output gets its own batch-sized pass so that a server
    # whose parameters equal its single client's reproduces the teacher
    # computation bit for bit; the client-output block is batched
    logits_g = classifier_forward(spec, global_clf, g_out)
    stacked = ag.concat([Tensor(gi) for gi in gi_outs], axis=0)
    logits_ig_all = classifier_forward(spec, global_clf, stacked)

    l1 = l2 = l3 = Tensor(np.float64(0.0))
    for i, clf_i in enumerate(client_clfs):
        w_i = Tensor(tau[i])
        logits_i = Tensor(teacher_logits[i])
        l1 = l1 + (w_i * kl_rows(logits_g, logits_i)).mean()
        l2 = l2 + (w_i * kl_rows(logits_ig_all[i * b:(i + 1) * b],
                                 logits_i)).mean()
        logits_gi = classifier_forward(spec, clf_i.frozen(), g_out)
        l3 = l3 + (w_i * kl_rows(logits_gi, logits_i)).mean()
    return l1, l2, l3
