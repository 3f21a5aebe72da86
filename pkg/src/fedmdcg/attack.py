"""Gradient-inversion auditing: reconstruct a secret batch from the
gradients an honest-but-curious server observes on shared parameters.

The attacker sees a single-batch cross-entropy gradient of the shared
subset (all layers, extractor only, or classifier only depending on the
method), initializes a dummy input uniformly in the pixel bounds plus a
soft label, and runs Adam on the squared distance between dummy-induced
and observed gradients, clamping the dummy input each step. Quality is
scored with PSNR against the true batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .losses import ce_loss, soft_ce_loss
from .models import (ClientModel, ModelSpec, init_classifier, init_extractor,
                     model_forward)
from .optim import AdamState, adam_step
from .params import ParamSet
from .rng import RngStream

PSNR_CAP_DB = 100.0

ATTACK_TARGETS = ("all", "extractor", "classifier")

# which parameter subset each method exposes to the server
METHOD_TARGETS = {
    "fedavg": "all",
    "fedper": "extractor",
    "lgfedavg": "classifier",
    "fedmdcg": "classifier",
}


def psnr(original: np.ndarray, reconstructed: np.ndarray,
         max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 for exact matches."""
    a = np.asarray(original, dtype=np.float64)
    b = np.asarray(reconstructed, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(max_value * max_value / mse))


@dataclass(frozen=True)
class AttackConfig:
    steps: int = 300
    lr: float = 0.1
    bounds: tuple[float, float] = (0.0, 1.0)
    target: str = "classifier"
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("attack needs at least one step")
        if self.target not in ATTACK_TARGETS:
            raise ValueError(f"target must be one of {ATTACK_TARGETS}")


@dataclass
class AttackResult:
    x_rec: np.ndarray
    y_logits: np.ndarray
    psnr_db: float
    match_loss: float
    history: list[float] = field(default_factory=list)
    diverged: bool = False


def _target_tensors(model: ClientModel, target: str) -> tuple[ClientModel, list[Tensor]]:
    """Model view with only the shared subset trainable, plus that subset's
    tensors in deterministic order."""
    use_ext = target in ("all", "extractor")
    use_clf = target in ("all", "classifier")
    ext = model.extractor.copy().requires_grad_(use_ext)
    clf = model.classifier.copy().requires_grad_(use_clf)
    view = ClientModel(ext, clf)
    tensors: list[Tensor] = []
    if use_ext:
        tensors += [ext[k] for k in ext.keys()]
    if use_clf:
        tensors += [clf[k] for k in clf.keys()]
    return view, tensors


def attacker_model(spec: ModelSpec, model: ClientModel, target: str,
                   seed: int) -> tuple[ClientModel, list[Tensor]]:
    """What the server-side attacker can instantiate: true parameters for
    the shared subset, a fresh random surrogate for the private rest
    (architecture is public, private weights are not)."""
    use_ext = target in ("all", "extractor")
    use_clf = target in ("all", "classifier")
    ext = (model.extractor.copy() if use_ext
           else init_extractor(spec, RngStream("attack/surrogate-extractor", seed)))
    clf = (model.classifier.copy() if use_clf
           else init_classifier(spec, RngStream("attack/surrogate-classifier", seed)))
    ext.requires_grad_(use_ext)
    clf.requires_grad_(use_clf)
    view = ClientModel(ext, clf)
    tensors: list[Tensor] = []
    if use_ext:
        tensors += [ext[k] for k in ext.keys()]
    if use_clf:
        tensors += [clf[k] for k in clf.keys()]
    return view, tensors


def observed_gradients(spec: ModelSpec, model: ClientModel,
                       secret_x: np.ndarray, secret_y: np.ndarray,
                       target: str) -> list[np.ndarray]:
    """The single-batch cross-entropy gradients the server would see."""
    view, tensors = _target_tensors(model, target)
    loss = ce_loss(model_forward(spec, view, Tensor(secret_x)), secret_y)
    grads = loss.grad_of(tensors)
    return [g.data.copy() for g in grads]


def gradient_matching_attack(forward_fn: Callable[[Tensor], Tensor],
                             targets: list[Tensor],
                             observed: list[np.ndarray],
                             x_shape: tuple, n_classes: int,
                             cfg: AttackConfig,
                             true_labels: np.ndarray | None = None) -> AttackResult:
    """Core optimization: fit a dummy batch (and soft labels unless true
    labels are supplied) so its gradients match the observed ones."""
    rng = RngStream(f"attack/{cfg.target}", cfg.seed)
    lo, hi = cfg.bounds
    dummy_x = Tensor(rng.uniform(lo, hi, x_shape), requires_grad=True)
    dummy_y = Tensor(np.zeros((x_shape[0], n_classes)),
                     requires_grad=true_labels is None)
    opt_params = ParamSet({"x": dummy_x} if true_labels is not None
                          else {"x": dummy_x, "y": dummy_y})
    opt_state = AdamState()
    obs = [Tensor(g) for g in observed]

    best = AttackResult(dummy_x.data.copy(), dummy_y.data.copy(),
                        0.0, np.inf)
    for _ in range(cfg.steps):
        logits = forward_fn(dummy_x)
        if true_labels is not None:
            loss = ce_loss(logits, true_labels)
        else:
            loss = soft_ce_loss(logits, ag.softmax(dummy_y))
        grads = loss.grad_of(targets, create_graph=True)
        match = Tensor(np.float64(0.0))
        for g, o in zip(grads, obs):
            d = g - o
            match = match + (d * d).sum()
        value = match.item()
        if not np.isfinite(value):
            best.diverged = True
            break
        best.history.append(value)
        if value < best.match_loss:
            best.match_loss = value
            best.x_rec = dummy_x.data.copy()
            best.y_logits = dummy_y.data.copy()
        opt_params.zero_grad()
        match.backward()
        adam_step(opt_params, opt_params.grads(), opt_state, cfg.lr)
        np.clip(dummy_x.data, lo, hi, out=dummy_x.data)
    return best


def dlg_attack(spec: ModelSpec, model: ClientModel, secret_x: np.ndarray,
               secret_y: np.ndarray, cfg: AttackConfig,
               known_label: bool = False) -> AttackResult:
    """Run the gradient-matching attack against a client model and score
    the reconstruction with PSNR against the true batch.

    The observed gradients come from the victim's true model; the attacker
    reproduces them with the shared parameters plus a random surrogate for
    any private component.
    """
    observed = observed_gradients(spec, model, secret_x, secret_y, cfg.target)
    view, tensors = attacker_model(spec, model, cfg.target, cfg.seed)
    result = gradient_matching_attack(
        lambda x: model_forward(spec, view, x), tensors, observed,
        secret_x.shape, spec.class_count, cfg,
        true_labels=secret_y if known_label else None)
    result.psnr_db = psnr(secret_x, result.x_rec, max_value=cfg.bounds[1])
    return result


def linear_layer_recovery(weight_grad: np.ndarray) -> np.ndarray:
    """Closed-form input recovery for a single linear layer under
    cross-entropy: every gradient row is a multiple of the input, so the
    largest-norm row gives the input direction up to scale."""
    norms = np.linalg.norm(weight_grad, axis=1)
    row = weight_grad[int(np.argmax(norms))]
    norm = np.linalg.norm(row)
    if norm == 0:
        raise ValueError("all gradient rows are zero")
    return row / norm


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = a.reshape(-1)
    b = b.reshape(-1)
    return float(abs(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b)))
