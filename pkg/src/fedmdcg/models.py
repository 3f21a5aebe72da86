"""Model architectures: feature extractor, classifier, conditional generator.

Each model is a ParamSet plus a pure forward function. The extractor maps
images to a latent vector, the classifier maps latents to class logits,
and the generator maps (noise, one-hot label) to a pseudo latent. The
generator ends in ReLU so its support matches the non-negative latents
produced by the ReLU/pool extractor.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .params import ParamSet
from .rng import RngStream

BACKBONES = ("lenet5", "mlp")
MLP_HIDDEN = 256
MLP_LATENT = 128
CLASSIFIER_HIDDEN = (120, 84)


@dataclass(frozen=True)
class ModelSpec:
    """Shapes shared by every client: backbone, input, classes, generator."""

    backbone: str
    input_shape: tuple[int, int, int]
    class_count: int
    noise_dim: int = 128
    generator_hidden: int = 256

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.noise_dim <= 0 or self.generator_hidden <= 0:
            raise ValueError("noise_dim and generator_hidden must be positive")
        if self.backbone == "lenet5":
            _, h, w = self.input_shape
            if (h - 4) // 2 < 5 or (w - 4) // 2 < 5:
                raise ValueError(f"input {h}x{w} too small for lenet5")

    @property
    def latent_dim(self) -> int:
        if self.backbone == "mlp":
            return MLP_LATENT
        _, h, w = self.input_shape
        h2 = ((h - 4) // 2 - 4) // 2
        w2 = ((w - 4) // 2 - 4) // 2
        return 16 * h2 * w2


@dataclass
class ClientModel:
    """One client's decoupled model: extractor params and classifier params."""

    extractor: ParamSet
    classifier: ParamSet


# The conditional generator is carried as a plain ParamSet; its state map
# holds the batch-norm running statistics alongside the trainable tensors.
GeneratorParams = ParamSet


def _uniform_weight(stream: RngStream, shape: tuple, fan_in: int) -> Tensor:
    # He-uniform: keeps activation scale roughly constant through ReLU
    # stacks, so training starts without a dead plateau
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(stream.uniform(-bound, bound, shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_extractor(spec: ModelSpec, stream: RngStream) -> ParamSet:
    c, h, w = spec.input_shape
    if spec.backbone == "lenet5":
        return ParamSet({
            "conv1.weight": _uniform_weight(stream, (6, c, 5, 5), c * 25),
            "conv1.bias": _zeros(6),
            "conv2.weight": _uniform_weight(stream, (16, 6, 5, 5), 6 * 25),
            "conv2.bias": _zeros(16),
        })
    flat = c * h * w
    return ParamSet({
        "fc1.weight": _uniform_weight(stream, (MLP_HIDDEN, flat), flat),
        "fc1.bias": _zeros(MLP_HIDDEN),
        "fc2.weight": _uniform_weight(stream, (MLP_LATENT, MLP_HIDDEN), MLP_HIDDEN),
        "fc2.bias": _zeros(MLP_LATENT),
    })


def init_classifier(spec: ModelSpec, stream: RngStream) -> ParamSet:
    p = spec.latent_dim
    h1, h2 = CLASSIFIER_HIDDEN
    return ParamSet({
        "fc1.weight": _uniform_weight(stream, (h1, p), p),
        "fc1.bias": _zeros(h1),
        "fc2.weight": _uniform_weight(stream, (h2, h1), h1),
        "fc2.bias": _zeros(h2),
        "fc3.weight": _uniform_weight(stream, (spec.class_count, h2), h2),
        "fc3.bias": _zeros(spec.class_count),
    })


def init_generator(spec: ModelSpec, stream: RngStream) -> GeneratorParams:
    d_in = spec.noise_dim + spec.class_count
    h = spec.generator_hidden
    p = spec.latent_dim
    params = {
        "fc1.weight": _uniform_weight(stream, (h, d_in), d_in),
        "fc1.bias": _zeros(h),
        "fc2.weight": _uniform_weight(stream, (h, h), h),
        "fc2.bias": _zeros(h),
        "fc3.weight": _uniform_weight(stream, (p, h), h),
        "fc3.bias": _zeros(p),
        "bn1.gamma": Tensor(np.ones((1, h)), requires_grad=True),
        "bn1.beta": Tensor(np.zeros((1, h)), requires_grad=True),
        "bn2.gamma": Tensor(np.ones((1, h)), requires_grad=True),
        "bn2.beta": Tensor(np.zeros((1, h)), requires_grad=True),
    }
    state = {
        "bn1.running_mean": np.zeros(h),
        "bn1.running_var": np.ones(h),
        "bn2.running_mean": np.zeros(h),
        "bn2.running_var": np.ones(h),
    }
    return ParamSet(params, state)


def extractor_forward(spec: ModelSpec, ps: ParamSet, x: Tensor) -> Tensor:
    """Map a (B, C, H, W) batch to (B, latent_dim) features."""
    if x.shape[1:] != tuple(spec.input_shape):
        raise ValueError(f"input shape {x.shape[1:]} != spec {spec.input_shape}")
    b = x.shape[0]
    if spec.backbone == "lenet5":
        h = ag.maxpool2(ag.relu(ag.conv2d(x, ps["conv1.weight"], ps["conv1.bias"])))
        h = ag.maxpool2(ag.relu(ag.conv2d(h, ps["conv2.weight"], ps["conv2.bias"])))
        return ag.reshape(h, (b, spec.latent_dim))
    h = ag.reshape(x, (b, -1))
    h = ag.relu(ag.linear(h, ps["fc1.weight"], ps["fc1.bias"]))
    return ag.relu(ag.linear(h, ps["fc2.weight"], ps["fc2.bias"]))


def classifier_forward(spec: ModelSpec, ps: ParamSet, f: Tensor) -> Tensor:
    """Map (B, latent_dim) features to raw (B, class_count) logits."""
    h = ag.relu(ag.linear(f, ps["fc1.weight"], ps["fc1.bias"]))
    h = ag.relu(ag.linear(h, ps["fc2.weight"], ps["fc2.bias"]))
    return ag.linear(h, ps["fc3.weight"], ps["fc3.bias"])


def model_forward(spec: ModelSpec, model: ClientModel, x: Tensor) -> Tensor:
    return classifier_forward(spec, model.classifier,
                              extractor_forward(spec, model.extractor, x))


def generator_forward(spec: ModelSpec, ps: GeneratorParams, z: Tensor,
                      y_onehot: Tensor, train: bool) -> Tensor:
    """Map (noise, one-hot label) to a non-negative (B, latent_dim) output.

    Training mode normalizes with batch statistics and advances the
    running statistics stored in ``ps.state``; eval mode reads them.
    """
    h = ag.concat([z, y_onehot], axis=1)
    for i in (1, 2):
        h = ag.linear(h, ps[f"fc{i}.weight"], ps[f"fc{i}.bias"])
        h, rm, rv = ag.batchnorm1d(
            h, ps[f"bn{i}.gamma"], ps[f"bn{i}.beta"],
            ps.state[f"bn{i}.running_mean"], ps.state[f"bn{i}.running_var"],
            training=train)
        if train:
            ps.state[f"bn{i}.running_mean"] = rm
            ps.state[f"bn{i}.running_var"] = rv
        h = ag.relu(h)
    return ag.relu(ag.linear(h, ps["fc3.weight"], ps["fc3.bias"]))


# -- parameter blob format -------------------------------------------------

_MAGIC = b"PSET"
_VERSION = 1


def serialize_params(ps: ParamSet) -> bytes:
    """Pack a ParamSet into a versioned little-endian binary blob."""
    chunks = [_MAGIC, struct.pack("<BII", _VERSION, len(ps.params), len(ps.state))]
    entries = [(0, k, ps.params[k].data) for k in ps.keys()]
    entries += [(1, k, ps.state[k]) for k in ps.state_keys()]
    for kind, name, arr in entries:
        name_b = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        chunks.append(struct.pack("<BH", kind, len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    return b"".join(chunks)


class BlobError(ValueError):
    """Corrupt or incompatible parameter blob."""


def deserialize_params(blob: bytes, like: ParamSet | None = None) -> ParamSet:
    """Unpack a parameter blob; validates against ``like`` when given."""
    view = memoryview(blob)

    def take(n: int) -> memoryview:
        nonlocal view
        if len(view) < n:
            raise BlobError("truncated parameter blob")
        head, view = view[:n], view[n:]
        return head

    if bytes(take(4)) != _MAGIC:
        raise BlobError("bad parameter blob magic")
    version, n_params, n_state = struct.unpack("<BII", take(9))
    if version != _VERSION:
        raise BlobError(f"unsupported blob version {version}")
    params, state = {}, {}
    for _ in range(n_params + n_state):
        kind, name_len = struct.unpack("<BH", take(3))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim)) if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).copy()
        if kind == 0:
            params[name] = Tensor(arr, requires_grad=True)
        else:
            state[name] = arr
    if len(view):
        raise BlobError("trailing bytes after parameter blob")
    out = ParamSet(params, state)
    if like is not None:
        if out.keys() != like.keys() or out.state_keys() != like.state_keys():
            raise BlobError("parameter blob names do not match expected set")
        for k in like.keys():
            if out[k].data.shape != like[k].data.shape:
                raise BlobError(f"shape mismatch for {k!r}")
        for k in like.state_keys():
            if out.state[k].shape != like.state[k].shape:
                raise BlobError(f"state shape mismatch for {k!r}")
    return out
