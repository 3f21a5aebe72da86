import numpy as np
import pytest

from fedmdcg import autograd as ag
from fedmdcg.models import ModelSpec, ClientModel, init_classifier, init_extractor, init_generator
from fedmdcg.rng import RngStream


def fd_gradient(f, tensor, coords, h=1e-5):
    """Central finite differences of scalar f() at selected flat coords."""
    flat = tensor.data.reshape(-1)
    out = {}
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = f().item()
        flat[i] = orig - h
        fm = f().item()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out


def check_gradients(f, tensors, coords_per_tensor=6, h=1e-5, tol=1e-4, seed=0):
    """Compare analytic gradients of scalar f() against central differences
    on a deterministic sample of coordinates. Returns worst relative error."""
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.zero_grad()
    f().backward()
    worst = 0.0
    for t in tensors:
        assert t.grad is not None, "missing gradient on checked tensor"
        g = t.grad.data.reshape(-1)
        n = t.data.size
        coords = (range(n) if n <= coords_per_tensor
                  else rng.choice(n, coords_per_tensor, replace=False))
        numeric = fd_gradient(f, t, coords, h)
        for i, num in numeric.items():
            err = abs(g[i] - num) / max(1.0, abs(num))
            assert err < tol, f"rel err {err:.3e} at coord {i}"
            worst = max(worst, err)
    return worst


@pytest.fixture
def tiny_spec():
    """Small model family for fast loss/gradient tests."""
    return ModelSpec("mlp", (1, 1, 5), 3, noise_dim=4, generator_hidden=8)


def make_client(spec, seed=0):
    return ClientModel(init_extractor(spec, RngStream("test/ext", seed)),
                       init_classifier(spec, RngStream("test/clf", seed)))


def make_generator(spec, seed=0):
    return init_generator(spec, RngStream("test/gen", seed))


def random_batch(spec, b, seed=0):
    rng = np.random.default_rng(seed)
    x = ag.Tensor(rng.random((b, *spec.input_shape)))
    y = rng.integers(0, spec.class_count, b)
    z = ag.Tensor(rng.standard_normal((b, spec.noise_dim)))
    return x, y, z
