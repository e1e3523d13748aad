import numpy as np
import pytest
import torch

torch.set_num_threads(1)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains desk-scale models (minutes)")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_difference(f, params, eps=1e-6):
    """Gradient of scalar ``f()`` w.r.t. each tensor in ``params`` by central differences.

    Perturbs the tensors in place under no_grad and restores them.
    """
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = float(f())
                flat[i] = old - eps
                down = float(f())
                flat[i] = old
                gflat[i] = (up - down) / (2 * eps)
            grads.append(g)
    return grads


def rel_err(a, b):
    a, b = torch.as_tensor(a, dtype=torch.float64), torch.as_tensor(b, dtype=torch.float64)
    return float((a - b).norm() / max(a.norm(), b.norm(), 1e-12))
