import math

import pytest
import torch


def finite_difference_grads(scalar_fn, params, eps=1e-5):
    """Central finite differences of scalar_fn() w.r.t. each tensor in params.

    scalar_fn must be deterministic and must read the current values of the
    tensors in params (float64 recommended). Independent oracle for autograd.
    """
    grads = []
    for p in params:
        g = torch.zeros_like(p)
        flat, gflat = p.data.view(-1), g.view(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + eps
            hi = float(scalar_fn().detach())
            flat[i] = orig - eps
            lo = float(scalar_fn().detach())
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads.append(g)
    return grads


def autograd_grads(scalar_fn, params):
    for p in params:
        p.grad = None
    value = scalar_fn()
    value.backward()
    return [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
            for p in params]


def relative_error(analytic, numeric):
    a = torch.cat([g.reshape(-1) for g in analytic])
    n = torch.cat([g.reshape(-1) for g in numeric])
    denom = max(float(a.norm()), float(n.norm()), 1e-12)
    return float((a - n).norm()) / denom


def check_gradients(scalar_fn, params, tol=1e-3, eps=1e-5):
    """Assert autograd matches central finite differences within tol."""
    numeric = finite_difference_grads(scalar_fn, params, eps=eps)
    analytic = autograd_grads(scalar_fn, params)
    err = relative_error(analytic, numeric)
    assert err < tol, f"gradient mismatch: relative error {err:.3e} >= {tol}"
    return err


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(0)
    yield
