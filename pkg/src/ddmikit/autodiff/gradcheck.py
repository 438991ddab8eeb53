"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def numerical_grad(f, x: np.ndarray, eps: float = 1e-5, coords=None) -> np.ndarray:
    """Central differences of scalar ``f(Tensor)`` at ``x``; NaN where not evaluated."""
    x = np.array(x, dtype=np.float64)
    out = np.full(x.shape, np.nan)
    flat = x.reshape(-1)
    idxs = range(flat.size) if coords is None else coords
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Tensor(x.copy())).data)
        flat[i] = orig - eps
        fm = float(f(Tensor(x.copy())).data)
        flat[i] = orig
        out.reshape(-1)[i] = (fp - fm) / (2 * eps)
    return out


def grad_check(f, x, eps: float = 1e-5, max_coords=None, seed: int = 0) -> float:
    """Max over coordinates of |autodiff - central difference| / (|central difference| + 1e-8).

    ``f`` maps a float64 Tensor to a scalar Tensor. ``max_coords`` checks a random
    subset of coordinates when the input is large.
    """
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x.copy(), requires_grad=True)
    out = f(xt)
    out.backward()
    ad = xt.grad if xt.grad is not None else np.zeros_like(x)
    coords = None
    if max_coords is not None and x.size > max_coords:
        coords = np.random.default_rng(seed).choice(x.size, size=max_coords, replace=False)
    fd = numerical_grad(f, x, eps, coords)
    mask = ~np.isnan(fd)
    err = np.abs(ad[mask] - fd[mask]) / (np.abs(fd[mask]) + 1e-8)
    return float(err.max()) if err.size else 0.0


def grad_check_params(loss_fn, params: dict, eps: float = 1e-5, max_coords_per_param=None, seed: int = 0) -> dict:
    """Check d loss_fn() / d param for named float64 parameter Tensors, in place.

    Returns the max relative error per parameter name.
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    report = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        idxs = np.arange(n)
        if max_coords_per_param is not None and n > max_coords_per_param:
            idxs = rng.choice(n, size=max_coords_per_param, replace=False)
        worst = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(loss_fn().data)
            flat[i] = orig - eps
            fm = float(loss_fn().data)
            flat[i] = orig
            fd = (fp - fm) / (2 * eps)
            ad = analytic[name].reshape(-1)[i]
            worst = max(worst, abs(ad - fd) / (abs(fd) + 1e-8))
        report[name] = worst
    return report
