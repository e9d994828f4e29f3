"""Central finite-difference gradient oracle.

Only forward evaluations are used here, so the oracle stays independent of
the backward rules it is checking.
"""
from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np

from .tensor import Tensor


def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-6,
                       indices: Optional[Iterable[tuple]] = None) -> np.ndarray:
    """d fn() / d param by central differences, perturbing ``param.data`` in place.

    With ``indices`` only those entries are estimated; the rest stay NaN.
    """
    grad = np.full(param.shape, np.nan) if indices is not None else np.zeros(param.shape)
    flat = param.data.reshape(-1)
    if indices is None:
        positions = range(flat.size)
    else:
        positions = [np.ravel_multi_index(ix, param.shape) for ix in indices]
    out = grad.reshape(-1)
    for i in positions:
        orig = flat[i]
        flat[i] = orig + eps
        plus = fn().item()
        flat[i] = orig - eps
        minus = fn().item()
        flat[i] = orig
        out[i] = (plus - minus) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)`` over the finite entries of ``numeric``.

    The floor keeps gradients that are zero in exact arithmetic (and round-off
    noise in both estimates) from reading as a 100% error.
    """
    mask = np.isfinite(numeric)
    a, n = np.asarray(analytic)[mask], numeric[mask]
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def check_gradients(fn: Callable[[], Tensor], params: dict, eps: float = 1e-6,
                    max_entries: Optional[int] = None, rng=None) -> dict:
    """Compare backward() against finite differences for every tensor in ``params``.

    Returns name -> relative error.  ``max_entries`` caps the number of
    probed scalars per tensor (a random subset is drawn from ``rng``).
    """
    for p in params.values():
        p.grad = None
    fn().backward()
    analytic = {name: (p.grad if p.grad is not None else np.zeros(p.shape)).copy()
                for name, p in params.items()}
    rng = rng if rng is not None else np.random.default_rng(0)
    errors = {}
    for name, p in params.items():
        indices = None
        if max_entries is not None and p.size > max_entries:
            flat = rng.choice(p.size, size=max_entries, replace=False)
            indices = [np.unravel_index(i, p.shape) for i in flat]
        numeric = numerical_gradient(fn, p, eps, indices)
        errors[name] = relative_error(analytic[name], numeric)
    return errors
