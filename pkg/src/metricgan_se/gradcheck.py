"""Central finite-difference checks for the autodiff engine.

Checks run in double precision.  Relative error per element is
``|analytic - numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)``; the floor
keeps near-zero gradients from dominating.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .autodiff import Tape, Tensor

FD_STEP = 1e-4
# Whole networks contain thousands of ReLU/LeakyReLU/abs kinks; a smaller
# step keeps both probes on the same linear piece far more often.
COMPOSITE_STEP = 1e-6
PRIMITIVE_RTOL = 1e-4
COMPOSITE_RTOL = 1e-3
GRAD_FLOOR = 1e-6


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = FD_STEP, max_entries: int | None = None,
                 rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(flat indices, central differences of ``f`` w.r.t. ``x`` at those indices).

    ``x`` is perturbed in place and restored.  With ``max_entries`` only a
    random subset of entries is probed.
    """
    idx = np.arange(x.size)
    if max_entries is not None and x.size > max_entries:
        idx = np.sort((rng or np.random.default_rng(0)).choice(x.size, max_entries, replace=False))
    out = np.empty(len(idx))
    for n, i in enumerate(idx):
        pos = np.unravel_index(i, x.shape)  # works for non-contiguous x too
        orig = x[pos]
        x[pos] = orig + h
        fp = f()
        x[pos] = orig - h
        fm = f()
        x[pos] = orig
        out[n] = (fp - fm) / (2 * h)
    return idx, out


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(loss_fn: Callable[[], Tensor], inputs: dict[str, Tensor], h: float = FD_STEP,
                    max_entries: int | None = None, seed: int = 0) -> dict[str, float]:
    """Max relative error per input between tape gradients and finite differences.

    ``loss_fn`` rebuilds the scalar loss from the current values of
    ``inputs`` (which must require grad and hold float64 data).
    """
    for name, t in inputs.items():
        if t.dtype != np.float64:
            raise TypeError(f"{name}: gradient checks need float64 data, got {t.dtype}")
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in inputs.items()}
    rng = np.random.default_rng(seed)
    errors = {}
    for name, t in inputs.items():
        idx, num = numeric_grad(lambda: loss_fn().item(), t.data, h, max_entries, rng)
        errors[name] = rel_error(analytic[name].reshape(-1)[idx], num)
    return errors
