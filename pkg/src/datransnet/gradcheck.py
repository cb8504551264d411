"""Finite-difference gradient checking used by the test and acceptance suites."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor, freeze_kinks

# fourth-order central stencil: f'(x) ~ (f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h
_STENCIL = ((-2, 1.0), (-1, -8.0), (1, 8.0), (2, -1.0))


@dataclass
class GradReport:
    max_rel_err: float = 0.0
    checked: int = 0
    worst: Optional[tuple[str, tuple[int, ...], float, float]] = None
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def probe(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(out * weights)`` with an exactly rounded sum.

    Finite differences at small ``h`` divide rounding noise in the loss by
    ``h``; a plain pairwise sum over many terms is the dominant source of
    that noise, so the value is accumulated with ``math.fsum``.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != out.shape:
        raise DimensionError(f"probe: weights {weights.shape} vs output {out.shape}")
    value = math.fsum((out.data * weights).ravel())
    return T._result(np.array(value), (out,), lambda g: (g * weights,), "probe")


def rel_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    names: Optional[Sequence[str]] = None,
    h: float = 1e-3,
    tol: float = 1e-4,
    floor: float = 1e-8,
    indices: Optional[Iterable[tuple[int, int]]] = None,
) -> GradReport:
    """Compare reverse-mode gradients of ``loss_fn()`` with central differences.

    ``indices`` optionally restricts the check to (param index, flat index)
    pairs; otherwise every scalar of every parameter is perturbed. Branch
    choices of relu/max-pool are frozen at the unperturbed point.
    """
    names = list(names) if names is not None else [f"p{i}" for i in range(len(params))]
    report = GradReport()
    with freeze_kinks() as frz:
        for p in params:
            p.grad = None
        loss = loss_fn()
        loss.backward()
        frz.rewind()
        analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
        if indices is None:
            indices = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
        for pi, flat in indices:
            p = params[pi]
            view = p.data.reshape(-1)
            orig = view[flat]
            acc = 0.0
            for step, weight in _STENCIL:
                view[flat] = orig + step * h
                frz.rewind()
                acc += weight * loss_fn().item()
            view[flat] = orig
            numeric = acc / (12.0 * h)
            a = float(analytic[pi].reshape(-1)[flat])
            err = rel_error(a, numeric, floor)
            report.checked += 1
            where = (names[pi], np.unravel_index(flat, p.shape), a, numeric)
            if err > report.max_rel_err:
                report.max_rel_err = err
                report.worst = where
            if err >= tol:
                report.failures.append(where + (err,))
    return report
