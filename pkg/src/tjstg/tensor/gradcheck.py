"""Central finite-difference oracle for tape gradients."""

from __future__ import annotations

from typing import Callable, Dict, Mapping

import numpy as np

from .core import Tape, Tensor, backward


class NonDeterministicError(RuntimeError):
    """The function under test returned different values for identical inputs."""


def relative_error(a, n) -> np.ndarray:
    a, n = np.asarray(a), np.asarray(n)
    return np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))


def numeric_gradient(f: Callable[[], Tensor], p: Tensor, eps: float = 1e-5) -> np.ndarray:
    """(f(θ+ε) − f(θ−ε)) / 2ε for each coordinate of ``p``, perturbed in place."""
    g = np.zeros_like(p.data)
    flat = p.data.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f().item()
        flat[i] = orig - eps
        lo = f().item()
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * eps)
    return g


def grad_check_report(
    f: Callable[[], Tensor], params: Mapping[str, Tensor], eps: float = 1e-5
) -> Dict[str, float]:
    """Max relative error per named parameter, analytic vs central differences.

    ``f`` takes no arguments and must read the tensors in ``params``, which
    are perturbed in place and restored.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    v0, v1 = f().item(), f().item()
    if v0 != v1:
        raise NonDeterministicError(f"f is not deterministic ({v0!r} != {v1!r})")
    with Tape() as tape:
        loss = f()
    analytic = backward(tape, loss, params)
    report = {}
    for name, p in params.items():
        num = numeric_gradient(f, p, eps)
        err = relative_error(analytic[name], num)
        report[name] = float(err.max()) if err.size else 0.0
    return report


def grad_check(f: Callable[[], Tensor], params: Mapping[str, Tensor], eps: float = 1e-5) -> float:
    """Largest relative error over every coordinate of every parameter."""
    report = grad_check_report(f, params, eps)
    return max(report.values()) if report else 0.0


def grad_check_losses(
    f: Callable[[], Mapping[str, Tensor]], params: Mapping[str, Tensor], eps: float = 1e-5
) -> Dict[str, Dict[str, float]]:
    """Like :func:`grad_check_report` for several scalar losses from one function.

    ``f`` returns a mapping of loss name to scalar tensor; each perturbation
    runs ``f`` once and scores every loss. Returns ``{loss: {param: err}}``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    first = {k: v.item() for k, v in f().items()}
    again = {k: v.item() for k, v in f().items()}
    if first != again:
        raise NonDeterministicError("f is not deterministic")
    analytic = {}
    for key in first:
        with Tape() as tape:
            loss = f()[key]
        analytic[key] = backward(tape, loss, params)
    report: Dict[str, Dict[str, float]] = {k: {} for k in first}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        num = {k: np.zeros(flat.size) for k in first}
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = {k: v.item() for k, v in f().items()}
            flat[i] = orig - eps
            lo = {k: v.item() for k, v in f().items()}
            flat[i] = orig
            for k in first:
                num[k][i] = (hi[k] - lo[k]) / (2.0 * eps)
        for k in first:
            err = relative_error(analytic[k][name].reshape(-1), num[k])
            report[k][name] = float(err.max()) if err.size else 0.0
    return report
