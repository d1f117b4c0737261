"""AdamW with decoupled weight decay, plus a finite-difference checker."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .autodiff import ContractError, Parameter, Tensor, zero_grads


def adamw_step(
    params: Iterable[Parameter],
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 5e-3,
) -> None:
    """One decoupled-weight-decay Adam update on every parameter in place.

    value <- value - lr * m_hat / (sqrt(v_hat) + eps) - lr * weight_decay * value
    """
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p.name!r} has no gradient")
        g = p.grad
        p.t += 1
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * (g * g)
        m_hat = p.m / (1.0 - beta1**p.t)
        v_hat = p.v / (1.0 - beta2**p.t)
        p.data -= lr * (m_hat / (np.sqrt(v_hat) + eps)) + lr * weight_decay * p.data


def grad_check(
    fn: Callable[[], Tensor],
    params: Iterable[Parameter],
    eps: float = 1e-5,
) -> float:
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` must be deterministic and return a scalar Tensor built from
    ``params``. Returns the max over all parameter entries of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    params = list(params)
    zero_grads(params)
    out = fn()
    if not np.isfinite(out.data).all():
        raise ContractError("grad_check objective is non-finite")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            f_plus = fn().item()
            flat[i] = saved - eps
            f_minus = fn().item()
            flat[i] = saved
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise ContractError("grad_check objective is non-finite near a probe point")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(ana_flat[i] - numeric) / max(1.0, abs(ana_flat[i]), abs(numeric))
            if rel > worst:
                worst = rel
    return worst
