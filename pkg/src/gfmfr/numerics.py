"""Dense parameter containers, seeded initialization, Adam, and a
finite-difference gradient oracle.

Parameter sets are plain ``dict[str, np.ndarray]`` in insertion order;
every exported function is pure (inputs + explicit seed fully determine
the output) and works in float64.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict

import numpy as np

from .errors import NumericError

ParamSet = Dict[str, np.ndarray]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def xavier_init(rows: int, cols: int, seed: int) -> np.ndarray:
    """Uniform Xavier/Glorot matrix in [-sqrt(6/(rows+cols)), +sqrt(...)].

    Identical (rows, cols, seed) gives a bit-identical matrix.
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"matrix dimensions must be >= 1, got {rows}x{cols}")
    bound = np.sqrt(6.0 / (rows + cols))
    rng = np.random.default_rng(seed)
    return rng.uniform(-bound, bound, size=(rows, cols)).astype(np.float64)


@dataclass
class AdamState:
    """First/second moment estimates plus the shared step counter."""

    m: ParamSet
    v: ParamSet
    step: int = 0

    @classmethod
    def init(cls, params: ParamSet) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            step=0,
        )


def adam_step(
    params: ParamSet, grads: ParamSet, state: AdamState, lr: float
) -> tuple[ParamSet, AdamState]:
    """One bias-corrected Adam update; returns new params and new state."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if set(grads) != set(params):
        raise ValueError(
            f"gradient names {sorted(grads)} do not match parameter names {sorted(params)}"
        )
    t = state.step + 1
    new_params: ParamSet = {}
    new_m: ParamSet = {}
    new_v: ParamSet = {}
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter '{name}' shape {p.shape}"
            )
        m = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(m=new_m, v=new_v, step=t)


def finite_diff_grad(
    loss_fn: Callable[[ParamSet], float], params: ParamSet, eps: float = 1e-5
) -> ParamSet:
    """Central-difference gradient of a scalar loss over every coordinate.

    Used as the oracle against which all analytic gradients are checked.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    probe = {name: p.copy() for name, p in params.items()}
    grads: ParamSet = {}
    for name, p in probe.items():
        g = np.zeros_like(p)
        for i in range(p.size):
            orig = p.flat[i]
            p.flat[i] = orig + eps
            f_plus = loss_fn(probe)
            p.flat[i] = orig - eps
            f_minus = loss_fn(probe)
            p.flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(
                    f"non-finite loss while probing parameter '{name}' coordinate {i}"
                )
            g.flat[i] = (f_plus - f_minus) / (2.0 * eps)
        grads[name] = g
    return grads


def max_rel_error(analytic: ParamSet, numeric: ParamSet) -> float:
    """max over coordinates of |analytic - numeric| / max(1, |numeric|)."""
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        err = np.abs(a - n) / np.maximum(1.0, np.abs(n))
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
