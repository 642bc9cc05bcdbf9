"""
Dense numerical primitives.

This module holds the small set of float64 building blocks shared by the
encoders, losses and training loops: L2 normalisation (with its backward
pass), cosine similarity, a max-shifted log-sum-exp, a functional Adam step
and a central-difference gradient oracle.
"""

import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from .errors import DegenerateInputError, NumericError, ShapeError

# Row-major float64 array; vectors are 1-D, batches are stacked along axis 0.
RealMatrix = np.ndarray

DEFAULT_GRAD_STEP = 1e-5


def as_float_array(values, name: str = "input") -> np.ndarray:
    """Return *values* as a float64 array, rejecting non-finite entries."""
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite entries")
    return arr


def l2_normalize(v) -> np.ndarray:
    """Scale a vector to unit L2 norm."""
    v = as_float_array(v, "vector")
    if v.ndim != 1 or v.size == 0:
        raise ShapeError(f"expected a non-empty vector, got shape {v.shape}")
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise DegenerateInputError("cannot normalise the zero vector")
    return v / norm


def l2_normalize_rows(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Normalise each row of a 2-D array. Returns (normalised rows, row norms)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D array, got shape {x.shape}")
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateInputError(f"cannot normalise zero rows: {np.flatnonzero(norms == 0.0).tolist()}")
    return x / norms[:, None], norms


def normalize_backward(unit: np.ndarray, norms: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Backward pass of row normalisation.

    With e = y / |y|, dL/dy = (g - e (e . g)) / |y| for every row.
    """
    radial = np.sum(unit * grad, axis=1, keepdims=True)
    return (grad - unit * radial) / norms[:, None]


def cosine_similarity(a, b) -> float:
    a = as_float_array(a, "a")
    b = as_float_array(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch: {a.shape} vs {b.shape}")
    value = float(np.dot(l2_normalize(a), l2_normalize(b)))
    return min(1.0, max(-1.0, value))


def cosine_matrix(x: np.ndarray, y: Optional[np.ndarray] = None) -> np.ndarray:
    """Pairwise cosine similarities between the rows of x and the rows of y."""
    xn, _ = l2_normalize_rows(x)
    yn = xn if y is None else l2_normalize_rows(y)[0]
    if xn.shape[1] != yn.shape[1]:
        raise ShapeError(f"dimension mismatch: {xn.shape[1]} vs {yn.shape[1]}")
    return np.clip(xn @ yn.T, -1.0, 1.0)


def logsumexp(x: np.ndarray, mask: Optional[np.ndarray] = None, axis: int = -1) -> np.ndarray:
    """Max-shifted log-sum-exp over *axis*, optionally restricted to mask == True."""
    if mask is None:
        mask = np.ones_like(x, dtype=bool)
    shifted_src = np.where(mask, x, -np.inf)
    peak = np.max(shifted_src, axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    total = np.sum(np.where(mask, np.exp(shifted_src - peak), 0.0), axis=axis, keepdims=True)
    return np.squeeze(peak + np.log(total), axis=axis)


def masked_softmax(x: np.ndarray, mask: np.ndarray, axis: int = -1) -> np.ndarray:
    lse = logsumexp(x, mask, axis=axis)
    src = np.where(mask, x, -np.inf)
    return np.exp(src - np.expand_dims(lse, axis))


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 0.0002
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def init_adam(shape, lr: float = 0.0002, beta1: float = 0.9, beta2: float = 0.999,
              epsilon: float = 1e-8) -> AdamState:
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    return AdamState(m=np.zeros(shape), v=np.zeros(shape), step=0, lr=lr,
                     beta1=beta1, beta2=beta2, epsilon=epsilon)


def adam_step(params: RealMatrix, grads: RealMatrix, state: AdamState) -> Tuple[RealMatrix, AdamState]:
    """One bias-corrected Adam update. Inputs are not mutated."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ShapeError(
            f"adam shapes differ: params {params.shape}, grads {grads.shape}, state {state.m.shape}"
        )
    if not np.all(np.isfinite(grads)):
        raise NumericError("non-finite gradient passed to adam_step")

    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * (grads * grads)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    updated = params - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return updated, replace(state, m=m, v=v, step=t)


class ParamOptimizer:
    """Adam over a named collection of parameter blocks.

    Holds one AdamState per block; the training loops own an instance
    exclusively for the duration of a stage.
    """

    def __init__(self, params: Dict[str, np.ndarray], lr: float):
        self.states = {name: init_adam(p.shape, lr=lr) for name, p in params.items()}

    def update(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        new_params = {}
        for name, value in params.items():
            new_params[name], self.states[name] = adam_step(value, grads[name], self.states[name])
        return new_params

    @property
    def step(self) -> int:
        return max((s.step for s in self.states.values()), default=0)


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> Dict[str, np.ndarray]:
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    logging.debug(f"Clipping gradients: global norm {total:.4g} -> {max_norm:.4g}")
    return {name: g * scale for name, g in grads.items()}


def check_gradient(func: Callable[[np.ndarray], float], analytic, point,
                   h: float = DEFAULT_GRAD_STEP) -> float:
    """Compare an analytic gradient against central differences.

    Returns max_k |analytic_k - numeric_k| / max(1, |numeric_k|).
    """
    x = np.array(point, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x.shape:
        raise ShapeError(f"analytic gradient shape {analytic.shape} != point shape {x.shape}")

    worst = 0.0
    flat = x.reshape(-1)
    for k in range(flat.size):
        original = flat[k]
        flat[k] = original + h
        f_plus = float(func(x))
        flat[k] = original - h
        f_minus = float(func(x))
        flat[k] = original
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"function is not finite around coordinate {k}")
        numeric = (f_plus - f_minus) / (2.0 * h)
        err = abs(analytic.reshape(-1)[k] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
