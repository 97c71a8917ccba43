"""Parameter-update rules: Adam, Muon, and Polyak target averaging.

Muon performs steepest descent under the spectral norm: the momentum-
averaged gradient of every weight matrix is replaced by its orthogonal
factor (approximated with a Newton-Schulz iteration) before the update.
Bias vectors and other 1-D parameters fall back to momentum SGD.

All steps are pure: they take an `OptState` and return a new one, never
mutating their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import NumericError, ShapeError
from .numkit import ParamVector

# Odd quintic x -> (15x - 10x^3 + 3x^5)/8 used inside Newton-Schulz.
# It maps [0, 1] into itself, fixes 1 with two vanishing derivatives
# (so orthogonal inputs are genuine fixed points of the iteration), and
# still expands small singular values by ~1.875x per sweep.
NS_COEF_A = 15.0 / 8.0
NS_COEF_B = -10.0 / 8.0
NS_COEF_C = 3.0 / 8.0
NS_DEFAULT_ITERATIONS = 5

MUON_DEFAULT_MOMENTUM = 0.95


@dataclass(frozen=True)
class OptState:
    """State of one optimizer bound to one flat parameter vector."""

    kind: str
    learning_rate: float
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = MUON_DEFAULT_MOMENTUM
    ns_iterations: int = NS_DEFAULT_ITERATIONS
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("adam", "muon"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")


def init_opt_state(kind: str, n_params: int, learning_rate: float, **kwargs) -> OptState:
    """Fresh optimizer state with zeroed moment buffers."""
    m = np.zeros(n_params)
    v = np.zeros(n_params) if kind == "adam" else None
    return OptState(kind=kind, learning_rate=learning_rate, m=m, v=v, **kwargs)


def _check_grad(params: ParamVector, grad: ParamVector):
    if grad.values.size != params.values.size:
        raise ShapeError("gradient length does not match parameter length")
    if not np.all(np.isfinite(grad.values)):
        raise NumericError("non-finite gradient")


def adam_step(state: OptState, params: ParamVector, grad: ParamVector):
    """One bias-corrected Adam update."""
    if state.kind != "adam":
        raise ValueError(f"adam_step called with kind={state.kind!r}")
    _check_grad(params, grad)
    g = grad.values
    t = state.step_count + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_values = params.values - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    new_params = ParamVector(params.spec, new_values)
    return new_params, replace(state, step_count=t, m=m, v=v)


def newton_schulz_orthogonalize(g: np.ndarray, iterations: int = NS_DEFAULT_ITERATIONS) -> np.ndarray:
    """Approximate the orthogonal polar factor of a matrix.

    The input is scaled to unit Frobenius norm (so every singular value
    lands in (0, 1]) and then run through `iterations` sweeps of the
    quintic iteration X <- aX + b(XX^T)X + c(XX^T)^2 X.  Wide matrices
    are transposed first and transposed back at the end.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {g.shape}")
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite matrix entries")
    norm = np.linalg.norm(g)
    if norm == 0.0:
        raise ValueError("cannot orthogonalize a zero matrix")
    transposed = g.shape[0] < g.shape[1]
    x = (g.T if transposed else g) / norm
    for _ in range(iterations):
        a = x @ x.T
        x = NS_COEF_A * x + NS_COEF_B * (a @ x) + NS_COEF_C * (a @ a @ x)
    return x.T if transposed else x


def muon_step(state: OptState, params: ParamVector, grad: ParamVector):
    """One Muon update.

    The momentum buffer is an EMA of gradients; the effective gradient is
    the Nesterov lookahead (1-mu)*g + mu*buffer.  Weight matrices are
    replaced by their orthogonalized effective gradient scaled by the
    learning rate; bias vectors take the effective gradient directly
    (momentum SGD).
    """
    if state.kind != "muon":
        raise ValueError(f"muon_step called with kind={state.kind!r}")
    _check_grad(params, grad)
    mu = state.momentum
    buf = mu * state.m + (1.0 - mu) * grad.values
    eff = (1.0 - mu) * grad.values + mu * buf

    new_values = params.values.copy()
    pos = 0
    for (out_w, in_w), _ in params.spec.layer_shapes():
        w_len = out_w * in_w
        eff_w = eff[pos : pos + w_len].reshape(out_w, in_w)
        if np.any(eff_w):
            update = newton_schulz_orthogonalize(eff_w, state.ns_iterations)
            new_values[pos : pos + w_len] -= state.learning_rate * update.reshape(-1)
        pos += w_len
        new_values[pos : pos + out_w] -= state.learning_rate * eff[pos : pos + out_w]
        pos += out_w
    new_params = ParamVector(params.spec, new_values)
    return new_params, replace(state, step_count=state.step_count + 1, m=buf)


def optimizer_step(state: OptState, params: ParamVector, grad: ParamVector):
    """Dispatch on `state.kind`."""
    if state.kind == "adam":
        return adam_step(state, params, grad)
    return muon_step(state, params, grad)


def polyak_update(target: ParamVector, online: ParamVector, rate: float) -> ParamVector:
    """target <- rate * online + (1 - rate) * target, per coordinate."""
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"polyak rate must be in (0, 1], got {rate}")
    if target.values.size != online.values.size:
        raise ShapeError("target and online parameter lengths differ")
    mixed = rate * online.values + (1.0 - rate) * target.values
    return ParamVector(target.spec, mixed)
