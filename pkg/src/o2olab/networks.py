"""Policy, critic-ensemble, and scale networks used by every agent.

The Gaussian policy network maps a state to per-action mean and
pre-std heads; the std is exp of the clamped pre-std.  With squashing
enabled, samples are mapped through tanh and rescaled into the action
box, and log-densities include the change-of-variables correction.

Because losses here are optimized with hand-rolled reverse mode, the
policy exposes its sampling internals together with closed-form partial
derivatives of (log-density, action) w.r.t. the two heads; loss code
supplies per-sample upstreams and receives flat parameter gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .numkit import (
    EXP_CLAMP_HI,
    EXP_CLAMP_LO,
    MlpSpec,
    ParamVector,
    init_params,
    mlp_forward_batch,
    mlp_grad_batch,
)
from .errors import ShapeError

LOG_2PI = float(np.log(2.0 * np.pi))
ATANH_CLIP = 1.0 - 1e-10


def _log1m_tanh2(u: np.ndarray) -> np.ndarray:
    """log(1 - tanh(u)^2), stable for large |u|."""
    return 2.0 * (np.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


@dataclass
class GaussianPolicy:
    """Tanh-squashed (optionally) diagonal Gaussian policy."""

    params: ParamVector
    action_low: np.ndarray
    action_high: np.ndarray
    squash: bool = True

    def __post_init__(self):
        self.action_low = np.asarray(self.action_low, dtype=np.float64)
        self.action_high = np.asarray(self.action_high, dtype=np.float64)
        if self.params.spec.out_dim != 2 * self.action_dim:
            raise ShapeError(
                f"policy net output {self.params.spec.out_dim} != 2 * action dim "
                f"{self.action_dim}"
            )

    @property
    def action_dim(self) -> int:
        return self.action_low.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.action_low + self.action_high)

    @property
    def half(self) -> np.ndarray:
        return 0.5 * (self.action_high - self.action_low)

    def with_params(self, params: ParamVector) -> "GaussianPolicy":
        return replace(self, params=params)

    def heads(self, s: np.ndarray):
        """(mean, pre_std, std, clamp mask) for a batch of states."""
        out = mlp_forward_batch(self.params, s)
        d = self.action_dim
        mu, rho = out[:, :d], out[:, d:]
        mask = ((rho > EXP_CLAMP_LO) & (rho < EXP_CLAMP_HI)).astype(np.float64)
        std = np.exp(np.clip(rho, EXP_CLAMP_LO, EXP_CLAMP_HI))
        return mu, rho, std, mask

    def sample(self, s: np.ndarray, rng: np.random.Generator):
        """Reparameterized batch sample; returns (actions, logp, internals)."""
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        mu, _, std, mask = self.heads(s)
        xi = rng.standard_normal(mu.shape)
        u = mu + std * xi
        base = -0.5 * xi * xi - np.log(std) - 0.5 * LOG_2PI
        if self.squash:
            t = np.tanh(u)
            a = self.center + self.half * t
            logp = np.sum(base - np.log(self.half) - _log1m_tanh2(u), axis=1)
        else:
            t = None
            a = u
            logp = np.sum(base, axis=1)
        internals = {"xi": xi, "u": u, "std": std, "mask": mask, "tanh_u": t}
        return a, logp, internals

    def sample_grads(self, s, internals, d_logp, d_action) -> np.ndarray:
        """Flat parameter gradient of sum_i d_logp_i * logp_i + <d_action_i, a_i>
        for a reparameterized sample described by `internals`."""
        xi, std, mask = internals["xi"], internals["std"], internals["mask"]
        if self.squash:
            t = internals["tanh_u"]
            dadu = self.half * (1.0 - t * t)
            dlog_dmu = 2.0 * t
            dlog_drho = (-1.0 + 2.0 * t * xi * std) * mask
            du_drho = xi * std * mask
            d_mu = d_logp[:, None] * dlog_dmu + d_action * dadu
            d_rho = d_logp[:, None] * dlog_drho + d_action * dadu * du_drho
        else:
            d_mu = d_action.copy()
            d_rho = (-d_logp[:, None] + d_action * xi * std) * mask
        flat, _ = mlp_grad_batch(self.params, s, np.concatenate([d_mu, d_rho], axis=1))
        return flat

    def logprob_given(self, s: np.ndarray, a: np.ndarray):
        """Log-density of given actions; returns (logp, internals)."""
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        mu, _, std, mask = self.heads(s)
        if self.squash:
            v = np.clip((a - self.center) / self.half, -ATANH_CLIP, ATANH_CLIP)
            u = np.arctanh(v)
            corr = np.sum(np.log(self.half) + np.log1p(-v * v), axis=1)
        else:
            u = a
            corr = 0.0
        xi = (u - mu) / std
        logp = np.sum(-0.5 * xi * xi - np.log(std) - 0.5 * LOG_2PI, axis=1) - corr
        return logp, {"xi": xi, "std": std, "mask": mask}

    def given_grads(self, s, internals, d_logp) -> np.ndarray:
        """Flat parameter gradient of sum_i d_logp_i * logp_i at fixed actions."""
        xi, std, mask = internals["xi"], internals["std"], internals["mask"]
        d_mu = d_logp[:, None] * xi / std
        d_rho = d_logp[:, None] * (xi * xi - 1.0) * mask
        flat, _ = mlp_grad_batch(self.params, s, np.concatenate([d_mu, d_rho], axis=1))
        return flat

    def mean_action(self, s: np.ndarray) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        mu, _, _, _ = self.heads(s)
        if self.squash:
            return self.center + self.half * np.tanh(mu)
        return mu

    def mean_action_grads(self, s, d_action) -> np.ndarray:
        """Flat parameter gradient of sum_i <d_action_i, mean_action_i>."""
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        mu, _, _, _ = self.heads(s)
        if self.squash:
            t = np.tanh(mu)
            d_mu = d_action * self.half * (1.0 - t * t)
        else:
            d_mu = d_action
        upstream = np.concatenate([d_mu, np.zeros_like(d_mu)], axis=1)
        flat, _ = mlp_grad_batch(self.params, s, upstream)
        return flat


def make_policy(
    state_dim: int,
    action_low,
    action_high,
    hidden,
    rng: np.random.Generator,
    activation: str = "relu",
    squash: bool = True,
) -> GaussianPolicy:
    action_low = np.asarray(action_low, dtype=np.float64)
    spec = MlpSpec((state_dim, *hidden, 2 * action_low.size), activation=activation)
    return GaussianPolicy(
        params=init_params(spec, rng),
        action_low=action_low,
        action_high=np.asarray(action_high, dtype=np.float64),
        squash=squash,
    )


@dataclass
class CriticEnsemble:
    """N critics Q(s, a) with matching Polyak-averaged targets."""

    members: list[ParamVector]
    targets: list[ParamVector] = field(default=None)

    def __post_init__(self):
        if len(self.members) < 2:
            raise ShapeError("critic ensemble needs at least 2 members")
        if self.targets is None:
            self.targets = [p.copy() for p in self.members]
        if len(self.targets) != len(self.members):
            raise ShapeError("target count != member count")
        for m, t in zip(self.members, self.targets):
            if m.spec != t.spec:
                raise ShapeError("member/target spec mismatch")

    @property
    def n_members(self) -> int:
        return len(self.members)


def critic_input(s: np.ndarray, a: np.ndarray) -> np.ndarray:
    return np.concatenate([np.atleast_2d(s), np.atleast_2d(a)], axis=1)


def q_values(params: ParamVector, s, a) -> np.ndarray:
    """Scalar critic outputs for a batch, shape (batch,)."""
    return mlp_forward_batch(params, critic_input(s, a))[:, 0]


def make_critic_ensemble(
    state_dim: int,
    action_dim: int,
    hidden,
    n_members: int,
    rng: np.random.Generator,
    activation: str = "tanh",
) -> CriticEnsemble:
    spec = MlpSpec((state_dim + action_dim, *hidden, 1), activation=activation)
    members = [init_params(spec, rng) for _ in range(n_members)]
    return CriticEnsemble(members=members)


@dataclass
class ScaleNet:
    """State-conditioned scalar applied to the score estimate inside the
    critic regularizer; unconstrained in sign."""

    params: ParamVector

    def values(self, s) -> np.ndarray:
        return mlp_forward_batch(self.params, np.atleast_2d(s))[:, 0]

    def grads(self, s, d_out) -> np.ndarray:
        flat, _ = mlp_grad_batch(self.params, np.atleast_2d(s), d_out[:, None])
        return flat

    def with_params(self, params: ParamVector) -> "ScaleNet":
        return ScaleNet(params=params)


def make_scale_net(state_dim: int, hidden, rng, activation: str = "relu") -> ScaleNet:
    spec = MlpSpec((state_dim, *hidden, 1), activation=activation)
    return ScaleNet(params=init_params(spec, rng))


@dataclass
class ValueNet:
    """State-value network (used by the expectile-regression agent)."""

    params: ParamVector

    def values(self, s) -> np.ndarray:
        return mlp_forward_batch(self.params, np.atleast_2d(s))[:, 0]

    def grads(self, s, d_out) -> np.ndarray:
        flat, _ = mlp_grad_batch(self.params, np.atleast_2d(s), d_out[:, None])
        return flat

    def with_params(self, params: ParamVector) -> "ValueNet":
        return ValueNet(params=params)


def make_value_net(state_dim: int, hidden, rng, activation: str = "relu") -> ValueNet:
    spec = MlpSpec((state_dim, *hidden, 1), activation=activation)
    return ValueNet(params=init_params(spec, rng))
