"""Loss functions for every agent in the laboratory.

The actor-critic family shares one convention: a loss function takes
stacked batch arrays plus the networks it differentiates, and returns
its scalar value together with flat parameter gradients (one per critic
member, one per auxiliary network).  Gradients are exact reverse-mode,
so every function here is covered by the finite-difference suite.

The score-matching regularizer penalizes the distance between a
critic's action gradient and a state-scaled noise estimate from the
diffusion model; its critic gradient therefore needs second-order
differentiation, provided by `numkit.mlp_second_grad`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError
from .networks import CriticEnsemble, GaussianPolicy, ScaleNet, ValueNet, critic_input
from .numkit import mlp_forward_batch, mlp_grad_batch, mlp_second_grad

# Advantage weights are clipped here to keep exponentials from overflowing.
WEIGHT_CLIP = 100.0


def _clipped_exp_weights(exponents: np.ndarray) -> np.ndarray:
    """min(exp(x), WEIGHT_CLIP) without intermediate overflow."""
    return np.minimum(np.exp(np.minimum(exponents, 700.0)), WEIGHT_CLIP)
# Floor for the TD3+BC critic normalizer (batch-mean |Q| can be zero at init).
NORMALIZER_FLOOR = 1e-12


@dataclass(frozen=True)
class LossParams:
    """Shared hyperparameters consumed by the losses."""

    discount: float = 0.99
    score_match_weight: float = 40.0
    cql_alpha: float = 5.0
    expectile: float = 0.9
    bc_weight: float = 2.0
    awr_temperature: float = 1.0
    entropy_coef: float = 0.2
    target_entropy: float | None = None

    def __post_init__(self):
        if not 0.0 < self.discount < 1.0:
            raise ValueError("discount must lie in (0, 1)")
        if self.score_match_weight < 0.0:
            raise ValueError("score-match weight must be non-negative")
        if not 0.0 < self.expectile < 1.0:
            raise ValueError("expectile must lie in (0, 1)")
        if self.bc_weight < 0.0:
            raise ValueError("bc weight must be non-negative")
        if self.awr_temperature <= 0.0:
            raise ValueError("awr temperature must be positive")


def _q_forward(params, x) -> np.ndarray:
    return mlp_forward_batch(params, x)[:, 0]


def _min_over(params_list, x):
    """(per-sample min, argmin member index) over a critic list."""
    qs = np.stack([_q_forward(p, x) for p in params_list])
    idx = np.argmin(qs, axis=0)
    return qs[idx, np.arange(qs.shape[1])], idx


def _action_grads(params_list, x, state_dim):
    """Per-member gradients of Q w.r.t. the action block of the input."""
    ones = np.ones((x.shape[0], 1))
    return [mlp_grad_batch(p, x, ones)[1][:, state_dim:] for p in params_list]


def policy_sample_logprob(policy: GaussianPolicy, s: np.ndarray, seed):
    """Sample one action for one state; returns (action, log-density)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    a, logp, _ = policy.sample(np.atleast_2d(s), rng)
    return a[0], float(logp[0])


def sac_critic_loss(
    ensemble: CriticEnsemble,
    policy: GaussianPolicy,
    batch,
    entropy_coef: float,
    discount: float,
    rng: np.random.Generator,
):
    """Soft TD regression of every member onto the shared target.

    Target: r + gamma * (1 - done) * (min over target members at a
    policy sample from the next state - entropy_coef * log pi).  The
    loss is averaged over members and batch; gradients flow into the
    online members only.
    """
    if batch.size == 0:
        raise ValueError("empty batch")
    a2, logp2, _ = policy.sample(batch.s2, rng)
    x2 = critic_input(batch.s2, a2)
    tq, _ = _min_over(ensemble.targets, x2)
    y = batch.r + discount * (1.0 - batch.done) * (tq - entropy_coef * logp2)
    if not np.all(np.isfinite(y)):
        raise NumericError("non-finite TD target")
    x = critic_input(batch.s, batch.a)
    n, b = ensemble.n_members, batch.size
    loss = 0.0
    grads = []
    for member in ensemble.members:
        q = _q_forward(member, x)
        resid = q - y
        loss += float(resid @ resid)
        flat, _ = mlp_grad_batch(member, x, (2.0 / (n * b)) * resid[:, None])
        grads.append(flat)
    return loss / (n * b), grads


def sac_policy_loss(
    policy: GaussianPolicy,
    ensemble: CriticEnsemble,
    batch,
    entropy_coef: float,
    rng: np.random.Generator,
):
    """mean(entropy_coef * log pi - min-member Q) on reparameterized samples.

    The gradient flows through the sampled actions into Q (picking the
    argmin member per sample) but never into the critic parameters.
    Returns (loss, flat policy gradient, mean log-density of the
    samples); the last drives entropy-coefficient tuning.
    """
    a, logp, internals = policy.sample(batch.s, rng)
    x = critic_input(batch.s, a)
    qmin, idx = _min_over(ensemble.members, x)
    b = batch.size
    loss = float(np.mean(entropy_coef * logp - qmin))
    ga = _action_grads(ensemble.members, x, batch.s.shape[1])
    ga_sel = np.stack(ga)[idx, np.arange(b)]
    d_logp = np.full(b, entropy_coef / b)
    d_action = -ga_sel / b
    grad = policy.sample_grads(batch.s, internals, d_logp, d_action)
    return loss, grad, float(logp.mean())


def sample_action_mixture(
    policy: GaussianPolicy,
    action_low,
    action_high,
    s: np.ndarray,
    batch_size: int,
    seed,
) -> np.ndarray:
    """Half reparameterized policy samples, half uniform over the box.

    Row i of the result goes with state row i; the first half of the
    states receives policy samples, the second half uniform draws.
    """
    if batch_size % 2 != 0:
        raise ValueError("batch_size must be even")
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    if s.shape[0] != batch_size:
        raise ShapeError(f"{s.shape[0]} states for batch_size {batch_size}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    nh = batch_size // 2
    a_pol, _, _ = policy.sample(s[:nh], rng)
    low = np.asarray(action_low, dtype=np.float64)
    high = np.asarray(action_high, dtype=np.float64)
    a_uni = rng.uniform(low, high, size=(batch_size - nh, low.size))
    return np.concatenate([a_pol, a_uni], axis=0)


def score_match_loss(
    ensemble: CriticEnsemble,
    scale_net: ScaleNet,
    score_model,
    s: np.ndarray,
    actions: np.ndarray,
    w,
):
    """mean over members and batch of ||dQ/da - scale(s) * eps(s,a,w,1)||^2.

    `actions` should come from `sample_action_mixture`.  The noise
    estimate is a constant here (the diffusion model is pre-trained and
    frozen); gradients are returned for the critic members and the
    scale network only.
    """
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    eps = score_model.predict(s, actions, w, 1)
    alpha = scale_net.values(s)
    x = critic_input(s, actions)
    state_dim = s.shape[1]
    n, b = ensemble.n_members, s.shape[0]
    ones = np.ones((b, 1))
    loss = 0.0
    member_grads = []
    d_alpha = np.zeros(b)
    for member in ensemble.members:
        _, gin = mlp_grad_batch(member, x, ones)
        g = gin[:, state_dim:]
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite critic action gradient")
        resid = g - alpha[:, None] * eps
        loss += float(np.sum(resid * resid))
        direction = np.zeros_like(x)
        direction[:, state_dim:] = (2.0 / (n * b)) * resid
        _, flat = mlp_second_grad(member, x, ones, direction)
        member_grads.append(flat)
        d_alpha += (-2.0 / (n * b)) * np.sum(resid * eps, axis=1)
    scale_grad = scale_net.grads(s, d_alpha)
    return loss / (n * b), member_grads, scale_grad


@dataclass
class SmacCriticOut:
    total: float
    td_loss: float
    sm_loss: float
    member_grads: list
    scale_grad: np.ndarray


def smac_critic_loss(
    ensemble: CriticEnsemble,
    policy: GaussianPolicy,
    scale_net: ScaleNet,
    score_model,
    batch,
    *,
    score_match_weight: float,
    entropy_coef: float,
    discount: float,
    target_rng: np.random.Generator,
    action_rng: np.random.Generator,
    action_low,
    action_high,
) -> SmacCriticOut:
    """Weighted sum of the score-match regularizer and the soft TD loss.

    Actions for the regularizer are drawn from the policy/uniform
    mixture over the batch states, conditioned on outcome label 1 (the
    regularizer always asks the estimator for best-outcome scores).
    With weight 0 the regularizer path is skipped entirely, so values,
    gradients, and random-stream consumption reduce exactly to the
    plain soft actor-critic loss.
    """
    if score_match_weight < 0.0:
        raise ValueError("score-match weight must be non-negative")
    td_loss, td_grads = sac_critic_loss(
        ensemble, policy, batch, entropy_coef, discount, target_rng
    )
    if score_match_weight == 0.0:
        return SmacCriticOut(
            total=td_loss,
            td_loss=td_loss,
            sm_loss=0.0,
            member_grads=td_grads,
            scale_grad=None if scale_net is None else np.zeros_like(scale_net.params.values),
        )
    sm_actions = sample_action_mixture(
        policy, action_low, action_high, batch.s, batch.size, action_rng
    )
    sm_loss, sm_grads, scale_grad = score_match_loss(
        ensemble, scale_net, score_model, batch.s, sm_actions, 1.0
    )
    k = score_match_weight
    member_grads = [g_td + k * g_sm for g_td, g_sm in zip(td_grads, sm_grads)]
    return SmacCriticOut(
        total=td_loss + k * sm_loss,
        td_loss=td_loss,
        sm_loss=sm_loss,
        member_grads=member_grads,
        scale_grad=k * scale_grad,
    )


def cql_penalty(
    ensemble: CriticEnsemble,
    policy: GaussianPolicy,
    batch,
    seed,
    action_low,
    action_high,
):
    """mean Q on mixture-sampled actions minus mean Q on dataset actions."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    a_ood = sample_action_mixture(policy, action_low, action_high, batch.s, batch.size, rng)
    return _conservative_penalty(ensemble, batch, a_ood, cap=None)


def calql_penalty(
    ensemble: CriticEnsemble,
    policy: GaussianPolicy,
    batch,
    seed,
    action_low,
    action_high,
):
    """Conservative penalty with the sampled-action term capped at the
    Monte-Carlo return of the state.  Rejects batches without
    Monte-Carlo returns (callers fall back to `cql_penalty`)."""
    if np.any(np.isnan(batch.mc)):
        raise ValueError("batch lacks Monte-Carlo returns; use cql_penalty instead")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    a_ood = sample_action_mixture(policy, action_low, action_high, batch.s, batch.size, rng)
    return _conservative_penalty(ensemble, batch, a_ood, cap=batch.mc)


def _conservative_penalty(ensemble, batch, a_ood, cap):
    x_ood = critic_input(batch.s, a_ood)
    x_data = critic_input(batch.s, batch.a)
    n, b = ensemble.n_members, batch.size
    penalty = 0.0
    grads = []
    for member in ensemble.members:
        q_ood = _q_forward(member, x_ood)
        q_data = _q_forward(member, x_data)
        if cap is None:
            ood_term = q_ood
            up_ood = np.ones(b)
        else:
            ood_term = np.minimum(cap, q_ood)
            up_ood = (q_ood <= cap).astype(np.float64)
        penalty += float(np.mean(ood_term) - np.mean(q_data))
        g_ood, _ = mlp_grad_batch(member, x_ood, (up_ood / (n * b))[:, None])
        g_data, _ = mlp_grad_batch(member, x_data, np.full((b, 1), -1.0 / (n * b)))
        grads.append(g_ood + g_data)
    return penalty / n, grads


@dataclass
class IqlOut:
    critic_loss: float
    value_loss: float
    policy_loss: float
    member_grads: list
    value_grad: np.ndarray
    policy_grad: np.ndarray


def iql_losses(
    ensemble: CriticEnsemble,
    value_net: ValueNet,
    policy: GaussianPolicy,
    batch,
    expectile: float,
    awr_temperature: float,
    discount: float,
) -> IqlOut:
    """Expectile value regression, TD critic regression onto the value
    net, and advantage-weighted regression for the policy.

    The value target and the policy advantage both use the minimum over
    target critics at dataset actions; advantage weights exp(adv/beta)
    are clipped at WEIGHT_CLIP and treated as constants.
    """
    if not 0.0 < expectile < 1.0:
        raise ValueError("expectile must lie in (0, 1)")
    b = batch.size
    x_data = critic_input(batch.s, batch.a)
    qt, _ = _min_over(ensemble.targets, x_data)
    v = value_net.values(batch.s)
    u = qt - v
    weight = np.abs(expectile - (u < 0.0).astype(np.float64))
    value_loss = float(np.mean(weight * u * u))
    value_grad = value_net.grads(batch.s, (-2.0 / b) * weight * u)

    y = batch.r + discount * (1.0 - batch.done) * value_net.values(batch.s2)
    n = ensemble.n_members
    critic_loss = 0.0
    member_grads = []
    for member in ensemble.members:
        q = _q_forward(member, x_data)
        resid = q - y
        critic_loss += float(resid @ resid)
        flat, _ = mlp_grad_batch(member, x_data, (2.0 / (n * b)) * resid[:, None])
        member_grads.append(flat)
    critic_loss /= n * b

    adv_w = _clipped_exp_weights(u / awr_temperature)
    logp, internals = policy.logprob_given(batch.s, batch.a)
    policy_loss = float(np.mean(-adv_w * logp))
    policy_grad = policy.given_grads(batch.s, internals, -adv_w / b)
    return IqlOut(critic_loss, value_loss, policy_loss, member_grads, value_grad, policy_grad)


@dataclass
class Td3Out:
    critic_loss: float
    policy_loss: float
    member_grads: list
    policy_grad: np.ndarray


def td3_losses(
    ensemble: CriticEnsemble,
    policy: GaussianPolicy,
    batch,
    discount: float,
    rng: np.random.Generator,
    *,
    smoothing_std: float = 0.2,
    smoothing_clip: float = 0.5,
    smoothing: bool = True,
) -> Td3Out:
    """Deterministic-gradient losses: TD regression with target-action
    smoothing, and policy ascent on the min-member Q at the mean action."""
    a2 = policy.mean_action(batch.s2)
    if smoothing:
        half = policy.half
        noise = smoothing_std * half * rng.standard_normal(a2.shape)
        noise = np.clip(noise, -smoothing_clip * half, smoothing_clip * half)
        a2 = np.clip(a2 + noise, policy.action_low, policy.action_high)
    x2 = critic_input(batch.s2, a2)
    tq, _ = _min_over(ensemble.targets, x2)
    y = batch.r + discount * (1.0 - batch.done) * tq
    if not np.all(np.isfinite(y)):
        raise NumericError("non-finite TD target")
    x = critic_input(batch.s, batch.a)
    n, b = ensemble.n_members, batch.size
    critic_loss = 0.0
    member_grads = []
    for member in ensemble.members:
        q = _q_forward(member, x)
        resid = q - y
        critic_loss += float(resid @ resid)
        flat, _ = mlp_grad_batch(member, x, (2.0 / (n * b)) * resid[:, None])
        member_grads.append(flat)
    critic_loss /= n * b

    a_mean = policy.mean_action(batch.s)
    x_pi = critic_input(batch.s, a_mean)
    qmin, idx = _min_over(ensemble.members, x_pi)
    policy_loss = float(-np.mean(qmin))
    ga = _action_grads(ensemble.members, x_pi, batch.s.shape[1])
    ga_sel = np.stack(ga)[idx, np.arange(b)]
    policy_grad = policy.mean_action_grads(batch.s, -ga_sel / b)
    return Td3Out(critic_loss, policy_loss, member_grads, policy_grad)


def td3bc_policy_loss(
    ensemble: CriticEnsemble,
    policy: GaussianPolicy,
    batch,
    bc_weight: float,
    normalizer: float | None = None,
):
    """mean(-Q/sg(mean|Q|) + bc_weight * ||mean_action - a||^2).

    The normalizer is the batch-mean absolute min-member Q at the mean
    action.  It is a stop-gradient constant: recomputed from the batch
    when `normalizer` is None, or pinned to the given value (which is
    how the finite-difference oracle probes this objective).  Floored
    to avoid 0/0 at initialization.
    """
    if bc_weight < 0.0:
        raise ValueError("bc weight must be non-negative")
    b = batch.size
    a_mean = policy.mean_action(batch.s)
    x_pi = critic_input(batch.s, a_mean)
    qmin, idx = _min_over(ensemble.members, x_pi)
    if normalizer is None:
        normalizer = float(np.mean(np.abs(qmin)))
    norm = max(normalizer, NORMALIZER_FLOOR)
    diff = a_mean - batch.a
    loss = float(np.mean(-qmin / norm + bc_weight * np.sum(diff * diff, axis=1)))
    ga = _action_grads(ensemble.members, x_pi, batch.s.shape[1])
    ga_sel = np.stack(ga)[idx, np.arange(b)]
    d_action = -ga_sel / (b * norm) + (2.0 * bc_weight / b) * diff
    grad = policy.mean_action_grads(batch.s, d_action)
    return loss, grad


def awr_weights(
    ensemble: CriticEnsemble,
    policy: GaussianPolicy,
    batch,
    temperature: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Clipped exponential advantage weights.

    Advantage = ensemble-mean Q at the dataset action minus ensemble-
    mean Q at one policy sample from the same state.
    """
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    a_pi, _, _ = policy.sample(batch.s, rng)
    q_base = np.mean(
        [_q_forward(m, critic_input(batch.s, a_pi)) for m in ensemble.members], axis=0
    )
    q_data = np.mean(
        [_q_forward(m, critic_input(batch.s, batch.a)) for m in ensemble.members], axis=0
    )
    return _clipped_exp_weights((q_data - q_base) / temperature)


def awr_policy_loss(
    ensemble: CriticEnsemble,
    policy: GaussianPolicy,
    batch,
    temperature: float,
    rng: np.random.Generator,
    weights: np.ndarray | None = None,
):
    """Advantage-weighted regression onto dataset actions.

    The weights are stop-gradient constants: recomputed via
    `awr_weights` when None, or pinned to the given values (used by the
    finite-difference oracle).
    """
    b = batch.size
    if weights is None:
        weights = awr_weights(ensemble, policy, batch, temperature, rng)
    logp, internals = policy.logprob_given(batch.s, batch.a)
    loss = float(np.mean(-weights * logp))
    grad = policy.given_grads(batch.s, internals, -weights / b)
    return loss, grad


def entropy_coef_update(log_coef: float, mean_logp: float, target_entropy: float, lr: float) -> float:
    """One gradient step on the log entropy coefficient toward the target
    entropy: coefficient grows while policy entropy is below target."""
    coef = float(np.exp(log_coef))
    grad = -coef * (mean_logp + target_entropy)
    return float(log_coef - lr * grad)


def verify_maxent_identity(q_fn, alpha: float, grid: np.ndarray) -> float:
    """Sup-norm gap of the optimum-policy score identity on a 1-D grid.

    Builds the max-entropy optimal density exp(Q/alpha)/Z by trapezoid
    quadrature, then compares the numerical action-derivative of its log
    against the numerical action-derivative of Q scaled by 1/alpha.
    """
    if alpha <= 0.0:
        raise ValueError("alpha must be positive")
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size < 3:
        raise ShapeError("grid must be 1-D with at least 3 points")
    if np.any(np.diff(grid) <= 0.0):
        raise ValueError("grid must be strictly increasing")
    q = np.asarray(q_fn(grid), dtype=np.float64)
    if q.shape != grid.shape:
        q = np.array([float(q_fn(float(a))) for a in grid])
    if not np.all(np.isfinite(q)):
        raise ValueError("normalizer diverges: Q is not finite on the grid")
    e = np.exp((q - q.max()) / alpha)
    z = float(np.trapezoid(e, grid))
    if not np.isfinite(z) or z <= 0.0:
        raise ValueError(f"normalizer diverges: Z = {z}")
    log_dens = np.log(e / z)
    span = grid[2:] - grid[:-2]
    d_log = (log_dens[2:] - log_dens[:-2]) / span
    d_q = (q[2:] - q[:-2]) / span
    return float(np.max(np.abs(d_log - d_q / alpha)))
