"""Offline pre-training, warm start, online fine-tuning, evaluation.

A run is fully determined by (config, seed): every random draw comes
from a named stream (see `seeding`), evaluation uses per-step derived
streams so it never perturbs training, and checkpoints carry the
optimizer buffers and stream states needed to resume an offline run
bit-exactly.

The plain soft actor-critic trainer and the score-matched one share a
single code path: the regularized critic loss with weight zero skips
the regularizer entirely, so the two produce bit-identical parameter
trajectories given the same seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import blobio, seeding
from .agents import (
    LossParams,
    awr_policy_loss,
    calql_penalty,
    cql_penalty,
    entropy_coef_update,
    iql_losses,
    sac_critic_loss,
    sac_policy_loss,
    smac_critic_loss,
    td3_losses,
    td3bc_policy_loss,
)
from .envs import (
    Dataset,
    EnvSpec,
    ReplayBuffer,
    Transition,
    env_reset,
    env_step,
    mixed_batch,
    stack_batch,
)
from .errors import ConfigError, FormatError, NumericError
from .networks import (
    CriticEnsemble,
    GaussianPolicy,
    ScaleNet,
    ValueNet,
    make_critic_ensemble,
    make_policy,
    make_scale_net,
    make_value_net,
)
from .numkit import MlpSpec, ParamVector
from .optim import OptState, init_opt_state, optimizer_step, polyak_update

AGENT_MAGIC = b"SMACAC01"

OFFLINE_ALGS = ("smac", "sac", "cql", "calql", "iql", "td3bc")
ONLINE_ALGS = ("sac", "td3", "td3bc", "awr")
TD3_EXPLORE_STD = 0.1


# ----------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class NetworkConfig:
    critic_hidden: tuple = (64, 64)
    critic_activation: str = "tanh"
    n_critics: int = 2
    policy_hidden: tuple = (64, 64)
    policy_activation: str = "relu"
    policy_squash: bool = True
    scale_hidden: tuple = (32, 32)
    scale_activation: str = "relu"
    value_hidden: tuple = (64, 64)
    value_activation: str = "relu"


@dataclass(frozen=True)
class OptimConfig:
    critic_lr: float = 3e-4
    policy_lr: float = 1e-4
    scale_lr: float = 1e-4
    value_lr: float = 3e-4
    entropy_lr: float = 3e-4
    target_update_rate: float = 0.005


@dataclass(frozen=True)
class DiffusionConfig:
    steps: int = 4000
    batch: int = 128
    lr: float = 1e-3
    n_steps: int = 32
    hidden: tuple = (64, 64)
    k_embed_dim: int = 8
    activation: str = "relu"


@dataclass(frozen=True)
class DataConfig:
    n_trajectories: int = 100
    behavior_noise: float = 0.5
    behavior_gain: float = 5.0


@dataclass(frozen=True)
class ExperimentConfig:
    env: str = "reach2d"
    seed: int = 0
    seeds: tuple = (0,)
    offline_alg: str = "smac"
    online_alg: str = "sac"
    optimizer: str = "muon"
    offline_steps: int = 20000
    online_steps: int = 10000
    offline_batch: int = 64
    online_batch: int = 256
    warm_start_count: int = 5000
    mix: float = 0.5
    eval_every: int = 250
    eval_episodes: int = 10
    replay_capacity: int | None = None
    rvs_enabled: bool = True
    loss: LossParams = field(default_factory=LossParams)
    networks: NetworkConfig = field(default_factory=NetworkConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if self.offline_alg not in OFFLINE_ALGS:
            raise ConfigError(f"offline_alg must be one of {OFFLINE_ALGS}")
        if self.online_alg not in ONLINE_ALGS:
            raise ConfigError(f"online_alg must be one of {ONLINE_ALGS}")
        if self.optimizer not in ("adam", "muon"):
            raise ConfigError("optimizer must be 'adam' or 'muon'")
        if not 0.0 <= self.mix <= 1.0:
            raise ConfigError("mix must lie in [0, 1]")
        for name in ("offline_steps", "online_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("offline_batch", "online_batch", "warm_start_count", "eval_every", "eval_episodes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.offline_batch % 2 or self.online_batch % 2:
            raise ConfigError("batch sizes must be even (the action sampler splits them)")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")


_NESTED = {
    "loss": LossParams,
    "networks": NetworkConfig,
    "optim": OptimConfig,
    "diffusion": DiffusionConfig,
    "data": DataConfig,
}


def _build_section(cls, data: dict, path: str):
    fields = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
    unknown = set(data) - fields
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {path}")
    kwargs = {}
    for key, val in data.items():
        if isinstance(val, list):
            val = tuple(val)
        kwargs[key] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {path} section: {exc}") from None


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    kwargs = {}
    for name, cls in _NESTED.items():
        if name in data:
            section = data.pop(name)
            if not isinstance(section, dict):
                raise ConfigError(f"{name} must be an object")
            kwargs[name] = _build_section(cls, section, name)
    top = _build_section(ExperimentConfig, data, "config")
    return replace(top, **kwargs)


def config_to_dict(config: ExperimentConfig) -> dict:
    out = asdict(config)

    def detuple(obj):
        if isinstance(obj, tuple):
            return [detuple(x) for x in obj]
        if isinstance(obj, dict):
            return {k: detuple(v) for k, v in obj.items()}
        return obj

    return detuple(out)


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply repeatable `--override dotted.path=value` flags; last wins."""
    out = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        path, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except ValueError:
            value = raw
        node = out
        parts = path.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {path!r} crosses a non-object value")
        node[parts[-1]] = value
    return out


def load_config(path, overrides: list[str] | None = None) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if overrides:
        data = apply_overrides(data, overrides)
    return config_from_dict(data)


# ----------------------------------------------------------------------
# Agent state
# ----------------------------------------------------------------------


@dataclass
class AgentCheckpoint:
    """Everything needed to evaluate or resume an offline run."""

    step: int
    offline_alg: str
    env_name: str
    policy: GaussianPolicy
    critics: CriticEnsemble
    scale_net: ScaleNet | None
    value_net: ValueNet | None
    log_entropy_coef: float
    target_entropy: float
    opt_states: dict
    rng_states: dict


def _opt_header(state: OptState) -> dict:
    return {
        "kind": state.kind,
        "learning_rate": state.learning_rate,
        "step_count": state.step_count,
        "beta1": state.beta1,
        "beta2": state.beta2,
        "eps": state.eps,
        "momentum": state.momentum,
        "ns_iterations": state.ns_iterations,
        "has_v": state.v is not None,
    }


def _spec_header(spec: MlpSpec) -> dict:
    return {
        "layer_widths": list(spec.layer_widths),
        "activation": spec.activation,
        "output_transform": spec.output_transform,
    }


def save_checkpoint(checkpoint: AgentCheckpoint, path):
    header = {
        "step": checkpoint.step,
        "offline_alg": checkpoint.offline_alg,
        "env_name": checkpoint.env_name,
        "log_entropy_coef": checkpoint.log_entropy_coef,
        "target_entropy": checkpoint.target_entropy,
        "policy_spec": _spec_header(checkpoint.policy.params.spec),
        "policy_squash": checkpoint.policy.squash,
        "critic_spec": _spec_header(checkpoint.critics.members[0].spec),
        "n_critics": checkpoint.critics.n_members,
        "scale_spec": None
        if checkpoint.scale_net is None
        else _spec_header(checkpoint.scale_net.params.spec),
        "value_spec": None
        if checkpoint.value_net is None
        else _spec_header(checkpoint.value_net.params.spec),
        "opt_states": {name: _opt_header(st) for name, st in sorted(checkpoint.opt_states.items())},
        "rng_states": checkpoint.rng_states,
    }
    arrays = {
        "action_low": checkpoint.policy.action_low,
        "action_high": checkpoint.policy.action_high,
        "policy": checkpoint.policy.params.values,
    }
    for i, member in enumerate(checkpoint.critics.members):
        arrays[f"critic{i}"] = member.values
    for i, target in enumerate(checkpoint.critics.targets):
        arrays[f"target{i}"] = target.values
    if checkpoint.scale_net is not None:
        arrays["scale"] = checkpoint.scale_net.params.values
    if checkpoint.value_net is not None:
        arrays["value"] = checkpoint.value_net.params.values
    for name, st in sorted(checkpoint.opt_states.items()):
        arrays[f"opt_{name}_m"] = st.m
        if st.v is not None:
            arrays[f"opt_{name}_v"] = st.v
    blobio.write_blob(path, AGENT_MAGIC, header, arrays)


def load_checkpoint(path) -> AgentCheckpoint:
    header, arrays = blobio.read_blob(path, AGENT_MAGIC)

    def spec_of(h):
        return MlpSpec(tuple(h["layer_widths"]), h["activation"], h["output_transform"])

    policy = GaussianPolicy(
        params=ParamVector(spec_of(header["policy_spec"]), arrays["policy"]),
        action_low=arrays["action_low"],
        action_high=arrays["action_high"],
        squash=header["policy_squash"],
    )
    cspec = spec_of(header["critic_spec"])
    members = [ParamVector(cspec, arrays[f"critic{i}"]) for i in range(header["n_critics"])]
    targets = [ParamVector(cspec, arrays[f"target{i}"]) for i in range(header["n_critics"])]
    critics = CriticEnsemble(members=members, targets=targets)
    scale_net = None
    if header["scale_spec"] is not None:
        scale_net = ScaleNet(ParamVector(spec_of(header["scale_spec"]), arrays["scale"]))
    value_net = None
    if header["value_spec"] is not None:
        value_net = ValueNet(ParamVector(spec_of(header["value_spec"]), arrays["value"]))
    opt_states = {}
    for name, oh in header["opt_states"].items():
        opt_states[name] = OptState(
            kind=oh["kind"],
            learning_rate=oh["learning_rate"],
            step_count=oh["step_count"],
            beta1=oh["beta1"],
            beta2=oh["beta2"],
            eps=oh["eps"],
            momentum=oh["momentum"],
            ns_iterations=oh["ns_iterations"],
            m=arrays[f"opt_{name}_m"],
            v=arrays[f"opt_{name}_v"] if oh["has_v"] else None,
        )
    return AgentCheckpoint(
        step=header["step"],
        offline_alg=header["offline_alg"],
        env_name=header["env_name"],
        policy=policy,
        critics=critics,
        scale_net=scale_net,
        value_net=value_net,
        log_entropy_coef=header["log_entropy_coef"],
        target_entropy=header["target_entropy"],
        opt_states=opt_states,
        rng_states=header["rng_states"],
    )


# ----------------------------------------------------------------------
# Evaluation
# ----------------------------------------------------------------------


def evaluate_policy(policy: GaussianPolicy, env: EnvSpec, episodes: int, seed: int):
    """Greedy (mean-action) rollouts; returns (mean return, standard error).

    Returns are undiscounted episodic sums, the usual benchmark
    convention.  Deterministic per seed.
    """
    if episodes < 1:
        raise ValueError("episodes must be positive")
    rng = np.random.default_rng(seed)
    returns = np.empty(episodes)
    for ep in range(episodes):
        state = env_reset(env, rng)
        total = 0.0
        for _ in range(env.horizon):
            action = policy.mean_action(state[None, :])[0]
            state, reward, done = env_step(env, state, np.clip(action, env.action_low, env.action_high))
            total += reward
            if done:
                break
        returns[ep] = total
    mean = float(returns.mean())
    stderr = 0.0 if episodes == 1 else float(returns.std(ddof=1) / np.sqrt(episodes))
    return mean, stderr


# ----------------------------------------------------------------------
# Offline pre-training
# ----------------------------------------------------------------------


_OFFLINE_STREAMS = ("batch", "policy", "bsample", "cql", "smooth")


def _init_agent(config: ExperimentConfig, env: EnvSpec, seed: int) -> AgentCheckpoint:
    net = config.networks
    policy = make_policy(
        env.state_dim,
        env.action_low,
        env.action_high,
        net.policy_hidden,
        seeding.stream(seed, "init-policy"),
        activation=net.policy_activation,
        squash=net.policy_squash,
    )
    critics = make_critic_ensemble(
        env.state_dim,
        env.action_dim,
        net.critic_hidden,
        net.n_critics,
        seeding.stream(seed, "init-critic"),
        activation=net.critic_activation,
    )
    scale_net = None
    if config.offline_alg == "smac":
        scale_net = make_scale_net(
            env.state_dim, net.scale_hidden, seeding.stream(seed, "init-scale"), net.scale_activation
        )
    value_net = None
    if config.offline_alg == "iql":
        value_net = make_value_net(
            env.state_dim, net.value_hidden, seeding.stream(seed, "init-value"), net.value_activation
        )
    opt = config.optim
    kind = config.optimizer
    opt_states = {"policy": init_opt_state(kind, policy.params.values.size, opt.policy_lr)}
    for i, member in enumerate(critics.members):
        opt_states[f"critic{i}"] = init_opt_state(kind, member.values.size, opt.critic_lr)
    if scale_net is not None:
        opt_states["scale"] = init_opt_state(kind, scale_net.params.values.size, opt.scale_lr)
    if value_net is not None:
        opt_states["value"] = init_opt_state(kind, value_net.params.values.size, opt.value_lr)
    target_entropy = config.loss.target_entropy
    if target_entropy is None:
        target_entropy = -10.0 * env.action_dim
    rng_states = {
        name: seeding.capture_state(seeding.stream(seed, name)) for name in _OFFLINE_STREAMS
    }
    return AgentCheckpoint(
        step=0,
        offline_alg=config.offline_alg,
        env_name=env.name,
        policy=policy,
        critics=critics,
        scale_net=scale_net,
        value_net=value_net,
        log_entropy_coef=float(np.log(config.loss.entropy_coef)),
        target_entropy=float(target_entropy),
        opt_states=opt_states,
        rng_states=rng_states,
    )


def _polyak_all(agent: AgentCheckpoint, rate: float):
    agent.critics.targets = [
        polyak_update(t, m, rate) for t, m in zip(agent.critics.targets, agent.critics.members)
    ]


def _step_critics(agent: AgentCheckpoint, grads):
    for i, flat in enumerate(grads):
        member = agent.critics.members[i]
        new_params, new_state = optimizer_step(
            agent.opt_states[f"critic{i}"], member, ParamVector(member.spec, flat)
        )
        agent.critics.members[i] = new_params
        agent.opt_states[f"critic{i}"] = new_state


def _step_net(agent: AgentCheckpoint, name: str, params: ParamVector, flat):
    new_params, new_state = optimizer_step(
        agent.opt_states[name], params, ParamVector(params.spec, flat)
    )
    agent.opt_states[name] = new_state
    return new_params


def _offline_update(config, env, agent, batch, streams, score_model):
    """One gradient step of the configured offline algorithm.

    Returns a metrics dict.  Critic targets are Polyak-updated here, and
    nowhere else.
    """
    loss_cfg = config.loss
    rate = config.optim.target_update_rate
    alg = config.offline_alg
    coef = float(np.exp(agent.log_entropy_coef))
    metrics = {}

    if alg in ("smac", "sac"):
        weight = loss_cfg.score_match_weight if alg == "smac" else 0.0
        out = smac_critic_loss(
            agent.critics,
            agent.policy,
            agent.scale_net,
            score_model,
            batch,
            score_match_weight=weight,
            entropy_coef=coef,
            discount=loss_cfg.discount,
            target_rng=streams["policy"],
            action_rng=streams["bsample"],
            action_low=env.action_low,
            action_high=env.action_high,
        )
        _step_critics(agent, out.member_grads)
        if agent.scale_net is not None:
            agent.scale_net = agent.scale_net.with_params(
                _step_net(agent, "scale", agent.scale_net.params, out.scale_grad)
            )
        ploss, pgrad, mean_logp = sac_policy_loss(
            agent.policy, agent.critics, batch, coef, streams["policy"]
        )
        agent.policy = agent.policy.with_params(
            _step_net(agent, "policy", agent.policy.params, pgrad)
        )
        metrics.update(
            critic_loss=out.total, td_loss=out.td_loss, sm_loss=out.sm_loss, policy_loss=ploss
        )
    elif alg in ("cql", "calql"):
        td_loss, td_grads = sac_critic_loss(
            agent.critics, agent.policy, batch, coef, loss_cfg.discount, streams["policy"]
        )
        penalty_fn = calql_penalty if alg == "calql" else cql_penalty
        penalty, pen_grads = penalty_fn(
            agent.critics, agent.policy, batch, streams["cql"], env.action_low, env.action_high
        )
        grads = [g + loss_cfg.cql_alpha * p for g, p in zip(td_grads, pen_grads)]
        _step_critics(agent, grads)
        ploss, pgrad, mean_logp = sac_policy_loss(
            agent.policy, agent.critics, batch, coef, streams["policy"]
        )
        agent.policy = agent.policy.with_params(
            _step_net(agent, "policy", agent.policy.params, pgrad)
        )
        metrics.update(
            critic_loss=td_loss + loss_cfg.cql_alpha * penalty,
            td_loss=td_loss,
            penalty=penalty,
            policy_loss=ploss,
        )
    elif alg == "iql":
        out = iql_losses(
            agent.critics,
            agent.value_net,
            agent.policy,
            batch,
            loss_cfg.expectile,
            loss_cfg.awr_temperature,
            loss_cfg.discount,
        )
        _step_critics(agent, out.member_grads)
        agent.value_net = agent.value_net.with_params(
            _step_net(agent, "value", agent.value_net.params, out.value_grad)
        )
        agent.policy = agent.policy.with_params(
            _step_net(agent, "policy", agent.policy.params, out.policy_grad)
        )
        metrics.update(
            critic_loss=out.critic_loss, value_loss=out.value_loss, policy_loss=out.policy_loss
        )
    elif alg == "td3bc":
        out = td3_losses(agent.critics, agent.policy, batch, loss_cfg.discount, streams["smooth"])
        _step_critics(agent, out.member_grads)
        ploss, pgrad = td3bc_policy_loss(agent.critics, agent.policy, batch, loss_cfg.bc_weight)
        agent.policy = agent.policy.with_params(
            _step_net(agent, "policy", agent.policy.params, pgrad)
        )
        metrics.update(critic_loss=out.critic_loss, policy_loss=ploss)
    else:  # pragma: no cover - guarded by config validation
        raise ConfigError(f"unknown offline algorithm {alg!r}")

    # Entropy-coefficient tuning for the max-entropy family, driven by
    # the same policy samples the actor update used.
    if alg in ("smac", "sac", "cql", "calql"):
        agent.log_entropy_coef = entropy_coef_update(
            agent.log_entropy_coef, mean_logp, agent.target_entropy, config.optim.entropy_lr
        )
        metrics["entropy_coef"] = float(np.exp(agent.log_entropy_coef))

    _polyak_all(agent, rate)
    return metrics


def offline_pretrain(
    config: ExperimentConfig,
    dataset: Dataset,
    score_model=None,
    seed: int | None = None,
    start: AgentCheckpoint | None = None,
    run_id: str = "offline",
):
    """Run the offline phase; returns (checkpoint, metrics rows).

    With `start` given, training resumes from that checkpoint's step and
    stream states and reproduces the unbroken run exactly.
    """
    env = dataset.env
    seed = config.seed if seed is None else seed
    if config.offline_alg == "smac" and score_model is None:
        raise ConfigError("the score-matched trainer needs a trained score model")
    if config.offline_alg == "calql" and np.any(np.isnan(dataset.mc)):
        raise ConfigError("calql needs Monte-Carlo returns in the dataset")

    if start is None:
        agent = _init_agent(config, env, seed)
    else:
        if start.offline_alg != config.offline_alg:
            raise ConfigError(
                f"checkpoint algorithm {start.offline_alg!r} != config {config.offline_alg!r}"
            )
        agent = start
    streams = {name: seeding.restore_state(agent.rng_states[name]) for name in _OFFLINE_STREAMS}

    rows = []
    log_every = min(config.eval_every, max(config.offline_steps, 1))

    def evaluate(step):
        mean, err = evaluate_policy(
            agent.policy, env, config.eval_episodes, _eval_seed(seed, "offline", step)
        )
        rows.append((run_id, "offline", step, "eval_return", mean))
        rows.append((run_id, "offline", step, "eval_stderr", err))

    if agent.step == 0:
        evaluate(0)
    for step in range(agent.step, config.offline_steps):
        batch = dataset.sample_batch(config.offline_batch, streams["batch"])
        try:
            metrics = _offline_update(config, env, agent, batch, streams, score_model)
        except NumericError as exc:
            raise NumericError(f"offline step {step}: {exc}") from None
        agent.step = step + 1
        if agent.step % log_every == 0 or agent.step == config.offline_steps:
            for name, value in metrics.items():
                rows.append((run_id, "offline", agent.step, name, float(value)))
            evaluate(agent.step)
    agent.rng_states = {name: seeding.capture_state(rng) for name, rng in streams.items()}
    return agent, rows


def _eval_seed(seed: int, phase: str, step: int) -> int:
    return int(seeding.stream(seed, f"eval-{phase}-{step}").integers(0, 2**31 - 1))


# ----------------------------------------------------------------------
# Warm start and online fine-tuning
# ----------------------------------------------------------------------


def warm_start(agent: AgentCheckpoint, env: EnvSpec, count: int, seed: int, capacity=None) -> ReplayBuffer:
    """Fill a fresh replay buffer with `count` on-policy transitions from
    the frozen pre-trained policy (stochastic samples)."""
    if count < 1:
        raise ValueError("count must be positive")
    rng = seeding.stream(seed, "warmstart")
    buffer = ReplayBuffer(capacity=capacity)
    episode = 0
    while buffer.size < count:
        state = env_reset(env, rng)
        for t in range(env.horizon):
            action, _, _ = agent.policy.sample(state[None, :], rng)
            action = np.clip(action[0], env.action_low, env.action_high)
            nxt, reward, done = env_step(env, state, action)
            buffer.push(Transition(s=state, a=action, r=reward, s2=nxt, done=done, traj_id=episode, t=t))
            state = nxt
            if buffer.size >= count or done:
                break
        episode += 1
    return buffer


def _explore_action(policy, env, state, online_alg, rng):
    if online_alg in ("td3", "td3bc"):
        mean = policy.mean_action(state[None, :])[0]
        half = 0.5 * (env.action_high - env.action_low)
        noisy = mean + TD3_EXPLORE_STD * half * rng.standard_normal(env.action_dim)
        return np.clip(noisy, env.action_low, env.action_high)
    action, _, _ = policy.sample(state[None, :], rng)
    return np.clip(action[0], env.action_low, env.action_high)


def _online_update(config, env, agent, batch, streams):
    loss_cfg = config.loss
    alg = config.online_alg
    coef = float(np.exp(agent.log_entropy_coef))
    metrics = {}
    if alg == "sac":
        closs, cgrads = sac_critic_loss(
            agent.critics, agent.policy, batch, coef, loss_cfg.discount, streams["policy"]
        )
        _step_critics(agent, cgrads)
        ploss, pgrad, mean_logp = sac_policy_loss(
            agent.policy, agent.critics, batch, coef, streams["policy"]
        )
        agent.policy = agent.policy.with_params(
            _step_net(agent, "policy", agent.policy.params, pgrad)
        )
        agent.log_entropy_coef = entropy_coef_update(
            agent.log_entropy_coef, mean_logp, agent.target_entropy, config.optim.entropy_lr
        )
        metrics.update(
            critic_loss=closs, policy_loss=ploss, entropy_coef=float(np.exp(agent.log_entropy_coef))
        )
    elif alg == "td3":
        out = td3_losses(agent.critics, agent.policy, batch, loss_cfg.discount, streams["smooth"])
        _step_critics(agent, out.member_grads)
        agent.policy = agent.policy.with_params(
            _step_net(agent, "policy", agent.policy.params, out.policy_grad)
        )
        metrics.update(critic_loss=out.critic_loss, policy_loss=out.policy_loss)
    elif alg == "td3bc":
        out = td3_losses(agent.critics, agent.policy, batch, loss_cfg.discount, streams["smooth"])
        _step_critics(agent, out.member_grads)
        ploss, pgrad = td3bc_policy_loss(agent.critics, agent.policy, batch, loss_cfg.bc_weight)
        agent.policy = agent.policy.with_params(
            _step_net(agent, "policy", agent.policy.params, pgrad)
        )
        metrics.update(critic_loss=out.critic_loss, policy_loss=ploss)
    elif alg == "awr":
        # Policy-evaluation critic (no entropy bonus) plus advantage-
        # weighted regression for the actor.
        closs, cgrads = sac_critic_loss(
            agent.critics, agent.policy, batch, 0.0, loss_cfg.discount, streams["policy"]
        )
        _step_critics(agent, cgrads)
        ploss, pgrad = awr_policy_loss(
            agent.critics, agent.policy, batch, loss_cfg.awr_temperature, streams["awr"]
        )
        agent.policy = agent.policy.with_params(
            _step_net(agent, "policy", agent.policy.params, pgrad)
        )
        metrics.update(critic_loss=closs, policy_loss=ploss)
    else:  # pragma: no cover
        raise ConfigError(f"unknown online algorithm {alg!r}")
    _polyak_all(agent, config.optim.target_update_rate)
    return metrics


def online_finetune(
    agent: AgentCheckpoint,
    config: ExperimentConfig,
    dataset: Dataset,
    env: EnvSpec,
    seed: int | None = None,
    run_id: str = "online",
    buffer: ReplayBuffer | None = None,
):
    """Fine-tune a pre-trained agent with the configured online algorithm.

    Loop: act in the environment with the current policy, push the
    transition, draw a mixed dataset/replay batch, take one gradient
    step, and evaluate every `eval_every` steps.  Also reports the
    stable-transfer statistic: the first online evaluation minus the
    pre-fine-tuning evaluation.
    """
    seed = config.seed if seed is None else seed
    if buffer is None:
        buffer = warm_start(agent, env, config.warm_start_count, seed, config.replay_capacity)
    # The online algorithm is a different optimization problem, so it
    # starts from fresh optimizer moments under the configured rule.
    agent.opt_states = {
        "policy": init_opt_state(config.optimizer, agent.policy.params.values.size, config.optim.policy_lr)
    }
    for i, member in enumerate(agent.critics.members):
        agent.opt_states[f"critic{i}"] = init_opt_state(
            config.optimizer, member.values.size, config.optim.critic_lr
        )
    streams = {
        name: seeding.stream(seed, f"online-{name}")
        for name in ("env", "explore", "batch", "policy", "smooth", "awr")
    }
    rows = []
    evals = []

    def evaluate(step):
        mean, err = evaluate_policy(
            agent.policy, env, config.eval_episodes, _eval_seed(seed, "online", step)
        )
        evals.append((step, mean))
        rows.append((run_id, "online", step, "eval_return", mean))
        rows.append((run_id, "online", step, "eval_stderr", err))

    evaluate(0)
    state = env_reset(env, streams["env"])
    episode, t_in_ep = 0, 0
    log_every = min(config.eval_every, max(config.online_steps, 1))
    for step in range(config.online_steps):
        action = _explore_action(agent.policy, env, state, config.online_alg, streams["explore"])
        nxt, reward, done = env_step(env, state, action)
        buffer.push(
            Transition(s=state, a=action, r=reward, s2=nxt, done=done, traj_id=episode, t=t_in_ep)
        )
        state = nxt
        t_in_ep += 1
        if done or t_in_ep >= env.horizon:
            state = env_reset(env, streams["env"])
            episode += 1
            t_in_ep = 0
        batch = stack_batch(
            mixed_batch(dataset, buffer, config.online_batch, config.mix, streams["batch"])
        )
        try:
            metrics = _online_update(config, env, agent, batch, streams)
        except NumericError as exc:
            raise NumericError(f"online step {step}: {exc}") from None
        if (step + 1) % log_every == 0 or step + 1 == config.online_steps:
            for name, value in metrics.items():
                rows.append((run_id, "online", step + 1, name, float(value)))
            evaluate(step + 1)
    if len(evals) > 1:
        rows.append((run_id, "online", evals[-1][0], "stable_transfer_gap", evals[1][1] - evals[0][1]))
    return agent, rows


# ----------------------------------------------------------------------
# Metrics CSV
# ----------------------------------------------------------------------

METRICS_HEADER = "run_id,phase,step,metric,value"


def write_metrics_csv(rows, path):
    lines = [METRICS_HEADER]
    for run_id, phase, step, metric, value in rows:
        lines.append(f"{run_id},{phase},{step},{metric},{format(float(value), '.17g')}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_metrics_csv(path):
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != METRICS_HEADER:
            raise FormatError(f"unexpected metrics header {header!r}", line=1)
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise FormatError("metrics row needs 5 columns", line=lineno)
            rows.append((parts[0], parts[1], int(parts[2]), parts[3], float(parts[4])))
    return rows
