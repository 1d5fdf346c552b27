"""DDPG actor-critic for the retrieval policy: replay, OU noise, updates, training loop."""

from __future__ import annotations

import csv
import io
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .nn import FeedForwardNet, soft_update

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"CRLP"
CKPT_VERSION = 1
FLAG_SKIP = 1


class TrainingAborted(FloatingPointError):
    """Raised on a non-finite loss; ``last_good`` holds the networks before the bad update."""

    def __init__(self, msg, last_good=None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class TrainConfig:
    gamma: float = 0.95
    tau: float = 0.005
    batch_size: int = 16
    buffer_size: int = 1000
    lr: float = 0.001
    actor_lr: float | None = None
    episodes: int = 2000
    max_steps: int = 10
    warmup_episodes: int = 10
    d: int = 128
    early_stop: float = 0.1
    eval_rounds: int = 5
    hidden: tuple = (256, 256)
    actor_skip: bool = False
    actor_out_scale: float = 0.0
    critic_out_scale: float = 0.0
    action_squash: bool = False
    actor_anchor: float = 0.0
    encoder_anchor: float | None = None
    encoder_gain: float = 1.0
    ou_theta: float = 0.15
    ou_sigma: float = 0.1
    ou_dt: float = 1.0
    seed: int = 0

    def validate(self):
        for name in ("batch_size", "buffer_size", "lr", "max_steps", "d", "eval_rounds"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.episodes < 0 or self.warmup_episodes < 0:
            raise ValueError("episodes and warmup_episodes must be >= 0")
        if not 0 <= self.tau <= 1 or not 0 <= self.gamma <= 1:
            raise ValueError("tau and gamma must lie in [0, 1]")
        if self.batch_size > self.buffer_size:
            raise ValueError("batch_size cannot exceed buffer_size")
        if self.eval_rounds > self.max_steps:
            raise ValueError("eval_rounds cannot exceed max_steps")
        if self.actor_lr is not None and self.actor_lr <= 0:
            raise ValueError("actor_lr must be positive")
        if self.actor_out_scale < 0 or self.critic_out_scale < 0 or self.actor_anchor < 0:
            raise ValueError("out scales and actor_anchor must be >= 0")
        return self


class ReplayBuffer:
    def __init__(self, capacity, dim, seed=0):
        self.capacity = int(capacity)
        self.s = np.zeros((capacity, dim))
        self.a = np.zeros((capacity, dim))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, dim))
        self.size = 0
        self._next = 0
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return self.size

    def add(self, s, a, r, s2):
        k = self._next
        self.s[k], self.a[k], self.r[k], self.s2[k] = s, a, r, s2
        self._next = (k + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch):
        return self.rng.integers(0, self.size, size=batch)

    def sample(self, batch):
        idx = self.sample_indices(batch)
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx]


class OUNoise:
    def __init__(self, dim, theta=0.15, mu=0.0, sigma=0.1, dt=1.0, seed=0):
        self.dim = dim
        self.theta, self.mu, self.sigma, self.dt = theta, mu, sigma, dt
        self.rng = np.random.default_rng(seed)
        self.reset()

    def reset(self):
        self.x = np.zeros(self.dim)

    def sample(self):
        eps = self.rng.standard_normal(self.dim)
        self.x = self.x + self.theta * (self.mu - self.x) * self.dt + self.sigma * np.sqrt(self.dt) * eps
        return self.x


def ou_sample(noise):
    return noise.sample()


def stationary_std(theta, sigma, dt=1.0):
    """Stationary std of the discretised OU recursion (an AR(1) process)."""
    return sigma * np.sqrt(dt) / np.sqrt(1.0 - (1.0 - theta * dt) ** 2)


def make_actor(d, hidden=(256, 256), seed=0, skip=False, out_scale=0.0):
    """Actor net; ``out_scale > 0`` replaces the last layer's fan-in init bound."""
    return FeedForwardNet([2 * d, *hidden, 2 * d], seed=seed, out_scale=out_scale or None, skip=skip)


def make_critic(d, hidden=(256, 256), seed=1, out_scale=0.0):
    return FeedForwardNet([4 * d, *hidden, 1], seed=seed, out_scale=out_scale or None)


def bound_action(raw, clip=None, squash=False):
    """Hard clip to [-c, c], or the smooth ``c * tanh(raw / c)`` when ``squash``."""
    if clip is None:
        return raw
    if squash:
        return clip * np.tanh(raw / clip)
    return np.clip(raw, -clip, clip)


def actor_forward(net, s, clip=None, squash=False):
    return bound_action(net.forward(s), clip, squash)


def critic_forward(net, s, a):
    s = np.atleast_2d(s)
    a = np.atleast_2d(a)
    if s.shape[1] != a.shape[1]:
        raise ValueError("state and action widths differ")
    return net.forward(np.concatenate([s, a], axis=1))[:, 0]


def critic_loss_and_grads(critic, critic_target, actor_target, batch, gamma, clip=None, squash=False):
    s, a, r, s2 = batch
    a2 = actor_forward(actor_target, s2, clip, squash)
    y = r + gamma * critic_forward(critic_target, s2, a2)
    q, acts = critic.forward(np.concatenate([s, a], axis=1), return_cache=True)
    err = q[:, 0] - y
    loss = float(np.mean(err**2))
    grads, _ = critic.backward(acts, (2.0 * err / len(err))[:, None])
    return loss, grads


def critic_update(critic, critic_target, actor_target, batch, gamma, lr, clip=None, squash=False):
    """One Adam step on the critic's TD regression; returns the pre-step loss."""
    loss, grads = critic_loss_and_grads(critic, critic_target, actor_target, batch, gamma, clip, squash)
    if not np.isfinite(loss):
        raise TrainingAborted(f"critic loss became {loss}")
    critic.step(grads, lr)
    return loss


def actor_objective_and_grads(actor, critic, states, clip=None, squash=False, anchor=0.0):
    """Mean Q(s, pi(s)) and the gradient of the actor objective w.r.t. the actor parameters.

    The objective is mean Q, minus ``anchor * mean ||pi(s) - s||^2`` when ``anchor > 0``.
    The returned value is always the plain mean Q.
    """
    states = np.atleast_2d(states)
    d2 = states.shape[1]
    raw, a_acts = actor.forward(states, return_cache=True)
    a = bound_action(raw, clip, squash)
    q, c_acts = critic.forward(np.concatenate([states, a], axis=1), return_cache=True)
    n = len(states)
    _, g_in = critic.backward(c_acts, np.full((n, 1), 1.0 / n))
    g_a = g_in[:, d2:]
    if anchor:
        g_a = g_a - (2.0 * anchor / n) * (a - states)
    if clip is not None and squash:
        g_a = g_a * (1.0 - (a / clip) ** 2)
    elif clip is not None:
        g_a = g_a * (np.abs(raw) < clip)
    grads, _ = actor.backward(a_acts, g_a)
    return float(q.mean()), grads


def actor_update(actor, critic, states, lr, clip=None, squash=False, anchor=0.0):
    """One Adam ascent step on mean Q(s, pi(s)); returns the pre-step objective."""
    obj, grads = actor_objective_and_grads(actor, critic, states, clip, squash, anchor)
    if not np.isfinite(obj):
        raise TrainingAborted(f"actor objective became {obj}")
    actor.step(actor.flatten(grads) * -1.0, lr)
    return obj


@dataclass
class Agent:
    actor: FeedForwardNet
    critic: FeedForwardNet
    actor_target: FeedForwardNet
    critic_target: FeedForwardNet

    @classmethod
    def create(cls, d, hidden=(256, 256), seed=0, skip=False, actor_out_scale=0.0, critic_out_scale=0.0):
        actor = make_actor(d, hidden, seed=seed * 2 + 11, skip=skip, out_scale=actor_out_scale)
        critic = make_critic(d, hidden, seed=seed * 2 + 12, out_scale=critic_out_scale)
        return cls(actor, critic, actor.copy(), critic.copy())

    def nets(self):
        return [self.actor, self.critic, self.actor_target, self.critic_target]

    def copy(self):
        return Agent(*(n.copy() for n in self.nets()))


@dataclass
class TrainResult:
    agent: Agent
    updates: list = field(default_factory=list)
    episodes: list = field(default_factory=list)
    buffer_max: int = 0


def sample_pair(rng, pairs, labels):
    k = int(rng.integers(len(labels)))
    return (int(pairs[k][0]), int(pairs[k][1])), int(labels[k])


def train(config, env, pairs, labels, agent=None, log_every=0):
    """Run DDPG episodes over training pairs; behaviour actions come from the target actor plus OU noise.

    Parameter updates start once ``warmup_episodes`` episodes have been collected and then
    run once per environment step.
    """
    config.validate()
    pairs = np.asarray(pairs, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0 and config.episodes:
        raise ValueError("no training pairs")
    dim = env.state_dim
    if agent is None:
        agent = Agent.create(
            config.d, config.hidden, config.seed, config.actor_skip, config.actor_out_scale, config.critic_out_scale
        )
    rng = np.random.default_rng([config.seed, 1])
    buffer = ReplayBuffer(config.buffer_size, dim, seed=config.seed * 7 + 3)
    noise = OUNoise(dim, config.ou_theta, 0.0, config.ou_sigma, config.ou_dt, seed=config.seed * 7 + 5)
    env.config.max_steps = config.max_steps
    env.config.early_stop = config.early_stop
    clip = env.clip
    actor_lr = config.lr if config.actor_lr is None else config.actor_lr
    result = TrainResult(agent)
    last_good = agent.copy()

    for ep in range(config.episodes):
        target, y = sample_pair(rng, pairs, labels)
        state = env.reset(target, y)
        p0 = state.p_current
        noise.reset()
        ret = 0.0
        learning = ep >= config.warmup_episodes
        while not state.done:
            a = actor_forward(agent.actor_target, state.s, clip, config.action_squash) + noise.sample()
            a = np.clip(a, -clip, clip)
            nxt, r, _ = env.step(state, a)
            buffer.add(state.s, a, r, nxt.s)
            result.buffer_max = max(result.buffer_max, len(buffer))
            ret += r
            state = nxt
            if learning and len(buffer) >= config.batch_size:
                batch = buffer.sample(config.batch_size)
                try:
                    c_loss = critic_update(
                        agent.critic,
                        agent.critic_target,
                        agent.actor_target,
                        batch,
                        config.gamma,
                        config.lr,
                        clip,
                        config.action_squash,
                    )
                    a_obj = actor_update(
                        agent.actor, agent.critic, batch[0], actor_lr, clip, config.action_squash, config.actor_anchor
                    )
                except TrainingAborted as exc:
                    exc.last_good = last_good
                    raise
                soft_update(agent.critic_target, agent.critic, config.tau)
                soft_update(agent.actor_target, agent.actor, config.tau)
                result.updates.append((len(result.updates), c_loss, a_obj))
        if not all(n.all_finite() for n in agent.nets()):
            raise TrainingAborted(f"non-finite parameters after episode {ep}", last_good)
        last_good = agent.copy()
        result.episodes.append((ep, ret, p0, state.p_current, y))
        if log_every and (ep + 1) % log_every == 0:
            recent = result.episodes[-log_every:]
            logger.info("episode %d mean return %.4f", ep + 1, np.mean([e[1] for e in recent]))
    return result


# --- persistence ---------------------------------------------------------------------


def dumps_agent(agent):
    buf = io.BytesIO()
    nets = agent.nets()
    buf.write(CKPT_MAGIC + struct.pack("<BI", CKPT_VERSION, len(nets)))
    for net in nets:
        buf.write(struct.pack("<IB", len(net.sizes), FLAG_SKIP if net.skip else 0))
        buf.write(struct.pack(f"<{len(net.sizes)}I", *net.sizes))
        for p in net.params:
            buf.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return buf.getvalue()


def loads_agent(data):
    if data[:4] != CKPT_MAGIC:
        raise ValueError("not a policy checkpoint")
    if len(data) < 9:
        raise ValueError("truncated checkpoint")
    version, n_nets = struct.unpack_from("<BI", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 9
    nets = []
    for _ in range(n_nets):
        if pos + 5 > len(data):
            raise ValueError("truncated checkpoint")
        n_sizes, flags = struct.unpack_from("<IB", data, pos)
        pos += 5
        if pos + 4 * n_sizes > len(data):
            raise ValueError("truncated checkpoint")
        sizes = struct.unpack_from(f"<{n_sizes}I", data, pos)
        pos += 4 * n_sizes
        net = FeedForwardNet(sizes, seed=0, skip=bool(flags & FLAG_SKIP))
        for p in net.params:
            n = p.size
            if pos + 4 * n > len(data):
                raise ValueError("truncated checkpoint")
            p[...] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(p.shape)
            pos += 4 * n
        nets.append(net)
    if pos != len(data):
        raise ValueError("checkpoint has trailing bytes")
    return Agent(*nets)


def save_agent(agent, path):
    with open(path, "wb") as fh:
        fh.write(dumps_agent(agent))


def load_agent(path):
    with open(path, "rb") as fh:
        return loads_agent(fh.read())


def write_curves(result, update_path, episode_path):
    with open(update_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["update_idx", "critic_loss", "actor_objective"])
        w.writerows(result.updates)
    with open(episode_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "return", "p0", "p_final", "y"])
        w.writerows(result.episodes)
