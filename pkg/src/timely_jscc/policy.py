"""Code-length allocation policies: a PPO actor-critic agent and fixed baselines."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .nn import Adam, Mlp, load_checkpoint, log_softmax, save_checkpoint

DEFAULT_LEVELS = (1 / 48, 2 / 48, 3 / 48, 4 / 48, 6 / 48, 8 / 48)
OBS_DIM = 4
OBS_CLIP = 10.0


class NonFiniteStateError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ActionSpace:
    levels: tuple = DEFAULT_LEVELS

    def __post_init__(self):
        lv = tuple(float(x) for x in self.levels)
        object.__setattr__(self, "levels", lv)
        if len(lv) < 2:
            raise ValueError("action space needs at least two levels")
        if any(b <= a for a, b in zip(lv, lv[1:])):
            raise ValueError("levels must be strictly ascending")
        if not all(0 < x <= 1 for x in lv):
            raise ValueError("levels must lie in (0, 1]")

    @property
    def size(self) -> int:
        return len(self.levels)

    def __getitem__(self, i: int) -> float:
        return self.levels[i]


@dataclass
class MdpState:
    voi_now: float
    psnr_prev: float
    gen_time: float
    mu: float
    now: float = 0.0                     # decision instant
    profile: Optional[object] = None     # RdProfile of the buffered image, for heuristics

    def features(self, u_encoding: str = "relative", period: float = math.inf) -> np.ndarray:
        if u_encoding == "relative":
            u = self.now - self.gen_time
        elif u_encoding == "absolute":
            u = self.gen_time % period if math.isfinite(period) else self.gen_time
        else:
            raise ValueError(f"unknown u encoding {u_encoding!r}")
        x = np.array([self.voi_now, self.psnr_prev, u, self.mu], dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise NonFiniteStateError(f"non-finite state {x}")
        return x


class RunningNorm:
    """Per-component running mean/variance (Welford); frozen at evaluation."""

    def __init__(self, dim: int = OBS_DIM):
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)
        self.frozen = False

    def update(self, x: np.ndarray):
        if self.frozen:
            return
        self.count += 1
        d = x - self.mean
        self.mean = self.mean + d / self.count
        self.m2 = self.m2 + d * (x - self.mean)

    @property
    def var(self) -> np.ndarray:
        return self.m2 / self.count if self.count > 1 else np.ones_like(self.mean)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.clip((x - self.mean) / np.sqrt(self.var + 1e-8), -OBS_CLIP, OBS_CLIP)

    def to_dict(self) -> dict:
        return {"count": self.count, "mean": self.mean.tolist(), "m2": self.m2.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RunningNorm":
        n = cls(len(d["mean"]))
        n.count, n.mean, n.m2 = d["count"], np.array(d["mean"]), np.array(d["m2"])
        return n


@dataclass
class PpoConfig:
    clip_eps: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    epochs: int = 4
    minibatch: int = 64
    rollout: int = 2048
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    lr: float = 1e-4
    hidden: int = 64
    u_encoding: str = "relative"

    def __post_init__(self):
        if not 0 < self.clip_eps:
            raise ValueError("clip_eps must be positive")
        if not 0 <= self.gamma <= 1 or not 0 <= self.gae_lambda <= 1:
            raise ValueError("gamma and gae_lambda must lie in [0, 1]")
        if self.epochs < 0 or self.minibatch < 1 or self.rollout < 1:
            raise ValueError("epochs >= 0, minibatch >= 1 and rollout >= 1 required")
        if self.u_encoding not in ("relative", "absolute"):
            raise ValueError(f"unknown u_encoding {self.u_encoding!r}")


class RolloutBuffer:
    def __init__(self, capacity: int, obs_dim: int = OBS_DIM):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.logp = np.zeros(capacity)
        self.values = np.zeros(capacity)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity)
        # critic estimate of the successor for time-limit truncations (0 for true ends)
        self.bootstrap = np.zeros(capacity)
        self.ptr = 0

    def add(self, obs, action, logp, value, reward, done=False, bootstrap=0.0):
        if self.full:
            raise OverflowError("rollout buffer is full")
        i = self.ptr
        self.obs[i], self.actions[i], self.logp[i] = obs, action, logp
        self.values[i], self.rewards[i], self.dones[i] = value, reward, float(done)
        self.bootstrap[i] = bootstrap
        self.ptr += 1

    @property
    def full(self) -> bool:
        return self.ptr >= self.capacity

    def __len__(self):
        return self.ptr

    def clear(self):
        self.ptr = 0


def gae(rewards, values, dones, gamma: float, lam: float, last_value: float = 0.0):
    """Generalised advantage estimates and returns (backward recursion)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not rewards.shape == values.shape == dones.shape:
        raise ValueError(f"length mismatch: {rewards.shape}, {values.shape}, {dones.shape}")
    n = rewards.size
    adv = np.zeros(n)
    running = 0.0
    for t in reversed(range(n)):
        nonterminal = 1.0 - dones[t]
        next_value = last_value if t == n - 1 else values[t + 1]
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        running = delta + gamma * lam * nonterminal * running
        adv[t] = running
    return adv, adv + values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    std = adv.std()
    return (adv - adv.mean()) / (std if std > 1e-12 else 1.0)


class PpoAgent:
    """Categorical actor and scalar critic, each 4 -> 64 -> 64 -> out with tanh."""

    def __init__(self, n_actions: int, cfg: Optional[PpoConfig] = None, seed: int = 0,
                 zero_init: bool = False, period: float = math.inf):
        self.cfg = cfg or PpoConfig()
        self.n_actions = n_actions
        self.seed = seed
        self.period = period
        rng = np.random.default_rng(seed)
        h = self.cfg.hidden
        self.actor = Mlp([OBS_DIM, h, h, n_actions], "softmax", rng=rng, zero=zero_init)
        self.critic = Mlp([OBS_DIM, h, h, 1], "linear", rng=rng, zero=zero_init)
        if not zero_init:
            # small last layer keeps the initial policy close to uniform
            self.actor.params[-2] *= 0.01
            self.critic.params[-2] *= 0.1
        self.actor_opt = Adam(lr=self.cfg.lr)
        self.critic_opt = Adam(lr=self.cfg.lr)
        self.norm = RunningNorm()

    def observe(self, state: MdpState, update_norm: bool = False) -> np.ndarray:
        raw = state.features(self.cfg.u_encoding, self.period)
        if update_norm:
            self.norm.update(raw)
        return self.norm(raw)

    def distribution(self, obs: np.ndarray) -> np.ndarray:
        return self.actor(obs)

    def value(self, obs: np.ndarray) -> float:
        return float(self.critic(obs)[0])

    def act(self, state: MdpState, rng: Optional[np.random.Generator] = None, mode: str = "sample",
            update_norm: bool = False):
        """Returns (action index, log-probability, value estimate, normalised observation)."""
        obs = self.observe(state, update_norm)
        probs = self.actor(obs)
        if mode == "greedy":
            a = int(np.argmax(probs))            # first maximum: lowest index wins ties
        elif mode == "sample":
            if rng is None:
                raise ValueError("sample mode needs a random generator")
            a = int(np.searchsorted(np.cumsum(probs), rng.random() * probs.sum(), side="right"))
            a = min(a, self.n_actions - 1)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        return a, math.log(probs[a]), self.value(obs), obs

    # --- checkpoints ------------------------------------------------------------------
    def save(self, path, extra: Optional[dict] = None):
        header = {"seed": self.seed, "actor_steps": self.actor_opt.step_count,
                  "critic_steps": self.critic_opt.step_count, "n_actions": self.n_actions}
        save_checkpoint(path, {"actor": self.actor, "critic": self.critic}, header)
        sidecar = {"ppo": asdict(self.cfg), "norm": self.norm.to_dict(), "period": self.period}
        sidecar.update(extra or {})
        with open(str(path) + ".json", "w") as fh:
            json.dump(sidecar, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "PpoAgent":
        nets, header = load_checkpoint(path)
        with open(str(path) + ".json") as fh:
            side = json.load(fh)
        agent = cls(header["n_actions"], PpoConfig(**side["ppo"]), seed=header["seed"],
                    period=side.get("period", math.inf))
        agent.actor, agent.critic = nets["actor"], nets["critic"]
        agent.norm = RunningNorm.from_dict(side["norm"])
        agent.norm.frozen = True
        return agent


def _entropy(probs: np.ndarray, logp: np.ndarray) -> np.ndarray:
    return -np.sum(probs * logp, axis=-1)


def actor_loss_and_grads(agent: PpoAgent, obs, actions, old_logp, adv, clip_eps: float, entropy_coef: float):
    """Clipped surrogate loss minus entropy bonus, with analytic parameter gradients."""
    n = len(actions)
    _, cache = agent.actor.forward(obs)
    logits = cache.logits
    logp_all = log_softmax(logits)
    probs = np.exp(logp_all)
    logp = logp_all[np.arange(n), actions]
    ratio = np.exp(logp - old_logp)
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    surr = np.minimum(ratio * adv, clipped * adv)
    ent = _entropy(probs, logp_all)
    loss = -surr.mean() - entropy_coef * ent.mean()
    # unclipped branch is the active one where it attains the minimum
    active = (ratio * adv <= clipped * adv).astype(np.float64)
    d_logp = -(active * ratio * adv) / n
    onehot = np.zeros_like(logits)
    onehot[np.arange(n), actions] = 1.0
    g = d_logp[:, None] * (onehot - probs)
    # dH/dlogits_j = -p_j (log p_j + H)
    g += (entropy_coef / n) * probs * (logp_all + ent[:, None])
    grads = agent.actor.backward_logits(cache, g)
    info = {"entropy": float(ent.mean()), "approx_kl": float(np.mean(old_logp - logp)),
            "clip_frac": float(np.mean(np.abs(ratio - 1.0) > clip_eps))}
    return float(loss), grads, info


def vanilla_pg_grads(agent: PpoAgent, obs, actions, adv):
    """Gradients of -mean(adv * log pi(a|s)); the unclipped reference for PPO at ratio 1."""
    n = len(actions)
    _, cache = agent.actor.forward(obs)
    probs = np.exp(log_softmax(cache.logits))
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), actions] = 1.0
    g = -(adv / n)[:, None] * (onehot - probs)
    return agent.actor.backward_logits(cache, g)


def critic_loss_and_grads(agent: PpoAgent, obs, returns, value_coef: float):
    out, cache = agent.critic.forward(obs)
    err = out[:, 0] - returns
    loss = float(np.mean(err ** 2))
    g = (value_coef * 2.0 / len(returns)) * err[:, None]
    return loss, agent.critic.backward_logits(cache, g)


def ppo_update(agent: PpoAgent, buffer: RolloutBuffer, cfg: Optional[PpoConfig] = None,
               rng: Optional[np.random.Generator] = None, last_value: float = 0.0) -> dict:
    """Clipped-surrogate PPO epochs over a full buffer; clears the buffer."""
    cfg = cfg or agent.cfg
    if not buffer.full:
        raise ValueError(f"buffer holds {len(buffer)} of {buffer.capacity} transitions")
    rng = rng if rng is not None else np.random.default_rng(0)
    n = buffer.capacity
    rewards = buffer.rewards + cfg.gamma * buffer.bootstrap
    adv, returns = gae(rewards, buffer.values, buffer.dones, cfg.gamma, cfg.gae_lambda, last_value)
    adv_n = normalize_advantages(adv)
    stats = {"policy_loss": [], "value_loss": [], "entropy": [], "approx_kl": [], "clip_frac": []}
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            idx = perm[start : start + cfg.minibatch]
            ploss, pgrads, info = actor_loss_and_grads(
                agent, buffer.obs[idx], buffer.actions[idx], buffer.logp[idx], adv_n[idx],
                cfg.clip_eps, cfg.entropy_coef)
            vloss, vgrads = critic_loss_and_grads(agent, buffer.obs[idx], returns[idx], cfg.value_coef)
            if not (math.isfinite(ploss) and math.isfinite(vloss)):
                raise DivergenceError(f"non-finite loss (policy={ploss}, value={vloss})")
            agent.actor_opt.step(agent.actor.params, pgrads)
            agent.actor.touch()
            agent.critic_opt.step(agent.critic.params, vgrads)
            agent.critic.touch()
            stats["policy_loss"].append(ploss)
            stats["value_loss"].append(vloss)
            for k in ("entropy", "approx_kl", "clip_frac"):
                stats[k].append(info[k])
    buffer.clear()
    out = {k: float(np.mean(v)) if v else float("nan") for k, v in stats.items()}
    out["mean_reward"] = float(rewards.mean())
    out["adv_mean"] = float(adv_n.mean())
    out["adv_std"] = float(adv_n.std())
    return out


# --- baselines ------------------------------------------------------------------------------

class FixedPolicy:
    """Always the same code length."""

    def __init__(self, level: int, space: ActionSpace):
        if not 0 <= level < space.size:
            raise IndexError(f"level {level} outside 0..{space.size - 1}")
        self.level = level
        self.space = space

    def select(self, state: MdpState, rng=None) -> int:
        return self.level

    def __repr__(self):
        return f"fixed[{self.space[self.level]:.4f}]"


class ThresholdPolicy:
    """Shortest code whose profiled PSNR meets ``d_min``; the longest if none does."""

    def __init__(self, d_min: float, space: ActionSpace):
        self.d_min = d_min
        self.space = space

    def select(self, state: MdpState, rng=None) -> int:
        per_action = state.profile.per_action
        for i, eta in enumerate(self.space.levels):
            if per_action[eta] >= self.d_min:
                return i
        return self.space.size - 1

    def __repr__(self):
        return f"threshold[{self.d_min}]"


def threshold_heuristic(state: MdpState, d_min: float, space: ActionSpace) -> int:
    return ThresholdPolicy(d_min, space).select(state)


def fixed_policy(level: int, space: ActionSpace) -> FixedPolicy:
    return FixedPolicy(level, space)


class AgentPolicy:
    """Adapter so a trained agent plugs into the simulator like a baseline."""

    def __init__(self, agent: PpoAgent, mode: str = "sample"):
        self.agent = agent
        self.mode = mode

    def select(self, state: MdpState, rng=None) -> int:
        return self.agent.act(state, rng, self.mode)[0]

    def __repr__(self):
        return f"ppo[{self.mode}]"
