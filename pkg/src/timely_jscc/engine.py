"""Discrete-event simulation of the sample -> buffer -> encode -> channel -> decode loop.

The :class:`LinkEnv` advances time between decision epochs. A decision happens
when the channel is idle and the single-slot buffer holds a sample; the policy
picks a code length, the image is coded and sent, and the next epoch begins at
the reception instant ``t_recv = t_start + K / baud``.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional, Sequence

import numpy as np

from .channel import IDLE, AvailabilityChain, GammaSchedule, db_to_linear, tx_delay
from .codec import DctCodec, ParametricRdModel, SurrogateCodec, load_rd_table, profile_image
from .metrics import VoiParams, time_average_voi, voi
from .policy import (ActionSpace, AgentPolicy, DivergenceError, FixedPolicy, MdpState, PpoAgent,
                     PpoConfig, RolloutBuffer, ppo_update)
from .source import PeriodicSource, SingleSlotBuffer, synthetic_corpus

log = logging.getLogger(__name__)


@dataclass
class SimConfig:
    Ts: float = 0.5
    horizon: float = 64.0              # seconds, for evaluation episodes
    decisions: int = 256               # decisions per training episode
    baud: float = 1000.0
    gamma_db: float = 7.0
    gamma_schedule: str = "fixed"      # fixed | random_walk
    gamma_lo: float = 1.0
    gamma_hi: float = 13.0
    gamma_step: float = 1.0
    rho: float = 0.1
    log_base: str = "natural"
    d_min: float = 27.0
    lam: float = 0.1
    dual_ascent: bool = False
    dual_step: float = 0.003
    dual_kp: float = 0.03              # proportional damping on the dual update
    codec: str = "surrogate"           # surrogate | dct
    levels: tuple = ActionSpace().levels
    image_height: int = 32
    image_width: int = 32
    image_channels: int = 3
    dataset_size: int = 64
    image_dir: str = ""
    shuffle: bool = False
    rd_table: str = ""
    p_floor: float = 18.0
    alpha: float = 6.0
    beta: float = 4.0
    jitter: float = 1.0
    profile_trials: int = 8
    p_idle_to_busy: float = 0.0
    p_busy_to_idle: float = 1.0
    check_interval: float = 0.0        # 0 means Ts / 10
    seed: int = 0

    def __post_init__(self):
        self.levels = tuple(float(x) for x in self.levels)
        ActionSpace(self.levels)
        VoiParams(self.rho, self.log_base)
        AvailabilityChain(self.p_idle_to_busy, self.p_busy_to_idle)
        if not self.Ts > 0:
            raise ValueError("Ts must be positive")
        if not self.horizon > 0 or self.decisions < 1:
            raise ValueError("horizon and decisions must be positive")
        if not self.baud > 0:
            raise ValueError("baud must be positive")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.codec not in ("surrogate", "dct"):
            raise ValueError(f"unknown codec {self.codec!r}")
        if self.gamma_schedule not in ("fixed", "random_walk"):
            raise ValueError(f"unknown gamma schedule {self.gamma_schedule!r}")
        if self.d_min < 0:
            warnings.warn(f"d_min={self.d_min} dB is below 0 dB; the quality constraint is vacuous")

    @property
    def space(self) -> ActionSpace:
        return ActionSpace(self.levels)

    @property
    def voi_params(self) -> VoiParams:
        return VoiParams(self.rho, self.log_base)

    @property
    def image_shape(self) -> tuple:
        return (self.image_height, self.image_width, self.image_channels)

    def replace(self, **kw) -> "SimConfig":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(kw)
        return SimConfig(**d)


@dataclass
class TraceRecord:
    decision: int
    u: float
    t_start: float
    t_recv: float
    eta: float
    K: int
    delay: float
    aoi: float
    voi: float
    psnr: float
    reward: float
    lam: float
    gamma_db: float = 0.0
    image_id: int = 0
    discarded: int = 0      # samples evicted from the buffer since the previous decision

    @property
    def wait(self) -> float:
        return self.t_start - self.u


def reward(voi_now: float, psnr_db: float, lam: float, d_min: float) -> float:
    """Lagrangian per-step reward: VoI plus weighted PSNR slack."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    return voi_now + lam * (psnr_db - d_min)


def build_codec(cfg: SimConfig):
    if cfg.codec == "dct":
        return DctCodec()
    model = load_rd_table(cfg.rd_table) if cfg.rd_table else ParametricRdModel(cfg.p_floor, cfg.alpha, cfg.beta)
    return SurrogateCodec(model, cfg.image_shape, cfg.jitter)


def build_dataset(cfg: SimConfig):
    """Image seeds for the surrogate codec, pixel arrays for the DCT codec."""
    if cfg.codec == "surrogate":
        return list(range(cfg.seed * 100_003, cfg.seed * 100_003 + cfg.dataset_size))
    if cfg.image_dir:
        from .cli_io import load_image_dir
        return [img for img, _ in load_image_dir(cfg.image_dir)]
    return synthetic_corpus(cfg.dataset_size, cfg.image_height, cfg.image_width, cfg.image_channels, seed=cfg.seed)


class LinkEnv:
    """Single link, single source. ``reset`` then alternate ``state`` / ``step``."""

    def __init__(self, cfg: SimConfig, dataset=None, codec=None):
        self.cfg = cfg
        self.space = cfg.space
        self.codec = codec if codec is not None else build_codec(cfg)
        self.dataset = dataset if dataset is not None else build_dataset(cfg)
        self.source = PeriodicSource(self.dataset, cfg.Ts, cfg.shuffle, cfg.seed)
        self.voi_params = cfg.voi_params
        self.lam = cfg.lam
        self.check_interval = cfg.check_interval or cfg.Ts / 10.0
        self._profiles: dict = {}
        self.reset(cfg.seed)

    def reset(self, seed) -> MdpState:
        ss = np.random.SeedSequence(seed)
        noise_ss, avail_ss, gamma_ss = ss.spawn(3)
        self.noise_rng = np.random.default_rng(noise_ss)
        self.avail_rng = np.random.default_rng(avail_ss)
        self.schedule = GammaSchedule(self.cfg.gamma_schedule, self.cfg.gamma_db, self.cfg.gamma_lo,
                                      self.cfg.gamma_hi, self.cfg.gamma_step,
                                      seed=int(gamma_ss.generate_state(1)[0]))
        self.chain = AvailabilityChain(self.cfg.p_idle_to_busy, self.cfg.p_busy_to_idle)
        self.checks = 0
        self.buffer = SingleSlotBuffer()
        self.t = 0.0
        self.next_n = 0
        self.decision = 0
        self.discarded = 0
        self.last_u: Optional[float] = None
        self.psnr_prev = self.cfg.d_min
        self._prepare()
        return self.state

    # --- event handling ---------------------------------------------------------------
    def _admit(self):
        while self.next_n * self.cfg.Ts <= self.t:
            rec = self.source.sample_at(self.next_n)
            if self.buffer.offer(rec) is not None:
                self.discarded += 1
            self.next_n += 1

    def _channel_idle(self) -> bool:
        while self.checks * self.check_interval <= self.t:
            self.chain.step(self.avail_rng)
            self.checks += 1
        return self.chain.state == IDLE

    def _prepare(self):
        """Advance time to the next decision epoch and build its state."""
        while True:
            self._admit()
            if self.buffer.occupant is None:
                self.t = self.next_n * self.cfg.Ts
                continue
            if not self._channel_idle():
                self.t = self.checks * self.check_interval
                continue
            break
        sample = self.buffer.occupant
        self.gamma_db = self.schedule.next()
        self.gamma_lin = db_to_linear(self.gamma_db)
        image = self.source.image(sample)
        profile = self.profile(sample.image_id, image, self.gamma_db)
        voi_now = 0.0 if self.last_u is None else voi(self.gamma_lin, self.voi_params, self.t - self.last_u)
        self.state = MdpState(voi_now, self.psnr_prev, sample.generation_time, profile.mu, self.t, profile)

    def profile(self, image_id, image, gamma_db):
        key = (image_id, gamma_db)
        if key not in self._profiles:
            rng = np.random.default_rng([self.cfg.seed, image_id, 7])
            self._profiles[key] = profile_image(self.codec, image, gamma_db, self.space.levels,
                                                self.cfg.profile_trials, rng)
        return self._profiles[key]

    def step(self, action: int) -> tuple[TraceRecord, float]:
        if not 0 <= action < self.space.size:
            raise IndexError(f"action {action} outside 0..{self.space.size - 1}")
        sample = self.buffer.take()
        eta = self.space[action]
        image = self.source.image(sample)
        psnr_db, K = self.codec.roundtrip(image, self.gamma_db, eta, self.noise_rng)
        delay = tx_delay(K, self.cfg.baud)
        t_start = self.t
        t_recv = t_start + delay
        age = t_recv - sample.generation_time
        v = voi(self.gamma_lin, self.voi_params, age)
        r = reward(v, psnr_db, self.lam, self.cfg.d_min)
        rec = TraceRecord(self.decision, sample.generation_time, t_start, t_recv, eta, K, delay, age, v,
                          psnr_db, r, self.lam, self.gamma_db, sample.image_id, self.discarded)
        self.discarded = 0
        self.decision += 1
        self.t = t_recv
        self.last_u = sample.generation_time
        self.psnr_prev = psnr_db
        self._prepare()
        return rec, r


def run_episode(cfg: SimConfig, policy, seed=None, decisions: Optional[int] = None,
                horizon: Optional[float] = None, env: Optional[LinkEnv] = None) -> list[TraceRecord]:
    """Simulate until ``decisions`` epochs or wall-clock ``horizon`` (default: cfg.horizon).

    Only transmissions received by the horizon are recorded.
    """
    seed = cfg.seed if seed is None else seed
    env = env if env is not None else LinkEnv(cfg)
    state = env.reset(seed)
    policy_rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(4)[3])
    if decisions is None and horizon is None:
        horizon = cfg.horizon
    trace = []
    while True:
        if decisions is not None and len(trace) >= decisions:
            break
        if horizon is not None and state.now >= horizon:
            break
        a = policy.select(state, policy_rng)
        rec, _ = env.step(a)
        if horizon is not None and rec.t_recv > horizon:
            break
        trace.append(rec)
        state = env.state
    if not trace:
        warnings.warn("no transmission completed within the horizon")
    return trace


def trace_updates(trace: Sequence[TraceRecord]) -> list[tuple[float, float]]:
    return [(r.t_recv, r.u) for r in trace]


def summarize(traces: Sequence[Sequence[TraceRecord]], cfg: SimConfig, horizon: float) -> dict:
    recs = [r for tr in traces for r in tr]
    vp = cfg.voi_params
    time_avg = []
    for tr in traces:
        gam = db_to_linear(cfg.gamma_db) if cfg.gamma_schedule == "fixed" else [db_to_linear(r.gamma_db) for r in tr]
        time_avg.append(time_average_voi(trace_updates(tr), horizon, vp, gam))
    hist = np.bincount([cfg.levels.index(r.eta) for r in recs], minlength=len(cfg.levels)) if recs else \
        np.zeros(len(cfg.levels), dtype=int)
    avg_psnr = float(np.mean([r.psnr for r in recs])) if recs else float("nan")
    return {
        "avg_voi_time": float(np.mean(time_avg)),
        "avg_voi": float(np.mean([r.voi for r in recs])) if recs else 0.0,
        "avg_psnr": avg_psnr,
        "avg_reward": float(np.mean([r.reward for r in recs])) if recs else float("nan"),
        "constraint_ok": bool(avg_psnr >= cfg.d_min),
        "histogram": hist.tolist(),
        "decisions": len(recs),
    }


def episode_seeds(seed: int, episodes: int) -> list[int]:
    """Disjoint per-episode seeds derived from one master seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence([seed, 1]).spawn(episodes)]


def evaluate(cfg: SimConfig, policy, episodes: int = 4, seed: Optional[int] = None,
             horizon: Optional[float] = None, env: Optional[LinkEnv] = None) -> dict:
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    horizon = cfg.horizon if horizon is None else horizon
    seed = cfg.seed if seed is None else seed
    env = env if env is not None else LinkEnv(cfg)
    traces = [run_episode(cfg, policy, s, horizon=horizon, env=env) for s in episode_seeds(seed, episodes)]
    out = summarize(traces, cfg, horizon)
    out["policy"] = repr(policy)
    return out


def evaluate_fixed(cfg: SimConfig, episodes: int = 4, seed: Optional[int] = None, env=None) -> list[dict]:
    env = env if env is not None else LinkEnv(cfg)
    return [evaluate(cfg, FixedPolicy(i, cfg.space), episodes, seed, env=env) for i in range(len(cfg.levels))]


# --- training -----------------------------------------------------------------------------

@dataclass
class TrainResult:
    agent: PpoAgent
    curves: list = field(default_factory=list)
    lam: float = 0.0
    steps: int = 0


def train(cfg: SimConfig, ppo: Optional[PpoConfig] = None, total_steps: int = 100_000, seed: Optional[int] = None,
          env: Optional[LinkEnv] = None, callback: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """PPO on the link MDP; updates whenever the rollout buffer fills.

    With ``cfg.dual_ascent`` the reward weight follows
    ``lam <- max(0, lam - dual_step * (window mean PSNR - d_min))`` after each update,
    optionally minus ``dual_kp`` times the current slack (a damping term).
    """
    ppo = ppo or PpoConfig()
    seed = cfg.seed if seed is None else seed
    env = env if env is not None else LinkEnv(cfg)
    env.lam = cfg.lam
    agent = PpoAgent(cfg.space.size, ppo, seed=seed, period=cfg.horizon)
    act_rng, upd_rng = (np.random.default_rng(s) for s in np.random.SeedSequence([seed, 2]).spawn(2))
    ep_seeds = np.random.SeedSequence([seed, 3])
    buf = RolloutBuffer(ppo.rollout)
    episode = 0

    def next_episode_seed():
        return int(ep_seeds.spawn(1)[0].generate_state(1)[0])

    state = env.reset(next_episode_seed())
    window_psnr, window_voi = [], []
    curves = []
    lam_int = cfg.lam
    for step in range(total_steps):
        a, logp, v, obs = agent.act(state, act_rng, "sample", update_norm=True)
        rec, r = env.step(a)
        window_psnr.append(rec.psnr)
        window_voi.append(rec.voi)
        done = env.decision >= cfg.decisions
        boot = agent.value(agent.observe(env.state)) if done else 0.0
        buf.add(obs, a, logp, v, r, done, boot)
        if done:
            episode += 1
            state = env.reset(next_episode_seed())
        else:
            state = env.state
        if buf.full:
            last_value = agent.value(agent.observe(state))
            diag = ppo_update(agent, buf, ppo, upd_rng, last_value)
            mean_psnr = float(np.mean(window_psnr))
            diag.update(step=step + 1, lam=env.lam, mean_psnr=mean_psnr, mean_voi=float(np.mean(window_voi)))
            if cfg.dual_ascent:
                slack = mean_psnr - cfg.d_min
                lam_int = max(0.0, lam_int - cfg.dual_step * slack)
                env.lam = max(0.0, lam_int - cfg.dual_kp * slack)
            window_psnr, window_voi = [], []
            curves.append(diag)
            if callback:
                callback(diag)
            log.debug("update %d: %s", len(curves), diag)
            if math.isnan(diag["mean_reward"]):
                raise DivergenceError(f"average reward is NaN at step {step + 1}")
            if diag["entropy"] < 1e-6 and step + 1 < 0.1 * total_steps:
                raise DivergenceError(f"policy entropy collapsed ({diag['entropy']:.2e}) at step {step + 1}")
    agent.norm.frozen = True
    return TrainResult(agent, curves, env.lam, total_steps)


def best_fixed_policy(cfg: SimConfig, key: str = "avg_reward", episodes: int = 4, seed=None,
                      require_constraint: bool = False):
    """Brute force over constant code lengths; returns (level index, summary) or (None, None)."""
    rows = evaluate_fixed(cfg, episodes, seed)
    best = None
    for i, row in enumerate(rows):
        if require_constraint and not row["constraint_ok"]:
            continue
        if best is None or row[key] > rows[best][key]:
            best = i
    return (best, rows[best]) if best is not None else (None, None)


def synthetic_benchmark_config(**overrides) -> SimConfig:
    """Two actions, fixed SNR, jitter-free surrogate: every stationary policy is enumerable.

    Both code lengths finish before the next sample, so each epoch starts at a
    generation instant and the per-step reward depends on the action alone.
    """
    base = dict(codec="surrogate", levels=(2 / 48, 6 / 48), jitter=0.0, gamma_db=7.0, Ts=0.5,
                baud=1000.0, rho=0.1, d_min=28.0, lam=0.2, dataset_size=8, horizon=64.0)
    base.update(overrides)
    return SimConfig(**base)


# --- d_min sweep ---------------------------------------------------------------------------

def sweep_dmin(cfg: SimConfig, d_mins: Sequence[float], ppo: Optional[PpoConfig] = None, steps: int = 100_000,
               episodes: int = 4, seed: Optional[int] = None, mode: str = "sample",
               on_row: Optional[Callable[[dict], None]] = None) -> list[dict]:
    """Average VoI against the PSNR constraint for PPO (dual ascent) and fixed baselines.

    Rows: one ``ppo`` row and one ``uniform`` row (best constraint-satisfying fixed
    length, or the longest if none satisfies) per d_min.
    """
    d_mins = list(d_mins)
    if d_mins != sorted(d_mins):
        raise ValueError("d_min values must be ascending")
    seed = cfg.seed if seed is None else seed
    rows = []
    for d in d_mins:
        c = cfg.replace(d_min=d, dual_ascent=True)
        env = LinkEnv(c)
        res = train(c, ppo, steps, seed=seed, env=env)
        learned = evaluate(c, AgentPolicy(res.agent, mode), episodes, seed, env=env)
        fixed = evaluate_fixed(c, episodes, seed, env=env)
        ok = [i for i, f in enumerate(fixed) if f["constraint_ok"]]
        pick = max(ok, key=lambda i: fixed[i]["avg_voi"]) if ok else len(fixed) - 1
        for name, summ, extra in (("ppo", learned, {"lam": res.lam}), ("uniform", fixed[pick], {"level": pick})):
            row = {"d_min": d, "policy": name, "avg_voi": summ["avg_voi"], "avg_voi_time": summ["avg_voi_time"],
                   "avg_psnr": summ["avg_psnr"], "constraint_ok": summ["constraint_ok"],
                   "histogram": summ["histogram"], **extra}
            rows.append(row)
            if on_row:
                on_row(row)
        rows[-1]["fixed"] = [{"level": i, "avg_voi": f["avg_voi"], "avg_psnr": f["avg_psnr"]} for i, f in enumerate(fixed)]
    return rows
