"""Actor-critic training loop with a bounded batch-reuse window.

One iteration: collect fresh episodes with the current policy (plus the
anomaly wrapper when the environment defines one), push them into the window,
compute advantages and critic targets once over the whole window, then run
``epochs`` rounds of (actor step, critic step) on the full window, or on
``num_minibatches`` shuffled splits of it.
"""

from __future__ import annotations

import hashlib
import json
import time
from collections import deque
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import __version__
from .approx import (Adam, CriticNet, HeadNet, PolicyNet, actor_loss, critic_loss, head_loss, one_hot,
                     save_checkpoint, sync_target)
from .correction import IsrSeries, gap_metric, rows_to_csv, trace_coefficients
from .env import DecPomdp, TabularPolicy, Trajectory, make_builtin, rollout, wrap_anomaly
from .estimators import GapStatistic, discounted_sum, event_gaps

ESTIMATORS = ("gpae_off", "gpae_on", "gae", "coma", "dae")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    env: str = "chain_gather"
    env_params: dict = field(default_factory=dict)
    estimator: str = "gpae_off"
    scheme: str | None = None  # defaults: DT for gpae_off, lambda_only otherwise
    gamma: float = 0.99
    lam: float = 0.95
    eta: float = 1.05
    beta: float = 0.5
    clip_eps: float = 0.2
    ent_coef: float = 0.01
    epochs: int = 5
    lr: float = 5e-4
    anneal_lr: bool = True
    rollout_steps: int = 256
    num_envs: int = 4
    total_timesteps: int = 100_000
    reuse: int | None = None  # defaults: 4 for gpae_off, 1 otherwise
    seed: int = 0
    normalize_adv: bool = True
    target_sync: int = 1
    width: int = 128
    eval_episodes: int = 32
    eval_every: int = 0  # iterations; 0 evaluates only at the end
    greedy_eval: bool = False
    anomaly: bool = True  # use the environment's anomaly wrapper when it has one
    num_minibatches: int = 1  # splits of the window per epoch; 1 uses the whole window

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator: {self.estimator!r} not in {ESTIMATORS}")
        if self.scheme is None:
            self.scheme = "DT" if self.estimator == "gpae_off" else "lambda_only"
        if self.reuse is None:
            self.reuse = 4 if self.estimator == "gpae_off" else 1
        checks = [
            ("gamma", 0.0 <= self.gamma < 1.0), ("lam", 0.0 < self.lam <= 1.0), ("clip_eps", self.clip_eps > 0),
            ("reuse", self.reuse >= 1), ("epochs", self.epochs >= 1), ("eta", self.eta > 0),
            ("rollout_steps", self.rollout_steps >= 1), ("total_timesteps", self.total_timesteps >= 0),
            ("target_sync", self.target_sync >= 1), ("width", self.width >= 2), ("lr", self.lr > 0),
            ("beta", 0.0 <= self.beta <= 1.0), ("num_envs", self.num_envs >= 1),
            ("num_minibatches", self.num_minibatches >= 1),
        ]
        for name, ok in checks:
            if not ok:
                raise ConfigError(f"{name}: invalid value {getattr(self, name)!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown field(s): {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


# --------------------------------------------------------------- data layout

@dataclass
class Batch:
    """Concatenated episodes; every array is indexed by global step."""

    states: np.ndarray
    obs: np.ndarray        # (N, n)
    actions: np.ndarray    # (N, n)
    rewards: np.ndarray
    logp_mu: np.ndarray    # (N, n)
    last: np.ndarray       # episode ends after this step
    events: np.ndarray
    version: int = 0
    returns: list[float] = field(default_factory=list)
    successes: list[bool] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rewards)

    @classmethod
    def from_trajectories(cls, trajs: list[Trajectory], version: int) -> "Batch":
        last = np.concatenate([np.arange(len(t)) == len(t) - 1 for t in trajs])
        return cls(
            states=np.concatenate([t.states for t in trajs]),
            obs=np.concatenate([t.observations for t in trajs]),
            actions=np.concatenate([t.actions for t in trajs]),
            rewards=np.concatenate([t.rewards for t in trajs]),
            logp_mu=np.concatenate([t.behavior_logp for t in trajs]),
            last=last,
            events=np.concatenate([t.anomaly_events for t in trajs]),
            version=version,
            returns=[float(t.rewards.sum()) for t in trajs],
            successes=[bool(t.terminal) for t in trajs],
        )

    def subset(self, idx: np.ndarray) -> "Batch":
        return Batch(*(getattr(self, k)[idx] for k in
                       ("states", "obs", "actions", "rewards", "logp_mu", "last", "events")), version=self.version)

    @staticmethod
    def concat(batches: list["Batch"]) -> "Batch":
        return Batch(
            *(np.concatenate([getattr(b, k) for b in batches]) for k in
              ("states", "obs", "actions", "rewards", "logp_mu", "last", "events")),
            version=batches[-1].version,
        )


class ReplayWindow:
    """Ring of the last ``capacity`` collection batches."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("window capacity must be >= 1")
        self.capacity = capacity
        self._batches: deque[Batch] = deque(maxlen=capacity)

    def push(self, batch: Batch):
        if self._batches and batch.version <= self._batches[-1].version:
            raise ValueError("policy-version tags must strictly increase")
        for arr in (batch.logp_mu,):
            arr.setflags(write=False)
        self._batches.append(batch)

    def __len__(self) -> int:
        return len(self._batches)

    @property
    def batches(self) -> list[Batch]:
        return list(self._batches)

    @property
    def versions(self) -> list[int]:
        return [b.version for b in self._batches]

    def merged(self) -> Batch:
        return Batch.concat(self.batches)


# ------------------------------------------------------------- environments

def policy_snapshot(net: PolicyNet) -> TabularPolicy:
    tab = net.table()
    return TabularPolicy([tab[i] for i in range(net.num_agents)], full_support=True)


def collect(model: DecPomdp, behavior: TabularPolicy, rng: np.random.Generator, steps: int,
            num_envs: int = 1) -> list[Trajectory]:
    """Whole episodes, ``num_envs`` at a time, until at least ``steps`` transitions."""
    trajs: list[Trajectory] = []
    total = 0
    while total < steps:
        for _ in range(num_envs):
            tr = rollout(model, behavior, rng)
            trajs.append(tr)
            total += len(tr)
    return trajs


@dataclass
class EvalResult:
    episodes: int
    mean_return: float | None
    success_rate: float | None

    @property
    def empty(self) -> bool:
        return self.episodes == 0


def evaluate(policy: TabularPolicy, model: DecPomdp, episodes: int, rng, greedy: bool = False) -> EvalResult:
    if episodes <= 0:
        return EvalResult(0, None, None)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    if greedy:
        tables = [np.eye(t.shape[1])[t.argmax(axis=1)] for t in policy.tables]
        policy = TabularPolicy(tables)
    rets, succ = [], []
    for _ in range(episodes):
        tr = rollout(model, policy, rng)
        rets.append(float(tr.rewards.sum()))
        succ.append(bool(tr.terminal))
    return EvalResult(episodes, float(np.mean(rets)), float(np.mean(succ)))


# ----------------------------------------------------------- the learner

@dataclass
class Targets:
    adv_raw: np.ndarray          # (N, n)
    adv: np.ndarray              # (N, n), normalized when configured
    value_targets: np.ndarray    # (N, n) for per-agent critics, (N,) for V
    probs_curr: np.ndarray       # (N, n, A) policy at iteration start
    ratios: np.ndarray           # (N, n) pi_curr / mu
    extra: dict = field(default_factory=dict)

    def subset(self, idx: np.ndarray) -> "Targets":
        return Targets(self.adv_raw[idx], self.adv[idx], self.value_targets[idx], self.probs_curr[idx],
                       self.ratios[idx])


def episode_decay(last: np.ndarray, factor: np.ndarray) -> np.ndarray:
    """Decay array for ``discounted_sum`` that does not cross episode boundaries."""
    d = np.array(factor, dtype=float, copy=True)
    starts = np.roll(last, 1)
    starts[0] = True
    d[starts] = 0.0
    return d


def next_values(values: np.ndarray, last: np.ndarray) -> np.ndarray:
    nxt = np.zeros_like(values)
    nxt[:-1] = values[1:]
    nxt[last] = 0.0
    return nxt


class Learner:
    def __init__(self, cfg: TrainConfig, model: DecPomdp):
        self.cfg, self.model = cfg, model
        counts = set(model.action_counts)
        if len(counts) != 1:
            raise ConfigError("env: parameter-shared networks need equal action counts for all agents")
        self.A = counts.pop()
        n, S = model.num_agents, model.num_states
        obs_dim = model.observation[0].shape[1]
        w = cfg.width
        seed = cfg.seed
        self.policy = PolicyNet(obs_dim, n, self.A, w, seed=seed * 7 + 1)
        self.nets: dict = {"policy": self.policy}
        est = cfg.estimator
        if est.startswith("gpae"):
            self.critic = CriticNet(S, n, self.A, w, seed=seed * 7 + 2)
            self.target = self.critic.copy()
            self.nets["critic"] = self.critic
        elif est == "gae":
            self.critic = HeadNet(S, 1, w, seed=seed * 7 + 2, name="v")
            self.target = self.critic.copy()
            self.nets["value"] = self.critic
        elif est == "dae":
            self.critic = HeadNet(S, 1, w, seed=seed * 7 + 2, name="v")
            self.target = self.critic.copy()
            self.reward_net = HeadNet(S + n + n * self.A, self.A, w, seed=seed * 7 + 3, name="r")
            self.nets.update(value=self.critic, reward=self.reward_net)
        elif est == "coma":
            self.critic = HeadNet(S + n + n * self.A, self.A, w, seed=seed * 7 + 2, name="q")
            self.target = self.critic.copy()
            self.nets["q"] = self.critic
        self.opts = {k: Adam(v.params, cfg.lr, anneal=cfg.anneal_lr) for k, v in self.nets.items()}

    # -- feature builders
    def _state_x(self, b: Batch) -> np.ndarray:
        return one_hot(b.states, self.model.num_states)

    def _pair_x(self, b: Batch, agent: int) -> np.ndarray:
        """[state, agent, a^{-i}] input for the Q and reward heads."""
        n = self.model.num_agents
        acts = one_hot(b.actions, self.A)
        acts[:, agent] = 0.0
        return np.concatenate([one_hot(b.states, self.model.num_states),
                               one_hot(np.full(len(b), agent), n), acts.reshape(len(b), -1)], axis=1)

    def policy_probs(self, b: Batch) -> np.ndarray:
        n = self.model.num_agents
        out = np.empty((len(b), n, self.A))
        for i in range(n):
            out[:, i], _ = self.policy.forward(b.obs[:, i], np.full(len(b), i))
        return out

    def critic_inputs(self, b: Batch, probs: np.ndarray, agent: int):
        return self.critic.encode(b.states, np.full(len(b), agent), b.actions, probs[:, agent])

    def eq_values(self, net: CriticNet, b: Batch, probs: np.ndarray) -> np.ndarray:
        n = self.model.num_agents
        out = np.empty((len(b), n))
        for i in range(n):
            out[:, i], _ = net.forward(*self.critic_inputs(b, probs, i))
        return out

    # -- targets
    def compute_targets(self, b: Batch) -> Targets:
        cfg, n = self.cfg, self.model.num_agents
        probs = self.policy_probs(b)
        rows = np.arange(len(b))
        taken = np.stack([probs[rows, i, b.actions[:, i]] for i in range(n)], axis=1)
        ratios = taken / np.exp(b.logp_mu)
        g, lam = cfg.gamma, cfg.lam
        extra: dict = {}
        if cfg.estimator.startswith("gpae"):
            eq = self.eq_values(self.target, b, probs)
            delta = b.rewards[:, None] + g * next_values(eq, b.last) - eq
            isr = IsrSeries.from_ratios(ratios)
            c = trace_coefficients(isr.individual, isr.complement, np.broadcast_to(isr.joint[:, None], ratios.shape),
                                   cfg.scheme, lam, cfg.eta)
            adv = discounted_sum(delta, episode_decay(b.last, g * c))
            vt = eq + np.minimum(1.0, ratios) * adv
            extra.update(eq=eq, delta=delta, traces=c, isr=isr)
        elif cfg.estimator == "gae":
            v = self.target.forward(self._state_x(b))[0][:, 0]
            delta = b.rewards + g * next_values(v, b.last) - v
            a = discounted_sum(delta, episode_decay(b.last, np.full(len(b), g * lam)))
            adv = np.repeat(a[:, None], n, axis=1)
            vt = v + a
        elif cfg.estimator == "dae":
            v = self.target.forward(self._state_x(b))[0][:, 0]
            er = np.empty((len(b), n))
            for i in range(n):
                r_hat = self.reward_net.forward(self._pair_x(b, i))[0]
                er[:, i] = (probs[:, i] * r_hat).sum(axis=1)
            delta = b.rewards + g * next_values(v, b.last) - v
            gae_part = discounted_sum(delta, episode_decay(b.last, np.full(len(b), g * lam)))
            d = discounted_sum(er, episode_decay(b.last, np.full((len(b), n), g * lam * cfg.beta)))
            adv = gae_part[:, None] - cfg.beta * d
            vt = v + gae_part
        else:  # coma
            q_taken = np.empty((len(b), n))
            base = np.empty((len(b), n))
            for i in range(n):
                q = self.target.forward(self._pair_x(b, i))[0]
                q_taken[:, i] = q[rows, b.actions[:, i]]
                base[:, i] = (probs[:, i] * q).sum(axis=1)
            adv = q_taken - base
            # SARSA(lambda) regression targets for the joint Q head
            qd = b.rewards[:, None] + g * next_values(q_taken, b.last) - q_taken
            vt = q_taken + discounted_sum(qd, episode_decay(b.last, np.full((len(b), n), g * lam)))
        adv_n = adv
        if cfg.normalize_adv:
            adv_n = (adv - adv.mean()) / (adv.std() + 1e-8)
        return Targets(adv, adv_n, vt, probs, ratios, extra)

    # -- updates
    def actor_update(self, b: Batch, tg: Targets) -> tuple[float, float]:
        n = self.model.num_agents
        N = len(b)
        x = self.policy.features(b.obs.T.reshape(-1), np.repeat(np.arange(n), N))
        acts = b.actions.T.reshape(-1)
        logp_mu = b.logp_mu.T.reshape(-1)
        ratio_old = tg.ratios.T.reshape(-1)
        adv = tg.adv.T.reshape(-1)
        res = actor_loss(self.policy, x, acts, logp_mu, ratio_old, adv, self.cfg.clip_eps, self.cfg.ent_coef)
        self.opts["policy"].step(self.policy.params, res.grads)
        return res.loss, res.info["entropy"]

    def critic_update(self, b: Batch, tg: Targets) -> float:
        n, N = self.model.num_agents, len(b)
        est = self.cfg.estimator
        if est.startswith("gpae"):
            ins = [self.critic_inputs(b, tg.probs_curr, i) for i in range(n)]
            xs, xo, xp = (np.concatenate([c[k] for c in ins]) for k in range(3))
            res = critic_loss(self.critic, xs, xo, xp, tg.value_targets.T.reshape(-1))
            self.opts["critic"].step(self.critic.params, res.grads)
            return res.loss
        if est in ("gae", "dae"):
            res = head_loss(self.critic, self._state_x(b), tg.value_targets)
            self.opts["value"].step(self.critic.params, res.grads)
            loss = res.loss
            if est == "dae":
                x = np.concatenate([self._pair_x(b, i) for i in range(n)])
                rr = head_loss(self.reward_net, x, np.tile(b.rewards, n), b.actions.T.reshape(-1))
                self.opts["reward"].step(self.reward_net.params, rr.grads)
            return loss
        x = np.concatenate([self._pair_x(b, i) for i in range(n)])
        res = head_loss(self.critic, x, tg.value_targets.T.reshape(-1), b.actions.T.reshape(-1))
        self.opts["q"].step(self.critic.params, res.grads)
        return res.loss

    def set_progress(self, frac: float):
        for opt in self.opts.values():
            opt.progress = frac


# --------------------------------------------------------------- metrics

METRIC_COLUMNS = ("iteration", "env_steps", "mean_return", "success_rate", "actor_loss", "critic_loss",
                  "entropy", "delta_a", "delta_a_events", "dc_ST", "dc_IT", "dc_DT", "eval_return",
                  "eval_success", "wall_clock")


@dataclass
class TrainResult:
    config: TrainConfig
    metrics: list[dict]
    learner: Learner | None
    final_eval: EvalResult
    delta_a: GapStatistic
    error: str = ""

    def metrics_csv(self) -> str:
        meta = f"config={self.config.digest()} version={__version__}"
        return rows_to_csv(self.metrics, METRIC_COLUMNS, meta)


def _gap_for_batch(ratios: np.ndarray, last: np.ndarray, cfg: TrainConfig) -> dict:
    """Delta c for agent 0 per scheme, averaged over the batch's episodes."""
    out = {}
    if ratios.shape[1] < 2:
        return out
    ends = np.flatnonzero(last) + 1
    pieces = np.split(np.arange(len(last)), ends[:-1])
    isrs = [IsrSeries.from_ratios(ratios[p]) for p in pieces if len(p)]
    from .correction import truncate
    for sch in ("ST", "IT", "DT"):
        ws = [truncate(s, sch, cfg.lam, cfg.eta) for s in isrs]
        out[f"dc_{sch}"] = gap_metric(isrs, ws, 0).gap
    return out


def train(cfg: TrainConfig, deterministic: bool = False, model: DecPomdp | None = None) -> TrainResult:
    """Run the full loop.  ``deterministic`` blanks the wall-clock column."""
    built = make_builtin(cfg.env, cfg.env_params) if model is None else None
    model = built.model if model is None else model
    anomaly = built.anomaly if (built is not None and cfg.anomaly) else None
    rng = np.random.default_rng(cfg.seed)
    learner = Learner(cfg, model)
    window = ReplayWindow(cfg.reuse)
    metrics: list[dict] = []
    gaps: list[np.ndarray] = []
    steps = 0
    it = 0
    t0 = time.perf_counter()
    eval_rng = np.random.default_rng([cfg.seed, 1])
    try:
        while steps < cfg.total_timesteps:
            it += 1
            learner.set_progress(steps / cfg.total_timesteps)
            snap = policy_snapshot(learner.policy)
            behavior = wrap_anomaly(snap, anomaly) if anomaly is not None else snap
            trajs = collect(model, behavior, rng, cfg.rollout_steps, cfg.num_envs)
            fresh = Batch.from_trajectories(trajs, it)
            window.push(fresh)
            steps += len(fresh)
            b = window.merged()
            tg = learner.compute_targets(b)
            n_fresh = len(fresh)
            rec = {"iteration": it, "env_steps": steps, "mean_return": float(np.mean(fresh.returns)),
                   "success_rate": float(np.mean(fresh.successes))}
            if anomaly is not None:
                ev = fresh.events
                g = event_gaps(tg.adv_raw[-n_fresh:], ev, anomaly.agent_index) if ev.any() else np.zeros(0)
                gaps.append(g)
                rec["delta_a"] = float(g.mean()) if len(g) else ""
                rec["delta_a_events"] = len(g)
            rec.update(_gap_for_batch(tg.ratios, b.last, cfg))
            a_losses, c_losses, ents = [], [], []
            for _ in range(cfg.epochs):
                if cfg.num_minibatches == 1:
                    parts = [(b, tg)]
                else:
                    chunks = np.array_split(rng.permutation(len(b)), cfg.num_minibatches)
                    parts = [(b.subset(c), tg.subset(c)) for c in chunks if len(c)]
                for mb, mt in parts:
                    al, ent = learner.actor_update(mb, mt)
                    a_losses.append(al)
                    ents.append(ent)
                    c_losses.append(learner.critic_update(mb, mt))
            if it % cfg.target_sync == 0:
                sync_target(learner.critic, learner.target)
            rec.update(actor_loss=float(np.mean(a_losses)), critic_loss=float(np.mean(c_losses)),
                       entropy=float(np.mean(ents)))
            if cfg.eval_every and it % cfg.eval_every == 0:
                ev_res = evaluate(policy_snapshot(learner.policy), model, cfg.eval_episodes, eval_rng, cfg.greedy_eval)
                rec.update(eval_return=ev_res.mean_return, eval_success=ev_res.success_rate)
            rec["wall_clock"] = "" if deterministic else round(time.perf_counter() - t0, 3)
            metrics.append(rec)
    except Exception as exc:  # keep partial metrics for the caller
        return TrainResult(cfg, metrics, learner, EvalResult(0, None, None),
                           GapStatistic(np.concatenate(gaps) if gaps else np.zeros(0)), f"{type(exc).__name__}: {exc}")
    final = evaluate(policy_snapshot(learner.policy), model, cfg.eval_episodes, eval_rng, cfg.greedy_eval)
    delta = GapStatistic(np.concatenate(gaps) if gaps else np.zeros(0))
    return TrainResult(cfg, metrics, learner, final, delta)


def write_checkpoint(result: TrainResult, path):
    nets = result.learner.nets if result.learner is not None else {}
    save_checkpoint(path, nets, {"config": result.config.to_dict(), "version": __version__})
