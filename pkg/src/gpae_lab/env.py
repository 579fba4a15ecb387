"""Tabular Dec-POMDP models, policies, trajectories and the built-in test games.

Tables use a full action grid: ``transition`` has shape ``(S, A_1, ..., A_n, S)``
and ``reward`` has shape ``(S, A_1, ..., A_n)``.  Per-agent policies are tables
``pi_i[o, a]`` over that agent's observations; observation models are
``O_i[s, o]``.  Identity observation models give full observability.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np

ROW_TOL = 1e-12
DEFAULT_ENUM_BUDGET = 10**6


def _categorical(p: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw; never returns a zero-probability index."""
    cdf = np.cumsum(p)
    k = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    k = min(k, len(p) - 1)
    while p[k] <= 0:
        k -= 1
    return k


class ModelError(ValueError):
    """Raised when a model or policy table is corrupt (e.g. an all-zero row)."""


class EnumerationBudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class DecPomdp:
    num_agents: int
    num_states: int
    action_counts: tuple[int, ...]
    transition: np.ndarray
    reward: np.ndarray
    observation: tuple[np.ndarray, ...]
    initial_dist: np.ndarray
    discount: float
    horizon: int
    reward_bound: float
    terminal: np.ndarray | None = None
    name: str = "custom"

    def __post_init__(self):
        if self.terminal is None:
            object.__setattr__(self, "terminal", np.zeros(self.num_states, dtype=bool))

    @property
    def joint_shape(self) -> tuple[int, ...]:
        return tuple(self.action_counts)

    @property
    def num_joint_actions(self) -> int:
        return int(np.prod(self.action_counts))

    def joint_actions(self) -> Iterator[tuple[int, ...]]:
        return itertools.product(*(range(k) for k in self.action_counts))

    def is_fully_observable(self) -> bool:
        return all(
            o.shape == (self.num_states, self.num_states) and np.array_equal(o, np.eye(self.num_states))
            for o in self.observation
        )

    def to_dict(self) -> dict:
        return {
            "schema": "gpae-lab/dec-pomdp/v1",
            "name": self.name,
            "num_agents": self.num_agents,
            "num_states": self.num_states,
            "action_counts": list(self.action_counts),
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "observation": [o.tolist() for o in self.observation],
            "initial_dist": self.initial_dist.tolist(),
            "discount": self.discount,
            "horizon": self.horizon,
            "reward_bound": self.reward_bound,
            "terminal": self.terminal.astype(bool).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecPomdp":
        return cls(
            num_agents=int(d["num_agents"]),
            num_states=int(d["num_states"]),
            action_counts=tuple(int(k) for k in d["action_counts"]),
            transition=np.asarray(d["transition"], dtype=float),
            reward=np.asarray(d["reward"], dtype=float),
            observation=tuple(np.asarray(o, dtype=float) for o in d["observation"]),
            initial_dist=np.asarray(d["initial_dist"], dtype=float),
            discount=float(d["discount"]),
            horizon=int(d["horizon"]),
            reward_bound=float(d["reward_bound"]),
            terminal=np.asarray(d.get("terminal", [False] * int(d["num_states"])), dtype=bool),
            name=d.get("name", "custom"),
        )


@dataclass
class TabularPolicy:
    """Product policy; ``tables[i][o, a]`` is agent i's action distribution."""

    tables: list[np.ndarray]
    full_support: bool = False

    @property
    def num_agents(self) -> int:
        return len(self.tables)

    def probs(self, agent: int, obs: int) -> np.ndarray:
        return self.tables[agent][obs]

    def state_probs(self, model: DecPomdp, agent: int) -> np.ndarray:
        """Action distribution of ``agent`` conditioned on the state, shape (S, A_i)."""
        return model.observation[agent] @ self.tables[agent]

    def joint_state_probs(self, model: DecPomdp) -> np.ndarray:
        """pi(a|s) over the full action grid, shape (S, A_1, ..., A_n)."""
        out = np.ones((model.num_states,) + model.joint_shape)
        for i in range(model.num_agents):
            shape = [model.num_states] + [1] * model.num_agents
            shape[1 + i] = model.action_counts[i]
            out = out * self.state_probs(model, i).reshape(shape)
        return out

    def sample(self, obs: Sequence[int], rng: np.random.Generator):
        """Sample a joint action.  Returns (actions, anomaly_fired)."""
        actions = tuple(_categorical(t[o], rng) for t, o in zip(self.tables, obs))
        return actions, False

    def log_prob(self, agent: int, obs: int, action: int) -> float:
        p = self.tables[agent][obs, action]
        return math.log(p) if p > 0 else -math.inf

    def copy(self) -> "TabularPolicy":
        return TabularPolicy([t.copy() for t in self.tables], self.full_support)

    def to_dict(self) -> dict:
        return {
            "schema": "gpae-lab/policy/v1",
            "tables": [t.tolist() for t in self.tables],
            "full_support": self.full_support,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TabularPolicy":
        return cls([np.asarray(t, dtype=float) for t in d["tables"]], bool(d.get("full_support", False)))

    @classmethod
    def uniform(cls, model: DecPomdp) -> "TabularPolicy":
        tables = [
            np.full((model.observation[i].shape[1], k), 1.0 / k)
            for i, k in enumerate(model.action_counts)
        ]
        return cls(tables, full_support=True)

    @classmethod
    def random(cls, model: DecPomdp, rng: np.random.Generator, temperature: float = 1.0) -> "TabularPolicy":
        tables = []
        for i, k in enumerate(model.action_counts):
            logits = rng.normal(size=(model.observation[i].shape[1], k)) / temperature
            p = np.exp(logits - logits.max(axis=1, keepdims=True))
            tables.append(p / p.sum(axis=1, keepdims=True))
        return cls(tables, full_support=True)


@dataclass(frozen=True)
class AnomalyConfig:
    agent_index: int
    probability: float
    forced_action: int


class AnomalousPolicy(TabularPolicy):
    """Behavior policy mu^i = (1-p) pi^i + p * delta(forced) for one agent.

    Sampling is two-stage (coin flip, then forced action or a draw from pi^i)
    so that the realized anomaly events can be logged; the marginal action
    distribution is exactly the mixture held in ``tables``.
    """

    def __init__(self, base: TabularPolicy, cfg: AnomalyConfig):
        i, p, a = cfg.agent_index, cfg.probability, cfg.forced_action
        mixed = base.tables[i] * (1.0 - p)
        mixed[:, a] += p
        tables = [t.copy() for t in base.tables]
        tables[i] = mixed
        full = base.full_support or all(np.all(t > 0) for t in tables)
        super().__init__(tables, full_support=full)
        self.base = base
        self.cfg = cfg

    def sample(self, obs, rng):
        actions = []
        fired = False
        for i, (t, o) in enumerate(zip(self.base.tables, obs)):
            if i == self.cfg.agent_index and rng.random() < self.cfg.probability:
                actions.append(self.cfg.forced_action)
                fired = True
            else:
                actions.append(_categorical(t[o], rng))
        return tuple(actions), fired


class Transition(NamedTuple):
    state: int
    observations: tuple[int, ...]
    action: tuple[int, ...]
    reward: float
    behavior_logp: tuple[float, ...]
    anomaly: bool = False


@dataclass
class Trajectory:
    """Time-indexed arrays; row t is the t-th transition."""

    states: np.ndarray
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    behavior_logp: np.ndarray
    terminal: bool = False
    anomaly_events: np.ndarray | None = None
    next_state: int | None = None

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def num_agents(self) -> int:
        return self.actions.shape[1]

    @property
    def steps(self) -> list[Transition]:
        ev = self.anomaly_events if self.anomaly_events is not None else np.zeros(len(self), bool)
        return [
            Transition(
                int(self.states[t]),
                tuple(int(x) for x in self.observations[t]),
                tuple(int(x) for x in self.actions[t]),
                float(self.rewards[t]),
                tuple(float(x) for x in self.behavior_logp[t]),
                bool(ev[t]),
            )
            for t in range(len(self))
        ]

    @classmethod
    def from_steps(cls, steps: Sequence[Transition], terminal: bool = False, next_state: int | None = None):
        n = len(steps[0].action) if steps else 0
        return cls(
            states=np.array([s.state for s in steps], dtype=int),
            observations=np.array([s.observations for s in steps], dtype=int).reshape(len(steps), n),
            actions=np.array([s.action for s in steps], dtype=int).reshape(len(steps), n),
            rewards=np.array([s.reward for s in steps], dtype=float),
            behavior_logp=np.array([s.behavior_logp for s in steps], dtype=float).reshape(len(steps), n),
            terminal=terminal,
            anomaly_events=np.array([s.anomaly for s in steps], dtype=bool),
            next_state=next_state,
        )

    def to_jsonl(self) -> str:
        lines = []
        for t, step in enumerate(self.steps):
            rec = step._asdict()
            rec["t"] = t
            rec["last"] = t == len(self) - 1
            rec["terminal"] = self.terminal and t == len(self) - 1
            lines.append(json.dumps(rec))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "Trajectory":
        recs = [json.loads(line) for line in text.splitlines() if line.strip()]
        steps = [
            Transition(r["state"], tuple(r["observations"]), tuple(r["action"]), r["reward"],
                       tuple(r["behavior_logp"]), r.get("anomaly", False))
            for r in recs
        ]
        return cls.from_steps(steps, terminal=bool(recs and recs[-1].get("terminal", False)))


@dataclass
class ValidationReport:
    checks: dict[str, bool] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def record(self, name: str, passed: bool, detail: str = ""):
        self.checks[name] = self.checks.get(name, True) and passed
        if not passed:
            self.failures.append(f"{name}: {detail}" if detail else name)


def validate_model(model: DecPomdp) -> ValidationReport:
    rep = ValidationReport()
    S, n = model.num_states, model.num_agents
    rep.record("agents", n >= 1 and len(model.action_counts) == n, f"num_agents={n}")
    shape = (S,) + model.joint_shape
    rep.record("transition_shape", model.transition.shape == shape + (S,), str(model.transition.shape))
    rep.record("reward_shape", model.reward.shape == shape, str(model.reward.shape))
    if not rep.ok:
        return rep

    def rows(name, table):
        flat = table.reshape(-1, table.shape[-1])
        rep.record(f"{name}_range", bool(np.all((flat >= 0) & (flat <= 1))), "probability outside [0,1]")
        sums = flat.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > ROW_TOL)
        if bad.size:
            idx = np.unravel_index(bad[0], table.shape[:-1])
            rep.record(f"{name}_rows", False, f"row {tuple(int(x) for x in idx)} sums to {sums[bad[0]]:.12g}")
        else:
            rep.record(f"{name}_rows", True)

    rows("transition", model.transition)
    for i, o in enumerate(model.observation):
        if o.shape[0] != S:
            rep.record("observation_shape", False, f"agent {i}: {o.shape}")
        else:
            rows(f"observation[{i}]", o)
    rows("initial_dist", model.initial_dist[None, :])
    rep.record("discount", 0.0 <= model.discount < 1.0, f"gamma={model.discount}")
    rep.record("horizon", model.horizon >= 1, f"H={model.horizon}")
    over = np.flatnonzero(np.abs(model.reward).ravel() > model.reward_bound)
    if over.size:
        idx = np.unravel_index(over[0], model.reward.shape)
        rep.record("reward_bound", False, f"|R{tuple(int(x) for x in idx)}| > {model.reward_bound}")
    else:
        rep.record("reward_bound", True)
    return rep


def validate_policy(model: DecPomdp, policy: TabularPolicy) -> ValidationReport:
    rep = ValidationReport()
    rep.record("agents", policy.num_agents == model.num_agents)
    for i, t in enumerate(policy.tables):
        ok_shape = t.shape == (model.observation[i].shape[1], model.action_counts[i])
        rep.record(f"policy[{i}]_shape", ok_shape, str(t.shape))
        if not ok_shape:
            continue
        sums = t.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > ROW_TOL)
        rep.record(f"policy[{i}]_rows", bad.size == 0, f"row {bad[0] if bad.size else ''}")
        rep.record(f"policy[{i}]_range", bool(np.all((t >= 0) & (t <= 1))))
        if policy.full_support:
            rep.record(f"policy[{i}]_support", bool(np.all(t > 0)), "zero probability in full-support policy")
    return rep


def _draw(p: np.ndarray, rng: np.random.Generator, what: str) -> int:
    total = p.sum()
    if not total > 0 or abs(total - 1.0) > 1e-9:
        raise ModelError(f"cannot sample from {what}: row sums to {total}")
    return _categorical(p, rng)


def rollout(model: DecPomdp, behavior: TabularPolicy, seed, horizon: int | None = None) -> Trajectory:
    """Sample one episode under ``behavior``; deterministic for a given seed."""
    H = model.horizon if horizon is None else horizon
    if H > model.horizon:
        raise ValueError(f"horizon {H} exceeds model horizon {model.horizon}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    s = _draw(model.initial_dist, rng, "initial_dist")
    steps = []
    terminal = False
    for _ in range(H):
        obs = tuple(_draw(model.observation[i][s], rng, f"O[{i}][{s}]") for i in range(model.num_agents))
        a, fired = behavior.sample(obs, rng)
        logp = tuple(behavior.log_prob(i, obs[i], a[i]) for i in range(model.num_agents))
        steps.append(Transition(s, obs, a, float(model.reward[(s,) + a]), logp, fired))
        s = _draw(model.transition[(s,) + a], rng, f"P[{s},{a}]")
        if model.terminal[s]:
            terminal = True
            break
    return Trajectory.from_steps(steps, terminal=terminal, next_state=s)


def enumerate_trajectories(
    model: DecPomdp,
    policy: TabularPolicy,
    horizon: int | None = None,
    *,
    start_state: int | None = None,
    start_action: tuple[int, ...] | None = None,
    budget: int = DEFAULT_ENUM_BUDGET,
) -> list[tuple[Trajectory, float]]:
    """Every positive-probability trajectory with its probability.

    ``start_state``/``start_action`` condition the first state and first joint
    action (probability 1), which is how root-conditioned expectations are
    formed.  Requires full observability.
    """
    H = model.horizon if horizon is None else horizon
    size = (model.num_states * model.num_joint_actions) ** H
    if size > budget:
        raise EnumerationBudgetExceeded(f"(|S|*|A|)^H = {size} exceeds budget {budget}")
    if not model.is_fully_observable():
        raise ValueError("enumeration requires identity observations")
    joint = policy.joint_state_probs(model)
    logs = [np.log(np.where(t > 0, t, 1.0)) for t in policy.tables]
    out: list[tuple[Trajectory, float]] = []

    def recurse(s, prob, prefix, depth):
        if depth == H:
            out.append((Trajectory.from_steps(prefix, terminal=False, next_state=s), prob))
            return
        if depth == 0 and start_action is not None:
            choices = [(tuple(start_action), 1.0)]
        else:
            choices = [(a, joint[(s,) + a]) for a in model.joint_actions()]
        for a, pa in choices:
            if pa <= 0:
                continue
            logp = tuple(
                float(logs[i][s, a[i]]) if policy.tables[i][s, a[i]] > 0 else -math.inf
                for i in range(model.num_agents)
            )
            step = Transition(s, (s,) * model.num_agents, a, float(model.reward[(s,) + a]), logp)
            for s2 in np.flatnonzero(model.transition[(s,) + a] > 0):
                p2 = prob * pa * model.transition[(s,) + a + (s2,)]
                if model.terminal[s2]:
                    out.append((Trajectory.from_steps(prefix + [step], terminal=True, next_state=int(s2)), p2))
                else:
                    recurse(int(s2), p2, prefix + [step], depth + 1)

    if start_state is not None:
        recurse(int(start_state), 1.0, [], 0)
    else:
        for s0 in np.flatnonzero(model.initial_dist > 0):
            recurse(int(s0), float(model.initial_dist[s0]), [], 0)
    return out


def wrap_anomaly(policy: TabularPolicy, cfg: AnomalyConfig) -> AnomalousPolicy:
    if not 0 <= cfg.agent_index < policy.num_agents:
        raise ValueError(f"agent index {cfg.agent_index} out of range")
    if not 0 <= cfg.forced_action < policy.tables[cfg.agent_index].shape[1]:
        raise ValueError(f"forced action {cfg.forced_action} invalid for agent {cfg.agent_index}")
    if not 0.0 <= cfg.probability <= 1.0:
        raise ValueError(f"anomaly probability {cfg.probability} outside [0, 1]")
    return AnomalousPolicy(policy, cfg)


# ---------------------------------------------------------------- built-ins

@dataclass
class Builtin:
    model: DecPomdp
    policies: dict[str, TabularPolicy]
    anomaly: AnomalyConfig | None = None


def _identity_obs(S: int, n: int) -> tuple[np.ndarray, ...]:
    return tuple(np.eye(S) for _ in range(n))


def _matrix_team(n_agents=2, n_actions=2, horizon=3, discount=0.9, bonus=0.5, **_):
    """Stateless repeated team game.

    Agent contribution grows linearly with the action index (action 0
    contributes nothing); everyone picking the top action adds ``bonus``.
    """
    shape = (n_actions,) * n_agents
    contrib = np.linspace(0.0, 1.0, n_actions)
    reward = np.zeros((1,) + shape)
    for a in itertools.product(range(n_actions), repeat=n_agents):
        r = float(np.mean(contrib[list(a)]))
        if all(x == n_actions - 1 for x in a):
            r += bonus
        reward[(0,) + a] = r
    model = DecPomdp(
        num_agents=n_agents, num_states=1, action_counts=shape,
        transition=np.ones((1,) + shape + (1,)), reward=reward,
        observation=_identity_obs(1, n_agents), initial_dist=np.ones(1),
        discount=discount, horizon=horizon, reward_bound=1.0 + bonus, name="matrix_team",
    )
    best = [np.eye(n_actions)[[n_actions - 1]] for _ in range(n_agents)]
    return model, {"uniform": TabularPolicy.uniform(model), "optimal": TabularPolicy(best)}


def _chain(n_agents, length=2, horizon=4, discount=0.9, slip=0.0, name="chain_gather", **_):
    """Agents advance along a chain only when all choose action 1 ("advance").

    The last state is a terminal goal; entering it pays reward 1.  With
    probability ``slip`` a coordinated advance between intermediate states
    fails (the final step into the goal always succeeds).
    """
    S = length + 1
    shape = (2,) * n_agents
    P = np.zeros((S,) + shape + (S,))
    R = np.zeros((S,) + shape)
    for s in range(S):
        for a in itertools.product(range(2), repeat=n_agents):
            if s == length:
                P[(s,) + a + (s,)] = 1.0
                continue
            if all(a):
                q = slip if s + 1 < length else 0.0
                P[(s,) + a + (s + 1,)] += 1.0 - q
                P[(s,) + a + (s,)] += q
                if s + 1 == length:
                    R[(s,) + a] = 1.0
            else:
                P[(s,) + a + (s,)] = 1.0
    terminal = np.zeros(S, dtype=bool)
    terminal[length] = True
    init = np.zeros(S)
    init[0] = 1.0
    model = DecPomdp(
        num_agents=n_agents, num_states=S, action_counts=shape, transition=P, reward=R,
        observation=_identity_obs(S, n_agents), initial_dist=init, discount=discount,
        horizon=horizon, reward_bound=1.0, terminal=terminal, name=name,
    )
    advance = [np.tile([0.0, 1.0], (S, 1)) for _ in range(n_agents)]
    return model, {"uniform": TabularPolicy.uniform(model), "optimal": TabularPolicy(advance)}


def _anomaly_team(base="matrix_team", n_agents=2, n_actions=4, horizon=3, probability=0.05,
                  agent_index=0, stop_action=0, **kw):
    if base == "matrix_team":
        model, pols = _matrix_team(n_agents=n_agents, n_actions=n_actions, horizon=horizon, **kw)
    elif base == "chain_gather":
        model, pols = _chain(n_agents, horizon=horizon, **kw)
        stop_action = 0
    else:
        raise ValueError(f"unknown anomaly base {base!r}")
    model = DecPomdp(**{**model.__dict__, "name": "anomaly_team"})
    return model, pols, AnomalyConfig(agent_index, probability, stop_action)


BUILTIN_NAMES = ("matrix_team", "chain_gather", "single_chain", "anomaly_team")


def make_builtin(name: str, params: dict | None = None) -> Builtin:
    params = dict(params or {})
    anomaly = None
    if name == "matrix_team":
        model, pols = _matrix_team(**params)
    elif name == "chain_gather":
        params.setdefault("n_agents", 2)
        model, pols = _chain(**params)
    elif name == "single_chain":
        params["n_agents"] = 1
        model, pols = _chain(name="single_chain", **params)
    elif name == "anomaly_team":
        model, pols, anomaly = _anomaly_team(**params)
    else:
        raise ValueError(f"unknown built-in {name!r}; expected one of {BUILTIN_NAMES}")
    rep = validate_model(model)
    if not rep.ok:
        raise ModelError(f"built-in {name} failed validation: {rep.failures}")
    return Builtin(model, pols, anomaly)
