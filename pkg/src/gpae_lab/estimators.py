"""Per-agent TD errors and advantage estimators (GPAE, GAE, COMA, DAE) plus the
advantage-gap diagnostic.

Series are time-major: scalars per step are ``(T,)``, per-agent values ``(T, n)``.
A terminal (or horizon-truncated) episode bootstraps with 0 after its last step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .correction import TraceWeights, lambda_traces, rows_to_csv
from .env import DecPomdp, TabularPolicy, Trajectory


@dataclass
class AdvantageSeries:
    values: np.ndarray  # (T, n)
    estimator: str
    params: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.values)


def td_errors(rewards, values, gamma: float, bootstrap=0.0) -> np.ndarray:
    """delta_t = r_t + gamma v_{t+1} - v_t with v_T = ``bootstrap``.

    ``values`` may be (T,) or (T, n); the result has the same shape.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.shape[0] != rewards.shape[0]:
        raise ValueError(f"length mismatch: {rewards.shape[0]} rewards vs {values.shape[0]} values")
    r = rewards.reshape((-1,) + (1,) * (values.ndim - 1))
    nxt = np.empty_like(values)
    nxt[:-1] = values[1:]
    nxt[-1:] = bootstrap
    return r + gamma * nxt - values


def discounted_sum(x: np.ndarray, decay) -> np.ndarray:
    """y_t = x_t + decay_{t+1} y_{t+1}; ``decay`` is a scalar or an array like ``x``."""
    x = np.asarray(x, dtype=float)
    d = np.broadcast_to(np.asarray(decay, dtype=float), x.shape)
    y = np.empty_like(x)
    acc = np.zeros(x.shape[1:])
    for t in range(len(x) - 1, -1, -1):
        acc = x[t] + (d[t + 1] * acc if t + 1 < len(x) else 0.0)
        y[t] = acc
    return y


def gpae(delta: np.ndarray, traces, gamma: float) -> AdvantageSeries:
    """A_t = sum_{l>=t} gamma^{l-t} (prod_{j=t+1}^{l} c_j) delta_l, one backward pass."""
    delta = np.asarray(delta, dtype=float)
    c = traces.values if isinstance(traces, TraceWeights) else np.asarray(traces, dtype=float)
    if c.shape != delta.shape:
        raise ValueError(f"trace shape {c.shape} does not match delta shape {delta.shape}")
    params = {"gamma": gamma}
    tag = "gpae"
    if isinstance(traces, TraceWeights):
        params.update(scheme=traces.scheme, lam=traces.lam, eta=traces.eta)
    return AdvantageSeries(discounted_sum(delta, gamma * c), tag, params)


def gpae_on(delta: np.ndarray, gamma: float, lam: float) -> AdvantageSeries:
    return gpae(delta, lambda_traces(len(delta), delta.shape[1], lam), gamma)


def gae(rewards, values, gamma: float, lam: float, num_agents: int, bootstrap: float = 0.0) -> AdvantageSeries:
    """Shared-reward GAE on V, replicated across agents."""
    delta = td_errors(rewards, values, gamma, bootstrap)
    a = discounted_sum(delta, gamma * lam)
    return AdvantageSeries(np.repeat(a[:, None], num_agents, axis=1), "gae", {"gamma": gamma, "lam": lam})


def coma(q_taken, baselines) -> AdvantageSeries:
    """A^i_t = Q(s_t, a_t) - sum_{a^i} pi^i Q(s_t, (a^i, a^{-i}_t)).

    ``baselines`` holds the counterfactual sum per agent, shape (T, n).
    """
    q_taken = np.asarray(q_taken, dtype=float)
    baselines = np.asarray(baselines, dtype=float)
    return AdvantageSeries(q_taken[:, None] - baselines, "coma", {})


def dae(rewards, values, expected_rewards, gamma: float, lam: float, beta: float,
        bootstrap: float = 0.0) -> AdvantageSeries:
    """A^i_t = sum_l (gamma lam)^l (r_{t+l} - beta^{l+1} Er^i_{t+l} + gamma V_{t+l+1} - V_{t+l}).

    Split as GAE_t - beta * D_t with D_t = Er_t + gamma lam beta D_{t+1}.
    ``expected_rewards`` is E_{a^i ~ pi^i}[r(s_t, a^i, a^{-i}_t)], shape (T, n).
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    er = np.asarray(expected_rewards, dtype=float)
    delta = td_errors(rewards, values, gamma, bootstrap)
    g = discounted_sum(delta, gamma * lam)
    d = discounted_sum(er, gamma * lam * beta)
    return AdvantageSeries(g[:, None] - beta * d, "dae", {"gamma": gamma, "lam": lam, "beta": beta})


def dae_direct(rewards, values, expected_rewards, gamma, lam, beta) -> np.ndarray:
    """Literal double sum for DAE; O(T^2), used as a cross-check."""
    r = np.asarray(rewards, float)
    v = np.append(np.asarray(values, float), 0.0)
    er = np.asarray(expected_rewards, float)
    T, n = er.shape
    out = np.zeros((T, n))
    for t in range(T):
        for l in range(T - t):
            k = t + l
            d = r[k] - beta ** (l + 1) * er[k] + gamma * v[k + 1] - v[k]
            out[t] += (gamma * lam) ** l * d
    return out


# ------------------------------------------------------------------ critics

class CriticView(Protocol):
    def eq(self, traj: Trajectory) -> np.ndarray: ...          # (T, n)
    def v(self, traj: Trajectory) -> np.ndarray: ...           # (T,)
    def q_taken(self, traj: Trajectory) -> np.ndarray: ...     # (T,)
    def q_baseline(self, traj: Trajectory) -> np.ndarray: ...  # (T, n)
    def expected_reward(self, traj: Trajectory) -> np.ndarray: ...  # (T, n)


class TabularCritic:
    """Exact critic backed by stage-indexed tables; trajectories start at stage 0."""

    def __init__(self, model: DecPomdp, policy: TabularPolicy, q: np.ndarray | None = None,
                 eq: list[np.ndarray] | None = None):
        from .oracle import counterfactual_value, exact_joint_q, JointQTable

        self.model, self.policy = model, policy
        qt = exact_joint_q(model, policy) if q is None else JointQTable(q, model.discount)
        self.q_table = qt.values
        self.eq_tables = eq if eq is not None else [
            counterfactual_value(model, qt, policy, i).values for i in range(model.num_agents)
        ]
        pi = policy.joint_state_probs(model)
        axes = tuple(range(2, 2 + model.num_agents))
        self.v_table = (pi[None] * self.q_table).sum(axis=axes)

    def _idx(self, t, s, a, drop=None):
        a = list(a)
        if drop is not None:
            a[drop] = 0
        return (t, s) + tuple(a)

    def eq(self, traj):
        T, n = traj.actions.shape
        return np.array([[self.eq_tables[i][self._idx(t, traj.states[t], traj.actions[t], i)]
                          for i in range(n)] for t in range(T)]).reshape(T, n)

    def v(self, traj):
        return np.array([self.v_table[t, traj.states[t]] for t in range(len(traj))])

    def q_taken(self, traj):
        return np.array([self.q_table[self._idx(t, traj.states[t], traj.actions[t])] for t in range(len(traj))])

    def q_baseline(self, traj):
        return self.eq(traj)

    def expected_reward(self, traj):
        m = self.model
        T, n = traj.actions.shape
        out = np.zeros((T, n))
        for t in range(T):
            s = traj.states[t]
            for i in range(n):
                a = list(traj.actions[t])
                p = self.policy.state_probs(m, i)[s]
                for k in range(m.action_counts[i]):
                    a[i] = k
                    out[t, i] += p[k] * m.reward[(s,) + tuple(a)]
        return out


def advantage_from_critic(estimator: str, traj: Trajectory, critic: CriticView, gamma: float,
                          lam: float = 0.95, beta: float = 0.5, traces=None) -> AdvantageSeries:
    n = traj.num_agents
    if estimator in ("gpae", "gpae_on", "gpae_off"):
        delta = td_errors(traj.rewards, critic.eq(traj), gamma)
        tr = traces if traces is not None else lambda_traces(len(traj), n, lam)
        return gpae(delta, tr, gamma)
    if estimator == "gae":
        return gae(traj.rewards, critic.v(traj), gamma, lam, n)
    if estimator == "coma":
        return coma(critic.q_taken(traj), critic.q_baseline(traj))
    if estimator == "dae":
        return dae(traj.rewards, critic.v(traj), critic.expected_reward(traj), gamma, lam, beta)
    raise ValueError(f"unknown estimator {estimator!r}")


# -------------------------------------------------------------- advantage gap

@dataclass
class GapStatistic:
    """Delta A pooled over anomaly events; ``mean`` is None when no event occurred."""

    values: np.ndarray
    pooling: str = "pooled over all events"

    @property
    def count(self) -> int:
        return len(self.values)

    @property
    def empty(self) -> bool:
        return self.count == 0

    @property
    def mean(self) -> float | None:
        return None if self.empty else float(self.values.mean())


def event_gaps(adv: np.ndarray, events: np.ndarray, agent: int) -> np.ndarray:
    """Per-event mean_{j != i} A^j_t - A^i_t."""
    adv = np.asarray(adv, dtype=float)
    ev = np.asarray(events, dtype=bool)
    n = adv.shape[1]
    if n < 2:
        raise ValueError("advantage gap needs at least two agents")
    rows = adv[ev]
    others = (rows.sum(axis=1) - rows[:, agent]) / (n - 1)
    return others - rows[:, agent]


def advantage_gap(advs, events, agent: int) -> GapStatistic:
    """Delta A over one or many trajectories (``advs`` and ``events`` matching lists)."""
    if isinstance(advs, (np.ndarray, AdvantageSeries)):
        advs, events = [advs], [events]
    parts = []
    for a, e in zip(advs, events):
        if e is None:
            continue
        vals = a.values if isinstance(a, AdvantageSeries) else a
        parts.append(event_gaps(vals, e, agent))
    return GapStatistic(np.concatenate(parts) if parts else np.zeros(0))


ADV_COLUMNS = ("trajectory", "agent", "t", "value", "estimator", "params")


def advantage_csv(series: list[AdvantageSeries], meta: str = "") -> str:
    rows = []
    for k, s in enumerate(series):
        p = ";".join(f"{a}={b}" for a, b in sorted(s.params.items()))
        for t in range(len(s)):
            for i in range(s.values.shape[1]):
                rows.append({"trajectory": k, "agent": i, "t": t, "value": float(s.values[t, i]),
                             "estimator": s.estimator, "params": p})
    return rows_to_csv(rows, ADV_COLUMNS, meta)
