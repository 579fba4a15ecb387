"""Exact dynamic-programming oracle for the per-agent value operators.

All tables are stage-indexed over ``t in [0, H)`` on the full action grid:
``Q[t, s, a_1, ..., a_n]``.  A per-agent table ``EQ^i`` keeps agent i's action
axis with size 1, i.e. shape ``(H, S, A_1, .., 1, .., A_n)``, so it broadcasts
against joint tables.  Value at stage H (and after terminal states) is zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .env import DecPomdp, TabularPolicy, enumerate_trajectories


@dataclass
class JointQTable:
    values: np.ndarray  # (H, S, *A)
    discount: float


@dataclass
class PerAgentValueTable:
    agent: int
    values: np.ndarray  # (H, S, *A) with axis 2+agent of size 1
    provenance: str = "arbitrary-test-input"

    def sup_distance(self, other: "PerAgentValueTable") -> float:
        return float(np.max(np.abs(self.values - other.values)))


@dataclass
class OperatorReport:
    converged: bool
    iterations: int
    deltas: list[float] = field(default_factory=list)
    ratios: list[float] = field(default_factory=list)
    fixed_point: PerAgentValueTable | None = None

    @property
    def contraction_ratio(self) -> float:
        finite = [r for r in self.ratios if np.isfinite(r)]
        return max(finite) if finite else 0.0

    def to_json(self) -> str:
        return json.dumps({
            "converged": self.converged,
            "iterations": self.iterations,
            "deltas": self.deltas,
            "ratios": self.ratios,
            "contraction_ratio": self.contraction_ratio,
        }, indent=2)


def _require_tabular(model: DecPomdp):
    if not model.is_fully_observable():
        raise ValueError("oracle computations assume identity observations")


def _agent_axis(agent: int) -> int:
    return 1 + agent  # within a (S, *A) table


def _agent_probs(model: DecPomdp, policy: TabularPolicy, agent: int) -> np.ndarray:
    """pi^i(a^i|s) shaped to broadcast against (S, *A)."""
    shape = [model.num_states] + [1] * model.num_agents
    shape[1 + agent] = model.action_counts[agent]
    return policy.state_probs(model, agent).reshape(shape)


def _expect_next(model: DecPomdp, table: np.ndarray) -> np.ndarray:
    """sum_{s'} P(s'|s,a) (1 - terminal[s']) table[s'] for a per-state vector."""
    live = np.where(model.terminal, 0.0, table)
    return model.transition @ live


def exact_joint_q(model: DecPomdp, policy: TabularPolicy) -> JointQTable:
    """Backward induction for Q^pi with Q_H = 0."""
    _require_tabular(model)
    H, gamma = model.horizon, model.discount
    pi = policy.joint_state_probs(model)
    axes = tuple(range(1, 1 + model.num_agents))
    Q = np.zeros((H + 1, model.num_states) + model.joint_shape)
    for t in range(H - 1, -1, -1):
        v_next = (pi * Q[t + 1]).sum(axis=axes)
        Q[t] = model.reward + gamma * _expect_next(model, v_next)
    return JointQTable(Q[:H], gamma)


def state_values(model: DecPomdp, policy: TabularPolicy, q: JointQTable) -> np.ndarray:
    pi = policy.joint_state_probs(model)
    return (pi[None] * q.values).sum(axis=tuple(range(2, 2 + model.num_agents)))


def counterfactual_value(model: DecPomdp, q: JointQTable, policy: TabularPolicy, agent: int) -> PerAgentValueTable:
    """EQ^i(s, a^{-i}) = sum_{a^i} pi^i(a^i|s) Q(s, a^i, a^{-i}) at every stage."""
    if not 0 <= agent < model.num_agents:
        raise IndexError(f"agent {agent} out of range")
    p = _agent_probs(model, policy, agent)
    eq = (p[None] * q.values).sum(axis=1 + _agent_axis(agent), keepdims=True)
    return PerAgentValueTable(agent, eq, "oracle-exact")


def random_value_table(model: DecPomdp, agent: int, rng: np.random.Generator, scale: float = 1.0) -> PerAgentValueTable:
    shape = [model.horizon, model.num_states] + list(model.joint_shape)
    shape[2 + agent] = 1
    return PerAgentValueTable(agent, rng.uniform(-scale, scale, size=shape), "arbitrary-test-input")


def zero_value_table(model: DecPomdp, agent: int) -> PerAgentValueTable:
    shape = [model.horizon, model.num_states] + list(model.joint_shape)
    shape[2 + agent] = 1
    return PerAgentValueTable(agent, np.zeros(shape), "arbitrary-test-input")


def _padded(model: DecPomdp, f: PerAgentValueTable) -> np.ndarray:
    pad = np.zeros((1,) + f.values.shape[1:])
    return np.concatenate([f.values, pad], axis=0)


def apply_operator_on(model: DecPomdp, policy: TabularPolicy, lam: float, f: PerAgentValueTable,
                      *, discount: float | None = None) -> PerAgentValueTable:
    """On-policy per-agent operator via the rearranged one-step recursion.

    W_t(s,a) = r(s,a) + gamma * E_{s',a'~pi}[(1-lam) f_{t+1}(s',a'^{-i}) + lam W_{t+1}(s',a')]
    (R f)_t(s,a^{-i}) = E_{a^i~pi^i} W_t(s, a^i, a^{-i})

    ``discount`` overrides the model's gamma (used for fault injection).
    """
    _require_tabular(model)
    if not 0.0 < lam <= 1.0:
        raise ValueError(f"lambda must be in (0, 1], got {lam}")
    gamma = model.discount if discount is None else discount
    i, H = f.agent, model.horizon
    pi = policy.joint_state_probs(model)
    axes = tuple(range(1, 1 + model.num_agents))
    fv = _padded(model, f)
    W = np.zeros((H + 1, model.num_states) + model.joint_shape)
    for t in range(H - 1, -1, -1):
        inner = (1.0 - lam) * fv[t + 1] + lam * W[t + 1]
        cont = (pi * inner).sum(axis=axes)
        W[t] = model.reward + gamma * _expect_next(model, cont)
    p = _agent_probs(model, policy, i)
    out = (p[None] * W[:H]).sum(axis=1 + _agent_axis(i), keepdims=True)
    return PerAgentValueTable(i, out, f.provenance)


def trace_table(model: DecPomdp, target: TabularPolicy, behavior: TabularPolicy, agent: int,
                scheme: str, lam: float = 1.0, eta: float = 1.05) -> np.ndarray:
    """Trace coefficient c^i(s, a) over the full action grid, shape (S, *A)."""
    from .correction import trace_coefficients

    S, n = model.num_states, model.num_agents
    ratios = []
    for j in range(n):
        pj, mj = target.state_probs(model, j), behavior.state_probs(model, j)
        if np.any((mj <= 0) & (pj > 0)):
            raise ZeroDivisionError(f"behavior of agent {j} has zero mass where the target does not")
        r = np.divide(pj, mj, out=np.zeros_like(pj), where=mj > 0)
        shape = [S] + [1] * n
        shape[1 + j] = model.action_counts[j]
        ratios.append(np.broadcast_to(r.reshape(shape), (S,) + model.joint_shape))
    indiv = ratios[agent]
    comp = np.ones((S,) + model.joint_shape)
    for j in range(n):
        if j != agent:
            comp = comp * ratios[j]
    joint = indiv * comp
    return trace_coefficients(indiv, comp, joint, scheme, lam, eta)


def _root_sums(model: DecPomdp, behavior: TabularPolicy, c: np.ndarray, f: np.ndarray, gamma: float) -> np.ndarray:
    """G_t(s,a) = E_mu[sum_k gamma^k (prod_{j=1..k} c_j) delta_k | s_t=s, a_t=a].

    delta_k = r_k + gamma f(s_{k+1}, a^{-i}_{k+1}) - f(s_k, a^{-i}_k), with
    ``f`` padded to H+1 stages (zero at H).
    """
    H = model.horizon
    mu = behavior.joint_state_probs(model)
    axes = tuple(range(1, 1 + model.num_agents))
    G = np.zeros((H + 1, model.num_states) + model.joint_shape)
    for t in range(H - 1, -1, -1):
        nxt = (mu * (f[t + 1] + c * G[t + 1])).sum(axis=axes)
        G[t] = model.reward - f[t] + gamma * _expect_next(model, nxt)
    return G[:H]


def apply_operator_off(model: DecPomdp, target: TabularPolicy, behavior: TabularPolicy, f: PerAgentValueTable,
                       *, scheme: str = "lambda_only", lam: float = 1.0, eta: float = 1.05,
                       discount: float | None = None) -> PerAgentValueTable:
    """Off-policy per-agent operator, evaluated literally as TD sums.

    (R f)(s,a^{-i}) = f + E_{a^i~mu^i}[rho^i_0 * G_0(s, a^i, a^{-i})], with the
    first-step ratio rho^i_0 left untruncated.
    """
    _require_tabular(model)
    gamma = model.discount if discount is None else discount
    i = f.agent
    c = trace_table(model, target, behavior, i, scheme, lam, eta)
    G = _root_sums(model, behavior, c, _padded(model, f), gamma)
    mu_i = _agent_probs(model, behavior, i)
    pi_i = _agent_probs(model, target, i)
    if np.any((mu_i <= 0) & (pi_i > 0)):
        raise ZeroDivisionError(f"behavior of agent {i} has zero mass where the target does not")
    rho0 = np.divide(pi_i, mu_i, out=np.zeros_like(pi_i), where=mu_i > 0)
    out = f.values + (mu_i * rho0 * G).sum(axis=1 + _agent_axis(i), keepdims=True)
    return PerAgentValueTable(i, out, f.provenance)


def expected_root_advantage_dp(model: DecPomdp, behavior: TabularPolicy, c: np.ndarray,
                               f: PerAgentValueTable) -> np.ndarray:
    """Stage-0 root expectation of the GPAE sum via the DP recursion, shape (S, *A)."""
    return _root_sums(model, behavior, c, _padded(model, f), model.discount)[0]


def expected_root_advantage(model: DecPomdp, target: TabularPolicy, behavior: TabularPolicy,
                            f: PerAgentValueTable, *, scheme: str = "lambda_only", lam: float = 1.0,
                            eta: float = 1.05, budget: int = 10**6) -> np.ndarray:
    """E[A^i_0 | s_0=s, a_0=a] by exhaustive enumeration of mu-trajectories.

    Each enumerated continuation is fed through ``estimators.gpae`` with traces
    from ``correction.truncate``; the result has shape (S, *A).
    """
    from .correction import compute_isr, truncate
    from .estimators import gpae, td_errors

    _require_tabular(model)
    i = f.agent
    out = np.zeros((model.num_states,) + model.joint_shape)
    fv = f.values
    for s in range(model.num_states):
        for a in model.joint_actions():
            total = 0.0
            for traj, p in enumerate_trajectories(model, behavior, start_state=s, start_action=a, budget=budget):
                T = len(traj)
                eq = np.zeros((T, model.num_agents))
                for t in range(T):
                    idx = [t, traj.states[t]] + list(traj.actions[t])
                    idx[2 + i] = 0
                    eq[t, i] = fv[tuple(idx)]
                delta = td_errors(traj.rewards, eq, model.discount)
                traces = truncate(compute_isr(traj, target), scheme, lam, eta)
                total += p * gpae(delta, traces, model.discount).values[0, i]
            out[(s,) + a] = total
    return out


def fixed_point(apply, init: PerAgentValueTable, tol: float = 1e-12, max_iter: int = 1000) -> OperatorReport:
    """Iterate ``apply`` from ``init`` until the sup-norm step falls below ``tol``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    f = init
    deltas: list[float] = []
    ratios: list[float] = []
    for k in range(1, max_iter + 1):
        g = apply(f)
        d = f.sup_distance(g)
        if deltas:
            ratios.append(d / deltas[-1] if deltas[-1] > 0 else 0.0)
        deltas.append(d)
        f = g
        if d < tol:
            return OperatorReport(True, k, deltas, ratios, f)
    return OperatorReport(False, max_iter, deltas, ratios, f)


def contraction_ratios(apply, model: DecPomdp, agent: int, rng: np.random.Generator,
                       pairs: int = 20, scale: float = 5.0) -> np.ndarray:
    """Sup-norm ratios ||R f1 - R f2|| / ||f1 - f2|| over random table pairs.

    Every other pair differs by a random constant shift plus small noise;
    independent pairs alone rarely come close to the worst case because their
    differences average out under the expectations.
    """
    out = []
    for k in range(pairs):
        f1 = random_value_table(model, agent, rng, scale)
        if k % 2:
            f2 = random_value_table(model, agent, rng, 0.05 * scale)
            f2.values += f1.values + rng.uniform(-scale, scale)
        else:
            f2 = random_value_table(model, agent, rng, scale)
        num = apply(f1).sup_distance(apply(f2))
        out.append(num / f1.sup_distance(f2))
    return np.array(out)


def on_policy_contraction_bound(gamma: float, lam: float) -> float:
    return gamma * (1.0 - lam) / (1.0 - gamma * lam)


def mixed_policy(target: TabularPolicy, behavior: TabularPolicy, agent: int) -> TabularPolicy:
    """Agent ``agent`` follows the target, everyone else the behavior policy."""
    tables = [t.copy() for t in behavior.tables]
    tables[agent] = target.tables[agent].copy()
    return TabularPolicy(tables, behavior.full_support and target.full_support)


def augmented_fixed_point(model: DecPomdp, target: TabularPolicy, behavior: TabularPolicy, agent: int) -> PerAgentValueTable:
    """Fixed point of the full-ratio operator: EQ^i of the policy (pi^i, mu^{-i}).

    With untruncated joint ratios the bootstrap EQ(s', a'^{-i}) is still drawn
    from mu^{-i}, so the other agents are effectively part of the environment
    under their behavior policies.
    """
    sigma = mixed_policy(target, behavior, agent)
    return counterfactual_value(model, exact_joint_q(model, sigma), target, agent)


def full_ratio_bias(model: DecPomdp, target: TabularPolicy, behavior: TabularPolicy,
                    f: PerAgentValueTable) -> np.ndarray:
    """Closed-form bias of the root expectation under untruncated joint ratios.

    E_mu[sum_t gamma^t prod rho (delta_t) | s,a] - (Q^pi(s,a) - f_0(s,a^{-i}))
      = sum_{t>=1} gamma^t E_{pi-path}[ E_{mu^{-i}} f_t(s_t,.) - E_{pi^{-i}} f_t(s_t,.) ]
    computed by backward recursion; shape (S, *A).  Zero when mu^{-i} = pi^{-i}.
    """
    H, gamma, i = model.horizon, model.discount, f.agent
    pi = target.joint_state_probs(model)
    axes = tuple(range(1, 1 + model.num_agents))
    fv = _padded(model, f)
    # E_{a^{-i}~mu^{-i}} f and E_{a^{-i}~pi^{-i}} f at each (t, s); f ignores a^i
    mu_other = mixed_policy(target, behavior, i).joint_state_probs(model)
    B = np.zeros((H + 1, model.num_states) + model.joint_shape)
    for t in range(H - 1, -1, -1):
        gap = (mu_other * fv[t + 1]).sum(axis=axes) - (pi * fv[t + 1]).sum(axis=axes)
        cont = (pi * B[t + 1]).sum(axis=axes)
        B[t] = gamma * _expect_next(model, gap + cont)
    return B[0]


def part_iv_bias_bound(model: DecPomdp, q_pi: JointQTable, q_mu: JointQTable) -> np.ndarray:
    """Evaluated upper bound on B = B_1 + B_2 at every root (s, a), stage 0.

    B_1 <= Q^mu - Q^pi + M_r/(1-gamma);
    B_2 <= 2 M_r gamma/(1-gamma)^2 + M_r/(1-gamma)^2 - M_r/(1-gamma).
    """
    g, M = model.discount, model.reward_bound
    b1 = q_mu.values[0] - q_pi.values[0] + M / (1 - g)
    b2 = 2 * M * g / (1 - g) ** 2 + M / (1 - g) ** 2 - M / (1 - g)
    return b1 + b2


def star_policy(model: DecPomdp, target: TabularPolicy, behavior: TabularPolicy, agent: int) -> np.ndarray:
    """Diagnostic pi_*^i(a^i | s, a^{-i}) induced by DT traces with eta = 1.

    pi_* ∝ min(mu^i, pi^i * min(1, rho^{-i})); shape (S, *A), normalized over
    agent ``agent``'s axis.
    """
    c = trace_table(model, target, behavior, agent, "DT", lam=1.0, eta=1.0)
    w = _agent_probs(model, behavior, agent) * c
    return w / w.sum(axis=_agent_axis(agent), keepdims=True)
