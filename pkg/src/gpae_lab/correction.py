"""Importance-sampling ratios, trace truncation schemes and the trace-gap diagnostic."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .env import TabularPolicy, Trajectory

SCHEMES = ("untruncated", "lambda_only", "ST", "IT", "DT")
DEFAULT_ETA = 1.05
ETA_SWEEP = (1.0, 1.05, 1.1, 1.15)


class CorruptTrajectory(ValueError):
    pass


@dataclass
class IsrSeries:
    """Per-step ratios; ``individual`` and ``complement`` are (T, n), ``joint`` is (T,)."""

    individual: np.ndarray
    complement: np.ndarray
    joint: np.ndarray

    def __len__(self) -> int:
        return len(self.joint)

    @property
    def num_agents(self) -> int:
        return self.individual.shape[1]

    @classmethod
    def from_ratios(cls, ratios: np.ndarray) -> "IsrSeries":
        """Build from per-agent ratios pi^j/mu^j of shape (T, n)."""
        ratios = np.asarray(ratios, dtype=float)
        T, n = ratios.shape
        joint = np.prod(ratios, axis=1)
        comp = np.ones((T, n))
        for i in range(n):
            for j in range(n):
                if j != i:
                    comp[:, i] *= ratios[:, j]
        return cls(ratios, comp, joint)


def target_log_probs(traj: Trajectory, target) -> np.ndarray:
    """log pi^j(a^j_t | o^j_t) for every step and agent, shape (T, n).

    ``target`` may be a TabularPolicy, an array of log-probs, or any object with
    a ``log_probs(traj)`` method (e.g. a policy network wrapper).
    """
    if isinstance(target, TabularPolicy):
        T, n = traj.actions.shape
        out = np.empty((T, n))
        for t in range(T):
            for j in range(n):
                out[t, j] = target.log_prob(j, int(traj.observations[t, j]), int(traj.actions[t, j]))
        return out
    if hasattr(target, "log_probs"):
        return np.asarray(target.log_probs(traj), dtype=float)
    return np.asarray(target, dtype=float)


def compute_isr(traj: Trajectory, target) -> IsrSeries:
    """Ratios from the stored behavior log-probs; mu is never re-evaluated."""
    mu = np.asarray(traj.behavior_logp, dtype=float)
    if not np.all(np.isfinite(mu)):
        t, j = np.argwhere(~np.isfinite(mu))[0]
        raise CorruptTrajectory(f"behavior log-prob at step {t}, agent {j} is {mu[t, j]}")
    pi = target_log_probs(traj, target)
    return IsrSeries.from_ratios(np.exp(pi - mu))


def trace_coefficients(indiv, comp, joint, scheme: str, lam: float = 1.0, eta: float = DEFAULT_ETA) -> np.ndarray:
    """Elementwise trace weight c from individual, complement and joint ratios."""
    if scheme == "untruncated":
        return np.array(joint, dtype=float, copy=True)
    if scheme == "lambda_only":
        return np.full(np.shape(joint), float(lam))
    if scheme == "ST":
        return lam * np.minimum(1.0, joint)
    if scheme == "IT":
        return lam * np.minimum(1.0, indiv)
    if scheme == "DT":
        if np.any(np.asarray(eta) <= 0):
            raise ValueError(f"eta must be positive, got {eta}")
        return lam * np.minimum(1.0, indiv * np.minimum(eta, comp))
    raise ValueError(f"unknown trace scheme {scheme!r}; expected one of {SCHEMES}")


@dataclass
class TraceWeights:
    scheme: str
    lam: float
    eta: float
    values: np.ndarray  # (T, n)
    isr: IsrSeries | None = None

    def __len__(self) -> int:
        return len(self.values)

    def cumulative(self, t: int, l: int) -> np.ndarray:
        """prod_{j=t+1}^{l} c_j per agent (empty product is 1)."""
        return np.prod(self.values[t + 1:l + 1], axis=0)

    def cumulative_table(self) -> np.ndarray:
        """K[t, l] = prod_{j=t+1}^{l} c_j for l >= t, zero below the diagonal; (T, T, n)."""
        T, n = self.values.shape
        K = np.zeros((T, T, n))
        for t in range(T):
            K[t, t] = 1.0
            for l in range(t + 1, T):
                K[t, l] = K[t, l - 1] * self.values[l]
        return K


def truncate(isr: IsrSeries, scheme: str, lam: float = 1.0, eta: float = DEFAULT_ETA) -> TraceWeights:
    if not 0.0 < lam <= 1.0:
        raise ValueError(f"lambda must be in (0, 1], got {lam}")
    joint = np.broadcast_to(isr.joint[:, None], isr.individual.shape)
    c = trace_coefficients(isr.individual, isr.complement, joint, scheme, lam, eta)
    return TraceWeights(scheme, lam, eta, c, isr)


def lambda_traces(length: int, num_agents: int, lam: float) -> TraceWeights:
    return TraceWeights("lambda_only", lam, DEFAULT_ETA, np.full((length, num_agents), float(lam)))


@dataclass
class GapReport:
    """Trace-gap statistics for one agent; distances are per trajectory."""

    scheme: str
    lam: float
    eta: float
    agent: int
    d_indiv: np.ndarray = field(default_factory=lambda: np.zeros(0))
    d_joint: np.ndarray = field(default_factory=lambda: np.zeros(0))
    convention: str = "mean_t |x_t - c_t/lambda|"

    @property
    def gaps(self) -> np.ndarray:
        return np.abs(self.d_joint - self.d_indiv)

    @property
    def mean_d_indiv(self) -> float:
        return float(self.d_indiv.mean())

    @property
    def mean_d_joint(self) -> float:
        return float(self.d_joint.mean())

    @property
    def gap(self) -> float:
        return float(self.gaps.mean())


def _distance(x: np.ndarray, c: np.ndarray, scale: float) -> float:
    return float(np.mean(np.abs(x - c / scale)))


def gap_metric(isrs, weights, agent: int = 0) -> GapReport:
    """Delta c for ``agent`` over a set of trajectories.

    ``isrs``/``weights`` are matching sequences (or single objects).
    """
    if isinstance(isrs, IsrSeries):
        isrs, weights = [isrs], [weights]
    isrs, weights = list(isrs), list(weights)
    if not isrs:
        raise ValueError("gap_metric needs at least one trajectory")
    if len(isrs) != len(weights):
        raise ValueError("isr and weight sequences differ in length")
    d_i, d_j = [], []
    for isr, w in zip(isrs, weights):
        if len(isr) != len(w):
            raise ValueError("isr and trace series differ in length")
        c = w.values[:, agent]
        # untruncated traces carry no lambda factor
        scale = 1.0 if w.scheme == "untruncated" else w.lam
        d_i.append(_distance(isr.individual[:, agent], c, scale))
        d_j.append(_distance(isr.joint, c, scale))
    w0 = weights[0]
    return GapReport(w0.scheme, w0.lam, w0.eta, agent, np.array(d_i), np.array(d_j))


GAP_COLUMNS = ("scheme", "lambda", "eta", "d_indiv", "d_joint", "gap", "seed")


def gap_rows(report: GapReport, seed: int) -> list[dict]:
    return [{
        "scheme": report.scheme, "lambda": report.lam,
        "eta": report.eta if report.scheme == "DT" else "",
        "d_indiv": report.mean_d_indiv, "d_joint": report.mean_d_joint,
        "gap": report.gap, "seed": seed,
    }]


def rows_to_csv(rows: list[dict], columns, meta: str = "") -> str:
    buf = io.StringIO()
    if meta:
        buf.write(f"# {meta}\n")
    w = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
