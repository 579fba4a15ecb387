"""Small numpy networks with hand-written backward passes, Adam, target copies
and a finite-difference gradient checker.

Every network stores its parameters in a flat ``dict[str, ndarray]`` so that
optimizers, checkpoints and the gradient checker treat them uniformly.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_VERSION = 1


def _orthogonal(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float) -> np.ndarray:
    a = rng.normal(size=(max(fan_in, fan_out), min(fan_in, fan_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    w = q if fan_in >= fan_out else q.T
    return gain * w[:fan_in, :fan_out]


def one_hot(idx, depth: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=int)
    out = np.zeros(idx.shape + (depth,))
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class Module:
    """Parameter container; subclasses define forward/backward."""

    kind = "module"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.config: dict = {}

    def copy(self):
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.params = {k: v.copy() for k, v in self.params.items()}
        return clone

    def load_params(self, params: dict[str, np.ndarray]):
        for k in self.params:
            self.params[k] = np.array(params[k], dtype=float, copy=True)

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())


class MLP(Module):
    """Dense ReLU stack; the last layer is linear.  ``prefix`` namespaces parameters."""

    kind = "mlp"

    def __init__(self, sizes, rng: np.random.Generator, prefix: str = "", out_scale: float = 0.0,
                 params: dict | None = None):
        super().__init__()
        self.sizes = list(sizes)
        self.prefix = prefix
        self.config = {"sizes": self.sizes, "prefix": prefix}
        store = self.params if params is None else params
        nl = len(sizes) - 1
        for k in range(nl):
            last = k == nl - 1
            gain = out_scale if last else np.sqrt(2.0)
            w = _orthogonal(rng, sizes[k], sizes[k + 1], gain) if gain else np.zeros((sizes[k], sizes[k + 1]))
            store[f"{prefix}W{k}"] = w
            store[f"{prefix}b{k}"] = np.zeros(sizes[k + 1])

    def forward(self, x: np.ndarray, params):
        p = params
        cache = []
        h = x
        nl = len(self.sizes) - 1
        for k in range(nl):
            z = h @ p[f"{self.prefix}W{k}"] + p[f"{self.prefix}b{k}"]
            cache.append((h, z))
            h = np.maximum(z, 0.0) if k < nl - 1 else z
        return h, cache

    def backward(self, cache, dout: np.ndarray, params, grads=None):
        p = params
        grads = {} if grads is None else grads
        g = dout
        nl = len(self.sizes) - 1
        for k in range(nl - 1, -1, -1):
            h, z = cache[k]
            if k < nl - 1:
                g = g * (z > 0)
            grads[f"{self.prefix}W{k}"] = h.T @ g
            grads[f"{self.prefix}b{k}"] = g.sum(axis=0)
            g = g @ p[f"{self.prefix}W{k}"].T
        return grads, g

    @staticmethod
    def relu_pattern(cache) -> list[np.ndarray]:
        return [z > 0 for _, z in cache[:-1]]


# ------------------------------------------------------------------ policy

class PolicyNet(Module):
    """Shared categorical policy: [one-hot obs, one-hot agent] -> 2 ReLU layers -> softmax."""

    kind = "policy"

    def __init__(self, obs_dim: int, num_agents: int, num_actions: int, width: int = 128,
                 seed: int = 0, out_scale: float = 0.0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.obs_dim, self.num_agents, self.num_actions, self.width = obs_dim, num_agents, num_actions, width
        self.config = {"obs_dim": obs_dim, "num_agents": num_agents, "num_actions": num_actions, "width": width}
        self.mlp = MLP([obs_dim + num_agents, width, width, num_actions], rng, "pi.", out_scale, self.params)

    def features(self, obs, agents) -> np.ndarray:
        obs = np.asarray(obs)
        if obs.ndim == 1:
            obs = one_hot(obs, self.obs_dim)
        if obs.shape[-1] != self.obs_dim:
            raise ValueError(f"observation dimension {obs.shape[-1]} != {self.obs_dim}")
        return np.concatenate([obs, one_hot(agents, self.num_agents)], axis=-1)

    def logits(self, x, params=None):
        return self.mlp.forward(x, self.params if params is None else params)

    def forward(self, obs, agents):
        """Returns (probs, log_probs), each (B, A)."""
        z, _ = self.logits(self.features(obs, agents))
        return softmax(z), log_softmax(z)

    def table(self) -> np.ndarray:
        """Action probabilities for every (agent, observation): (n, O, A)."""
        O, n = self.obs_dim, self.num_agents
        obs = np.tile(np.arange(O), n)
        agents = np.repeat(np.arange(n), O)
        p, _ = self.forward(obs, agents)
        return p.reshape(n, O, self.num_actions)


# ------------------------------------------------------------------ critics

class CriticNet(Module):
    """Per-agent critic EQ^i(s, a^{-i}) with three input branches.

    Branch 1 sees [state one-hot, agent one-hot]; branch 2 the other agents'
    one-hot actions (agent i's slot zeroed); branch 3 agent i's own action
    probabilities.  Each branch has width/2 units; their concatenation feeds a
    hidden layer of ``width`` and a scalar head.
    """

    kind = "critic"

    def __init__(self, state_dim: int, num_agents: int, num_actions: int, width: int = 128,
                 seed: int = 0, out_scale: float = 0.0):
        super().__init__()
        rng = np.random.default_rng(seed)
        half = max(1, width // 2)
        self.state_dim, self.num_agents, self.num_actions, self.width = state_dim, num_agents, num_actions, width
        self.config = {"state_dim": state_dim, "num_agents": num_agents, "num_actions": num_actions, "width": width}
        self.b_state = MLP([state_dim + num_agents, half], rng, "c.s.", np.sqrt(2.0), self.params)
        self.b_other = MLP([num_agents * num_actions, half], rng, "c.o.", np.sqrt(2.0), self.params)
        self.b_own = MLP([num_actions, half], rng, "c.p.", np.sqrt(2.0), self.params)
        self.trunk = MLP([3 * half, width, 1], rng, "c.t.", out_scale, self.params)
        self.half = half

    def encode(self, states, agents, joint_actions, own_probs):
        """Build the three branch inputs from raw indices."""
        states = np.asarray(states, dtype=int)
        agents = np.asarray(agents, dtype=int)
        acts = one_hot(np.asarray(joint_actions, dtype=int), self.num_actions)  # (B, n, A)
        acts[np.arange(len(agents)), agents] = 0.0
        xs = np.concatenate([one_hot(states, self.state_dim), one_hot(agents, self.num_agents)], axis=-1)
        return xs, acts.reshape(len(agents), -1), np.asarray(own_probs, dtype=float)

    def forward(self, xs, xo, xp, params=None):
        p = self.params if params is None else params
        for x, dim, nm in ((xs, self.state_dim + self.num_agents, "state"),
                           (xo, self.num_agents * self.num_actions, "other-action"),
                           (xp, self.num_actions, "own-probability")):
            if x.shape[-1] != dim:
                raise ValueError(f"{nm} input has dimension {x.shape[-1]}, expected {dim}")
        hs, cs = self.b_state.forward(xs, p)
        ho, co = self.b_other.forward(xo, p)
        hp, cp = self.b_own.forward(xp, p)
        pre = np.concatenate([hs, ho, hp], axis=-1)
        hcat = np.maximum(pre, 0.0)
        out, ct = self.trunk.forward(hcat, p)
        return out[:, 0], (cs, co, cp, pre, ct)

    def backward(self, cache, dout, params=None):
        p = self.params if params is None else params
        cs, co, cp, pre, ct = cache
        grads: dict[str, np.ndarray] = {}
        _, dh = self.trunk.backward(ct, dout[:, None], p, grads)
        dh = dh * (pre > 0)
        h = self.half
        self.b_state.backward(cs, dh[:, :h], p, grads)
        self.b_other.backward(co, dh[:, h:2 * h], p, grads)
        _, dxp = self.b_own.backward(cp, dh[:, 2 * h:], p, grads)
        return grads, dxp

    @staticmethod
    def relu_pattern(cache):
        cs, co, cp, pre, ct = cache
        return [pre > 0] + MLP.relu_pattern(ct)


class HeadNet(Module):
    """Plain MLP head used for V(s), Q(s, ., a^{-i}) and r(s, ., a^{-i})."""

    kind = "head"

    def __init__(self, in_dim: int, out_dim: int, width: int = 64, seed: int = 0, out_scale: float = 0.0,
                 name: str = "head"):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.in_dim, self.out_dim, self.width = in_dim, out_dim, width
        self.config = {"in_dim": in_dim, "out_dim": out_dim, "width": width, "name": name}
        self.mlp = MLP([in_dim, width, width, out_dim], rng, f"{name}.", out_scale, self.params)

    def forward(self, x, params=None):
        return self.mlp.forward(x, self.params if params is None else params)

    def backward(self, cache, dout, params=None):
        return self.mlp.backward(cache, dout, self.params if params is None else params)


def sync_target(net: Module, target: Module):
    """Hard copy of parameters into ``target``."""
    for k, v in net.params.items():
        target.params[k][...] = v


# ------------------------------------------------------------------- losses

@dataclass
class LossResult:
    loss: float
    grads: dict[str, np.ndarray]
    pattern: tuple = ()
    info: dict = field(default_factory=dict)


def _pattern_key(masks) -> tuple:
    return tuple(np.packbits(m.ravel()).tobytes() for m in masks)


def critic_loss(net: CriticNet, xs, xo, xp, targets, params=None) -> LossResult:
    """Mean squared error against frozen targets."""
    pred, cache = net.forward(xs, xo, xp, params)
    diff = pred - np.asarray(targets, dtype=float)
    loss = float(np.mean(diff ** 2))
    grads, _ = net.backward(cache, 2.0 * diff / len(diff), params)
    return LossResult(loss, grads, _pattern_key(CriticNet.relu_pattern(cache)))


def head_loss(net: HeadNet, x, targets, select=None, params=None) -> LossResult:
    """MSE on a head's output; ``select`` picks one output column per row."""
    out, cache = net.forward(x, params)
    rows = np.arange(len(out))
    pred = out[:, 0] if select is None else out[rows, np.asarray(select, dtype=int)]
    diff = pred - np.asarray(targets, dtype=float)
    loss = float(np.mean(diff ** 2))
    dout = np.zeros_like(out)
    if select is None:
        dout[:, 0] = 2.0 * diff / len(diff)
    else:
        dout[rows, np.asarray(select, dtype=int)] = 2.0 * diff / len(diff)
    grads, _ = net.backward(cache, dout, params)
    return LossResult(loss, grads, _pattern_key(MLP.relu_pattern(cache)))


def actor_loss(net: PolicyNet, x, actions, logp_behavior, ratio_old, adv, clip_eps: float = 0.2,
               ent_coef: float = 0.01, params=None) -> LossResult:
    """Clipped surrogate with a moving clip band, minus an entropy bonus.

    r = pi_theta / mu (collection-time behavior), r_old = pi_curr / mu;
    objective min(r A, clip(r, r_old (1-eps), r_old (1+eps)) A).  At exact ties
    the unclipped branch's gradient is used.
    """
    z, cache = net.logits(x, params)
    B = len(z)
    rows = np.arange(B)
    actions = np.asarray(actions, dtype=int)
    logp_all = log_softmax(z)
    probs = np.exp(logp_all)
    logp = logp_all[rows, actions]
    r = np.exp(logp - np.asarray(logp_behavior, dtype=float))
    if not np.all(np.isfinite(r)):
        raise FloatingPointError("non-finite policy ratio")
    adv = np.asarray(adv, dtype=float)
    lo, hi = ratio_old * (1.0 - clip_eps), ratio_old * (1.0 + clip_eps)
    rc = np.clip(r, lo, hi)
    s1, s2 = r * adv, rc * adv
    use_unclipped = s1 <= s2
    obj = np.where(use_unclipped, s1, s2)
    # d obj / d r: A on the unclipped branch, A inside the band on the clipped branch, else 0
    inside = (r > lo) & (r < hi)
    dobj_dr = np.where(use_unclipped | inside, adv, 0.0)
    ent = -(probs * logp_all).sum(axis=1)
    loss = float(-obj.mean() - ent_coef * ent.mean())

    onehot = one_hot(actions, z.shape[1])
    dz = -(dobj_dr * r)[:, None] * (onehot - probs) / B
    # d entropy / d z_k = -p_k (log p_k + H)
    dz += ent_coef * probs * (logp_all + ent[:, None]) / B
    grads, _ = net.mlp.backward(cache, dz, net.params if params is None else params)
    boundary = np.isclose(r, lo, rtol=0, atol=1e-9) | np.isclose(r, hi, rtol=0, atol=1e-9)
    pattern = _pattern_key(MLP.relu_pattern(cache) + [use_unclipped, inside])
    info = {"entropy": float(ent.mean()), "clip_frac": float(np.mean(~inside)),
            "boundary": int(boundary.sum()), "ratio_mean": float(r.mean())}
    return LossResult(loss, grads, pattern, info)


# ---------------------------------------------------------------- optimizer

@dataclass
class StepResult:
    applied: bool
    lr: float
    message: str = ""


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float = 5e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 anneal: bool = False, total_steps: int | None = None):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.anneal, self.total_steps = anneal, total_steps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0
        self.progress = 0.0
        self.last_diagnostic = ""

    def lr_at(self, progress: float) -> float:
        if not self.anneal:
            return self.lr
        return self.lr * max(0.0, 1.0 - progress)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> StepResult:
        lr = self.lr_at(self.progress)
        for k, g in grads.items():
            if g.shape != params[k].shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {params[k].shape} for {k}")
            if not np.all(np.isfinite(g)):
                self.last_diagnostic = f"non-finite gradient in block {k}; step rejected"
                return StepResult(False, lr, self.last_diagnostic)
        self.step_count += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1 ** self.step_count, 1.0 - b2 ** self.step_count
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return StepResult(True, lr)


# --------------------------------------------------------------- grad check

@dataclass
class GradCheckReport:
    step: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    excluded: int = 0

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.worst < tol

    def merge(self, other: "GradCheckReport"):
        for k, v in other.max_rel_error.items():
            self.max_rel_error[k] = max(self.max_rel_error.get(k, 0.0), v)
            self.checked[k] = self.checked.get(k, 0) + other.checked[k]
        self.excluded += other.excluded

    def to_json(self) -> str:
        return json.dumps({"step": self.step, "max_rel_error": self.max_rel_error, "checked": self.checked,
                           "excluded": self.excluded, "worst": self.worst}, indent=2, sort_keys=True)


def rel_error(ga: float, gfd: float) -> float:
    return abs(ga - gfd) / max(1e-8, abs(ga) + abs(gfd))


def grad_check(loss_fn, params: dict[str, np.ndarray], rng: np.random.Generator, step: float = 1e-5,
               coords_per_block: int = 8) -> GradCheckReport:
    """Central differences on sampled coordinates of each parameter block.

    ``loss_fn(params) -> LossResult``.  A coordinate whose perturbation changes
    any ReLU or clip branch (the ``pattern``) is a non-differentiable point
    and is excluded from the report.
    """
    base = loss_fn(params)
    rep = GradCheckReport(step)
    for name in sorted(params):
        arr = params[name]
        idx = rng.choice(arr.size, size=min(coords_per_block, arr.size), replace=False)
        worst, n = 0.0, 0
        for flat in idx:
            pos = np.unravel_index(flat, arr.shape)
            old = arr[pos]
            arr[pos] = old + step
            up = loss_fn(params)
            arr[pos] = old - step
            dn = loss_fn(params)
            arr[pos] = old
            if up.pattern != base.pattern or dn.pattern != base.pattern:
                rep.excluded += 1
                continue
            gfd = (up.loss - dn.loss) / (2 * step)
            worst = max(worst, rel_error(float(base.grads[name][pos]), gfd))
            n += 1
        rep.max_rel_error[name] = worst
        rep.checked[name] = n
    return rep


# -------------------------------------------------------------- checkpoints

def save_checkpoint(path, nets: dict[str, Module], meta: dict | None = None):
    """Write an ``.npz``-compatible archive with fixed member timestamps, so
    identical parameters always produce identical bytes."""
    arch = {"version": CHECKPOINT_VERSION, "nets": {}, "meta": meta or {}}
    arrays = {}
    for name, net in nets.items():
        arch["nets"][name] = {"kind": net.kind, "config": net.config}
        for k, v in net.params.items():
            arrays[f"{name}/{k}"] = v
    arrays["__arch__"] = np.frombuffer(json.dumps(arch, sort_keys=True).encode(), dtype=np.uint8)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for key in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, arrays[key], allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(key + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_checkpoint(path) -> tuple[dict, dict[str, dict[str, np.ndarray]]]:
    with np.load(path) as data:
        arch = json.loads(bytes(data["__arch__"]).decode())
        if arch.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {arch.get('version')}")
        params: dict[str, dict[str, np.ndarray]] = {}
        for key in data.files:
            if key == "__arch__":
                continue
            net, k = key.split("/", 1)
            params.setdefault(net, {})[k] = data[key]
    return arch, params
