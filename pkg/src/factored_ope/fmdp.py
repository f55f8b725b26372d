"""Core factored-MDP data model, dynamics, and value computation.

A factored MDP over D state variables with a shared symbol domain of size
``gamma`` transitions each variable independently from a conditional
probability table (CPT) keyed by a realization of that variable's parent set
and the action.  Realization ranks are mixed-radix integers with the first
listed parent most significant; flat state ranks use variable 0 as the most
significant digit.  Rewards are known, deterministic, and bounded in [0, 1].
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

PROB_TOL = 1e-9
ENUM_GUARD = 2 ** 16
_DENSE_LIMIT = 3e8  # max A * S**2 doubles materialized by exact_value


class StateSpaceTooLarge(ValueError):
    """Raised when an operation requiring enumeration is refused."""

    def __init__(self, op: str, size: int, limit: int):
        super().__init__(
            f"{op} refused: flat state space has {size} states, limit {limit}"
        )
        self.size = size
        self.limit = limit


def spawn_seed(*parts) -> int:
    """Derive a stable 63-bit seed from arbitrary labelled parts.

    Independent of evaluation order, platform, and PYTHONHASHSEED, so sweep
    cells and trajectories can derive their streams in parallel.
    """
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def ranks_of(states: np.ndarray, subset: Sequence[int], gamma: int) -> np.ndarray:
    """Mixed-radix rank of ``states[:, subset]``, first index most significant."""
    r = np.zeros(states.shape[0], dtype=np.int64)
    for idx in subset:
        r *= gamma
        r += states[:, idx]
    return r


def unrank(rank: int, width: int, gamma: int) -> np.ndarray:
    """Inverse of ``ranks_of`` for a single rank."""
    digits = np.zeros(width, dtype=np.int16)
    for pos in range(width - 1, -1, -1):
        digits[pos] = rank % gamma
        rank //= gamma
    return digits


def all_states(n_vars: int, gamma: int) -> np.ndarray:
    """All states in flat-rank order, shape (gamma**n_vars, n_vars)."""
    size = gamma ** n_vars
    ranks = np.arange(size)
    out = np.empty((size, n_vars), dtype=np.int16)
    for pos in range(n_vars - 1, -1, -1):
        out[:, pos] = ranks % gamma
        ranks = ranks // gamma
    return out


def sample_rows(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF sample per row: first column whose running sum exceeds u."""
    cum = np.cumsum(probs, axis=1)
    hit = cum > u[:, None]
    idx = np.argmax(hit, axis=1)
    idx[~hit[:, -1]] = probs.shape[1] - 1
    return idx.astype(np.int64)


# ---------------------------------------------------------------------------
# Rewards


class Reward:
    """Known deterministic reward in [0, 1], vectorized and serializable."""

    def __init__(self, kind: str, params: dict, fn: Callable[[np.ndarray, np.ndarray], np.ndarray]):
        self.kind = kind
        self.params = dict(params)
        self._fn = fn

    def __call__(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return self._fn(np.asarray(states), np.asarray(actions))

    def at(self, state: np.ndarray, action: int) -> float:
        return float(self(np.asarray(state, dtype=np.int16)[None, :], np.array([action]))[0])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params}


_REWARD_KINDS: dict[str, Callable[[dict], Reward]] = {}


def register_reward(kind: str, factory: Callable[[dict], Reward]) -> None:
    _REWARD_KINDS[kind] = factory


def make_reward(kind: str, params: dict | None = None) -> Reward:
    params = params or {}
    if kind not in _REWARD_KINDS:
        raise ValueError(f"unknown reward kind {kind!r}")
    return _REWARD_KINDS[kind](params)


register_reward(
    "constant",
    lambda p: Reward("constant", p, lambda s, a: np.full(s.shape[0], float(p.get("value", 0.0)))),
)
register_reward(
    "last_value_indicator",
    lambda p: Reward(
        "last_value_indicator", p,
        lambda s, a: (s[:, -1] == int(p.get("value", 1))).astype(np.float64),
    ),
)
register_reward(
    "state_mean",
    lambda p: Reward(
        "state_mean", p,
        lambda s, a: s.mean(axis=1) / max(int(p["gamma"]) - 1, 1),
    ),
)


# ---------------------------------------------------------------------------
# Initial distribution


class InitialDist:
    """Initial-state distribution: per-variable product or explicit flat table."""

    def __init__(self, kind: str, probs: np.ndarray, n_vars: int, gamma: int):
        if kind not in ("product", "explicit"):
            raise ValueError(f"unknown rho kind {kind!r}")
        self.kind = kind
        self.n_vars = n_vars
        self.gamma = gamma
        if kind == "product":
            probs = np.asarray(probs, dtype=np.float64).reshape(n_vars, gamma)
            sums = probs.sum(axis=1)
        else:
            probs = np.asarray(probs, dtype=np.float64).reshape(gamma ** n_vars)
            sums = probs.sum(keepdims=True)
        if np.any(probs < 0) or np.any(np.abs(sums - 1.0) > PROB_TOL):
            raise ValueError("rho probabilities must be nonnegative and sum to 1")
        self.probs = probs

    @classmethod
    def uniform_product(cls, n_vars: int, gamma: int) -> "InitialDist":
        return cls("product", np.full((n_vars, gamma), 1.0 / gamma), n_vars, gamma)

    def sample_batch(self, u: np.ndarray) -> np.ndarray:
        """Sample one state per lane from a (n, n_vars) uniform block."""
        n = u.shape[0]
        out = np.empty((n, self.n_vars), dtype=np.int16)
        if self.kind == "product":
            for i in range(self.n_vars):
                row = np.broadcast_to(self.probs[i], (n, self.gamma))
                out[:, i] = sample_rows(row, u[:, i])
        else:
            flat_idx = sample_rows(np.broadcast_to(self.probs, (n, self.probs.size)), u[:, 0])
            rem = flat_idx.copy()
            for pos in range(self.n_vars - 1, -1, -1):
                out[:, pos] = rem % self.gamma
                rem //= self.gamma
        return out

    def flat(self) -> np.ndarray:
        """Dense probability vector over flat state ranks."""
        size = self.gamma ** self.n_vars
        if size > ENUM_GUARD:
            raise StateSpaceTooLarge("rho.flat", size, ENUM_GUARD)
        if self.kind == "explicit":
            return self.probs.copy()
        vec = np.ones(1)
        for i in range(self.n_vars):
            vec = np.kron(vec, self.probs[i])
        return vec

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": {"probs": self.probs.tolist()}}


# ---------------------------------------------------------------------------
# Policies


class Policy:
    """Markov policy over actions, readable from a subset of state variables.

    ``subset=None`` denotes the uniform-random policy.  Otherwise ``table``
    maps the mixed-radix rank of ``state[subset]`` to an action distribution.
    Immutable after construction and safe to share across workers.
    """

    def __init__(self, n_actions: int, kind: str, subset: tuple[int, ...] | None = None,
                 table: np.ndarray | None = None, gamma: int = 0):
        self.n_actions = n_actions
        self.kind = kind
        self.subset = None if subset is None else tuple(subset)
        self.gamma = gamma
        if table is not None:
            table = np.asarray(table, dtype=np.float64)
            if table.ndim != 2 or table.shape[1] != n_actions:
                raise ValueError("policy table must have shape (ranks, n_actions)")
            if np.any(table < 0) or np.any(np.abs(table.sum(axis=1) - 1.0) > PROB_TOL):
                raise ValueError("policy rows must be distributions")
            table.setflags(write=False)
        self.table = table

    @classmethod
    def uniform(cls, n_actions: int) -> "Policy":
        return cls(n_actions, "uniform")

    @classmethod
    def tabular(cls, n_actions: int, subset: Iterable[int], table: np.ndarray, gamma: int,
                kind: str = "tabular") -> "Policy":
        return cls(n_actions, kind, tuple(subset), table, gamma)

    @classmethod
    def constant(cls, n_actions: int, action: int) -> "Policy":
        row = np.zeros((1, n_actions))
        row[0, action] = 1.0
        return cls(n_actions, f"constant({action})", (), row, 0)

    def batch_probs(self, states: np.ndarray) -> np.ndarray:
        n = states.shape[0]
        if self.table is None:
            return np.full((n, self.n_actions), 1.0 / self.n_actions)
        ranks = ranks_of(states, self.subset, self.gamma)
        return self.table[ranks]

    def action_prob(self, state: np.ndarray, action: int) -> float:
        return float(self.batch_probs(np.asarray(state, dtype=np.int16)[None, :])[0, action])

    def sample_batch(self, states: np.ndarray, u: np.ndarray) -> np.ndarray:
        return sample_rows(self.batch_probs(states), u)

    def sample(self, state: np.ndarray, rng: np.random.Generator) -> int:
        return int(self.sample_batch(np.asarray(state, dtype=np.int16)[None, :], rng.random(1))[0])


def epsilon_floor(policy: Policy, eps: float) -> Policy:
    """Mix a policy with the uniform policy so every action has mass >= eps/A.

    Returns ``(1 - eps) * base + eps * uniform`` row by row.
    """
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"eps must lie in [0, 1], got {eps}")
    if policy.table is None or eps == 0.0:
        if eps == 1.0:
            return Policy.uniform(policy.n_actions)
        return policy if policy.table is None else Policy(
            policy.n_actions, policy.kind, policy.subset, policy.table, policy.gamma)
    floored = (1.0 - eps) * policy.table + eps / policy.n_actions
    return Policy(policy.n_actions, f"eps_floor({policy.kind},{eps})",
                  policy.subset, floored, policy.gamma)


# ---------------------------------------------------------------------------
# The factored MDP


@dataclass(frozen=True)
class FactoredMdp:
    """Full generative model: parent sets, CPTs, reward, rho, and horizon.

    ``cpts[i]`` has shape (gamma**len(parents[i]), n_actions, gamma); row
    ``[rank, a]`` is the next-value distribution of variable i when its
    parents realize ``rank`` and action ``a`` is taken.

    Immutable after construction (arrays are write-locked), so instances are
    safe to share across threads and rollout workers; sampling takes per-call
    RNG state.
    """

    n_vars: int
    gamma: int
    n_actions: int
    horizon: int
    parents: tuple[tuple[int, ...], ...]
    cpts: tuple[np.ndarray, ...]
    reward: Reward
    rho: InitialDist
    _flat: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.gamma < 1 or self.n_actions < 1 or self.n_vars < 1 or self.horizon < 0:
            raise ValueError("invalid FactoredMdp dimensions")
        if len(self.parents) != self.n_vars or len(self.cpts) != self.n_vars:
            raise ValueError("parents and cpts must have one entry per variable")
        for i, (par, cpt) in enumerate(zip(self.parents, self.cpts)):
            if list(par) != sorted(set(par)) or any(p < 0 or p >= self.n_vars for p in par):
                raise ValueError(f"parents of variable {i} must be distinct, sorted indices")
            want = (self.gamma ** len(par), self.n_actions, self.gamma)
            if cpt.shape != want:
                raise ValueError(f"cpt {i} has shape {cpt.shape}, expected {want}")
            if np.any(cpt < 0) or np.any(np.abs(cpt.sum(axis=2) - 1.0) > PROB_TOL):
                raise ValueError(f"cpt {i} rows must be distributions")
            cpt.setflags(write=False)
        # Flattened layout consumed by the step kernels.
        par_flat = np.array([p for par in self.parents for p in par], dtype=np.int64)
        par_off = np.cumsum([0] + [len(p) for p in self.parents]).astype(np.int64)
        cpt_flat = np.concatenate([c.ravel() for c in self.cpts])
        cpt_off = np.cumsum([0] + [c.size for c in self.cpts]).astype(np.int64)
        self._flat.update(par_flat=par_flat, par_off=par_off,
                          cpt_flat=cpt_flat, cpt_off=cpt_off)

    @property
    def n_states(self) -> int:
        return self.gamma ** self.n_vars

    def signature(self) -> tuple[int, int, int, int]:
        return (self.n_vars, self.gamma, self.n_actions, self.horizon)

    def step_batch(self, states: np.ndarray, actions: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Sample next states for every lane from (n, n_vars) uniforms."""
        states = np.ascontiguousarray(states, dtype=np.int16)
        actions = np.ascontiguousarray(actions, dtype=np.int64)
        u = np.ascontiguousarray(u, dtype=np.float64)
        out = np.empty_like(states)
        kernels.step_batch(states, actions, u,
                           self._flat["cpt_flat"], self._flat["cpt_off"],
                           self._flat["par_flat"], self._flat["par_off"],
                           self.gamma, self.n_actions, out)
        return out

    def next_state_dist(self, state: np.ndarray, action: int) -> np.ndarray:
        """Exact next-state law over flat ranks (analytic product of CPT rows)."""
        if self.n_states > ENUM_GUARD:
            raise StateSpaceTooLarge("next_state_dist", self.n_states, ENUM_GUARD)
        s = np.asarray(state, dtype=np.int16)[None, :]
        vec = np.ones(1)
        for i in range(self.n_vars):
            row = self.cpts[i][int(ranks_of(s, self.parents[i], self.gamma)[0]), action]
            vec = np.kron(vec, row)
        return vec

    def dense_transition(self, action: int) -> np.ndarray:
        """(S, S) transition matrix for one action."""
        size = self.n_states
        if size > ENUM_GUARD:
            raise StateSpaceTooLarge("dense_transition", size, ENUM_GUARD)
        return self.transition_block(action, all_states(self.n_vars, self.gamma))

    def transition_block(self, action: int, sources: np.ndarray) -> np.ndarray:
        """(len(sources), S) rows of the transition matrix for one action."""
        states = all_states(self.n_vars, self.gamma)
        out = np.ones((sources.shape[0], states.shape[0]))
        for i in range(self.n_vars):
            rows = self.cpts[i][ranks_of(sources, self.parents[i], self.gamma), action]
            out *= rows[:, states[:, i]]
        return out

    def reward_table(self) -> np.ndarray:
        """(S, A) reward lookup over flat state ranks."""
        states = all_states(self.n_vars, self.gamma)
        cols = [self.reward(states, np.full(len(states), a, dtype=np.int64))
                for a in range(self.n_actions)]
        return np.stack(cols, axis=1)

    def to_dict(self) -> dict:
        return {
            "D": self.n_vars,
            "gamma": self.gamma,
            "A": self.n_actions,
            "horizon": self.horizon,
            "parents": [list(p) for p in self.parents],
            "cpts": [c.tolist() for c in self.cpts],
            "reward": self.reward.to_dict(),
            "rho": self.rho.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FactoredMdp":
        n_vars, gamma = int(doc["D"]), int(doc["gamma"])
        return cls(
            n_vars=n_vars,
            gamma=gamma,
            n_actions=int(doc["A"]),
            horizon=int(doc["horizon"]),
            parents=tuple(tuple(int(p) for p in par) for par in doc["parents"]),
            cpts=tuple(np.asarray(c, dtype=np.float64) for c in doc["cpts"]),
            reward=make_reward(doc["reward"]["kind"], doc["reward"].get("params", {})),
            rho=InitialDist(doc["rho"]["kind"], np.asarray(doc["rho"]["params"]["probs"]),
                            n_vars, gamma),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "FactoredMdp":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def step(mdp: FactoredMdp, state: np.ndarray, action: int,
         rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Sample one transition; each next variable draws from its CPT row."""
    s = np.asarray(state, dtype=np.int16)[None, :]
    a = np.array([action], dtype=np.int64)
    u = rng.random((1, mdp.n_vars))
    nxt = mdp.step_batch(s, a, u)[0]
    return nxt, mdp.reward.at(state, action)


# ---------------------------------------------------------------------------
# Trajectories


@dataclass(frozen=True)
class Trajectory:
    """One rollout: T (state, action, reward) steps plus the closing state."""

    states: np.ndarray  # (T+1, n_vars)
    actions: np.ndarray  # (T,)
    rewards: np.ndarray  # (T,)
    seed: int

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def steps(self) -> list[tuple[np.ndarray, int, float]]:
        return [(self.states[t], int(self.actions[t]), float(self.rewards[t]))
                for t in range(len(self))]


@dataclass(frozen=True)
class TrajectoryBatch:
    """H trajectories of equal length with per-trajectory seeds.

    Trajectory h is bit-identical to ``sample_trajectory`` run with
    ``seeds[h]``, so extending a batch (larger H, same master seed) leaves
    existing trajectories unchanged.
    """

    states: np.ndarray  # (H, T+1, n_vars)
    actions: np.ndarray  # (H, T)
    rewards: np.ndarray  # (H, T)
    seeds: np.ndarray  # (H,)

    @property
    def n_traj(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    @property
    def n_vars(self) -> int:
        return self.states.shape[2]

    def trajectory(self, h: int) -> Trajectory:
        return Trajectory(self.states[h], self.actions[h], self.rewards[h],
                          int(self.seeds[h]))

    def returns(self) -> np.ndarray:
        return self.rewards.sum(axis=1)

    def transitions(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(X, a, r, Y) arrays over all H*T logged transitions."""
        h, t1, d = self.states.shape
        x = self.states[:, :-1, :].reshape(h * (t1 - 1), d) if t1 > 1 else \
            np.empty((0, d), dtype=self.states.dtype)
        y = self.states[:, 1:, :].reshape(h * (t1 - 1), d) if t1 > 1 else \
            np.empty((0, d), dtype=self.states.dtype)
        return x, self.actions.reshape(-1), self.rewards.reshape(-1), y

    def data_hash(self) -> str:
        digest = hashlib.sha256()
        for arr in (self.states, self.actions, self.rewards, self.seeds):
            digest.update(np.ascontiguousarray(arr).tobytes())
        return digest.hexdigest()[:16]

    def save(self, path) -> None:
        np.savez_compressed(path, states=self.states, actions=self.actions,
                            rewards=self.rewards, seeds=self.seeds)

    @classmethod
    def load(cls, path) -> "TrajectoryBatch":
        with np.load(path) as data:
            return cls(data["states"], data["actions"], data["rewards"], data["seeds"])


def _check_rewards(rewards: np.ndarray) -> None:
    if rewards.size and (rewards.min() < -PROB_TOL or rewards.max() > 1.0 + PROB_TOL):
        raise ValueError("rewards left [0, 1]; the reward function is invalid")


def _lane_uniforms(seed: int, horizon: int, n_vars: int) -> np.ndarray:
    """The uniform stream one trajectory consumes: init block + per-step blocks."""
    rng = np.random.default_rng(seed)
    return rng.random((1 + horizon, 1 + n_vars))


def sample_trajectory(mdp: FactoredMdp, policy: Policy, seed: int,
                      horizon: int | None = None) -> Trajectory:
    """Sample one trajectory: s0 ~ rho, then T policy steps. Deterministic in seed."""
    batch = _sample_batch_from_seeds(mdp, policy, np.array([seed], dtype=np.int64), horizon)
    return batch.trajectory(0)


def sample_batch(mdp: FactoredMdp, policy: Policy, n_traj: int, master_seed: int,
                 horizon: int | None = None) -> TrajectoryBatch:
    """Sample H trajectories with per-trajectory seeds derived from the master."""
    seeds = np.array([spawn_seed(master_seed, "traj", h) for h in range(n_traj)],
                     dtype=np.int64)
    return _sample_batch_from_seeds(mdp, policy, seeds, horizon)


def _sample_batch_from_seeds(mdp: FactoredMdp, policy: Policy, seeds: np.ndarray,
                             horizon: int | None) -> TrajectoryBatch:
    t_max = mdp.horizon if horizon is None else horizon
    n = len(seeds)
    d = mdp.n_vars
    states = np.zeros((n, t_max + 1, d), dtype=np.int16)
    actions = np.zeros((n, t_max), dtype=np.int64)
    rewards = np.zeros((n, t_max), dtype=np.float64)
    chunk = max(1, min(n, int(2 ** 22 // max((t_max + 1) * (d + 1), 1)) + 1))
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        u = np.stack([_lane_uniforms(int(s), t_max, d) for s in seeds[lo:hi]])
        cur = mdp.rho.sample_batch(u[:, 0, 1:])
        states[lo:hi, 0] = cur
        for t in range(t_max):
            a = policy.sample_batch(cur, u[:, t + 1, 0])
            r = mdp.reward(cur, a)
            _check_rewards(r)
            nxt = mdp.step_batch(cur, a, u[:, t + 1, 1:])
            actions[lo:hi, t] = a
            rewards[lo:hi, t] = r
            states[lo:hi, t + 1] = nxt
            cur = nxt
    return TrajectoryBatch(states, actions, rewards, seeds)


def monte_carlo_value(mdp: FactoredMdp, policy: Policy, n_rollouts: int, seed: int,
                      horizon: int | None = None, chunk: int = 16384) -> tuple[float, float]:
    """Mean and standard error of the T-step return over seeded rollouts."""
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    t_max = mdp.horizon if horizon is None else horizon
    rng = np.random.default_rng(seed)
    returns = np.empty(n_rollouts)
    for lo in range(0, n_rollouts, chunk):
        hi = min(n_rollouts, lo + chunk)
        n = hi - lo
        cur = mdp.rho.sample_batch(rng.random((n, mdp.n_vars)))
        acc = np.zeros(n)
        for _ in range(t_max):
            u = rng.random((n, 1 + mdp.n_vars))
            a = policy.sample_batch(cur, u[:, 0])
            r = mdp.reward(cur, a)
            _check_rewards(r)
            acc += r
            cur = mdp.step_batch(cur, a, u[:, 1:])
        returns[lo:hi] = acc
    mean = float(returns.mean())
    stderr = float(returns.std(ddof=1) / math.sqrt(n_rollouts)) if n_rollouts > 1 else 0.0
    return mean, stderr


# ---------------------------------------------------------------------------
# Exact evaluation


def _dense_transitions(mdp: FactoredMdp) -> list[np.ndarray]:
    return [mdp.dense_transition(a) for a in range(mdp.n_actions)]


def exact_value(mdp: FactoredMdp, policy: Policy, horizon: int | None = None) -> float:
    """Exact policy value by backward induction over the flat state space.

    Refuses when gamma**D exceeds the enumeration guard.
    """
    size = mdp.n_states
    if size > ENUM_GUARD:
        raise StateSpaceTooLarge("exact_value", size, ENUM_GUARD)
    t_max = mdp.horizon if horizon is None else horizon
    states = all_states(mdp.n_vars, mdp.gamma)
    pi = policy.batch_probs(states)  # (S, A)
    rtab = np.stack([mdp.reward(states, np.full(size, a, dtype=np.int64))
                     for a in range(mdp.n_actions)], axis=1)
    _check_rewards(rtab)
    if mdp.n_actions * size * size <= _DENSE_LIMIT:
        trans = _dense_transitions(mdp)
        v = np.zeros(size)
        for _ in range(t_max):
            q = rtab + np.stack([p @ v for p in trans], axis=1)
            v = (pi * q).sum(axis=1)
    else:  # streaming fallback: rebuild transition blocks every step (slow path)
        v = np.zeros(size)
        block = 1024
        for _ in range(t_max):
            q = rtab.copy()
            for a in range(mdp.n_actions):
                for lo in range(0, size, block):
                    src = states[lo:lo + block]
                    q[lo:lo + block, a] += mdp.transition_block(a, src) @ v
            v = (pi * q).sum(axis=1)
    return float(mdp.rho.flat() @ v)
