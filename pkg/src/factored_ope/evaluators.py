"""Target-policy value estimators over batch data.

Model-based estimators simulate the target policy on an estimated model and
fall back to the induced-MDP semantics outside the trusted region: the first
visit to an untrusted realization-action pair self-loops the whole state with
zero reward for the remainder of the rollout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .fmdp import (ENUM_GUARD, FactoredMdp, Policy, StateSpaceTooLarge,
                   TrajectoryBatch, all_states, ranks_of, sample_rows)
from .gscope import LearnedModel, build_model


class LoggingInconsistency(ValueError):
    """Raised when the claimed behavior policy gives a logged action zero mass."""


@dataclass
class EvalResult:
    """One estimator's output: point estimate, spread, and diagnostics."""

    method: str
    estimate: float
    stderr: float
    n_used: int
    diagnostics: dict = field(default_factory=dict)


def _summarize(method: str, returns: np.ndarray, diagnostics: dict) -> EvalResult:
    n = len(returns)
    mean = float(returns.mean()) if n else 0.0
    stderr = float(returns.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return EvalResult(method, mean, stderr, n, diagnostics)


def normalized_error(estimate: float, truth: float) -> float:
    """|estimate - truth| / |truth|; undefined for truth at zero."""
    if abs(truth) <= 1e-12:
        raise ValueError("normalized error undefined: reference value is zero")
    return abs(estimate - truth) / abs(truth)


# ---------------------------------------------------------------------------
# Model-based evaluation (learned factored model with induced-MDP fallback)


def evaluate_model_based(model: LearnedModel, mdp_meta: FactoredMdp, target: Policy,
                         n_rollouts: int, seed: int, horizon: int | None = None,
                         method: str = "gscope", chunk: int = 8192) -> EvalResult:
    """Monte-Carlo return of the target policy on the learned factored model.

    ``mdp_meta`` supplies the known quantities (initial distribution, reward,
    dimensions, horizon); transitions come exclusively from ``model``.
    """
    if model.signature() != (mdp_meta.n_vars, mdp_meta.gamma, mdp_meta.n_actions):
        raise ValueError(
            f"model signature {model.signature()} does not match environment "
            f"{(mdp_meta.n_vars, mdp_meta.gamma, mdp_meta.n_actions)}")
    t_max = mdp_meta.horizon if horizon is None else horizon
    rng = np.random.default_rng(seed)
    gamma, n_actions = mdp_meta.gamma, mdp_meta.n_actions
    returns = np.empty(n_rollouts)
    died = 0
    for lo in range(0, n_rollouts, chunk):
        n = min(n_rollouts, lo + chunk) - lo
        cur = mdp_meta.rho.sample_batch(rng.random((n, mdp_meta.n_vars)))
        acc = np.zeros(n)
        live = np.arange(n)
        for _ in range(t_max):
            if not live.size:
                break
            u = rng.random((len(live), 1 + mdp_meta.n_vars))
            acts = target.sample_batch(cur, u[:, 0])
            keys = [ranks_of(cur, model.phi_hat[i], gamma) * n_actions + acts
                    for i in range(model.n_vars)]
            ok = np.ones(len(live), dtype=bool)
            pos = []
            for i, key in enumerate(keys):
                p = np.searchsorted(model.keys[i], key)
                inb = p < len(model.keys[i])
                hit = inb.copy()
                hit[inb] = model.keys[i][p[inb]] == key[inb]
                ok &= hit
                pos.append(p)
            acc[live[ok]] += mdp_meta.reward(cur[ok], acts[ok])
            died += int((~ok).sum())
            nxt = np.empty((int(ok.sum()), mdp_meta.n_vars), dtype=np.int16)
            for i in range(model.n_vars):
                rows = model.rows[i][pos[i][ok]]
                nxt[:, i] = sample_rows(rows, u[ok, 1 + i]).astype(np.int16)
            cur = nxt
            live = live[ok]
        returns[lo:lo + n] = acc
    diag = {"fallback_rate": died / n_rollouts,
            "sufficient_rows": model.n_sufficient()}
    return _summarize(method, returns, diag)


def evaluate_known_structure(batch: TrajectoryBatch, mdp_meta: FactoredMdp,
                             true_parents, eps: float, delta1: float,
                             target: Policy, n_rollouts: int, seed: int,
                             horizon: int | None = None, c2: float = 0.0) -> EvalResult:
    """Model-based evaluation with the true parent sets given, CPTs estimated."""
    model = build_model(batch, true_parents, eps, delta1, c2,
                        gamma=mdp_meta.gamma, n_actions=mdp_meta.n_actions,
                        extra_provenance={"structure": "given"})
    result = evaluate_model_based(model, mdp_meta, target, n_rollouts, seed,
                                  horizon, method="ks")
    return result


# ---------------------------------------------------------------------------
# Flat tabular model


def evaluate_flat(batch: TrajectoryBatch, mdp_meta: FactoredMdp, target: Policy,
                  n_rollouts: int, seed: int, horizon: int | None = None,
                  chunk: int = 8192) -> EvalResult:
    """Tabular empirical model over flat states; unobserved pairs fall back.

    Refuses when the flat state space exceeds the enumeration guard, which is
    exactly the regime where a flat model cannot be built.
    """
    size = mdp_meta.n_states
    if size > ENUM_GUARD:
        raise StateSpaceTooLarge("evaluate_flat", size, ENUM_GUARD)
    t_max = mdp_meta.horizon if horizon is None else horizon
    gamma, n_vars, n_actions = mdp_meta.gamma, mdp_meta.n_vars, mdp_meta.n_actions
    x, acts, _, y = batch.transitions()
    key = ranks_of(x, range(n_vars), gamma) * n_actions + acts
    order = np.argsort(key, kind="stable")
    key_sorted = key[order]
    next_sorted = ranks_of(y, range(n_vars), gamma)[order]
    uniq, offsets = np.unique(key_sorted, return_index=True)
    offsets = np.append(offsets, len(key_sorted))

    rng = np.random.default_rng(seed)
    returns = np.empty(n_rollouts)
    died = 0
    digits = all_states(n_vars, gamma)
    for lo in range(0, n_rollouts, chunk):
        n = min(n_rollouts, lo + chunk) - lo
        cur = mdp_meta.rho.sample_batch(rng.random((n, n_vars)))
        acc = np.zeros(n)
        live = np.arange(n)
        for _ in range(t_max):
            if not live.size:
                break
            u = rng.random((len(live), 2))
            a = target.sample_batch(cur, u[:, 0])
            k = ranks_of(cur, range(n_vars), gamma) * n_actions + a
            p = np.searchsorted(uniq, k)
            inb = p < len(uniq)
            ok = inb.copy()
            ok[inb] = uniq[p[inb]] == k[inb]
            acc[live[ok]] += mdp_meta.reward(cur[ok], a[ok])
            died += int((~ok).sum())
            start = offsets[p[ok]]
            count = offsets[p[ok] + 1] - start
            pick = start + np.floor(u[ok, 1] * count).astype(np.int64)
            pick = np.minimum(pick, start + count - 1)
            cur = digits[next_sorted[pick]]
            live = live[ok]
        returns[lo:lo + n] = acc
    diag = {"fallback_rate": died / n_rollouts,
            "observed_pairs": int(len(uniq))}
    return _summarize("flat", returns, diag)


# ---------------------------------------------------------------------------
# Model-free Monte Carlo (trajectory stitching)


class _TransitionPool:
    """Per-action pools of logged transitions with without-replacement draws.

    Nearest neighbors use Hamming distance on state digits; the action must
    match exactly.  Ties resolve to the lowest pool index, and an exact-match
    shortcut serves distance-0 requests without scanning.
    """

    def __init__(self, batch: TrajectoryBatch, gamma: int, n_actions: int):
        x, acts, rew, y = batch.transitions()
        self.gamma = gamma
        self.states = []
        self.rewards = []
        self.next_states = []
        self.used = []
        self.buckets = []
        self.remaining = []
        for a in range(n_actions):
            idx = np.flatnonzero(acts == a)
            xs = np.ascontiguousarray(x[idx], dtype=np.int16)
            self.states.append(xs)
            self.rewards.append(rew[idx])
            self.next_states.append(y[idx])
            self.used.append(np.zeros(len(idx), dtype=bool))
            self.remaining.append(len(idx))
            bucket: dict[int, list[int]] = {}
            if len(idx):
                ranks = ranks_of(xs, range(xs.shape[1]), gamma)
                for row, rank in enumerate(ranks.tolist()):
                    bucket.setdefault(rank, []).append(row)
            self.buckets.append({rank: (rows, [0]) for rank, rows in bucket.items()})

    def nearest_unused(self, state: np.ndarray, action: int, k: int):
        """Indices of up to k nearest unused transitions and their distances."""
        if self.remaining[action] == 0:
            return [], []
        used = self.used[action]
        rank = int(ranks_of(state[None, :], range(len(state)), self.gamma)[0])
        entry = self.buckets[action].get(rank)
        if entry is not None:
            rows, cursor = entry
            while cursor[0] < len(rows) and used[rows[cursor[0]]]:
                cursor[0] += 1
            found = []
            pos = cursor[0]
            while pos < len(rows) and len(found) < k:
                if not used[rows[pos]]:
                    found.append(rows[pos])
                pos += 1
            if len(found) == k:
                return found, [0] * k
        pool = self.states[action]
        dist = np.empty(len(pool), dtype=np.int32)
        kernels.hamming_into(pool, np.ascontiguousarray(state, dtype=np.int16), dist)
        dist = dist.astype(np.int64)
        dist[used] = np.iinfo(np.int64).max
        avail = self.remaining[action]
        take = min(k, avail)
        kth = np.partition(dist, take - 1)[take - 1]
        less = np.flatnonzero(dist < kth)
        equal = np.flatnonzero(dist == kth)[: take - len(less)]
        chosen = np.concatenate([less, equal]).astype(np.int64)
        return chosen.tolist(), dist[chosen].tolist()

    def consume(self, action: int, row: int):
        self.used[action][row] = True
        self.remaining[action] -= 1


def evaluate_mfmc(batch: TrajectoryBatch, target: Policy, k: int, seed: int,
                  n_artificial: int | None = None, gamma: int | None = None,
                  n_actions: int | None = None,
                  horizon: int | None = None) -> EvalResult:
    """Stitch logged one-step transitions into artificial target trajectories.

    Each artificial step matches the sampled target action exactly, draws one
    of the k nearest unused transitions uniformly, and consumes it.  When the
    pool for an action runs dry the trajectory truncates with zero reward.
    """
    if batch.n_traj == 0:
        raise ValueError("evaluate_mfmc requires a nonempty batch")
    if k < 1:
        raise ValueError("k must be >= 1")
    if gamma is None or n_actions is None:
        raise ValueError("gamma and n_actions are required")
    t_max = batch.horizon if horizon is None else horizon
    n_art = batch.n_traj if n_artificial is None else n_artificial
    pool = _TransitionPool(batch, gamma, n_actions)
    rng = np.random.default_rng(seed)
    init_states = batch.states[:, 0, :]
    returns = np.zeros(n_art)
    truncated = 0
    consumed = 0
    dist_sum, dist_n = 0.0, 0
    for m in range(n_art):
        state = init_states[int(rng.integers(batch.n_traj))].copy()
        total = 0.0
        for _ in range(t_max):
            a = int(target.sample_batch(state[None, :], rng.random(1))[0])
            cands, dists = pool.nearest_unused(state, a, k)
            if not cands:
                truncated += 1
                break
            pick = int(rng.integers(len(cands)))
            row = cands[pick]
            pool.consume(a, row)
            consumed += 1
            total += float(pool.rewards[a][row])
            dist_sum += dists[pick]
            dist_n += 1
            state = pool.next_states[a][row].copy()
        returns[m] = total
    diag = {"truncation_rate": truncated / n_art if n_art else 0.0,
            "mean_stitch_distance": dist_sum / dist_n if dist_n else 0.0,
            "consumed": consumed}
    return _summarize("mfmc", returns, diag)


# ---------------------------------------------------------------------------
# Clipped importance sampling


def evaluate_cis(batch: TrajectoryBatch, target: Policy, behavior: Policy,
                 clip: float) -> EvalResult:
    """Trajectory-level clipped importance sampling.

    Weight per trajectory is min(clip, prod_t target/behavior on the logged
    actions); the estimate averages weight * return over trajectories.
    """
    if batch.n_traj == 0:
        raise ValueError("evaluate_cis requires a nonempty batch")
    if not clip > 0:
        raise ValueError("clip must be positive (math.inf disables clipping)")
    h, t = batch.actions.shape
    if t:
        flat_states = batch.states[:, :-1, :].reshape(h * t, -1)
        flat_actions = batch.actions.reshape(-1)
        tp = target.batch_probs(flat_states)[np.arange(h * t), flat_actions]
        bp = behavior.batch_probs(flat_states)[np.arange(h * t), flat_actions]
        if np.any(bp <= 0):
            raise LoggingInconsistency(
                "behavior policy assigns zero probability to a logged action")
        ratios = (tp / bp).reshape(h, t)
        weights = np.minimum(clip, np.prod(ratios, axis=1))
    else:
        weights = np.minimum(clip, np.ones(h))
    weighted = weights * batch.returns()
    total = float(weights.sum())
    if total > 0.0:
        normalized = weights / total
        ess = 1.0 / float((normalized ** 2).sum())
    else:
        ess = 0.0
    result = _summarize("cis", weighted, {"effective_sample_size": ess,
                                          "max_weight": float(weights.max())})
    return result
