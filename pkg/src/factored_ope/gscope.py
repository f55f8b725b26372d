"""Greedy structure learning from batch trajectories.

For every state variable independently, candidate parents are added one at a
time by the largest L1 gap between the empirical next-value distribution
conditioned on the grown parent set plus the candidate and the one
conditioned on the grown set alone, maxed over realization-action triples
observed more than N(eps, delta1) times.  Growth stops when the best gap
drops to C2 + 2*eps or no triple clears the count threshold.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .fmdp import PROB_TOL, FactoredMdp, TrajectoryBatch, ranks_of


class UnobservedRealization(ValueError):
    """Raised when an empirical conditional is requested for a zero count."""


def sample_threshold(eps: float, delta1: float, gamma: int) -> int:
    """Trust threshold N = ceil((2*gamma^2 / eps^2) * ln(2*gamma / delta1)).

    ``delta1`` only needs to be positive for the closed form; values >= 1 are
    legal arithmetically though meaningless as failure probabilities.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if delta1 <= 0:
        raise ValueError(f"delta1 must be positive, got {delta1}")
    if gamma < 1:
        raise ValueError(f"gamma must be >= 1, got {gamma}")
    return math.ceil((2.0 * gamma * gamma / (eps * eps)) * math.log(2.0 * gamma / delta1))


def l1_diff(p: Sequence[float], q: Sequence[float]) -> float:
    """L1 distance between two distributions over the same symbols, in [0, 2]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    for vec in (p, q):
        if abs(float(vec.sum()) - 1.0) > 1e-6 or np.any(vec < -1e-12):
            raise ValueError("inputs must be probability vectors")
    return float(np.abs(p - q).sum())


@dataclass(frozen=True)
class CountStore:
    """Transition tallies for one target variable under one index set.

    ``n_yva[rank, a, y]`` counts transitions where the indexed variables
    realized ``rank`` (first index most significant), action ``a`` was taken,
    and the target variable landed on ``y``.
    """

    var: int
    subset: tuple[int, ...]
    gamma: int
    n_actions: int
    n_yva: np.ndarray

    @classmethod
    def from_batch(cls, batch: TrajectoryBatch, var: int, subset: Iterable[int],
                   gamma: int, n_actions: int) -> "CountStore":
        subset = tuple(subset)
        x, acts, _, y = batch.transitions()
        n_ranks = gamma ** len(subset)
        if x.shape[0]:
            key = (ranks_of(x, subset, gamma) * n_actions + acts) * gamma \
                + y[:, var].astype(np.int64)
            flat = np.bincount(key, minlength=n_ranks * n_actions * gamma)
        else:
            flat = np.zeros(n_ranks * n_actions * gamma, dtype=np.int64)
        return cls(var, subset, gamma, n_actions,
                   flat.reshape(n_ranks, n_actions, gamma))

    @property
    def n_va(self) -> np.ndarray:
        return self.n_yva.sum(axis=2)

    @property
    def total(self) -> int:
        return int(self.n_yva.sum())


def empirical_cpt(counts: CountStore, v_rank: int, action: int) -> np.ndarray:
    """Count-ratio next-value distribution for one realization-action pair."""
    row = counts.n_yva[v_rank, action]
    total = int(row.sum())
    if total == 0:
        raise UnobservedRealization(
            f"realization rank {v_rank} with action {action} was never observed "
            f"for variable {counts.var} under subset {counts.subset}")
    return row / total


@dataclass(frozen=True)
class CandidateScores:
    """Per-candidate best L1 gaps for one growth step of one variable.

    ``diffs[j]`` is None when no (realization, candidate-value, action)
    triple for j clears the count threshold; ``theta_empty`` says no
    candidate has any qualifying triple (the loop's break condition).
    """

    var: int
    given: tuple[int, ...]
    threshold_n: int
    diffs: dict[int, float | None]

    @property
    def theta_empty(self) -> bool:
        return all(v is None for v in self.diffs.values())

    def best(self) -> tuple[int, float] | None:
        """Highest-scoring candidate, ties to the lowest index; None if no data."""
        best_j, best_d = None, -math.inf
        for j in sorted(self.diffs):
            d = self.diffs[j]
            if d is not None and d > best_d:
                best_j, best_d = j, d
        return None if best_j is None else (best_j, best_d)


def _score_one_candidate(x, acts, ycol, given, j, gamma, n_actions, threshold_n):
    """Best qualifying L1 gap for candidate j on top of the given set."""
    order = list(given) + [j]
    r_given = gamma ** len(given)
    key = (ranks_of(x, order, gamma) * n_actions + acts) * gamma + ycol
    flat = np.bincount(key, minlength=r_given * gamma * n_actions * gamma)
    joint = flat.reshape(r_given, gamma, n_actions, gamma).astype(np.float64)
    n_jva = joint.sum(axis=3)  # (R, gamma_j, A)
    qual = n_jva > threshold_n
    if not qual.any():
        return None
    base_y = joint.sum(axis=1)  # (R, A, gamma)
    base_n = base_y.sum(axis=2)  # (R, A)
    with np.errstate(invalid="ignore", divide="ignore"):
        p_joint = joint / n_jva[:, :, :, None]
        p_base = base_y / base_n[:, :, None]
    gaps = np.abs(p_joint - p_base[:, None, :, :]).sum(axis=3)
    return float(gaps[qual].max())


def candidate_scores(batch: TrajectoryBatch, var: int, given: Iterable[int],
                     eps: float, delta1: float, gamma: int,
                     n_actions: int) -> CandidateScores:
    """Score every candidate parent j outside the given set for one variable."""
    given = tuple(given)
    n = sample_threshold(eps, delta1, gamma)
    x, acts, _, y = batch.transitions()
    diffs: dict[int, float | None] = {}
    n_vars = batch.n_vars
    ycol = y[:, var].astype(np.int64) if x.shape[0] else None
    for j in range(n_vars):
        if j in given:
            continue
        if x.shape[0] == 0:
            diffs[j] = None
            continue
        diffs[j] = _score_one_candidate(x, acts, ycol, given, j, gamma,
                                        n_actions, n)
    return CandidateScores(var, given, n, diffs)


def learn_structure(batch: TrajectoryBatch, eps: float, delta1: float, c2: float,
                    gamma: int, n_actions: int) -> tuple[tuple[int, ...], ...]:
    """Estimated parent sets for every variable (greedy, independent per i)."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if not 0.0 < delta1 < 1.0:
        raise ValueError(f"delta1 must lie in (0, 1), got {delta1}")
    if c2 < 0:
        raise ValueError(f"c2 must be nonnegative, got {c2}")
    n_vars = batch.n_vars
    out = []
    for i in range(n_vars):
        phi: list[int] = []
        while len(phi) < n_vars:
            scores = candidate_scores(batch, i, phi, eps, delta1, gamma, n_actions)
            top = scores.best()
            if top is None:
                break
            j_star, diff = top
            if diff > c2 + 2.0 * eps:
                phi = sorted(phi + [j_star])
            else:
                break
        out.append(tuple(phi))
    return tuple(out)


@dataclass(frozen=True)
class LearnedModel:
    """Estimated parent sets plus trusted empirical CPT rows.

    A row exists for (i, rank, a) exactly when its transition count reached
    the trust threshold; evaluators treat any visit to a missing row as
    leaving the known set (self-loop, zero reward from then on).  Keys are
    ``rank * n_actions + a`` sorted ascending per variable.
    """

    n_vars: int
    gamma: int
    n_actions: int
    phi_hat: tuple[tuple[int, ...], ...]
    keys: tuple[np.ndarray, ...]
    rows: tuple[np.ndarray, ...]
    eps: float
    delta1: float
    c2: float
    threshold_n: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for i, (k, r) in enumerate(zip(self.keys, self.rows)):
            if len(k) != len(r):
                raise ValueError(f"variable {i}: keys and rows disagree")
            if k.size and (np.any(np.diff(k) <= 0)):
                raise ValueError(f"variable {i}: keys must be strictly increasing")
            if r.size and np.any(np.abs(r.sum(axis=1) - 1.0) > PROB_TOL):
                raise ValueError(f"variable {i}: stored rows must sum to 1")

    def signature(self) -> tuple[int, int, int]:
        return (self.n_vars, self.gamma, self.n_actions)

    def is_sufficient(self, var: int, v_rank: int, action: int) -> bool:
        key = v_rank * self.n_actions + action
        pos = int(np.searchsorted(self.keys[var], key))
        return pos < len(self.keys[var]) and int(self.keys[var][pos]) == key

    def cpt_row(self, var: int, v_rank: int, action: int) -> np.ndarray:
        key = v_rank * self.n_actions + action
        pos = int(np.searchsorted(self.keys[var], key))
        if pos >= len(self.keys[var]) or int(self.keys[var][pos]) != key:
            raise UnobservedRealization(
                f"no trusted row for variable {var}, rank {v_rank}, action {action}")
        return self.rows[var][pos]

    def n_sufficient(self) -> int:
        return int(sum(len(k) for k in self.keys))

    def to_dict(self) -> dict:
        cpts = {}
        for i in range(self.n_vars):
            for key, row in zip(self.keys[i], self.rows[i]):
                rank, act = divmod(int(key), self.n_actions)
                cpts[f"{i}/{rank}/{act}"] = [float(p) for p in row]
        return {
            "phi_hat": [list(p) for p in self.phi_hat],
            "thresholds": {"eps": self.eps, "delta1": self.delta1,
                           "c2": self.c2, "N": self.threshold_n},
            "cpts": cpts,
            "sufficient": list(cpts.keys()),
            "signature": {"D": self.n_vars, "gamma": self.gamma,
                          "A": self.n_actions},
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LearnedModel":
        sig = doc["signature"]
        n_vars, gamma, n_actions = int(sig["D"]), int(sig["gamma"]), int(sig["A"])
        keys: list[list[int]] = [[] for _ in range(n_vars)]
        rows: list[list[list[float]]] = [[] for _ in range(n_vars)]
        parsed = []
        for label, row in doc["cpts"].items():
            i, rank, act = (int(part) for part in label.split("/"))
            parsed.append((i, rank * n_actions + act, row))
        for i, key, row in sorted(parsed):
            keys[i].append(key)
            rows[i].append(row)
        th = doc["thresholds"]
        return cls(
            n_vars=n_vars, gamma=gamma, n_actions=n_actions,
            phi_hat=tuple(tuple(int(p) for p in par) for par in doc["phi_hat"]),
            keys=tuple(np.asarray(k, dtype=np.int64) for k in keys),
            rows=tuple(np.asarray(r, dtype=np.float64).reshape(len(r), gamma)
                       for r in rows),
            eps=float(th["eps"]), delta1=float(th["delta1"]), c2=float(th["c2"]),
            threshold_n=int(th["N"]),
            provenance=dict(doc.get("provenance", {})),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "LearnedModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def build_model(batch: TrajectoryBatch, phi_hat: Sequence[Sequence[int]],
                eps: float, delta1: float, c2: float = 0.0,
                gamma: int | None = None, n_actions: int | None = None,
                extra_provenance: dict | None = None) -> LearnedModel:
    """Assemble the estimated model: empirical rows for every realization
    whose count reached N(eps, delta1), missing rows marked untrusted."""
    if gamma is None or n_actions is None:
        raise ValueError("gamma and n_actions are required")
    n = sample_threshold(eps, delta1, gamma)
    n_vars = batch.n_vars
    phi_hat = tuple(tuple(int(p) for p in par) for par in phi_hat)
    if len(phi_hat) != n_vars:
        raise ValueError("phi_hat must list one parent set per variable")
    keys, rows = [], []
    for i in range(n_vars):
        counts = CountStore.from_batch(batch, i, phi_hat[i], gamma, n_actions)
        n_va = counts.n_va
        ok = n_va >= n
        flat_idx = np.flatnonzero(ok.reshape(-1))
        keys.append(flat_idx.astype(np.int64))
        with np.errstate(invalid="ignore"):
            dist = counts.n_yva.reshape(-1, gamma)[flat_idx]
            dist = dist / dist.sum(axis=1, keepdims=True)
        rows.append(dist.astype(np.float64))
    provenance = {"data_hash": batch.data_hash(), "H": batch.n_traj,
                  "T": batch.horizon}
    provenance.update(extra_provenance or {})
    return LearnedModel(n_vars, gamma, n_actions, phi_hat, tuple(keys),
                        tuple(rows), eps, delta1, c2, n, provenance)


def model_from_true(mdp: FactoredMdp, eps: float = 0.0, delta1: float = 0.0,
                    c2: float = 0.0) -> LearnedModel:
    """Exact model with every realization trusted (oracle for evaluator tests)."""
    keys, rows = [], []
    for i in range(mdp.n_vars):
        cpt = mdp.cpts[i]
        n_ranks = cpt.shape[0]
        keys.append(np.arange(n_ranks * mdp.n_actions, dtype=np.int64))
        rows.append(cpt.reshape(n_ranks * mdp.n_actions, mdp.gamma).copy())
    return LearnedModel(mdp.n_vars, mdp.gamma, mdp.n_actions, mdp.parents,
                        tuple(keys), tuple(rows), eps, delta1, c2, 0,
                        {"source": "true-model"})
