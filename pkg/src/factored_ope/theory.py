"""Exact theoretical quantities on enumerable instances.

Conditional next-value distributions for arbitrary index sets depend on the
state distribution, so everything here weights states by the exact
timestep-summed occupancy of a reference policy (the uniform-random behavior
policy unless one is supplied), mirroring how empirical counts arise from
logged data.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .fmdp import (ENUM_GUARD, FactoredMdp, Policy, StateSpaceTooLarge,
                   all_states, ranks_of)

_DEF_TOL = 0.0  # occupancy weights are nonnegative sums; zeros are exact
_ASSUMPTION_VAR_LIMIT = 10


# ---------------------------------------------------------------------------
# Occupancy and policy-mismatch coefficients


def _state_occupancies(mdp: FactoredMdp, policy: Policy,
                       horizon: int | None) -> np.ndarray:
    """d[t, s]: probability of being in flat state s at decision step t."""
    size = mdp.n_states
    if size > ENUM_GUARD:
        raise StateSpaceTooLarge("occupancy", size, ENUM_GUARD)
    t_max = mdp.horizon if horizon is None else horizon
    states = all_states(mdp.n_vars, mdp.gamma)
    pi = policy.batch_probs(states)
    trans = [mdp.dense_transition(a) for a in range(mdp.n_actions)]
    out = np.empty((t_max, size))
    d = mdp.rho.flat()
    for t in range(t_max):
        out[t] = d
        joint = d[:, None] * pi
        d = sum(trans[a].T @ joint[:, a] for a in range(mdp.n_actions))
    return out


def occupancy(mdp: FactoredMdp, policy: Policy, parent_set,
              horizon: int | None = None) -> np.ndarray:
    """occ[t, v, a]: probability of (parent realization v, action a) at step t.

    Steps run over the decision epochs of one trajectory; each slice sums
    to 1.  Exact forward propagation; refuses above the enumeration guard.
    """
    parent_set = tuple(parent_set)
    d = _state_occupancies(mdp, policy, horizon)
    states = all_states(mdp.n_vars, mdp.gamma)
    pi = policy.batch_probs(states)
    ranks = ranks_of(states, parent_set, mdp.gamma)
    n_ranks = mdp.gamma ** len(parent_set)
    t_max = d.shape[0]
    out = np.zeros((t_max, n_ranks, mdp.n_actions))
    for t in range(t_max):
        np.add.at(out[t], ranks, d[t][:, None] * pi)
    return out


def compute_psi(mdp: FactoredMdp, behavior: Policy, target: Policy,
                parents=None, horizon: int | None = None) -> np.ndarray:
    """Per-variable worst-case visitation ratio of target over behavior.

    The ratio runs over all realization-action pairs of each variable's
    parent set, with 0/0 treated as 0 and x/0 as infinity.
    """
    parents = mdp.parents if parents is None else tuple(tuple(p) for p in parents)
    out = np.empty(len(parents))
    for i, par in enumerate(parents):
        num = occupancy(mdp, target, par, horizon).sum(axis=0)
        den = occupancy(mdp, behavior, par, horizon).sum(axis=0)
        ratio = np.zeros_like(num)
        both = den > _DEF_TOL
        ratio[both] = num[both] / den[both]
        ratio[(~both) & (num > _DEF_TOL)] = math.inf
        out[i] = ratio.max() if ratio.size else 0.0
    return out


# ---------------------------------------------------------------------------
# Finite-sample bound


@dataclass(frozen=True)
class BoundInputs:
    """Arguments of the finite-sample evaluation-error bound."""

    eps: float
    delta1: float
    horizon: int
    n_vars: int
    max_parents: int
    c2: float
    c3: float
    psi: tuple[float, ...]
    n_actions: int
    gamma: int

    def __post_init__(self):
        if self.max_parents > self.n_vars:
            raise ValueError("max_parents cannot exceed n_vars")
        if any(p < 0 for p in self.psi):
            raise ValueError("psi values must be nonnegative")


@dataclass(frozen=True)
class Theorem1Bound:
    """Both printed forms of the bound (appendix form is primary).

    The source states two variants that disagree by a factor of T in the
    trajectory-miss term; neither is silently preferred, both are reported.
    """

    eps_star: float
    delta_star: float  # appendix form: T * A * Gamma^m * sum(psi) * delta1
    value_bound: float  # appendix form: delta_star * T + eps_star * D * T^2
    delta_star_main: float  # main-text form: A * Gamma^m * sum(psi) * delta1
    value_bound_main: float  # main-text form: T^2 * (delta_star_main + eps_star * D)
    confidence: float


def theorem1_bound(inputs: BoundInputs) -> Theorem1Bound:
    """Evaluate the closed forms exactly as stated; infinities propagate."""
    m = inputs.max_parents
    t = inputs.horizon
    d = inputs.n_vars
    eps_star = (4 * m + 1) * inputs.eps + m * inputs.c2 + m * m * inputs.c3
    sum_psi = math.fsum(p for p in inputs.psi if not math.isinf(p))
    if any(math.isinf(p) for p in inputs.psi):
        sum_psi = math.inf
    scale = inputs.n_actions * (inputs.gamma ** m)
    if inputs.delta1 == 0.0:
        delta_star_main = 0.0
    else:
        delta_star_main = scale * sum_psi * inputs.delta1
    delta_star = t * delta_star_main
    value_bound = delta_star * t + eps_star * d * t * t
    value_bound_main = t * t * (delta_star_main + eps_star * d)
    confidence = 1.0 - 2.0 * inputs.n_actions * d * (m + 2) * (d + 1 - m) \
        * (inputs.gamma ** (m + 1)) * inputs.delta1
    return Theorem1Bound(eps_star, delta_star, value_bound,
                         delta_star_main, value_bound_main, confidence)


# ---------------------------------------------------------------------------
# Exact conditional tables and influence scores


class ConditionalTables:
    """Occupancy-weighted exact conditionals P(Y(i) | X(U) = v, a).

    Built once per (mdp, policy); tables for index sets are cached.  A cell
    is *defined* when its conditioning event has positive occupancy; scores
    quantify only over defined cells, matching what counts can ever observe.
    """

    def __init__(self, mdp: FactoredMdp, policy: Policy | None = None,
                 horizon: int | None = None):
        self.mdp = mdp
        self.policy = policy or Policy.uniform(mdp.n_actions)
        d = _state_occupancies(mdp, self.policy, horizon)
        self.horizon = d.shape[0]
        states = all_states(mdp.n_vars, mdp.gamma)
        self.weights = d.sum(axis=0)[:, None] * self.policy.batch_probs(states)
        self._states = states
        self._cache: dict[tuple[int, tuple[int, ...]], tuple[np.ndarray, np.ndarray]] = {}

    def cond(self, var: int, idx_set) -> tuple[np.ndarray, np.ndarray]:
        """(table (R, A, gamma), defined (R, A)) for the sorted index set."""
        idx_set = tuple(sorted(idx_set))
        key = (var, idx_set)
        if key in self._cache:
            return self._cache[key]
        mdp = self.mdp
        rows = mdp.cpts[var][ranks_of(self._states, mdp.parents[var], mdp.gamma)]
        ranks = ranks_of(self._states, idx_set, mdp.gamma)
        n_ranks = mdp.gamma ** len(idx_set)
        num = np.zeros((n_ranks, mdp.n_actions, mdp.gamma))
        den = np.zeros((n_ranks, mdp.n_actions))
        np.add.at(num, ranks, self.weights[:, :, None] * rows)
        np.add.at(den, ranks, self.weights)
        defined = den > _DEF_TOL
        table = np.zeros_like(num)
        table[defined] = num[defined] / den[defined][:, None]
        self._cache[key] = (table, defined)
        return table, defined

    def _cells(self, var: int, psi: tuple[int, ...], j: int):
        """Conditionals of psi+{j} arranged as (psi-rank, v_j, a) cells."""
        psi = tuple(sorted(psi))
        u = tuple(sorted(psi + (j,)))
        table, defined = self.cond(var, u)
        gamma = self.mdp.gamma
        digs = all_states(len(u), gamma)
        psi_pos = [u.index(p) for p in psi]
        pos_j = u.index(j)
        psi_rank = ranks_of(digs, psi_pos, gamma)
        vj = digs[:, pos_j].astype(np.int64)
        n_psi = gamma ** len(psi)
        cells = np.zeros((n_psi, gamma, self.mdp.n_actions, gamma))
        dmask = np.zeros((n_psi, gamma, self.mdp.n_actions), dtype=bool)
        cells[psi_rank, vj] = table
        dmask[psi_rank, vj] = defined
        return cells, dmask

    def baseline_gaps(self, var: int, psi, j: int):
        """L1 gap of each psi+{j} cell against its psi baseline.

        This is the quantity the greedy learner estimates from counts:
        || P(Y | psi + {j} = (v, vj), a) - P(Y | psi = v, a) ||_1.
        Returns (gaps (R_psi, gamma, A), defined mask).
        """
        psi = tuple(sorted(psi))
        cells, dmask = self._cells(var, psi, j)
        base, base_def = self.cond(var, psi)
        gaps = np.abs(cells - base[:, None, :, :]).sum(axis=3)
        return gaps, dmask & base_def[:, None, :]

    def pairwise_gaps(self, var: int, psi, j: int):
        """Largest L1 contrast of each cell against sibling values of j.

        score(v, vj, a) = max over defined vj' of
        || P(Y | (v, vj), a) - P(Y | (v, vj'), a) ||_1, the per-realization
        influence of j on the target on top of psi.
        Returns (scores (R_psi, gamma, A), defined mask).
        """
        cells, dmask = self._cells(var, tuple(sorted(psi)), j)
        gamma = self.mdp.gamma
        scores = np.zeros(dmask.shape)
        for alt in range(gamma):
            diff = np.abs(cells - cells[:, alt:alt + 1]).sum(axis=3)
            diff[~dmask[:, alt:alt + 1].repeat(gamma, axis=1)] = 0.0
            scores = np.maximum(scores, diff)
        scores[~dmask] = 0.0
        return scores, dmask


def exact_scores(mdp: FactoredMdp, var: int, given=(), policy: Policy | None = None,
                 horizon: int | None = None,
                 tables: ConditionalTables | None = None) -> dict[int, float | None]:
    """The greedy learner's candidate gaps computed from exact probabilities."""
    tables = tables or ConditionalTables(mdp, policy, horizon)
    given = tuple(sorted(given))
    out: dict[int, float | None] = {}
    for j in range(mdp.n_vars):
        if j in given:
            continue
        gaps, dmask = tables.baseline_gaps(var, given, j)
        out[j] = float(gaps[dmask].max()) if dmask.any() else None
    return out


def pairwise_scores(mdp: FactoredMdp, var: int, given=(), policy: Policy | None = None,
                    horizon: int | None = None,
                    tables: ConditionalTables | None = None) -> dict[int, float | None]:
    """Per-candidate maximal sibling contrast (influence on top of ``given``)."""
    tables = tables or ConditionalTables(mdp, policy, horizon)
    given = tuple(sorted(given))
    out: dict[int, float | None] = {}
    for j in range(mdp.n_vars):
        if j in given:
            continue
        scores, dmask = tables.pairwise_gaps(var, given, j)
        out[j] = float(scores[dmask].max()) if dmask.any() else None
    return out


# ---------------------------------------------------------------------------
# Assumption checking


@dataclass
class VariableAssumptionReport:
    var: int
    parents: tuple[int, ...]
    strong_set: tuple[int, ...]
    a1_holds: bool
    c1: float | None
    c2: float
    a3_holds: bool
    c3: float | None
    witnesses: list = field(default_factory=list)

    def to_dict(self) -> dict:
        def enc(x):
            if x is None:
                return None
            return "inf" if math.isinf(x) else x
        return {
            "var": self.var,
            "parents": list(self.parents),
            "strong_set": list(self.strong_set),
            "a1_holds": self.a1_holds,
            "c1": enc(self.c1),
            "c2": enc(self.c2),
            "a3_holds": self.a3_holds,
            "c3": enc(self.c3),
            "witnesses": self.witnesses,
        }


@dataclass
class AssumptionReport:
    """Brute-force audit of the three structural assumptions.

    Influence is measured by the per-realization sibling contrast
    (``pairwise_gaps``) under the reference policy's occupancy.  The strong
    set of each variable is the constructive one: parents whose contrast from
    the empty set is positive at every defined realization.
    """

    variables: list[VariableAssumptionReport]
    policy_kind: str
    horizon: int

    @property
    def a1_holds(self) -> bool:
        return all(v.a1_holds for v in self.variables)

    @property
    def a3_holds(self) -> bool:
        return all(v.a3_holds for v in self.variables)

    @property
    def c2(self) -> float:
        return max((v.c2 for v in self.variables), default=0.0)

    def to_dict(self) -> dict:
        return {
            "policy_kind": self.policy_kind,
            "horizon": self.horizon,
            "weighting": "timestep-summed occupancy",
            "a1_holds": self.a1_holds,
            "a3_holds": self.a3_holds,
            "c2": self.c2 if not math.isinf(self.c2) else "inf",
            "variables": [v.to_dict() for v in self.variables],
        }


def _cell_tuples(dmask: np.ndarray):
    """Iterate defined (psi_rank, vj, a) index triples."""
    return zip(*np.nonzero(dmask))


def check_assumptions(mdp: FactoredMdp, policy: Policy | None = None,
                      horizon: int | None = None) -> AssumptionReport:
    """Enumerate the three assumptions exactly on a small instance.

    Refuses beyond 10 variables or the enumeration guard: the quantifiers
    sweep all parent subsets, candidate pairs, and realization-action cells.
    """
    if mdp.n_vars > _ASSUMPTION_VAR_LIMIT:
        raise StateSpaceTooLarge("check_assumptions", mdp.n_vars,
                                 _ASSUMPTION_VAR_LIMIT)
    tables = ConditionalTables(mdp, policy, horizon)
    gamma = mdp.gamma
    reports = []
    for i in range(mdp.n_vars):
        phi = mdp.parents[i]
        non_parents = [j for j in range(mdp.n_vars) if j not in phi]
        # Constructive strong set: parents with positive contrast at every
        # defined realization when conditioned on nothing.
        strong = []
        for k in phi:
            scores, dmask = tables.pairwise_gaps(i, (), k)
            if dmask.any() and scores[dmask].min() > 1e-9:
                strong.append(k)
        strong = tuple(strong)
        witnesses: list[dict] = []

        # Assumption 1: while a strong parent is missing from psi, some
        # remaining strong parent beats every non-parent cell.
        c1 = math.inf
        a1_holds = True
        psis_a1 = [psi for r in range(len(phi)) for psi in combinations(phi, r)
                   if set(strong) - set(psi)]
        for psi in psis_a1:
            best_k = -math.inf
            for k in set(strong) - set(psi):
                sk, dk = tables.pairwise_gaps(i, psi, k)
                if dk.any():
                    best_k = max(best_k, float(sk[dk].min()))
            if math.isinf(best_k):
                continue
            for j in non_parents:
                sj, dj = tables.pairwise_gaps(i, psi, j)
                if not dj.any():
                    continue
                margin = best_k - float(sj[dj].max())
                if margin < c1:
                    c1 = margin
                    if margin < 0:
                        cell = max(_cell_tuples(dj), key=lambda c: sj[c])
                        witnesses.append({
                            "assumption": 1, "var": i, "psi": list(psi), "j": int(j),
                            "cell": {"v": [int(x) for x in unrank_digits(cell[0], len(psi), gamma)],
                                     "vj": int(cell[1]), "a": int(cell[2])},
                            "lhs": best_k, "rhs": float(sj[cell]),
                        })
        if c1 < 0:
            a1_holds = False

        # Assumption 2: beyond the strong set, non-parents stay below c2.
        c2 = 0.0
        psis_super = [tuple(sorted(set(strong) | set(extra)))
                      for r in range(len(phi) + 1)
                      for extra in combinations(phi, r)
                      if set(strong) | set(extra) <= set(phi)]
        psis_super = sorted(set(psis_super))
        for psi in psis_super:
            for j in non_parents:
                sj, dj = tables.pairwise_gaps(i, psi, j)
                if dj.any():
                    c2 = max(c2, float(sj[dj].max()))

        # Assumption 3: adding the weaker candidate after the stronger one
        # cannot reveal more than the stronger one already did.
        c3 = math.inf
        a3_holds = True
        for psi in psis_super:
            rest = [p for p in phi if p not in psi]
            for j in rest:
                for k in rest:
                    if k == j:
                        continue
                    sj, dj = tables.pairwise_gaps(i, psi, j)
                    sk, dk = tables.pairwise_gaps(i, psi, k)
                    rhs, dr = tables.pairwise_gaps(i, tuple(sorted(psi + (j,))), k)
                    uj = tuple(sorted(psi + (j,)))
                    rank_map = _pair_rank_map(psi, j, uj, gamma)
                    for (p, vj, a) in _cell_tuples(dj):
                        lhs = sj[p, vj, a]
                        for vk in range(gamma):
                            if not dk[p, vk, a] or lhs < sk[p, vk, a]:
                                continue
                            rj = rank_map[p, vj]
                            if not dr[rj, vk, a]:
                                continue
                            margin = float(lhs - rhs[rj, vk, a])
                            if margin < c3:
                                c3 = margin
                                if margin < 0:
                                    witnesses.append({
                                        "assumption": 3, "var": i, "psi": list(psi),
                                        "j": int(j), "k": int(k),
                                        "cell": {"v": [int(x) for x in unrank_digits(p, len(psi), gamma)],
                                                 "vj": int(vj), "vk": int(vk), "a": int(a)},
                                        "lhs": float(lhs), "rhs": float(rhs[rj, vk, a]),
                                    })
        if c3 < 0:
            a3_holds = False
        reports.append(VariableAssumptionReport(
            var=i, parents=phi, strong_set=strong,
            a1_holds=a1_holds, c1=(None if c1 < 0 else c1),
            c2=c2,
            a3_holds=a3_holds, c3=(None if c3 < 0 else c3),
            witnesses=witnesses,
        ))
    return AssumptionReport(reports, tables.policy.kind, tables.horizon)


def unrank_digits(rank: int, width: int, gamma: int) -> list[int]:
    out = [0] * width
    for pos in range(width - 1, -1, -1):
        out[pos] = rank % gamma
        rank //= gamma
    return out


def _pair_rank_map(psi: tuple[int, ...], j: int, uj: tuple[int, ...],
                   gamma: int) -> np.ndarray:
    """(psi_rank, vj) -> rank under sorted(psi + (j,))."""
    n_psi = gamma ** len(psi)
    digs = all_states(len(uj), gamma)
    psi_pos = [uj.index(p) for p in psi]
    pos_j = uj.index(j)
    psi_rank = ranks_of(digs, psi_pos, gamma)
    vj = digs[:, pos_j].astype(np.int64)
    out = np.zeros((n_psi, gamma), dtype=np.int64)
    out[psi_rank, vj] = np.arange(len(digs))
    return out


def rescore_witness(mdp: FactoredMdp, witness: dict, policy: Policy | None = None,
                    horizon: int | None = None) -> dict:
    """Recompute a witness's two sides; the violation must reproduce."""
    tables = ConditionalTables(mdp, policy, horizon)
    i = witness["var"]
    psi = tuple(sorted(witness["psi"]))
    gamma = mdp.gamma
    cell = witness["cell"]
    p_rank = 0
    for x in cell["v"]:
        p_rank = p_rank * gamma + x
    if witness["assumption"] == 1:
        strong = []
        for k in mdp.parents[i]:
            sk, dk = tables.pairwise_gaps(i, (), k)
            if dk.any() and sk[dk].min() > 1e-9:
                strong.append(k)
        best_k = -math.inf
        for k in set(strong) - set(psi):
            sk, dk = tables.pairwise_gaps(i, psi, k)
            if dk.any():
                best_k = max(best_k, float(sk[dk].min()))
        sj, _ = tables.pairwise_gaps(i, psi, witness["j"])
        return {"lhs": best_k, "rhs": float(sj[p_rank, cell["vj"], cell["a"]])}
    sj, _ = tables.pairwise_gaps(i, psi, witness["j"])
    rhs_tab, _ = tables.pairwise_gaps(i, tuple(sorted(psi + (witness["j"],))),
                                      witness["k"])
    rank_map = _pair_rank_map(psi, witness["j"],
                              tuple(sorted(psi + (witness["j"],))), gamma)
    rj = rank_map[p_rank, cell["vj"]]
    return {"lhs": float(sj[p_rank, cell["vj"], cell["a"]]),
            "rhs": float(rhs_tab[rj, cell["vk"], cell["a"]])}
