"""Benchmark domain constructors and target-policy derivation.

Registered domains: ``taxi``, ``random-fmdp``, ``assumption1-violation``,
``assumption3-violation``, and ``copy-chain``.  All constructors are pure
functions of their parameters, so regeneration is bit-identical.
"""
from __future__ import annotations

import numpy as np

from .fmdp import (ENUM_GUARD, FactoredMdp, InitialDist, Policy, Reward,
                   StateSpaceTooLarge, all_states, epsilon_floor, make_reward,
                   ranks_of, register_reward)

# ---------------------------------------------------------------------------
# Taxi (5x5 grid, continual formulation)
#
# Variables: 0=row, 1=col, 2=passenger (depot 0-3 or 4=in taxi), 3=destination
# (depot 0-3; symbol 4 unused).  Actions: 0=south 1=north 2=east 3=west
# 4=pickup 5=dropoff.  A carried dropoff at any depot delivers: the passenger
# leaves and a new one spawns at a uniform random depot, which keeps every
# true parent set small and removes terminal states.  Classic rewards
# {-10, -1, +20} are affinely rescaled into [0, 1] via r -> (r + 10) / 30.

TAXI_DEPOTS = ((0, 0), (0, 4), (4, 0), (4, 3))
_TAXI_WALL_EAST = {(0, 1), (1, 1), (3, 0), (4, 0), (3, 2), (4, 2)}
_R_STEP = (-1 + 10) / 30  # 0.3
_R_DELIVER = (20 + 10) / 30  # 1.0
_R_ILLEGAL = (-10 + 10) / 30  # 0.0
IN_TAXI = 4


def _depot_index(row: np.ndarray, col: np.ndarray) -> np.ndarray:
    """Depot id per state, -1 when the taxi is not on a depot cell."""
    out = np.full(row.shape, -1, dtype=np.int64)
    for k, (dr, dc) in enumerate(TAXI_DEPOTS):
        out[(row == dr) & (col == dc)] = k
    return out


def _taxi_reward_fn(states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    row, col, pas, dest = (states[:, i].astype(np.int64) for i in range(4))
    depot = _depot_index(row, col)
    out = np.full(states.shape[0], _R_STEP)
    pickup = actions == 4
    drop = actions == 5
    legal_pickup = pickup & (pas < IN_TAXI) & (depot == pas)
    out[pickup & ~legal_pickup] = _R_ILLEGAL
    carried_at_depot = drop & (pas == IN_TAXI) & (depot >= 0)
    out[drop] = _R_ILLEGAL
    out[carried_at_depot & (depot == dest)] = _R_DELIVER
    return out


register_reward("taxi", lambda p: Reward("taxi", p, _taxi_reward_fn))


def make_taxi(horizon: int = 200) -> FactoredMdp:
    """The 5x5 taxi benchmark: 500 reachable flat states, 6 actions."""
    gamma, n_actions = 5, 6
    # row depends on row only
    row_cpt = np.zeros((5, n_actions, 5))
    for r in range(5):
        for a in range(n_actions):
            nr = r
            if a == 0:
                nr = min(r + 1, 4)
            elif a == 1:
                nr = max(r - 1, 0)
            row_cpt[r, a, nr] = 1.0
    # col depends on (row, col) through the walls
    col_cpt = np.zeros((25, n_actions, 5))
    for r in range(5):
        for c in range(5):
            rank = r * 5 + c
            for a in range(n_actions):
                nc = c
                if a == 2 and c < 4 and (r, c) not in _TAXI_WALL_EAST:
                    nc = c + 1
                elif a == 3 and c > 0 and (r, c - 1) not in _TAXI_WALL_EAST:
                    nc = c - 1
                col_cpt[rank, a, nc] = 1.0
    # passenger depends on (row, col, passenger)
    pas_cpt = np.zeros((125, n_actions, 5))
    for r in range(5):
        for c in range(5):
            depot = -1
            for k, loc in enumerate(TAXI_DEPOTS):
                if loc == (r, c):
                    depot = k
            for p in range(5):
                rank = (r * 5 + c) * 5 + p
                for a in range(n_actions):
                    if a == 4 and p < IN_TAXI and depot == p:
                        pas_cpt[rank, a, IN_TAXI] = 1.0
                    elif a == 5 and p == IN_TAXI and depot >= 0:
                        pas_cpt[rank, a, :4] = 0.25
                    else:
                        pas_cpt[rank, a, p] = 1.0
    # destination is static
    dest_cpt = np.zeros((5, n_actions, 5))
    for d in range(5):
        dest_cpt[d, :, d] = 1.0
    rho = InitialDist(
        "product",
        np.array([
            [0.2] * 5,
            [0.2] * 5,
            [0.25, 0.25, 0.25, 0.25, 0.0],
            [0.25, 0.25, 0.25, 0.25, 0.0],
        ]),
        4, gamma,
    )
    return FactoredMdp(
        n_vars=4, gamma=gamma, n_actions=n_actions, horizon=horizon,
        parents=((0,), (0, 1), (0, 1, 2), (3,)),
        cpts=(row_cpt, col_cpt, pas_cpt, dest_cpt),
        reward=make_reward("taxi"),
        rho=rho,
    )


# ---------------------------------------------------------------------------
# Random factored MDPs


def random_fmdp(n_vars: int, gamma: int, n_actions: int, seed: int,
                horizon: int = 200, max_parents: int = 4) -> FactoredMdp:
    """Random dense-CPT FMDP: parent counts uniform on 1..max_parents,
    parents sampled without replacement, CPT rows uniform-normalized, and a
    sparse reward of 1 iff the last variable equals 1."""
    if n_vars < 1 or gamma < 2 or n_actions < 1:
        raise ValueError("need n_vars >= 1, gamma >= 2, n_actions >= 1")
    rng = np.random.default_rng(seed)
    parents = []
    cpts = []
    cap = min(max_parents, n_vars)
    for _ in range(n_vars):
        k = int(rng.integers(1, cap + 1))
        par = tuple(sorted(rng.choice(n_vars, size=k, replace=False).tolist()))
        raw = rng.random((gamma ** k, n_actions, gamma))
        cpts.append(raw / raw.sum(axis=2, keepdims=True))
        parents.append(par)
    return FactoredMdp(
        n_vars=n_vars, gamma=gamma, n_actions=n_actions, horizon=horizon,
        parents=tuple(parents), cpts=tuple(cpts),
        reward=make_reward("last_value_indicator", {"value": 1}),
        rho=InitialDist.uniform_product(n_vars, gamma),
    )


# ---------------------------------------------------------------------------
# Counterexample constructions


def _point_mass_cpt(n_ranks: int, n_actions: int, gamma: int, value_of_rank) -> np.ndarray:
    cpt = np.zeros((n_ranks, n_actions, gamma))
    for rank in range(n_ranks):
        cpt[rank, :, value_of_rank(rank)] = 1.0
    return cpt


def make_assumption1_violation(horizon: int = 50) -> FactoredMdp:
    """Three binary variables where variable 2 is driven by (0, 1) through an
    AND gate while its own previous value tracks the gate output exactly.

    Variables 0 and 1 hold their initial values, and the initial distribution
    pins variable 2 to AND(0, 1), so variable 2 is a perfect non-parent proxy
    for its own next value at every step: greedy selection scores it above
    either true parent.
    """
    gamma, n_actions = 2, 2
    copy0 = _point_mass_cpt(2, n_actions, gamma, lambda r: r)
    copy1 = _point_mass_cpt(2, n_actions, gamma, lambda r: r)
    gate = _point_mass_cpt(4, n_actions, gamma, lambda r: (r >> 1) & (r & 1))
    probs = np.zeros(8)
    for x0 in range(2):
        for x1 in range(2):
            probs[(x0 * 2 + x1) * 2 + (x0 & x1)] = 0.25
    return FactoredMdp(
        n_vars=3, gamma=gamma, n_actions=n_actions, horizon=horizon,
        parents=((0,), (1,), (0, 1)),
        cpts=(copy0, copy1, gate),
        reward=make_reward("last_value_indicator", {"value": 1}),
        rho=InitialDist("explicit", probs, 3, gamma),
    )


def make_assumption3_violation(horizon: int = 50) -> FactoredMdp:
    """Three binary variables where variable 2 is the XOR of (0, 1).

    Variables 0 and 1 refresh uniformly every step, so either one alone
    carries zero information about variable 2's next value while the pair
    determines it: greedy selection can never start.
    """
    gamma, n_actions = 2, 2
    fresh = np.full((1, n_actions, gamma), 0.5)
    xor = _point_mass_cpt(4, n_actions, gamma, lambda r: (r >> 1) ^ (r & 1))
    return FactoredMdp(
        n_vars=3, gamma=gamma, n_actions=n_actions, horizon=horizon,
        parents=((), (), (0, 1)),
        cpts=(fresh.copy(), fresh.copy(), xor),
        reward=make_reward("last_value_indicator", {"value": 1}),
        rho=InitialDist.uniform_product(3, gamma),
    )


def copy_chain(n_vars: int = 8, gamma: int = 2, n_actions: int = 2,
               horizon: int = 50) -> FactoredMdp:
    """Deterministic test domain: every variable copies itself forever."""
    cpts = tuple(
        _point_mass_cpt(gamma, n_actions, gamma, lambda r: r)
        for _ in range(n_vars)
    )
    return FactoredMdp(
        n_vars=n_vars, gamma=gamma, n_actions=n_actions, horizon=horizon,
        parents=tuple((i,) for i in range(n_vars)), cpts=cpts,
        reward=make_reward("state_mean", {"gamma": gamma}),
        rho=InitialDist.uniform_product(n_vars, gamma),
    )


# ---------------------------------------------------------------------------
# Registry

DOMAINS = {
    "taxi": make_taxi,
    "random-fmdp": random_fmdp,
    "assumption1-violation": make_assumption1_violation,
    "assumption3-violation": make_assumption3_violation,
    "copy-chain": copy_chain,
}


def make_domain(name: str, **params) -> FactoredMdp:
    if name not in DOMAINS:
        raise ValueError(f"unknown domain {name!r}; known: {sorted(DOMAINS)}")
    return DOMAINS[name](**params)


def flat_state_count(mdp: FactoredMdp) -> int:
    """Number of flat states reachable from the support of rho."""
    size = mdp.n_states
    if size > ENUM_GUARD:
        raise StateSpaceTooLarge("flat_state_count", size, ENUM_GUARD)
    states = all_states(mdp.n_vars, mdp.gamma)
    reachable = mdp.rho.flat() > 0
    frontier = np.flatnonzero(reachable)
    while frontier.size:
        nxt_mask = np.zeros(size, dtype=bool)
        for lo in range(0, len(frontier), 256):
            src = states[frontier[lo:lo + 256]]
            for a in range(mdp.n_actions):
                # support of the product law = product of per-variable supports
                supports = np.ones((len(src), size), dtype=bool)
                for i in range(mdp.n_vars):
                    rows = mdp.cpts[i][ranks_of(src, mdp.parents[i], mdp.gamma), a]
                    supports &= rows[:, states[:, i]] > 0
                nxt_mask |= supports.any(axis=0)
        new = nxt_mask & ~reachable
        reachable |= nxt_mask
        frontier = np.flatnonzero(new)
    return int(reachable.sum())


# ---------------------------------------------------------------------------
# Target policies


def plan_target_policy(mdp: FactoredMdp, eps_floor: float,
                       horizon: int | None = None) -> Policy:
    """Optimal stationary deterministic policy from finite-horizon backward
    induction on the true model (greedy in the step-0 Q), epsilon-floored.

    Refuses when the flat state space exceeds the enumeration guard.
    """
    size = mdp.n_states
    if size > ENUM_GUARD:
        raise StateSpaceTooLarge("plan_target_policy", size, ENUM_GUARD)
    t_max = mdp.horizon if horizon is None else horizon
    trans = [mdp.dense_transition(a) for a in range(mdp.n_actions)]
    rtab = mdp.reward_table()
    v = np.zeros(size)
    q = rtab.copy()
    for _ in range(t_max):
        q = rtab + np.stack([p @ v for p in trans], axis=1)
        v = q.max(axis=1)
    greedy = q.argmax(axis=1)  # ties resolve to the lowest action index
    table = np.zeros((size, mdp.n_actions))
    table[np.arange(size), greedy] = 1.0
    base = Policy.tabular(mdp.n_actions, range(mdp.n_vars), table, mdp.gamma,
                          kind="planned")
    return epsilon_floor(base, eps_floor)


def myopic_target_policy(mdp: FactoredMdp, eps_floor: float) -> Policy:
    """One-step-lookahead policy for indicator-of-last-variable rewards.

    Picks the action maximizing the probability that the last variable hits
    the rewarded value next step; reads only that variable's parents, so it
    scales to non-enumerable state spaces.
    """
    if mdp.reward.kind != "last_value_indicator":
        raise ValueError("myopic_target_policy requires a last_value_indicator reward")
    target_value = int(mdp.reward.params.get("value", 1))
    last = mdp.n_vars - 1
    suc = mdp.cpts[last][:, :, target_value]  # (ranks, A)
    greedy = suc.argmax(axis=1)
    table = np.zeros_like(suc)
    table[np.arange(suc.shape[0]), greedy] = 1.0
    base = Policy.tabular(mdp.n_actions, mdp.parents[last], table, mdp.gamma,
                          kind="myopic")
    return epsilon_floor(base, eps_floor)
