import numpy as np
import pytest

from factored_ope.fmdp import FactoredMdp, InitialDist, make_reward


def point_mass_cpts(parents, gamma, n_actions, value_fn):
    """CPTs where each (rank, action) transitions deterministically."""
    cpts = []
    for i, par in enumerate(parents):
        n_ranks = gamma ** len(par)
        cpt = np.zeros((n_ranks, n_actions, gamma))
        for rank in range(n_ranks):
            for a in range(n_actions):
                cpt[rank, a, value_fn(i, rank, a)] = 1.0
        cpts.append(cpt)
    return tuple(cpts)


def copy_mdp(n_vars=2, gamma=2, n_actions=2, horizon=3, reward_kind="state_mean"):
    """Deterministic self-copy model used as a simple oracle target."""
    parents = tuple((i,) for i in range(n_vars))
    cpts = point_mass_cpts(parents, gamma, n_actions, lambda i, r, a: r)
    params = {"gamma": gamma} if reward_kind == "state_mean" else {}
    return FactoredMdp(n_vars, gamma, n_actions, horizon, parents, cpts,
                       make_reward(reward_kind, params),
                       InitialDist.uniform_product(n_vars, gamma))


def random_mdp(n_vars, gamma, n_actions, horizon, seed, reward_kind="state_mean"):
    """Random dense model with singleton-to-small parent sets."""
    rng = np.random.default_rng(seed)
    parents, cpts = [], []
    for _ in range(n_vars):
        k = int(rng.integers(1, min(3, n_vars) + 1))
        par = tuple(sorted(rng.choice(n_vars, size=k, replace=False).tolist()))
        raw = rng.random((gamma ** k, n_actions, gamma))
        cpts.append(raw / raw.sum(axis=2, keepdims=True))
        parents.append(par)
    params = {"gamma": gamma} if reward_kind == "state_mean" else {}
    return FactoredMdp(n_vars, gamma, n_actions, horizon, tuple(parents),
                       tuple(cpts), make_reward(reward_kind, params),
                       InitialDist.uniform_product(n_vars, gamma))


def deterministic_rho(values, gamma):
    """Point-mass product initial distribution."""
    n_vars = len(values)
    probs = np.zeros((n_vars, gamma))
    for i, v in enumerate(values):
        probs[i, v] = 1.0
    return InitialDist("product", probs, n_vars, gamma)


@pytest.fixture(scope="session")
def taxi():
    from factored_ope.domains import make_taxi
    return make_taxi()
