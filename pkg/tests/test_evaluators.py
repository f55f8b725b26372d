import math

import numpy as np
import pytest

from factored_ope.domains import copy_chain, random_fmdp
from factored_ope.evaluators import (LoggingInconsistency, evaluate_cis,
                                     evaluate_flat, evaluate_known_structure,
                                     evaluate_mfmc, evaluate_model_based,
                                     normalized_error)
from factored_ope.fmdp import (FactoredMdp, Policy, StateSpaceTooLarge,
                               epsilon_floor, exact_value, make_reward,
                               sample_batch)
from factored_ope.gscope import LearnedModel, build_model, model_from_true
from conftest import copy_mdp, deterministic_rho, point_mass_cpts, random_mdp


def empty_model(mdp):
    return LearnedModel(
        mdp.n_vars, mdp.gamma, mdp.n_actions,
        tuple(() for _ in range(mdp.n_vars)),
        tuple(np.empty(0, dtype=np.int64) for _ in range(mdp.n_vars)),
        tuple(np.empty((0, mdp.gamma)) for _ in range(mdp.n_vars)),
        0.1, 0.1, 0.0, 10)


def fully_deterministic_mdp(horizon=6):
    parents = ((0,), (1,))
    return FactoredMdp(
        2, 2, 2, horizon, parents,
        point_mass_cpts(parents, 2, 2, lambda i, r, a: r),
        make_reward("state_mean", {"gamma": 2}),
        deterministic_rho([1, 0], 2))


class TestModelBased:
    def test_true_model_matches_exact_value(self):
        for seed in range(3):
            mdp = random_mdp(3, 2, 2, 5, seed=40 + seed)
            model = model_from_true(mdp)
            res = evaluate_model_based(model, mdp, Policy.uniform(2), 10_000,
                                       seed=seed)
            truth = exact_value(mdp, Policy.uniform(2))
            assert abs(res.estimate - truth) <= 4 * res.stderr
            assert res.diagnostics["fallback_rate"] == 0.0

    def test_empty_model_returns_exactly_zero(self):
        mdp = copy_mdp(3, 2, 2, horizon=5)
        res = evaluate_model_based(empty_model(mdp), mdp, Policy.uniform(2),
                                   500, seed=1)
        assert res.estimate == 0.0
        assert res.stderr == 0.0
        assert res.diagnostics["fallback_rate"] == 1.0

    def test_learned_copy_domain_matches_truth(self):
        mdp = copy_chain(4, 2, 2, horizon=20)
        batch = sample_batch(mdp, Policy.uniform(2), 400, master_seed=2)
        model = build_model(batch, tuple((i,) for i in range(4)), 0.5, 0.5,
                            gamma=2, n_actions=2)
        res = evaluate_model_based(model, mdp, Policy.uniform(2), 4000, seed=3)
        truth = exact_value(mdp, Policy.uniform(2))
        assert abs(res.estimate - truth) <= 4 * res.stderr + 1e-9

    def test_signature_mismatch_rejected(self):
        mdp = copy_mdp(3, 2, 2)
        other = copy_mdp(2, 2, 2)
        with pytest.raises(ValueError):
            evaluate_model_based(model_from_true(other), mdp,
                                 Policy.uniform(2), 10, seed=0)

    def test_returns_bounded_by_horizon(self):
        for seed in range(3):
            mdp = random_mdp(3, 2, 2, 7, seed=50 + seed)
            res = evaluate_model_based(model_from_true(mdp), mdp,
                                       Policy.uniform(2), 300, seed=seed)
            assert 0.0 <= res.estimate <= 7.0


class TestKnownStructure:
    def test_matches_model_based_with_same_inputs(self):
        mdp = copy_chain(3, 2, 2, horizon=15)
        batch = sample_batch(mdp, Policy.uniform(2), 300, master_seed=4)
        direct = build_model(batch, mdp.parents, 0.5, 0.5,
                             gamma=2, n_actions=2)
        a = evaluate_model_based(direct, mdp, Policy.uniform(2), 1000, seed=5)
        b = evaluate_known_structure(batch, mdp, mdp.parents, 0.5, 0.5,
                                     Policy.uniform(2), 1000, seed=5)
        assert a.estimate == b.estimate
        assert a.stderr == b.stderr

    def test_copy_domain_with_abundant_data(self):
        mdp = copy_chain(3, 2, 2, horizon=10)
        batch = sample_batch(mdp, Policy.uniform(2), 500, master_seed=6)
        res = evaluate_known_structure(batch, mdp, mdp.parents, 0.5, 0.5,
                                       Policy.uniform(2), 5000, seed=7)
        truth = exact_value(mdp, Policy.uniform(2))
        assert abs(res.estimate - truth) <= 4 * res.stderr + 1e-9

    def test_empty_batch_gives_zero(self):
        mdp = copy_chain(3, 2, 2, horizon=5)
        batch = sample_batch(mdp, Policy.uniform(2), 0, master_seed=0)
        res = evaluate_known_structure(batch, mdp, mdp.parents, 0.2, 0.1,
                                       Policy.uniform(2), 200, seed=8)
        assert res.estimate == 0.0


class TestFlat:
    def test_deterministic_limit_equals_exact_value(self):
        # deterministic dynamics, start state, and policy: once every visited
        # state-action pair is logged, the flat rollout replays the truth
        mdp = fully_deterministic_mdp()
        pol = Policy.constant(2, 0)
        batch = sample_batch(mdp, pol, 5, master_seed=9)
        res = evaluate_flat(batch, mdp, pol, 200, seed=10)
        assert res.estimate == pytest.approx(exact_value(mdp, pol), abs=1e-12)
        assert res.diagnostics["fallback_rate"] == 0.0

    def test_empty_batch_gives_zero(self):
        mdp = copy_mdp(3, 2, 2, horizon=4)
        batch = sample_batch(mdp, Policy.uniform(2), 0, master_seed=0)
        res = evaluate_flat(batch, mdp, Policy.uniform(2), 100, seed=11)
        assert res.estimate == 0.0
        assert res.diagnostics["fallback_rate"] == 1.0

    def test_refuses_large_state_space(self):
        mdp = random_fmdp(17, 2, 2, seed=0, horizon=3)
        batch = sample_batch(mdp, Policy.uniform(2), 1, master_seed=0)
        with pytest.raises(StateSpaceTooLarge):
            evaluate_flat(batch, mdp, Policy.uniform(2), 10, seed=0)


class TestMfmc:
    def test_self_batch_reproduces_returns_exactly(self):
        # behavior == target, deterministic dynamics and start: stitching at
        # distance zero replays the logged returns
        mdp = fully_deterministic_mdp()
        pol = Policy.constant(2, 0)
        batch = sample_batch(mdp, pol, 10, master_seed=12)
        res = evaluate_mfmc(batch, pol, k=1, seed=13, gamma=2, n_actions=2)
        real = batch.returns()
        assert res.estimate == pytest.approx(real.mean(), abs=1e-12)
        assert res.diagnostics["mean_stitch_distance"] == 0.0
        assert res.diagnostics["truncation_rate"] == 0.0

    def test_zero_reward_mdp_gives_zero(self):
        base = copy_mdp(2, 2, 2, horizon=5)
        mdp = FactoredMdp(2, 2, 2, 5, base.parents, base.cpts,
                          make_reward("constant", {"value": 0.0}), base.rho)
        batch = sample_batch(mdp, Policy.uniform(2), 10, master_seed=14)
        res = evaluate_mfmc(batch, Policy.uniform(2), k=1, seed=15,
                            gamma=2, n_actions=2)
        assert res.estimate == 0.0

    def test_exhaustion_truncates_and_reports(self):
        mdp = copy_mdp(2, 2, 2, horizon=10)
        batch = sample_batch(mdp, Policy.uniform(2), 2, master_seed=16)
        res = evaluate_mfmc(batch, Policy.uniform(2), k=1, seed=17,
                            n_artificial=50, gamma=2, n_actions=2)
        assert res.diagnostics["truncation_rate"] > 0.0

    def test_consumption_bounded_by_pool(self):
        mdp = copy_mdp(2, 2, 2, horizon=8)
        batch = sample_batch(mdp, Policy.uniform(2), 4, master_seed=18)
        res = evaluate_mfmc(batch, Policy.uniform(2), k=2, seed=19,
                            n_artificial=30, gamma=2, n_actions=2)
        assert res.diagnostics["consumed"] <= batch.n_traj * batch.horizon

    def test_requires_nonempty_batch(self):
        mdp = copy_mdp(2, 2, 2, horizon=3)
        empty = sample_batch(mdp, Policy.uniform(2), 0, master_seed=0)
        with pytest.raises(ValueError):
            evaluate_mfmc(empty, Policy.uniform(2), k=1, seed=0,
                          gamma=2, n_actions=2)

    def test_high_dimensional_starvation_shows_in_diagnostics(self):
        # 20 binary variables with a short batch: stitches land far from the
        # query and the pool exhausts, so the estimate degrades well below
        # the model-based one
        from factored_ope.domains import myopic_target_policy
        mdp = random_fmdp(20, 2, 2, seed=4, horizon=50)
        target = myopic_target_policy(mdp, 0.05)
        batch = sample_batch(mdp, Policy.uniform(2), 10, master_seed=24)
        res = evaluate_mfmc(batch, target, k=1, seed=25, gamma=2, n_actions=2)
        assert res.diagnostics["truncation_rate"] > 0.3
        assert res.diagnostics["mean_stitch_distance"] >= 1.0


class TestCis:
    def test_behavior_equals_target_is_exact_mean(self):
        mdp = random_mdp(3, 2, 2, 6, seed=60)
        pol = epsilon_floor(Policy.constant(2, 1), 0.3)
        batch = sample_batch(mdp, pol, 40, master_seed=20)
        res = evaluate_cis(batch, pol, pol, math.inf)
        assert res.estimate == batch.returns().mean()
        assert res.diagnostics["effective_sample_size"] == pytest.approx(40.0)

    def test_zero_probability_target_action_zeroes_weight(self):
        mdp = copy_mdp(2, 2, 2, horizon=4)
        behavior = Policy.uniform(2)
        target = Policy.constant(2, 1)  # never takes action 0
        batch = sample_batch(mdp, behavior, 30, master_seed=21)
        res = evaluate_cis(batch, target, behavior, math.inf)
        took_zero = (batch.actions == 0).any(axis=1)
        # any trajectory containing action 0 contributes nothing
        expected = np.where(took_zero, 0.0,
                            (2.0 ** batch.horizon) * batch.returns()).mean()
        assert res.estimate == pytest.approx(expected)

    def test_clipping_is_monotone(self):
        mdp = random_mdp(3, 2, 2, 5, seed=61)
        behavior = Policy.uniform(2)
        target = epsilon_floor(Policy.constant(2, 0), 0.1)
        batch = sample_batch(mdp, behavior, 50, master_seed=22)
        estimates = [evaluate_cis(batch, target, behavior, c).estimate
                     for c in (0.5, 2.0, 10.0, math.inf)]
        assert all(a <= b + 1e-12 for a, b in zip(estimates, estimates[1:]))

    def test_inconsistent_behavior_is_an_error(self):
        mdp = copy_mdp(2, 2, 2, horizon=3)
        batch = sample_batch(mdp, Policy.uniform(2), 10, master_seed=23)
        claimed = Policy.constant(2, 0)  # cannot have produced action 1
        with pytest.raises(LoggingInconsistency):
            evaluate_cis(batch, Policy.uniform(2), claimed, math.inf)

    def test_requires_nonempty_batch(self):
        mdp = copy_mdp(2, 2, 2, horizon=3)
        empty = sample_batch(mdp, Policy.uniform(2), 0, master_seed=0)
        with pytest.raises(ValueError):
            evaluate_cis(empty, Policy.uniform(2), Policy.uniform(2), 10.0)


class TestNormalizedError:
    def test_exact_match_is_zero(self):
        assert normalized_error(10.0, 10.0) == 0.0

    def test_hand_value(self):
        assert normalized_error(9.0, 10.0) == pytest.approx(0.1)

    def test_zero_truth_is_an_error(self):
        with pytest.raises(ValueError):
            normalized_error(1.0, 0.0)
