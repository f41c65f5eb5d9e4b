import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdprl.core import (
    ContractError,
    DiscountedReturn,
    GoalSpace,
    Trajectory,
    Transition,
    discounted_return,
    extract_achieved_feature,
    make_trajectory,
    sparse_reward,
)


def _tr(ag, goal=None):
    ag = np.atleast_1d(np.asarray(ag, dtype=float))
    goal = np.zeros_like(ag) if goal is None else np.asarray(goal, dtype=float)
    return Transition(ag, np.zeros(1), -1.0, ag, goal, ag)


class TestSparseReward:
    space = GoalSpace(2, 0.05)

    def test_identical_goals_succeed(self):
        assert sparse_reward([0, 0], [0, 0], self.space) == 0.0

    def test_far_goal_fails(self):
        assert sparse_reward([1, 0], [0, 0], self.space) == -1.0

    def test_boundary_distance_counts_as_success(self):
        # distance is exactly 0.05
        assert sparse_reward([0.03, 0.04], [0, 0], self.space) == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(ContractError):
            sparse_reward([0, 0, 0], [0, 0], self.space)

    @given(
        st.lists(st.floats(-10, 10), min_size=2, max_size=2),
        st.lists(st.floats(-10, 10), min_size=2, max_size=2),
        st.lists(st.floats(-10, 10), min_size=2, max_size=2),
    )
    def test_symmetric_and_translation_invariant(self, a, b, shift):
        space = GoalSpace(2, 0.5)
        a, b, shift = map(np.array, (a, b, shift))
        r = sparse_reward(a, b, space)
        assert r in (-1.0, 0.0)
        assert r == sparse_reward(b, a, space)
        # translation can move the distance by float rounding only
        d = np.linalg.norm(a - b)
        if abs(d - 0.5) > 1e-9:
            assert r == sparse_reward(a + shift, b + shift, space)


def test_goal_space_invariants():
    with pytest.raises(ContractError):
        GoalSpace(0, 0.1)
    with pytest.raises(ContractError):
        GoalSpace(2, -0.1)


class TestAchievedFeature:
    def test_scalar_goals(self):
        feat = extract_achieved_feature([_tr(0.5), _tr(1.0)], [0.0])
        np.testing.assert_array_equal(feat, [0.0, 0.5, 1.0])

    def test_two_dim_goals(self):
        feat = extract_achieved_feature([_tr([1, 1])], [0, 0])
        np.testing.assert_array_equal(feat, [0, 0, 1, 1])

    def test_constant_goal(self):
        feat = extract_achieved_feature([_tr(0.2)] * 3, [0.2])
        np.testing.assert_array_equal(feat, [0.2] * 4)

    def test_ragged(self):
        with pytest.raises(ContractError):
            extract_achieved_feature([_tr([1, 1]), _tr(1.0)], [0, 0])

    @given(st.integers(1, 12), st.integers(1, 4))
    def test_length(self, T, dim):
        trs = [_tr(np.full(dim, t)) for t in range(T)]
        assert extract_achieved_feature(trs, np.zeros(dim)).shape == ((T + 1) * dim,)


class TestDiscountedReturn:
    def test_undiscounted(self):
        assert discounted_return([-1, -1, 0], 1.0) == -2.0

    def test_all_zero(self):
        assert discounted_return([0, 0, 0], 0.98) == 0.0

    def test_half(self):
        assert discounted_return([-1, -1, -1], 0.5) == pytest.approx(-1.75)

    def test_gamma_zero_is_first_reward(self):
        assert discounted_return([-1.0, 5.0, 7.0], 0.0) == -1.0

    def test_bad_gamma(self):
        with pytest.raises(ContractError):
            discounted_return([0], 1.5)
        with pytest.raises(ContractError):
            DiscountedReturn(-0.1, 0.0)

    def test_value_type(self):
        assert DiscountedReturn.of([-1, -1], 0.5).value == -1.5


def test_make_trajectory_rewards_follow_goal():
    space = GoalSpace(1, 0.1)
    states = [np.array([0.0]), np.array([0.5]), np.array([1.0])]
    traj = make_trajectory(states, [np.zeros(1)] * 2, [1.0], space, slice(0, 1))
    assert [t.reward for t in traj.transitions] == [-1.0, 0.0]
    assert traj.transitions[-1].done
    np.testing.assert_array_equal(traj.achieved_goal_feature, [0.0, 0.5, 1.0])
    np.testing.assert_array_equal(traj.achieved_goal_at(0), [0.0])
    np.testing.assert_array_equal(traj.achieved_goal_at(2), [1.0])
    assert isinstance(traj, Trajectory) and traj.horizon == 2
