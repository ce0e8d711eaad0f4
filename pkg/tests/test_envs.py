import numpy as np
import pytest

from tomrl.envs import (GridChain, PointMassReach, RandomPolicy, RoadAndRocks, RoadExpert, TabularPolicy, evaluate,
                        expert_trajectory, make_offline_dataset)
from tomrl.models import fit_linear_gaussian_closed_form
from tomrl.occupancy import check_policy, random_policy


def test_grid_chain_is_a_valid_mdp():
    """Random chain sizes and slips give row-stochastic transitions and a proper start distribution."""
    for seed in range(100):
        rng = np.random.default_rng(seed)
        env = GridChain(int(rng.integers(2, 10)), int(rng.integers(2, 5)), float(rng.uniform(0, 0.5)))
        t = env.mdp.transitions
        assert t.min() >= 0 and np.allclose(t.sum(-1), 1.0, atol=1e-14)
        assert abs(env.mdp.initial_dist.sum() - 1) < 1e-14
        check_policy(random_policy(env.mdp.n_states, env.mdp.n_actions, rng), env.mdp.n_states, env.mdp.n_actions)


def test_grid_chain_reset_frequencies():
    """10^4 resets match the start distribution within 0.02 per state."""
    env = GridChain()
    rng = np.random.default_rng(0)
    counts = np.bincount([int(env.reset(rng)[0]) for _ in range(10_000)], minlength=5) / 10_000
    assert np.max(np.abs(counts - env.mdp.initial_dist)) < 0.02


def test_grid_chain_step_and_tabular_policy():
    env = GridChain(slip=0.0)
    rng = np.random.default_rng(1)
    assert env.step(np.array([2.0]), np.array([1.0]), rng) == (np.array([3.0]), 0.1)
    assert env.step(np.array([4.0]), np.array([1.0]), rng)[1] == 1.0
    pi = TabularPolicy(np.tile([0.25, 0.75], (5, 1)))
    acts = pi.act(np.zeros(20_000), rng)
    assert acts.shape == (20_000, 1) and abs(acts.mean() - 0.75) < 0.02
    assert pi.act([3.0], deterministic=True).tolist() == [[1.0]]


def test_road_reset_on_road_and_reproducible():
    env = RoadAndRocks()
    rng = np.random.default_rng(2)
    starts = np.array([env.reset(rng) for _ in range(1000)])
    assert env.is_on_road(starts).all()
    assert np.array_equal(env.reset(np.random.default_rng(5)), env.reset(np.random.default_rng(5)))


def test_road_membership_convention():
    """Corridor centre is on the road, map corners are not, corridor edges are inclusive."""
    env = RoadAndRocks()
    assert env.is_on_road(np.array([0.5, 0.5]))
    assert not env.is_on_road(np.array([0.0, 0.0])) and not env.is_on_road(np.array([1.0, 1.0]))
    assert env.is_on_road(np.array([0.05, 0.4])) and env.is_on_road(np.array([0.95, 0.6]))
    assert not env.is_on_road(np.array([0.5, 0.6 + 1e-9]))


def test_on_road_step_is_exact_without_noise():
    env = RoadAndRocks()
    s, a = np.array([0.5, 0.5]), np.array([0.03, -0.02])
    ns, r = env.step(s, a, None, noise_std=0.0)
    assert np.array_equal(ns, s + a)
    assert r == pytest.approx(1.0 - np.linalg.norm(s + a - np.array(env.goal)))


def test_off_road_distortion_is_fixed_per_cell():
    """Same cell and action give the same displacement; the map seed fixes the matrices."""
    env = RoadAndRocks()
    s, a = np.array([0.12, 0.12]), np.array([0.04, 0.01])
    first = env.step(s, a, None, noise_std=0.0)[0]
    assert np.array_equal(first, env.step(s, a, None, noise_std=0.0)[0])
    ix, iy = env.cell(s)
    assert np.allclose(first, s + env.distortions[ix[0], iy[0]] @ a, atol=1e-15)
    assert np.array_equal(RoadAndRocks().distortions, env.distortions)
    assert not np.array_equal(RoadAndRocks(map_seed=1).distortions, env.distortions)
    sv = np.linalg.svd(env.distortions.reshape(-1, 2, 2), compute_uv=False)
    assert np.allclose(sv[:, 0], sv[:, 1]) and sv.min() >= 0.2 and sv.max() <= 1.8


def test_road_reward_range_and_clipping():
    env = RoadAndRocks()
    assert env.reward(None, None, np.array(env.goal))[0] == 1.0
    assert env.reward(None, None, np.array([0.2, 0.2]))[0] == pytest.approx(1 - np.hypot(0.7, 0.3))
    assert env.reward(None, None, np.array([0.0, 0.0]))[0] == 0.01  # farther than 1 from the goal
    assert env.reward(None, None, np.array([-2.0, -2.0]))[0] == 0.01
    before = env.clipped_actions
    ns = env.step_batch(np.array([[0.99, 0.5]]), np.array([[0.5, 0.0]]), None, 0.0)
    assert env.clipped_actions == before + 1
    assert np.all((0 <= ns) & (ns <= 1))
    rewards = env.reward(None, None, np.random.default_rng(3).uniform(0, 1, (10_000, 2)))
    assert rewards.min() > 0


def test_expert_reaches_goal():
    """Scripted expert runs all end within the goal tolerance."""
    env = RoadAndRocks()
    rng = np.random.default_rng(4)
    for _ in range(10):
        traj = expert_trajectory(env, RoadExpert(env), rng)
        assert env.at_goal(traj[-1].next_state) and len(traj) < env.horizon
        assert traj[0].episode_start and not any(t.episode_start for t in traj[1:])


def test_offline_dataset_composition():
    """Size is n_random plus expert lengths; most random transitions are off-road."""
    env = RoadAndRocks()
    buf = make_offline_dataset(env, n_random=5000, n_expert_traj=5, rng=np.random.default_rng(5))
    tags = buf.tags
    n_expert = int((tags == 1).sum())
    assert len(buf) == 5000 + n_expert and n_expert > 0
    assert buf.episode_starts.sum() == 5
    random_states = buf.states[tags == 0]
    assert np.mean(~env.is_on_road(random_states)) >= 0.6
    again = make_offline_dataset(env, n_random=5000, n_expert_traj=5, rng=np.random.default_rng(5))
    assert np.array_equal(again.next_states, buf.next_states)


def test_linear_model_suffices_only_on_road():
    """A linear fit to on-road transitions predicts on-road steps to < 0.005; a fit to everything does not."""
    env = RoadAndRocks()
    buf = make_offline_dataset(env, n_random=20_000, n_expert_traj=5, rng=np.random.default_rng(6))
    s, a, s2 = buf.states, buf.actions, buf.next_states
    on = env.is_on_road(s)

    def road_error(model):
        mean, _ = model.mean_std(s[on], a[on])
        return np.mean(np.linalg.norm(mean - s2[on], axis=1))

    assert road_error(fit_linear_gaussian_closed_form(s[on], a[on], s2[on])) < 0.005
    assert road_error(fit_linear_gaussian_closed_form(s, a, s2)) > 0.01


def test_point_mass_dynamics():
    """Zero noise: v' = v + dt a - drag v, p' = p + dt v'; bounds are enforced."""
    env = PointMassReach()
    s = np.array([0.1, -0.2, 0.5, -1.0])
    a = np.array([1.0, -0.5])
    ns, r = env.step(s, a, None, noise_std=0.0)
    v = s[2:] + 0.05 * a - 0.05 * s[2:]
    assert np.allclose(ns, np.concatenate([s[:2] + 0.05 * v, v]), atol=1e-15)
    assert 0 < r <= 1
    edge = env.step_batch(np.array([[0.999, 0.0, 2.5, 0.0]]), np.array([[1.0, 0.0]]), None, 0.0)
    assert edge[0, 0] == 1.0 and edge[0, 2] == 2.0
    assert env.reward(None, None, np.array([0.5, 0.5, 0, 0]))[0] == 1.0
    rng = np.random.default_rng(7)
    start = env.reset(rng)
    assert np.all(start[2:] == 0) and np.all((-0.7 <= start[:2]) & (start[:2] <= -0.3))


def test_evaluate_random_and_constant_policies():
    """A zero-action point mass stays put, so its return is horizon times its reward."""
    env = PointMassReach(noise_std=0.0)
    rng = np.random.default_rng(8)
    still = RandomPolicy(np.zeros(2), np.zeros(2))
    ret = evaluate(env, still, np.random.default_rng(9), episodes=1)
    start = env.reset(np.random.default_rng(9))
    assert ret == pytest.approx(200 * env.reward(None, None, start)[0])
    assert 0 < evaluate(env, RandomPolicy(-np.ones(2), np.ones(2)), rng, episodes=2, deterministic=False) <= 200
