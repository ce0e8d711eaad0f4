import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tomrl.approximator import finite_diff_check
from tomrl.buffers import ReplayBuffer
from tomrl.envs import RandomPolicy, RoadAndRocks
from tomrl.errors import DegenerateDistribution, DimensionError
from tomrl.models import (GaussianMlpModel, LinearGaussianModel, WeightScheme, compute_weights,
                          fit_linear_gaussian_closed_form, fit_model, load_model, model_log_likelihood, model_rollout, normalize_batch_weights,
                          pmac_round_masses, pmac_weights, save_model, weighted_mle_step, weighted_nll)


def linear(a, b, c, std):
    return LinearGaussianModel(np.asarray(a, float), np.asarray(b, float), np.asarray(c, float), np.asarray(std, float))


def test_log_likelihood_at_mode_and_one_std():
    """At the mean with unit std the density is -(k/2) log 2 pi; one std off costs 0.5."""
    m = linear(np.eye(3), np.zeros((3, 1)), np.zeros(3), np.ones(3))
    s = np.array([0.2, -0.4, 1.0])
    mode = -1.5 * math.log(2 * math.pi)
    assert abs(model_log_likelihood(m, s, [0.0], s) - mode) < 1e-14
    assert abs(model_log_likelihood(m, s, [0.0], s + [0, 1, 0]) - (mode - 0.5)) < 1e-14


def test_log_likelihood_scalar_oracle():
    """Random linear-Gaussian case matches a per-coordinate scalar density to 1e-12."""
    rng = np.random.default_rng(0)
    m = linear(rng.normal(size=(2, 2)), rng.normal(size=(2, 1)), rng.normal(size=2), rng.uniform(0.1, 2, 2))
    for _ in range(20):
        s, a, s2 = rng.normal(size=2), rng.normal(size=1), rng.normal(size=2)
        mean = m.A @ s + m.B @ a + m.c
        oracle = sum(-0.5 * ((s2[i] - mean[i]) / m.noise_std[i]) ** 2 - math.log(m.noise_std[i])
                     - 0.5 * math.log(2 * math.pi) for i in range(2))
        assert abs(model_log_likelihood(m, s, a, s2) - oracle) < 1e-12


def test_compute_weights_uniform_and_tom():
    """uniform gives ones; tom passes weights through verbatim and checks alignment."""
    buf = ReplayBuffer(1, 1).extend_arrays(np.arange(4.0), np.zeros(4), np.arange(4.0), np.zeros(4))
    assert np.array_equal(compute_weights(WeightScheme("uniform"), buf), np.ones(4))
    w = np.array([0.0, 2.0, 0.5, 1.0])
    assert np.array_equal(compute_weights(WeightScheme("tom"), buf, tom_weights=w), w)
    with pytest.raises(DimensionError):
        compute_weights(WeightScheme("tom"), buf, tom_weights=w[:3])
    with pytest.raises(ValueError):
        WeightScheme("ensemble")


def test_pmac_three_rounds_half_decay():
    """Decay 0.5 over three rounds gives masses (0.25, 0.25, 0.5), newest last."""
    assert np.allclose(pmac_round_masses(3, 0.5), [0.25, 0.25, 0.5], atol=1e-15)
    w = pmac_weights([0, 0, 1, 2, 2, 2], 0.5)
    assert np.allclose(w, [0.125, 0.125, 0.25, 0.5 / 3, 0.5 / 3, 0.5 / 3])


def test_pmac_default_decay_ratio():
    """Adjacent rounds (after the first) differ by exactly 0.996; the newest holds 1 - 0.996."""
    m = pmac_round_masses(51, 0.996)
    assert np.max(np.abs(m[1:-1] / m[2:] - 0.996)) < 1e-12
    assert abs(m[-1] - 0.004) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 9), min_size=1, max_size=60), st.floats(0.05, 0.999))
def test_pmac_weights_properties(rounds, decay):
    """PMAC weights sum to 1 and never decrease with recency after the seed round."""
    ids = np.sort(np.array(rounds))
    w = pmac_weights(ids, decay)
    assert abs(w.sum() - 1) < 1e-12 and np.all(w >= 0)
    per_round = [w[ids == r].sum() for r in np.unique(ids)]
    masses = pmac_round_masses(int(ids.max() - ids.min() + 1), decay)
    present = np.unique(ids) - ids.min()
    assert np.allclose(np.array(per_round) / sum(per_round), masses[present] / masses[present].sum())
    assert np.all(np.diff(masses[1:]) >= -1e-15)
    assert abs(masses[0] - decay ** (len(masses) - 1)) < 1e-12


def synthetic_batch(rng, n=32, sd=2, ad=1):
    s = rng.normal(size=(n, sd))
    a = rng.normal(size=(n, ad))
    return {"states": s, "actions": a, "next_states": s + 0.1 * a.sum(1, keepdims=True) + 0.05 * rng.normal(size=(n, sd))}


def test_uniform_weights_are_plain_mle():
    """All-ones weights give a bitwise-identical step to the unweighted step."""
    rng = np.random.default_rng(0)
    model = GaussianMlpModel.create(2, 1, rng, (8, 8))
    batch = synthetic_batch(rng)
    a = weighted_mle_step(model, batch)
    b = weighted_mle_step(model, batch, np.full(32, 3.7))
    assert np.array_equal(a.params, b.params)


def test_single_weight_gives_single_gradient():
    """Weight on one transition reproduces that transition's NLL gradient."""
    rng = np.random.default_rng(1)
    model = GaussianMlpModel.create(2, 1, rng, (8,))
    batch = synthetic_batch(rng, n=5)
    w = np.zeros(5)
    w[3] = 1.0
    _, g = weighted_nll(model, model.params, batch["states"], batch["actions"], batch["next_states"],
                        normalize_batch_weights(w))
    _, g1 = weighted_nll(model, model.params, batch["states"][3:4], batch["actions"][3:4],
                         batch["next_states"][3:4], np.ones(1))
    assert np.allclose(g, g1, rtol=1e-12, atol=1e-14)
    with pytest.raises(DegenerateDistribution):
        normalize_batch_weights(np.zeros(3))


def test_weighted_nll_gradient():
    """Weighted NLL gradient (mean net and log-std) passes the finite-difference check."""
    for seed in range(3):
        rng = np.random.default_rng(seed)
        model = GaussianMlpModel.create(2, 1, rng, (8, 8))
        b = synthetic_batch(rng, n=6)
        w = rng.uniform(0, 2, 6)
        err = finite_diff_check(lambda p: weighted_nll(model, p, b["states"], b["actions"], b["next_states"], w),
                                model.params)
        assert err < 1e-4


def test_closed_form_recovers_noiseless_dynamics():
    """Noiseless data from known (A, B, c) are fit to 1e-6."""
    rng = np.random.default_rng(2)
    a_true, b_true, c_true = rng.normal(size=(3, 3)), rng.normal(size=(3, 2)), rng.normal(size=3)
    s, a = rng.normal(size=(200, 3)), rng.normal(size=(200, 2))
    m = fit_linear_gaussian_closed_form(s, a, s @ a_true.T + a @ b_true.T + c_true)
    assert max(np.abs(m.A - a_true).max(), np.abs(m.B - b_true).max(), np.abs(m.c - c_true).max()) < 1e-6
    assert np.all(m.noise_std == 1e-3)


def test_closed_form_ignores_zero_weights():
    """Dropping zero-weight rows changes the fit by less than 1e-10."""
    rng = np.random.default_rng(3)
    s, a = rng.normal(size=(100, 2)), rng.normal(size=(100, 2))
    s2 = s + a + 0.1 * rng.normal(size=(100, 2))
    w = rng.uniform(0.5, 2, 100)
    w[::3] = 0.0
    full = fit_linear_gaussian_closed_form(s, a, s2, w)
    keep = w > 0
    part = fit_linear_gaussian_closed_form(s[keep], a[keep], s2[keep], w[keep])
    for name in ("A", "B", "c", "noise_std"):
        assert np.abs(getattr(full, name) - getattr(part, name)).max() < 1e-10
    with pytest.raises(DegenerateDistribution):
        fit_linear_gaussian_closed_form(s, a, s2, np.zeros(100))


def test_closed_form_on_road_subset():
    """Weights on on-road transitions recover A = I and B = I within 0.05."""
    env = RoadAndRocks()
    rng = np.random.default_rng(4)
    s = rng.uniform(0, 1, (5000, 2))
    a = rng.uniform(-0.05, 0.05, (5000, 2))
    s2 = env.step_batch(s, a, rng)
    w = env.is_on_road(s).astype(float) * (env.is_on_road(s2) | True)
    interior = (s2 > 0).all(1) & (s2 < 1).all(1)
    m = fit_linear_gaussian_closed_form(s, a, s2, w * interior)
    assert np.abs(m.A - np.eye(2)).max() < 0.05 and np.abs(m.B - np.eye(2)).max() < 0.05
    uniform = fit_linear_gaussian_closed_form(s, a, s2)
    assert np.abs(uniform.B - np.eye(2)).max() > 0.05


def test_weighted_fit_targets_weighted_cluster():
    """1/0 weights on two clusters: held-out likelihood favours the weighted cluster by >= 1 nat."""
    rng = np.random.default_rng(5)
    n = 2000

    def cluster(center, slope, m):
        s = center + 0.1 * rng.normal(size=(m, 1))
        a = rng.uniform(-1, 1, (m, 1))
        return s, a, s + slope * a + 0.02 * rng.normal(size=(m, 1))

    s1, a1, n1 = cluster(-1.0, 0.5, n)
    s2, a2, n2 = cluster(1.0, -0.5, n)
    buf = ReplayBuffer(1, 1, 2 * n).extend_arrays(np.vstack([s1, s2]), np.vstack([a1, a2]), np.vstack([n1, n2]),
                                                  np.zeros(2 * n))
    w = np.concatenate([np.ones(n), np.zeros(n)])
    model = fit_model(GaussianMlpModel.create(1, 1, rng, (32, 32), learning_rate=3e-3), buf, w, 1500, 128, rng)
    h1, h2 = cluster(-1.0, 0.5, 500), cluster(1.0, -0.5, 500)
    assert np.mean(model_log_likelihood(model, *h1)) - np.mean(model_log_likelihood(model, *h2)) >= 1.0


def test_loss_mode_matches_in_spirit():
    """Loss-weighted fitting also ignores zero-weight data when fitting the mean."""
    rng = np.random.default_rng(6)
    buf = ReplayBuffer(1, 1, 100).extend_arrays(np.zeros(100), np.zeros(100), np.r_[np.ones(50), -np.ones(50)],
                                                np.zeros(100))
    w = np.r_[np.ones(50), np.zeros(50)]
    model = fit_model(GaussianMlpModel.create(1, 1, rng, (8,), learning_rate=1e-2), buf, w, 400, 32, rng, mode="loss")
    mean, _ = model.mean_std([[0.0]], [[0.0]])
    assert abs(mean[0, 0] - 1.0) < 0.1
    with pytest.raises(ValueError):
        fit_model(model, buf, w, 1, 4, rng, mode="other")


def test_tom_with_unit_weights_reproduces_uniform_fit():
    """Unit importance weights reproduce uniform-MLE training bitwise under the same seed."""
    rng = np.random.default_rng(7)
    b = synthetic_batch(rng, n=200)
    buf = ReplayBuffer(2, 1, 200).extend_arrays(b["states"], b["actions"], b["next_states"], np.zeros(200))
    init = GaussianMlpModel.create(2, 1, np.random.default_rng(0), (8,))
    wu = compute_weights(WeightScheme("uniform"), buf)
    wt = compute_weights(WeightScheme("tom"), buf, tom_weights=np.ones(200))
    mu = fit_model(init, buf, wu, 20, 32, np.random.default_rng(1))
    mt = fit_model(init, buf, wt, 20, 32, np.random.default_rng(1))
    assert np.array_equal(mu.params, mt.params)


def test_rollout_lengths():
    """k = 0 yields nothing; k = 1 from N starts yields N transitions; k = 3 yields 3N."""
    rng = np.random.default_rng(8)
    m = linear(np.eye(2), np.eye(2), np.zeros(2), np.full(2, 1e-3))
    pol = RandomPolicy(-np.ones(2), np.ones(2))
    starts = rng.normal(size=(7, 2))
    reward = lambda s, a, s2: np.zeros(len(s))  # noqa: E731
    assert len(model_rollout(m, pol, starts, 0, rng, reward)) == 0
    assert len(model_rollout(m, pol, starts, 1, rng, reward)) == 7
    out = model_rollout(m, pol, starts, 3, rng, reward)
    assert len(out) == 21 and len(out.transitions()) == 21


def test_rollout_follows_mean_propagation():
    """Near-deterministic model and policy track mean propagation within 3 noise stds per step."""
    rng = np.random.default_rng(9)
    m = linear([[0.9, 0.1], [0.0, 0.95]], np.eye(2), [0.01, -0.02], np.full(2, 1e-3))

    class Fixed:
        def act(self, states, rng=None, deterministic=False):
            return 0.1 * np.tanh(states)

    starts = rng.normal(size=(5, 2))
    out = model_rollout(m, Fixed(), starts, 4, rng, lambda s, a, s2: np.zeros(len(s)))
    s = starts
    for step in range(4):
        ns = s @ m.A.T + (0.1 * np.tanh(s)) @ m.B.T + m.c
        got = out.next_states[5 * step:5 * (step + 1)]
        assert np.all(np.abs(got - ns) < 3e-3 * (step + 1))
        s = got


def test_rollout_truncates_on_non_finite_state():
    rng = np.random.default_rng(10)
    m = linear(np.eye(1) * 1e300, np.zeros((1, 1)), np.zeros(1), np.ones(1))
    out = model_rollout(m, RandomPolicy([-1.0], [1.0]), np.full((3, 1), 1e300), 2, rng,
                        lambda s, a, s2: np.zeros(len(s)))
    assert out.truncated and len(out) == 0


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    mlp = GaussianMlpModel.create(2, 1, rng, (4,))
    lin = linear(np.eye(2), np.ones((2, 1)), np.zeros(2), np.ones(2))
    for model in (mlp, lin):
        save_model(model, tmp_path / "m.json")
        back = load_model(tmp_path / "m.json")
        s, a = rng.normal(size=(3, 2)), rng.normal(size=(3, 1))
        assert np.array_equal(back.mean_std(s, a)[0], model.mean_std(s, a)[0])
