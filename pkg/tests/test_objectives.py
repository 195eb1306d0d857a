import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from coirl import autodiff as ad
from coirl.autodiff import Tensor
from coirl.model import CoIRLModel, CriticPair, ModelConfig, PolicyParams, actor_forward, encode, log_prob
from coirl.model import log_prob_batch
from coirl.objectives.il import ILLossReport, il_total, imitation_loss, world_model_loss
from coirl.objectives.rl import (
    RewardSequence,
    SampleGroup,
    adcgs_losses,
    bc_loss,
    build_group,
    compute_rewards,
    long_term_advantage,
    naive_pggs_loss,
    positions_from_actions,
    rl_total,
    sample_actions,
    step_aware_group_sample,
    zscore_normalize,
)
from coirl.optim import AdamW
from coirl.world import DEFAULT_WORLD, AgentTrack

from oracles import zscore
from worldkit import straight_scene

W = DEFAULT_WORLD
CRUISE = np.tile([2.5, 0.0], (6, 1))


def constant_critic(d_s, learning_value, reference_value):
    """Critic pair whose outputs are the constants b2 (all weights zero)."""
    def params(v):
        p = CoIRLModel(ModelConfig(d_s=d_s)).critic.learning
        for t in p.values():
            t.data = np.zeros_like(t.data)
        p["b2"].data[:] = v
        return p
    return CriticPair(params(learning_value), params(reference_value))


def fixed_group(totals, G_steps=1):
    totals = np.asarray(totals, dtype=np.float64)
    r = np.zeros((len(totals), G_steps))
    r[:, 0] = totals
    rs = RewardSequence(r, np.ones_like(r), np.ones_like(r))
    lp = Tensor(np.zeros(len(totals)), requires_grad=True)
    return SampleGroup(actions=np.zeros((len(totals), G_steps, 2)), rewards=rs, log_probs=lp)


# -- imitation ---------------------------------------------------------------------

def test_imitation_loss_examples():
    e = np.random.default_rng(0).standard_normal((6, 2))
    assert imitation_loss(e, e).item() == 0.0
    assert imitation_loss(e + 0.5, e).item() == pytest.approx(0.5, abs=1e-6)
    with pytest.raises(ValueError):
        imitation_loss(np.zeros((5, 2)), e)


def test_imitation_loss_matches_elementwise_oracle(f64):
    rng = np.random.default_rng(1)
    a, e = rng.standard_normal((6, 2)), rng.standard_normal((6, 2))
    oracle = sum(abs(float(x) - float(y)) for x, y in zip(a.ravel(), e.ravel())) / 12
    assert imitation_loss(a, e).item() == pytest.approx(oracle, abs=1e-7)


def test_world_model_loss_examples_and_stop_gradient():
    assert world_model_loss(Tensor([[0.3, 0.4]]), Tensor([[0.3, 0.4]])).item() == 0.0
    pred = Tensor([[0.0, 0.0]], requires_grad=True)
    target = Tensor([[1.0, 1.0]], requires_grad=True)
    loss = world_model_loss(pred, target)
    assert loss.item() == pytest.approx(1.0)
    ad.backward(loss)
    assert pred.grad is not None and np.abs(pred.grad).sum() > 0
    assert target.grad is None or not np.any(target.grad)
    with pytest.raises(ValueError):
        world_model_loss(Tensor([[0.0, 0.0]]), Tensor([[0.0, 0.0, 0.0]]))


def test_il_total_examples():
    assert il_total(1.0, 2.0, 0.5) == 2.0
    assert il_total(1.25, 7.0, 0.0) == 1.25
    with pytest.raises(ValueError):
        il_total(1.0, 1.0, -0.1)


def test_one_il_step_lowers_record_loss(tiny_dataset):
    from coirl.config import TrainConfig
    from coirl.trainer import Trainer

    tr = Trainer(TrainConfig(strategy="pure_il", total_iters=10), tiny_dataset)
    rec = tiny_dataset.records[3]

    def l_il():
        with ad.no_grad():
            _, l_imi, l_wm = tr._il_losses(rec, "il")
            return il_total(l_imi, l_wm, 1.0).item()
    before = l_il()
    report = tr.il_phase(rec, 1e-4)
    assert isinstance(report, ILLossReport)
    assert report.l_il == pytest.approx(report.l_imi + report.alpha * report.l_wm, abs=1e-6)
    assert min(report.l_imi, report.l_wm) >= 0
    assert report.l_il == pytest.approx(before, rel=1e-6)
    assert l_il() < before


# -- rewards -----------------------------------------------------------------------

def test_positions_from_actions():
    np.testing.assert_array_equal(positions_from_actions(np.tile([1.0, 0.0], (3, 1))), [[1, 0], [2, 0], [3, 0]])
    np.testing.assert_array_equal(positions_from_actions(np.zeros((4, 2))), 0.0)
    a = np.random.default_rng(2).standard_normal((6, 2))
    np.testing.assert_allclose(np.diff(positions_from_actions(a), axis=0, prepend=0.0), a, atol=1e-7)


def test_expert_actions_reward_one():
    scene = straight_scene()
    r = compute_rewards(scene.expert_actions[:6], scene.expert_actions[:6], scene, 0, W)
    np.testing.assert_array_equal(r.r, 1.0)


def test_ln2_offset_gives_half():
    scene = straight_scene()
    exp = scene.expert_actions[:6]
    r = compute_rewards(exp + [math.log(2), 0.0], exp, scene, 0, W)
    np.testing.assert_allclose(r.r, 0.5, atol=1e-12)


def test_collision_zeroes_only_that_step():
    agent = AgentTrack((4.5, 1.9), np.tile([200.0, 0.0, 0.0], (W.horizon + 1, 1)))
    agent.poses[3] = [30.0 + 3 * 2.5, 0.0, 0.0]    # sits on the ego at step 3
    scene = straight_scene([agent])
    a = CRUISE + [0.2, 0.0]
    r = compute_rewards(a, CRUISE, scene, 0, W)
    assert r.r[2] == 0.0 and r.r_col[2] == 0.0
    others = [0, 1, 3, 4, 5]
    np.testing.assert_allclose(r.r[others], np.exp(-0.2), rtol=1e-12)
    np.testing.assert_array_equal(r.r, r.r_col * r.r_imi)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 6, 2), elements=st.floats(-3, 3)))
def test_rewards_bounded(offsets):
    scene = straight_scene()
    r = compute_rewards(CRUISE + offsets, CRUISE, scene, 0, W)
    assert np.all((r.r >= 0) & (r.r <= 1))
    assert np.all(r.r[r.r_col == 0] == 0)


# -- z-score -----------------------------------------------------------------------

def test_zscore_examples():
    np.testing.assert_allclose(zscore_normalize([1, 2, 3]), [-1.2247, 0, 1.2247], atol=1e-4)
    np.testing.assert_array_equal(zscore_normalize([4, 4, 4, 4]), 0.0)
    with pytest.raises(ValueError):
        zscore_normalize([1.0])


finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=2, max_size=16))
def test_zscore_matches_statistics_oracle(values):
    np.testing.assert_allclose(zscore_normalize(values), zscore(values), rtol=1e-9, atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=2, max_size=16), finite, st.floats(0.1, 10))
def test_zscore_identities(values, shift, scale):
    z = zscore_normalize(values)
    assert abs(z.mean()) <= 1e-9
    v = np.asarray(values)
    if v.std() > 1e-3:
        assert abs(z.std() - 1) <= 1e-6
        np.testing.assert_allclose(zscore_normalize(v + shift), z, atol=1e-6)
        assert np.argmax(zscore_normalize(v * scale + shift)) == np.argmax(z)


# -- naive group policy gradient ---------------------------------------------------

def test_naive_zero_advantage_gives_zero_loss_and_gradient():
    g = fixed_group([1.0, 1.0, 1.0])
    loss = naive_pggs_loss(g)
    ad.backward(loss)
    assert loss.item() == 0.0
    assert not np.any(g.log_probs.grad)


def test_naive_two_sample_expansion():
    g = fixed_group([0.0, 0.0])
    g.advantages = np.array([1.0, -1.0])
    l1, l2 = -0.7, -2.2
    g.log_probs = Tensor(np.array([l1, l2]), requires_grad=True)
    assert naive_pggs_loss(g).item() == pytest.approx(-(l1 - l2) / 2, abs=1e-6)


def test_naive_gradient_sign_on_one_param_policy(f64):
    # raising the log-prob of the positive-advantage sample lowers the loss
    mu = Tensor(np.zeros((1, 2)), requires_grad=True)
    pol = PolicyParams(mu, Tensor(np.ones((1, 2))))
    acts = np.array([[[1.0, 0.0]], [[-1.0, 0.0]]])
    g = fixed_group([0.0, 0.0])
    g.advantages = np.array([1.0, -1.0])

    def loss_at(x):
        mu.data = np.array([[x, 0.0]])
        g.log_probs = log_prob_batch(pol, acts)
        return naive_pggs_loss(g)
    ad.backward(loss_at(0.0))
    assert mu.grad[0, 0] < 0
    assert loss_at(0.01).item() < loss_at(0.0).item()


def test_bandit_moves_mean_toward_best_action():
    target = np.array([1.5, -0.5])
    mu = Tensor(np.zeros((1, 2)), requires_grad=True)
    sigma = Tensor(np.full((1, 2), 0.5))
    rng = np.random.default_rng(0)
    opt = AdamW(weight_decay=0.0)
    gap0 = np.linalg.norm(mu.data[0] - target)
    for _ in range(200):
        pol = PolicyParams(mu, sigma)
        acts = sample_actions(pol, 8, rng)
        totals = np.exp(-np.linalg.norm(acts[:, 0] - target, axis=-1))
        g = fixed_group(totals)
        g.log_probs = log_prob_batch(pol, acts)
        mu.grad = None
        ad.backward(naive_pggs_loss(g))
        opt.step({"mu": mu}, 0.05)
    assert np.linalg.norm(mu.data[0] - target) < 0.2 * gap0


# -- dreaming critic ---------------------------------------------------------------

def test_long_term_advantage_arithmetic():
    d_s = 4
    critic = constant_critic(d_s, 0.0, 0.0)
    ref = critic.reference
    ref["w1"].data[0, 0] = 1.0
    ref["w2"].data[0, 0] = 1.0
    ref["b2"].data[:] = 0.5            # V_ref(s) = 0.5 + tanh(s_0)
    g = fixed_group([2.0, 2.0])
    g.next_states = np.zeros((2, d_s))
    g.next_states[:, 0] = math.atanh(0.5)   # V_ref(s') = 1.0
    s = Tensor(np.zeros((1, d_s)))
    long_term_advantage(g, critic, s, 0.9)
    np.testing.assert_allclose(g.advantages, 2.4, atol=1e-6)
    np.testing.assert_array_equal(g.a_cri, 0.0)
    long_term_advantage(g, critic, s, 0.0)
    np.testing.assert_allclose(g.advantages, 2.0 - 0.5, atol=1e-6)
    with pytest.raises(ValueError):
        long_term_advantage(g, critic, s, 1.0)


def test_adcgs_hand_fixture_and_gradient_paths():
    d_s = 3
    critic = constant_critic(d_s, 0.5, 1.0)
    g = fixed_group([2.0, 1.0])
    g.next_states = np.zeros((2, d_s))
    s = Tensor(np.zeros((1, d_s)), requires_grad=True)
    l_act, l_cri = adcgs_losses(g, critic, s, 0.5)
    # targets = [2 + 0.5, 1 + 0.5]; V_learn(s) = 0.5 -> ((0.5-2.5)^2 + (0.5-1.5)^2) / 2
    assert l_cri.item() == pytest.approx(2.5, abs=1e-6)
    np.testing.assert_allclose(g.advantages, [1.5, 0.5], atol=1e-6)
    np.testing.assert_allclose(g.a_cri, [1.0, -1.0], atol=1e-6)
    ad.backward(l_cri + l_act)
    assert critic.learning["b2"].grad is not None and critic.learning["b2"].grad[0] != 0
    assert all(p.grad is None for p in critic.reference.values())
    assert s.grad is None or not np.any(s.grad)


def test_adcgs_perfect_critic_equal_rewards():
    # V_learn(s) = 1 + 0.5 * V_ref(s') exactly
    critic = constant_critic(2, 2.0, 2.0)
    g = fixed_group([1.0, 1.0, 1.0])
    g.next_states = np.zeros((3, 2))
    l_act, l_cri = adcgs_losses(g, critic, Tensor(np.zeros((1, 2))), 0.5)
    assert l_act.item() == 0.0 and l_cri.item() == pytest.approx(0.0, abs=1e-12)


# -- BC and totals -----------------------------------------------------------------

def test_bc_loss_examples(f64):
    mu = np.random.default_rng(3).standard_normal((6, 2))
    pol = PolicyParams(Tensor(mu, requires_grad=True), Tensor(np.ones((6, 2))))
    assert bc_loss(pol, mu).item() == pytest.approx(6 * math.log(2 * math.pi), abs=1e-9)
    ad.backward(bc_loss(pol, mu))
    np.testing.assert_array_equal(pol.mu.grad, 0.0)
    a = mu + 0.3
    assert bc_loss(pol, a).item() == -log_prob(pol, a).item()


def test_rl_total_examples():
    assert rl_total(1.0, 2.0, 100.0) == pytest.approx(3.5)
    assert rl_total(1.0, 2.0, 100.0, beta=0.0) == 3.0
    with pytest.raises(ValueError):
        rl_total(1.0, 1.0, 1.0, beta=-1)


# -- step-aware sampling -----------------------------------------------------------

@pytest.fixture
def policy_setup():
    cfg = ModelConfig()
    model = CoIRLModel(cfg, seed=5)
    scene = straight_scene()
    obs = np.random.default_rng(5).standard_normal((1, cfg.obs_dim))
    s = encode(obs, model.encoder)
    pol = actor_forward(s, model.actors["rl"], cfg)
    return model, scene, s, pol


def test_step_aware_non_sampled_steps_are_mode_bitwise(policy_setup):
    model, scene, s, pol = policy_setup
    res = step_aware_group_sample(pol, s, model.critic, model.world_model, scene, 0, CRUISE, 8, 0.9,
                                  np.random.default_rng(0), W)
    mu = pol.mu.data
    n, G = res.actions.shape[:2]
    assert (n, G) == (6, 8)
    for i in range(n):
        for g in range(G):
            for j in range(n):
                if j != i:
                    assert res.actions[i, g, j].tobytes() == mu[j].tobytes()
            assert not np.array_equal(res.actions[i, g, i], mu[i])


def test_step_aware_degenerate_when_sampling_collapses(policy_setup):
    # sigma far below float32 resolution of mu: every sample equals the mode
    model, scene, s, pol = policy_setup
    tiny = PolicyParams(pol.mu, Tensor(np.full((6, 2), 1e-30)))
    res = step_aware_group_sample(tiny, s, model.critic, model.world_model, scene, 0, CRUISE, 4, 0.9,
                                  np.random.default_rng(0), W)
    np.testing.assert_array_equal(res.a_cri, 0.0)
    assert res.l_actor.item() == 0.0


def test_step_aware_n1_matches_adcgs():
    cfg = ModelConfig(n_steps=1)
    model = CoIRLModel(cfg, seed=2)
    scene = straight_scene()
    s = encode(np.random.default_rng(2).standard_normal((1, cfg.obs_dim)), model.encoder)
    pol = actor_forward(s, model.actors["rl"], cfg)
    expert = CRUISE[:1]
    res = step_aware_group_sample(pol, s, model.critic, model.world_model, scene, 0, expert, 8, 0.9,
                                  np.random.default_rng(42), W)
    acts = sample_actions(pol, 8, np.random.default_rng(42))
    group = build_group(pol, acts, expert, scene, 0, W)
    long_term_advantage(group, model.critic, s, 0.9, model.world_model)
    l_act, l_cri = adcgs_losses(group, model.critic, s, 0.9)
    assert abs(res.l_actor.item() - l_act.item()) <= 1e-6
    assert abs(res.l_critic.item() - l_cri.item()) <= 1e-6


def test_step_aware_rejects_tiny_group(policy_setup):
    model, scene, s, pol = policy_setup
    with pytest.raises(ValueError):
        step_aware_group_sample(pol, s, model.critic, model.world_model, scene, 0, CRUISE, 1, 0.9,
                                np.random.default_rng(0), W)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 6))
def test_step_aware_group_statistics(seed, G):
    cfg = ModelConfig(d_s=8, d_w=8, hidden=8)
    model = CoIRLModel(cfg, seed=seed % 1000)
    scene = straight_scene()
    s = encode(np.random.default_rng(seed).standard_normal((1, cfg.obs_dim)), model.encoder)
    pol = actor_forward(s, model.actors["rl"], cfg)
    res = step_aware_group_sample(pol, s, model.critic, model.world_model, scene, 0, CRUISE, G, 0.9,
                                  np.random.default_rng(seed), W)
    assert np.all(np.abs(res.a_cri.mean(axis=1)) <= 1e-6)
    spread = res.a_long.std(axis=1)
    assume(np.all(spread > 1e-6))
    # epsilon in the denominator gives std = sd / (sd + eps) exactly
    np.testing.assert_allclose(res.a_cri.std(axis=1), spread / (spread + 1e-8), atol=1e-9)
    wide = spread >= 1e-2
    assert np.all(np.abs(res.a_cri.std(axis=1)[wide] - 1) <= 1e-6)
