"""Group-sampled policy-gradient objectives.

Rewards are computed with numpy (they never carry gradients); log-probs and
critic values are autodiff tensors. Advantages enter the losses as constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..model import log_prob, log_prob_batch, world_model_step
from ..world.collision import collision_flags_batch

ZSCORE_EPS = 1e-8


@dataclass
class RewardSequence:
    r: np.ndarray       # (..., n)
    r_imi: np.ndarray
    r_col: np.ndarray

    @property
    def total(self):
        return self.r.sum(axis=-1)


@dataclass
class RLLossReport:
    l_act: float
    l_cri: float
    l_bc: float
    l_rl: float
    beta: float
    mean_reward: float = float("nan")
    adv_spread: float = float("nan")


@dataclass
class SampleGroup:
    actions: np.ndarray                 # (G, n, 2)
    rewards: RewardSequence
    log_probs: Tensor                   # (G,)
    next_states: np.ndarray = None      # (G, d_s) imagined by the world model
    advantages: np.ndarray = None       # raw: z-scored totals (naive) or A_long
    a_cri: np.ndarray = None            # z-scored A_long
    targets: np.ndarray = None          # sum(r) + gamma * V_ref(s'_hat)
    step: int = None                    # sampled step for step-aware groups

    def __len__(self):
        return len(self.actions)


def positions_from_actions(actions):
    """Prefix sums of displacement actions along the step axis."""
    return np.cumsum(np.asarray(actions, dtype=np.float64), axis=-2)


def compute_rewards(actions, expert_actions, scene, t0, cfg):
    """Per-step r = r_col * exp(-||a_i - a_i^e||) for (n, 2) or (B, n, 2) actions."""
    a = np.asarray(actions, dtype=np.float64)
    e = np.asarray(expert_actions, dtype=np.float64)
    if a.shape[-2:] != e.shape:
        raise ValueError(f"compute_rewards: actions {a.shape} vs expert {e.shape}")
    single = a.ndim == 2
    if single:
        a = a[None]
    r_imi = np.exp(-np.linalg.norm(a - e, axis=-1))
    flags = collision_flags_batch(positions_from_actions(a), scene, t0, cfg)
    r_col = 1.0 - flags.astype(np.float64)
    r = r_col * r_imi
    if single:
        return RewardSequence(r[0], r_imi[0], r_col[0])
    return RewardSequence(r, r_imi, r_col)


def zscore_normalize(values, eps=ZSCORE_EPS):
    """(v - mean) / (population std + eps); all zeros when std < eps."""
    v = np.asarray(values, dtype=np.float64)
    if v.shape[-1] < 2:
        raise ValueError("z-score needs a group of at least two values")
    mu = v.mean(axis=-1, keepdims=True)
    sd = v.std(axis=-1, keepdims=True)
    out = (v - mu) / (sd + eps)
    return np.where(sd < eps, 0.0, out)


def sample_actions(policy, G, rng, step=None):
    """Draw G action sequences. With ``step`` set only that step is stochastic."""
    mu = policy.mu.data
    sigma = policy.sigma.data
    if step is None:
        return mu + sigma * rng.standard_normal((G,) + mu.shape).astype(mu.dtype)
    out = np.repeat(mu[None], G, axis=0)
    out[:, step] = mu[step] + sigma[step] * rng.standard_normal((G, mu.shape[1])).astype(mu.dtype)
    return out


def build_group(policy, actions, expert_actions, scene, t0, cfg, step=None):
    rewards = compute_rewards(actions, expert_actions, scene, t0, cfg)
    return SampleGroup(actions=actions, rewards=rewards, log_probs=log_prob_batch(policy, actions), step=step)


def naive_pggs_loss(group):
    """-(1/G) sum_g A_g * log pi(tau_g) with A = z-scored total reward."""
    if group.advantages is None:
        group.advantages = zscore_normalize(group.rewards.total)
    adv = Tensor(group.advantages)
    return -ad.mean(group.log_probs * adv)


def imagine(s, actions, world_model):
    """World-model rollouts for each sampled sequence (values only)."""
    G = len(actions)
    with ad.no_grad():
        s_rep = Tensor(np.repeat(s.data, G, axis=0))
        return world_model_step(s_rep, Tensor(np.asarray(actions).reshape(G, -1)), world_model).data


def long_term_advantage(group, critic, s, gamma, world_model=None):
    """A_long = (sum r + gamma V_ref(s'_hat)) - V_ref(s); A_cri = zscore(A_long)."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    if group.next_states is None:
        if world_model is None:
            raise ValueError("group has no imagined next states and no world model was given")
        group.next_states = imagine(s, group.actions, world_model)
    with ad.no_grad():
        v_next = critic.value(Tensor(group.next_states), "reference").data.astype(np.float64)
        v_s = float(critic.value(s.detach(), "reference").data[0])
    group.targets = group.rewards.total + gamma * v_next
    group.advantages = group.targets - v_s
    group.a_cri = zscore_normalize(group.advantages)
    return group


def adcgs_losses(group, critic, s, gamma):
    """(l_act, l_cri) for one group whose critic advantages are already set."""
    if group.a_cri is None:
        long_term_advantage(group, critic, s, gamma)
    l_act = -ad.mean(group.log_probs * Tensor(group.a_cri))
    v = critic.value(s.detach(), "learning")
    l_cri = ad.mean(ad.square(v - Tensor(group.targets)))
    return l_act, l_cri


def bc_loss(policy, expert_actions):
    return -log_prob(policy, expert_actions)


def rl_total(l_act, l_cri, l_bc, beta=0.005):
    if beta < 0:
        raise ValueError("beta must be non-negative")
    return l_act + l_cri + l_bc * beta


@dataclass
class StepAwareResult:
    l_actor: Tensor
    l_critic: Tensor
    actions: np.ndarray          # (n, G, n, 2)
    rewards: RewardSequence      # arrays shaped (n, G, n)
    a_long: np.ndarray           # (n, G)
    a_cri: np.ndarray            # (n, G)


def step_aware_group_sample(policy, s, critic, world_model, scene, t0, expert_actions, G, gamma, rng, cfg):
    """Step-aware group sampling with the dreaming critic.

    For each step i, G sequences are drawn in which only action i is sampled
    and every other step sits at the policy mode. Each step forms its own
    z-scored group. Both losses are averaged over the n groups.
    """
    if G < 2:
        raise ValueError("group size must be at least 2")
    n = policy.mu.shape[0]
    acts = np.stack([sample_actions(policy, G, rng, step=i) for i in range(n)])  # (n, G, n, 2)
    flat = acts.reshape(n * G, n, 2)
    rewards = compute_rewards(flat, expert_actions, scene, t0, cfg)
    next_states = imagine(s, flat, world_model)
    with ad.no_grad():
        v_next = critic.value(Tensor(next_states), "reference").data.astype(np.float64)
        v_s = float(critic.value(s.detach(), "reference").data[0])
    targets = (rewards.total + gamma * v_next).reshape(n, G)
    a_long = targets - v_s
    a_cri = zscore_normalize(a_long)
    logp = log_prob_batch(policy, flat)
    l_actor = -ad.mean(logp * Tensor(a_cri.reshape(-1)))
    v = critic.value(s.detach(), "learning")
    l_critic = ad.mean(ad.square(v - Tensor(targets.reshape(-1))))
    shaped = RewardSequence(rewards.r.reshape(n, G, n), rewards.r_imi.reshape(n, G, n),
                            rewards.r_col.reshape(n, G, n))
    return StepAwareResult(l_actor, l_critic, acts, shaped, a_long, a_cri)
