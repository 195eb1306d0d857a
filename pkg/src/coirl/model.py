"""Encoder, dual actors, latent world model and critic pair.

All activations are 2D tensors. A single latent state is a (1, d_s) row; a
batch of states is (B, d_s). Waypoint features are (n, d_w).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class StructuralError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    obs_dim: int = 55
    n_steps: int = 6
    d_s: int = 64
    d_w: int = 64
    hidden: int = 64
    kv_slots: int = 4
    sigma_min: float = 1e-3
    sigma_max: float = 2.0
    sigma_init: float = 0.3
    mask_mode: str = "inverse_causal"
    ema_decay: float = 0.99

    def to_dict(self):
        return asdict(self)


@dataclass
class PolicyParams:
    mu: Tensor      # (n, 2)
    sigma: Tensor   # (n, 2)


def _init(rng, fan_in, fan_out, scale=1.0):
    return Tensor(rng.standard_normal((fan_in, fan_out)) * (scale / math.sqrt(fan_in)), requires_grad=True)


def _zeros(*shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def init_encoder(rng, cfg):
    return {
        "w1": _init(rng, cfg.obs_dim, cfg.hidden), "b1": _zeros(cfg.hidden),
        "w2": _init(rng, cfg.hidden, cfg.d_s), "b2": _zeros(cfg.d_s),
    }


def init_actor(rng, cfg):
    d, n = cfg.d_w, cfg.n_steps
    inv_sp = math.log(math.expm1(cfg.sigma_init))
    return {
        "q_w": Tensor(rng.standard_normal((n, d)), requires_grad=True),
        "kv.w_k": _init(rng, cfg.d_s, cfg.kv_slots * d), "kv.b_k": _zeros(cfg.kv_slots * d),
        "kv.w_v": _init(rng, cfg.d_s, cfg.kv_slots * d), "kv.b_v": _zeros(cfg.kv_slots * d),
        "sa.w_q": _init(rng, d, d), "sa.w_k": _init(rng, d, d),
        "sa.w_v": _init(rng, d, d), "sa.w_o": _init(rng, d, d, 0.5),
        "ff.w1": _init(rng, d, d), "ff.b1": _zeros(d),
        "ff.w2": _init(rng, d, d, 0.5), "ff.b2": _zeros(d),
        "plan.w": _init(rng, d, 2, 0.5), "plan.b": _zeros(2),
        "sigma.w": _init(rng, d, 2, 0.1),
        "sigma.b": Tensor(np.full(2, inv_sp), requires_grad=True),
    }


def init_world_model(rng, cfg):
    return {
        "w1": _init(rng, cfg.d_s + 2 * cfg.n_steps, cfg.hidden), "b1": _zeros(cfg.hidden),
        "w2": _init(rng, cfg.hidden, cfg.d_s), "b2": _zeros(cfg.d_s),
    }


def init_critic(rng, cfg):
    return {
        "w1": _init(rng, cfg.d_s, cfg.hidden), "b1": _zeros(cfg.hidden),
        "w2": _init(rng, cfg.hidden, 1, 0.1), "b2": _zeros(1),
    }


class ActorBundle:
    """Planning-module parameters of one actor (IL or RL)."""

    SOFT_MERGE_EXCLUDE = ("sigma.w", "sigma.b")

    def __init__(self, params, tag):
        if tag not in ("il", "rl"):
            raise ValueError(f"actor tag must be 'il' or 'rl', got {tag!r}")
        self.params = params
        self.tag = tag

    def manifest(self):
        return {k: tuple(v.shape) for k, v in self.params.items()}

    def __getitem__(self, name):
        return self.params[name]


def copy_params(params):
    return {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in params.items()}


class CriticPair:
    """Learning critic plus an EMA reference critic of identical structure."""

    def __init__(self, learning, reference=None, ema_decay=0.99):
        self.learning = learning
        self.reference = reference if reference is not None else copy_params(learning)
        for p in self.reference.values():
            p.requires_grad = False
        self.ema_decay = ema_decay
        _check_parity(self.learning, self.reference)

    def value(self, s, which="learning"):
        params = self.learning if which == "learning" else self.reference
        if which not in ("learning", "reference"):
            raise ValueError(f"unknown critic {which!r}")
        return critic_value(s, params)


def _check_parity(a, b):
    if list(a) != list(b) and set(a) != set(b):
        raise StructuralError(f"parameter names differ: {sorted(set(a) ^ set(b))[:5]}")
    for k in a:
        if a[k].shape != b[k].shape:
            raise StructuralError(f"{k}: shape {a[k].shape} != {b[k].shape}")


class CoIRLModel:
    """Shared perception + world model, two actors and the critic pair."""

    def __init__(self, cfg=ModelConfig(), seed=0):
        self.cfg = cfg
        rng = np.random.default_rng([int(seed), 4242])
        self.encoder = init_encoder(rng, cfg)
        self.world_model = init_world_model(rng, cfg)
        il = init_actor(rng, cfg)
        self.actors = {"il": ActorBundle(il, "il"), "rl": ActorBundle(copy_params(il), "rl")}
        self.critic = CriticPair(init_critic(rng, cfg), ema_decay=cfg.ema_decay)

    def groups(self):
        return {
            "encoder": self.encoder,
            "world_model": self.world_model,
            "actor_il": self.actors["il"].params,
            "actor_rl": self.actors["rl"].params,
            "critic": self.critic.learning,
            "critic_ref": self.critic.reference,
        }

    def named_parameters(self, *groups):
        out = {}
        for g, params in self.groups().items():
            if groups and g not in groups:
                continue
            for k, v in params.items():
                out[f"{g}.{k}"] = v
        return out

    def state_arrays(self):
        return {k: v.data for k, v in self.named_parameters().items()}

    def load_arrays(self, arrays):
        params = self.named_parameters()
        for k, v in params.items():
            if k not in arrays:
                raise StructuralError(f"missing parameter {k}")
            if tuple(arrays[k].shape) != v.shape:
                raise StructuralError(f"{k}: shape {arrays[k].shape} != {v.shape}")
            v.data = np.array(arrays[k], dtype=v.data.dtype)

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.grad = None


# -- forward ops -------------------------------------------------------------------

def _mlp2(x, p, out_act=None):
    h = ad.tanh(ad.linear(x, p["w1"], p["b1"]))
    y = ad.linear(h, p["w2"], p["b2"])
    return out_act(y) if out_act else y


def encode(o, params):
    """Observation rows (B, obs_dim) -> latent rows (B, d_s)."""
    o = o if isinstance(o, Tensor) else Tensor(np.atleast_2d(o))
    if o.ndim != 2 or o.shape[1] != params["w1"].shape[0]:
        raise ValueError(f"observation width {o.shape[-1]} != encoder input {params['w1'].shape[0]}")
    return _mlp2(o, params, ad.tanh)


def waypoint_attend(s, actor, kv_slots=None):
    """Learned waypoint queries cross-attend to a latent state split into kv slots."""
    p = actor.params if isinstance(actor, ActorBundle) else actor
    q = p["q_w"]
    n, d = q.shape
    slots = kv_slots or p["kv.w_k"].shape[1] // d
    if s.shape[0] != 1:
        raise ValueError("waypoint_attend takes a single latent state (1, d_s)")
    k = ad.linear(s, p["kv.w_k"], p["kv.b_k"]).reshape(slots, d)
    v = ad.linear(s, p["kv.w_v"], p["kv.b_v"]).reshape(slots, d)
    return ad.masked_attention(q, k, v, np.zeros((n, slots), dtype=bool))


def backward_plan(s_w, actor, mask_mode="inverse_causal"):
    """One masked self-attention layer plus a row-wise feed-forward block."""
    p = actor.params if isinstance(actor, ActorBundle) else actor
    n = s_w.shape[0]
    mask = ad.attention_mask(n, mask_mode)
    att = ad.masked_attention(ad.matmul(s_w, p["sa.w_q"]), ad.matmul(s_w, p["sa.w_k"]),
                              ad.matmul(s_w, p["sa.w_v"]), mask)
    h = s_w + ad.matmul(att, p["sa.w_o"])
    ff = ad.linear(ad.tanh(ad.linear(h, p["ff.w1"], p["ff.b1"])), p["ff.w2"], p["ff.b2"])
    return h + ff


def plan(s_w, actor):
    p = actor.params if isinstance(actor, ActorBundle) else actor
    return ad.linear(s_w, p["plan.w"], p["plan.b"])


def stochastic_head(s_w, actor, sigma_min=1e-3, sigma_max=2.0):
    p = actor.params if isinstance(actor, ActorBundle) else actor
    return ad.bounded_softplus(ad.linear(s_w, p["sigma.w"], p["sigma.b"]), sigma_min, sigma_max)


def actor_forward(s, actor, cfg, with_sigma=True):
    """Latent (1, d_s) -> PolicyParams; sigma is None when ``with_sigma`` is False."""
    feats = backward_plan(waypoint_attend(s, actor), actor, cfg.mask_mode)
    mu = plan(feats, actor)
    sigma = stochastic_head(feats, actor, cfg.sigma_min, cfg.sigma_max) if with_sigma else None
    return PolicyParams(mu, sigma)


def world_model_step(s, actions, params):
    """(B, d_s) latent and (B, n, 2) or (B, 2n) actions -> predicted next latent (B, d_s)."""
    if not isinstance(actions, Tensor):
        actions = Tensor(np.asarray(actions))
    B = s.shape[0]
    a = actions.reshape(B, -1) if actions.ndim != 2 or actions.shape[0] != B else actions
    return _mlp2(ad.concat([s, a], axis=1), params)


def critic_value(s, params):
    """(B, d_s) -> (B,) values."""
    v = _mlp2(s, params)
    return v.reshape(v.shape[0])


def ema_update(pair):
    """reference <- decay * reference + (1 - decay) * learning, in place."""
    if not 0.0 < pair.ema_decay < 1.0:
        raise ValueError("ema decay must lie in (0, 1)")
    _check_parity(pair.learning, pair.reference)
    d = pair.ema_decay
    for k, ref in pair.reference.items():
        ref.data = (d * ref.data + (1 - d) * pair.learning[k].data).astype(ref.data.dtype)
    return pair


LOG_2PI = math.log(2 * math.pi)


def log_prob(policy, actions):
    """Sum over steps and both dims of log N(a | mu, sigma^2); scalar tensor."""
    return ad.sum_(_gauss_terms(policy.mu, policy.sigma, actions))


def log_prob_batch(policy, actions):
    """(G, n, 2) actions -> (G,) log-probabilities under one shared policy."""
    actions = np.asarray(actions)
    G = actions.shape[0]
    mu = ad.broadcast_rows(policy.mu, G)
    sigma = ad.broadcast_rows(policy.sigma, G)
    terms = _gauss_terms(mu, sigma, actions)
    return ad.sum_(terms.reshape(G, -1), axis=1)


def _gauss_terms(mu, sigma, actions):
    a = actions if isinstance(actions, Tensor) else Tensor(np.asarray(actions))
    z = (a - mu) / sigma
    return ad.square(z) * -0.5 - ad.log(sigma) - 0.5 * LOG_2PI
