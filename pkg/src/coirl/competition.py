"""Rule-based contests between the IL and RL actors with tiered weight transfer."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import ActorBundle, StructuralError, _check_parity, actor_forward, encode
from .objectives.rl import compute_rewards

OUTCOMES = ("comparable", "moderate_il", "moderate_rl", "significant_il", "significant_rl")
ACTIONS = ("none", "soft_merge", "hard_replace")
GAP_FLOOR = 1e-6


@dataclass(frozen=True)
class CompetitionConfig:
    k: int = 500
    p: float = 0.9
    theta_mod: float = 0.05
    theta_sig: float = 0.20
    eval_batch: int = 64

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("contest period k must be >= 1")
        if not 0.0 < self.p < 1.0:
            raise ValueError("soft-merge retention p must lie in (0, 1)")
        # theta_mod = inf disables contests; theta_sig = inf disables hard replacement
        if not (0.0 < self.theta_mod and (self.theta_mod < self.theta_sig or math.isinf(self.theta_mod))):
            raise ValueError("thresholds must satisfy 0 < theta_mod < theta_sig")
        if self.eval_batch < 1:
            raise ValueError("eval_batch must be >= 1")


@dataclass
class ContestResult:
    iteration: int
    score_il: float
    score_rl: float
    outcome: str
    action_taken: str

    @property
    def winner(self):
        return None if self.outcome == "comparable" else self.outcome.split("_")[1]


def relative_gap(score_il, score_rl):
    winner = max(score_il, score_rl)
    return abs(score_il - score_rl) / max(abs(winner), GAP_FLOOR)


def judge(score_il, score_rl, cfg=CompetitionConfig()):
    """Tier the relative score gap; ties count as comparable."""
    if not (math.isfinite(score_il) and math.isfinite(score_rl)):
        raise ValueError("contest scores must be finite")
    g = relative_gap(score_il, score_rl)
    if g < cfg.theta_mod or score_il == score_rl:
        return "comparable"
    side = "il" if score_il > score_rl else "rl"
    tier = "moderate" if g < cfg.theta_sig else "significant"
    return f"{tier}_{side}"


def _params(bundle):
    return bundle.params if isinstance(bundle, ActorBundle) else bundle


def soft_merge(winner, loser, p, exclude=ActorBundle.SOFT_MERGE_EXCLUDE):
    """loser <- p * loser + (1 - p) * winner over every shared parameter, in place."""
    w, l = _params(winner), _params(loser)
    _check_parity(w, l)
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    for name, t in l.items():
        if name in exclude:
            continue
        t.data = (p * t.data + (1.0 - p) * w[name].data).astype(t.data.dtype)
    return loser


def hard_replace(winner, loser, optimizer=None, loser_prefix=None):
    """Copy every winner parameter into the loser and clear the loser's optimizer moments."""
    w, l = _params(winner), _params(loser)
    _check_parity(w, l)
    for name, t in l.items():
        t.data = w[name].data.copy()
    if optimizer is not None:
        prefix = loser_prefix or ""
        optimizer.reset([prefix + name for name in l])
    return loser


def score_actor(actor, contest_set, encoder, cfg, dataset):
    """Mean over records of the summed per-step reward using mode actions."""
    if not contest_set:
        raise ValueError("contest set is empty")
    with ad.no_grad():
        obs = Tensor(np.stack([r.obs for r in contest_set]))
        s = encode(obs, encoder)
        totals = []
        for row, rec in enumerate(contest_set):
            mu = actor_forward(Tensor(s.data[row:row + 1]), actor, cfg, with_sigma=False).mu.data
            rew = compute_rewards(mu, rec.expert_actions, dataset.scene(rec), rec.t, dataset.world)
            totals.append(float(rew.r.sum()))
    return float(np.mean(totals))


@dataclass
class ContestLedger:
    results: list = field(default_factory=list)
    wins_il: int = 0
    wins_rl: int = 0
    cumulative: list = field(default_factory=list)   # (wins_il, wins_rl) after each contest

    @property
    def score_difference(self):
        return [r.score_il - r.score_rl for r in self.results]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "score_il", "score_rl", "outcome", "action"])
        for r in self.results:
            w.writerow([r.iteration, repr(float(r.score_il)), repr(float(r.score_rl)), r.outcome, r.action_taken])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        ledger = cls()
        for row in csv.DictReader(io.StringIO(text)):
            record_contest(ContestResult(int(row["iteration"]), float(row["score_il"]), float(row["score_rl"]),
                                         row["outcome"], row["action"]), ledger)
        return ledger


def record_contest(result, ledger):
    if result.outcome not in OUTCOMES:
        raise ValueError(f"unknown outcome {result.outcome!r}")
    ledger.results.append(result)
    if result.winner == "il":
        ledger.wins_il += 1
    elif result.winner == "rl":
        ledger.wins_rl += 1
    ledger.cumulative.append((ledger.wins_il, ledger.wins_rl))
    return ledger


def action_for(outcome):
    if outcome == "comparable":
        return "none"
    return "soft_merge" if outcome.startswith("moderate") else "hard_replace"


def run_contest(iteration, actors, contest_set, encoder, model_cfg, dataset, cfg, optimizer=None):
    """Score both actors, judge, and apply the tiered transfer to the loser."""
    s_il = score_actor(actors["il"], contest_set, encoder, model_cfg, dataset)
    s_rl = score_actor(actors["rl"], contest_set, encoder, model_cfg, dataset)
    outcome = judge(s_il, s_rl, cfg)
    action = action_for(outcome)
    if action != "none":
        win = outcome.split("_")[1]
        lose = "rl" if win == "il" else "il"
        if action == "soft_merge":
            soft_merge(actors[win], actors[lose], cfg.p)
        else:
            hard_replace(actors[win], actors[lose], optimizer, f"actor_{lose}.")
    return ContestResult(int(iteration), s_il, s_rl, outcome, action)


__all__ = [
    "ACTIONS", "OUTCOMES", "CompetitionConfig", "ContestLedger", "ContestResult", "StructuralError",
    "action_for", "hard_replace", "judge", "record_contest", "relative_gap", "run_contest",
    "score_actor", "soft_merge",
]
