"""Training loop for the seven IL/RL integration strategies.

Every random draw in iteration ``it`` comes from ``default_rng([seed, it])``
and the record order of epoch ``e`` from ``default_rng([seed, e, 1])``, so a
run resumed from any checkpoint replays the same trace as an uninterrupted one.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import NumericalError, Tensor
from .competition import ContestLedger, record_contest, run_contest, score_actor
from .config import TrainConfig, format_config
from .model import CoIRLModel, actor_forward, ema_update, encode, world_model_step
from .objectives.il import ILLossReport, il_total, imitation_loss, world_model_loss
from .objectives.rl import (
    RLLossReport,
    bc_loss,
    build_group,
    naive_pggs_loss,
    rl_total,
    sample_actions,
    step_aware_group_sample,
)
from .optim import AdamW, lr_at

METRIC_COLUMNS = [
    "iteration", "phase", "lr", "l_imi", "l_wm", "l_il", "l_act", "l_cri", "l_bc", "l_rl",
    "mean_reward", "adv_spread", "contest_outcome", "contest_action", "score_il", "score_rl",
]
SINGLE_ACTOR = {"pure_rl": "rl"}   # the remaining single-actor strategies train the IL bundle


class TrainingError(RuntimeError):
    pass


@dataclass
class IterationTrace:
    iteration: int
    phase: str
    lr: float
    il: ILLossReport = None
    rl: RLLossReport = None
    contest: object = None
    wall_time: float = 0.0

    def row(self):
        nan = float("nan")
        il, rl, c = self.il, self.rl, self.contest
        return [
            self.iteration, self.phase, self.lr,
            il.l_imi if il else nan, il.l_wm if il else nan, il.l_il if il else nan,
            rl.l_act if rl else nan, rl.l_cri if rl else nan, rl.l_bc if rl else nan, rl.l_rl if rl else nan,
            rl.mean_reward if rl else nan, rl.adv_spread if rl else nan,
            c.outcome if c else "", c.action_taken if c else "",
            c.score_il if c else nan, c.score_rl if c else nan,
        ]


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def split_training_scenes(dataset, val_fraction, seed):
    """Deterministically hold out a slice of scenes for contests."""
    ids = dataset.scene_ids()
    if len(ids) < 2:
        return ids, []
    rng = np.random.default_rng([int(seed), 31337])
    order = rng.permutation(len(ids))
    n_val = min(len(ids) - 1, max(1, int(round(val_fraction * len(ids)))))
    val = sorted(ids[i] for i in order[:n_val])
    train = sorted(ids[i] for i in order[n_val:])
    return train, val


def phase_for(cfg, it):
    """Which losses run at iteration ``it``: 'il', 'rl', 'il+rl' (two phases) or 'merged'."""
    s = cfg.strategy
    if s == "pure_il":
        return "il"
    if s == "pure_rl":
        return "rl"
    if s == "loss_merging":
        return "merged"
    if s == "il_rl_interval":
        return "il" if (it // cfg.interval_period) % 2 == 0 else "rl"
    if s == "two_stage":
        return "il" if it < int(round(cfg.stage_split * cfg.total_iters)) else "rl"
    return "il+rl"


@dataclass
class TrainState:
    model: CoIRLModel
    optimizer: AdamW
    ledger: ContestLedger = field(default_factory=ContestLedger)
    iteration: int = 0


class Trainer:
    """Runs one training configuration over a dataset."""

    def __init__(self, cfg: TrainConfig, dataset, out_dir=None):
        self.cfg = cfg
        self.dataset = dataset
        self.world = dataset.world
        self.model_cfg = cfg.model_config(len(dataset.records[0].obs), self.world.n_steps)
        train_ids, val_ids = split_training_scenes(dataset, cfg.val_fraction, cfg.seed)
        self.train_set = dataset.subset(scene_ids=train_ids).records
        val_records = dataset.subset(scene_ids=val_ids).records if val_ids else []
        pick = np.random.default_rng([int(cfg.seed), 2718]).permutation(len(val_records))
        self.contest_set = [val_records[i] for i in sorted(pick[:cfg.comp_eval_batch])]
        self.out_dir = Path(out_dir) if out_dir else None
        self.state = TrainState(CoIRLModel(self.model_cfg, cfg.seed),
                                AdamW(weight_decay=cfg.weight_decay))
        self._perm_epoch = None
        self._perm = None

    # -- data ----------------------------------------------------------------------

    def record_at(self, it):
        n = len(self.train_set)
        epoch, pos = divmod(it, n)
        if self._perm_epoch != epoch:
            self._perm = np.random.default_rng([int(self.cfg.seed), epoch, 1]).permutation(n)
            self._perm_epoch = epoch
        return self.train_set[self._perm[pos]]

    # -- parameter groups ------------------------------------------------------------

    def actor_key(self, phase):
        if self.cfg.decoupled:
            return "il" if phase == "il" else "rl"
        return SINGLE_ACTOR.get(self.cfg.strategy, "il")

    def _params(self, *groups):
        return self.state.model.named_parameters(*groups)

    # -- phases --------------------------------------------------------------------

    def _il_losses(self, rec, actor_key):
        m = self.state.model
        s = encode(rec.obs, m.encoder)
        s_next = encode(rec.next_obs, m.encoder).detach()
        policy = actor_forward(s, m.actors[actor_key], self.model_cfg, with_sigma=False)
        l_imi = imitation_loss(policy.mu, rec.expert_actions)
        # world-model input is the (detached) mode plan
        s_hat = world_model_step(s, policy.mu.detach().reshape(1, -1), m.world_model)
        l_wm = world_model_loss(s_hat, s_next)
        return s, l_imi, l_wm

    def _rl_losses(self, rec, actor_key, rng, s=None, freeze_encoder=False):
        m = self.state.model
        cfg = self.cfg
        if s is None:
            s = encode(rec.obs, m.encoder)
        if freeze_encoder:
            s = s.detach()
        policy = actor_forward(s, m.actors[actor_key], self.model_cfg, with_sigma=True)
        scene = self.dataset.scene(rec)
        if cfg.rl_method == "naive_pggs":
            acts = sample_actions(policy, cfg.group_size, rng)
            group = build_group(policy, acts, rec.expert_actions, scene, rec.t, self.world)
            l_act = naive_pggs_loss(group)
            l_cri = Tensor(0.0)
            mean_r = float(group.rewards.r.mean())
            spread = float(np.ptp(group.rewards.total))
        else:
            res = step_aware_group_sample(policy, s, m.critic, m.world_model, scene, rec.t, rec.expert_actions,
                                          cfg.group_size, cfg.gamma, rng, self.world)
            l_act, l_cri = res.l_actor, res.l_critic
            mean_r = float(res.rewards.r.mean())
            spread = float(np.mean(np.ptp(res.a_long, axis=1)))
        l_bc = bc_loss(policy, rec.expert_actions)
        l_rl = rl_total(l_act, l_cri, l_bc, cfg.beta)
        report = RLLossReport(l_act.item(), l_cri.item(), l_bc.item(), l_rl.item(), cfg.beta, mean_r, spread)
        return s, l_rl, report

    def _apply(self, loss, groups, lr):
        m = self.state.model
        m.zero_grad()
        ad.backward(loss)
        self.state.optimizer.step(self._params(*groups), lr)

    def il_phase(self, rec, lr):
        key = self.actor_key("il")
        _, l_imi, l_wm = self._il_losses(rec, key)
        loss = il_total(l_imi, l_wm, self.cfg.alpha)
        self._apply(loss, ("encoder", "world_model", f"actor_{key}"), lr)
        return ILLossReport(l_imi.item(), l_wm.item(), loss.item(), self.cfg.alpha)

    def rl_phase(self, rec, lr, rng):
        cfg = self.cfg
        key = self.actor_key("rl")
        groups = [f"actor_{key}"]
        if cfg.rl_method == "adcgs_step_aware":
            groups.append("critic")
        il_report = None
        if cfg.decoupled:
            # encoder and world model are frozen for this phase
            _, loss, report = self._rl_losses(rec, key, rng, freeze_encoder=True)
        elif cfg.strategy == "pure_rl" and cfg.pure_rl_world_model:
            s, l_imi, l_wm = self._il_losses_for_wm(rec, key)
            _, l_rl, report = self._rl_losses(rec, key, rng, s=s)
            loss = l_rl + l_wm * cfg.alpha
            groups += ["encoder", "world_model"]
            il_report = ILLossReport(float("nan"), l_wm.item(), float("nan"), cfg.alpha)
        else:
            _, loss, report = self._rl_losses(rec, key, rng)
            groups.append("encoder")
        self._apply(loss, groups, lr)
        if cfg.rl_method == "adcgs_step_aware":
            ema_update(self.state.model.critic)
        return report, il_report

    def _il_losses_for_wm(self, rec, key):
        # world-model loss only; the mode plan of the trained actor feeds the world model
        m = self.state.model
        s = encode(rec.obs, m.encoder)
        s_next = encode(rec.next_obs, m.encoder).detach()
        with ad.no_grad():
            mu = actor_forward(s.detach(), m.actors[key], self.model_cfg, with_sigma=False).mu
        l_wm = world_model_loss(world_model_step(s, mu.reshape(1, -1), m.world_model), s_next)
        return s, None, l_wm

    def merged_step(self, rec, lr, rng):
        cfg = self.cfg
        key = self.actor_key("il")
        s, l_imi, l_wm = self._il_losses(rec, key)
        l_il = il_total(l_imi, l_wm, cfg.alpha)
        _, l_rl, report = self._rl_losses(rec, key, rng, s=s)
        groups = ["encoder", "world_model", f"actor_{key}"]
        if cfg.rl_method == "adcgs_step_aware":
            groups.append("critic")
        self._apply(l_il + l_rl, groups, lr)
        if cfg.rl_method == "adcgs_step_aware":
            ema_update(self.state.model.critic)
        return ILLossReport(l_imi.item(), l_wm.item(), l_il.item(), cfg.alpha), report

    def step(self, it):
        """Run iteration ``it`` and return its trace."""
        cfg = self.cfg
        t_start = time.perf_counter()
        rng = np.random.default_rng([int(cfg.seed), int(it)])
        rec = self.record_at(it)
        lr = lr_at(it, cfg.lr, cfg.total_iters, cfg.lr_warmup, cfg.lr_floor)
        phase = phase_for(cfg, it)
        trace = IterationTrace(it, phase, lr)
        try:
            if phase == "merged":
                trace.il, trace.rl = self.merged_step(rec, lr, rng)
            else:
                if "il" in phase.split("+"):
                    trace.il = self.il_phase(rec, lr)
                if "rl" in phase.split("+"):
                    trace.rl, wm_report = self.rl_phase(rec, lr, rng)
                    trace.il = trace.il or wm_report
        except NumericalError as exc:
            self._dump_diagnostic(it, rec, exc)
            raise
        if cfg.uses_contests and (it + 1) % cfg.comp_k == 0 and self.contest_set:
            trace.contest = run_contest(it + 1, self.state.model.actors, self.contest_set,
                                        self.state.model.encoder, self.model_cfg, self.dataset,
                                        cfg.competition, self.state.optimizer)
            record_contest(trace.contest, self.state.ledger)
        self.state.iteration = it + 1
        trace.wall_time = time.perf_counter() - t_start
        return trace

    def _dump_diagnostic(self, it, rec, exc):
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        checkpoint.save(self.out_dir / "diagnostic.ckpt.json", self.state.model.state_arrays(),
                        meta={"iteration": it, "record": rec.key, "error": str(exc)})

    # -- checkpoints -------------------------------------------------------------------

    def checkpoint_arrays(self):
        arrays = dict(self.state.model.state_arrays())
        steps = {}
        for name, st in sorted(self.state.optimizer.state.items()):
            arrays[f"opt.m.{name}"] = st["m"]
            arrays[f"opt.v.{name}"] = st["v"]
            steps[name] = st["step"]
        return arrays, steps

    def save_checkpoint(self, path, final=False, inference_actor=None):
        arrays, steps = self.checkpoint_arrays()
        meta = {
            "iteration": self.state.iteration,
            "final": final,
            "train_config": {k: _fmt(v) if isinstance(v, float) else v for k, v in self.cfg.to_dict().items()},
            "train_config_hash": self.cfg.hash(),
            "model_config": self.model_cfg.to_dict(),
            "world": self.world.to_dict(),
            "world_hash": self.world.hash(),
            "dataset": _dataset_ref(self.dataset),
            "actor_tags": {"il": "il", "rl": "rl"},
            "optimizer_steps": steps,
            "inference_actor": inference_actor,
        }
        extra = {"contests": self.state.ledger.to_csv()}
        checkpoint.save(path, arrays, meta, extra)

    def load_checkpoint(self, path):
        arrays, doc = checkpoint.load(path)
        meta = doc["meta"]
        if meta.get("train_config_hash") != self.cfg.hash():
            raise TrainingError(f"{path}: checkpoint was written by a different training config")
        self.state.model.load_arrays({k: v for k, v in arrays.items() if not k.startswith("opt.")})
        opt = self.state.optimizer
        opt.state = {}
        for name, step in meta.get("optimizer_steps", {}).items():
            opt.state[name] = {"m": arrays[f"opt.m.{name}"].copy(), "v": arrays[f"opt.v.{name}"].copy(),
                               "step": int(step)}
        self.state.ledger = ContestLedger.from_csv(doc.get("contests", ""))
        self.state.iteration = int(meta["iteration"])

    # -- full run ------------------------------------------------------------------------

    def final_scores(self):
        if not self.contest_set:
            return None
        m = self.state.model
        return {k: score_actor(m.actors[k], self.contest_set, m.encoder, self.model_cfg, self.dataset)
                for k in ("il", "rl")}

    def run(self, resume=False, stop_at=None, progress=None):
        """Train to ``total_iters`` (or ``stop_at``); writes artifacts when ``out_dir`` is set."""
        cfg = self.cfg
        out = self.out_dir
        ckpt_path = out / "checkpoint.json" if out else None
        if out:
            out.mkdir(parents=True, exist_ok=True)
            (out / "config.txt").write_text(format_config(cfg), encoding="utf-8")
        start = 0
        rows = []
        if resume and ckpt_path and ckpt_path.exists():
            self.load_checkpoint(ckpt_path)
            start = self.state.iteration
            rows = _read_metric_rows(out / "metrics.csv", start)
        end = cfg.total_iters if stop_at is None else min(stop_at, cfg.total_iters)
        timings = []
        traces = []
        for it in range(start, end):
            trace = self.step(it)
            traces.append(trace)
            rows.append([_fmt(v) for v in trace.row()])
            timings.append((it, trace.wall_time))
            if out and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0 and it + 1 < end:
                self._write_metrics(rows, timings)
                self.save_checkpoint(ckpt_path)
            if progress:
                progress(trace)
        finished = self.state.iteration >= cfg.total_iters
        result = {"iterations": self.state.iteration, "finished": finished}
        if finished:
            scores = self.final_scores()
            result["final_scores"] = scores
            result["inference_actor"] = select_inference_actor(cfg, scores)
        if out:
            self._write_metrics(rows, timings)
            self.save_checkpoint(ckpt_path, final=finished, inference_actor=result.get("inference_actor"))
            (out / "contests.csv").write_text(self.state.ledger.to_csv(), encoding="utf-8")
            run_doc = {
                "config_hash": cfg.hash(),
                "strategy": cfg.strategy,
                "rl_method": cfg.rl_method,
                "seed": cfg.seed,
                "dataset": _dataset_ref(self.dataset),
                "outputs": {"checkpoint": "checkpoint.json", "metrics": "metrics.csv",
                            "contests": "contests.csv", "config": "config.txt", "timings": "timings.csv"},
                **result,
            }
            (out / "run.json").write_text(json.dumps(run_doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        result["traces"] = traces
        return result

    def _write_metrics(self, rows, timings):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        w.writerows(rows)
        (self.out_dir / "metrics.csv").write_text(buf.getvalue(), encoding="utf-8")
        tpath = self.out_dir / "timings.csv"
        mode = "a" if tpath.exists() and timings and timings[0][0] > 0 else "w"
        with open(tpath, mode, encoding="utf-8") as fh:
            if mode == "w":
                fh.write("iteration,seconds\n")
            fh.writelines(f"{i},{t:.6f}\n" for i, t in timings)
        timings.clear()


def _read_metric_rows(path, upto):
    if not Path(path).exists():
        return []
    with open(path, encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        return [row for row in reader if int(row[0]) < upto]


def _dataset_ref(dataset):
    man = dataset.manifest
    return {
        "path": str(dataset.path) if dataset.path else None,
        "config_hash": man.get("config_hash"),
        "data_sha256": man.get("data_sha256"),
        "world_hash": man.get("world_hash"),
        "domain_mix": man.get("domain_mix"),
    }


def select_inference_actor(cfg, final_scores=None):
    """The actor used at inference: higher final contest score wins, ties go to IL."""
    if not cfg.decoupled:
        return SINGLE_ACTOR.get(cfg.strategy, "il")
    if not final_scores:
        return "il"
    return "rl" if final_scores["rl"] > final_scores["il"] else "il"


def train(cfg, dataset, out_dir=None, resume=False, stop_at=None, progress=None):
    trainer = Trainer(cfg, dataset, out_dir)
    result = trainer.run(resume=resume, stop_at=stop_at, progress=progress)
    result["trainer"] = trainer
    return result
