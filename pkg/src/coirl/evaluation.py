"""Open-loop planning metrics, long-tail subsets and cross-domain evaluation."""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import actor_forward, encode
from .world.collision import collision_flags_batch

HORIZON_STEPS = (2, 4, 6)          # 1 s / 2 s / 3 s at 2 Hz
HORIZON_NAMES = ("1s", "2s", "3s")
LONGTAIL_L2 = (0.3, 0.5, 1.0)


class EvaluationError(ValueError):
    pass


class DomainLeakageError(EvaluationError):
    pass


@dataclass
class EvalResult:
    keys: list                 # record keys "scene_id/t"
    l2_steps: np.ndarray       # (N, n) per-step L2 in meters
    flags: np.ndarray          # (N, n) per-step collision flags
    domain: str = None

    def __post_init__(self):
        self.l2_steps = np.asarray(self.l2_steps, dtype=np.float64)
        self.flags = np.asarray(self.flags, dtype=bool)

    def __len__(self):
        return len(self.keys)

    @property
    def l2(self):
        """(N, 3) L2 at 1 s, 2 s, 3 s."""
        return self.l2_steps[:, [h - 1 for h in HORIZON_STEPS]]

    @property
    def collisions(self):
        """(N, 3) bool: any collision within 1 s, 2 s, 3 s."""
        return np.stack([self.flags[:, :h].any(axis=1) for h in HORIZON_STEPS], axis=1)

    def summary(self):
        l2 = self.l2.mean(axis=0)
        col = 100.0 * self.collisions.mean(axis=0)
        out = {"count": len(self)}
        if self.domain is not None:
            out["domain"] = self.domain
        for name, a, c in zip(HORIZON_NAMES, l2, col):
            out[f"l2_{name}"] = float(a)
            out[f"col_{name}"] = float(c)
        out["l2_avg"] = float(np.mean(l2))
        out["col_avg"] = float(np.mean(col))
        return out

    def subset(self, keys):
        keep = set(keys)
        idx = [i for i, k in enumerate(self.keys) if k in keep]
        return EvalResult([self.keys[i] for i in idx], self.l2_steps[idx], self.flags[idx], self.domain)

    def dump_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["key", "scene_id", "t"] + [f"l2_{h}" for h in HORIZON_NAMES] + [f"col_{h}" for h in HORIZON_NAMES])
        for key, l2, col in zip(self.keys, self.l2, self.collisions):
            scene_id, t = key.rsplit("/", 1)
            w.writerow([key, scene_id, t] + [repr(float(x)) for x in l2] + [int(c) for c in col])
        return buf.getvalue()


def read_dump(text):
    """Parse a per-record dump into (keys, l2 (N, 3), col (N, 3))."""
    keys, l2, col = [], [], []
    for row in csv.DictReader(io.StringIO(text)):
        keys.append(row["key"])
        l2.append([float(row[f"l2_{h}"]) for h in HORIZON_NAMES])
        col.append([int(row[f"col_{h}"]) for h in HORIZON_NAMES])
    return keys, np.array(l2).reshape(-1, 3), np.array(col, dtype=bool).reshape(-1, 3)


def summary_from_dump(text):
    keys, l2, col = read_dump(text)
    if not keys:
        raise EvaluationError("dump is empty")
    m_l2 = l2.mean(axis=0)
    m_col = 100.0 * col.mean(axis=0)
    out = {"count": len(keys)}
    for name, a, c in zip(HORIZON_NAMES, m_l2, m_col):
        out[f"l2_{name}"] = float(a)
        out[f"col_{name}"] = float(c)
    out["l2_avg"] = float(np.mean(m_l2))
    out["col_avg"] = float(np.mean(m_col))
    return out


# -- policies ---------------------------------------------------------------------

def model_policy(model, actor_key):
    """Mode-action planner of one actor of a trained model."""
    actor = model.actors[actor_key]

    def plan(records):
        with ad.no_grad():
            s = encode(Tensor(np.stack([r.obs for r in records])), model.encoder).data
            return np.stack([actor_forward(Tensor(s[i:i + 1]), actor, model.cfg, with_sigma=False).mu.data
                             for i in range(len(records))]).astype(np.float64)
    return plan


def expert_policy(records):
    """Replays the expert demonstration."""
    return np.stack([r.expert_actions for r in records]).astype(np.float64)


def evaluate(policy, dataset, records=None, domain=None, batch=256):
    """Roll each record's mode plan open-loop and score it against the expert."""
    records = dataset.records if records is None else records
    if not records:
        raise EvaluationError("evaluation set is empty")
    n = dataset.world.n_steps
    l2_all, flags_all = [], []
    for start in range(0, len(records), batch):
        chunk = records[start:start + batch]
        actions = np.asarray(policy(chunk), dtype=np.float64)
        if actions.shape != (len(chunk), n, 2):
            raise EvaluationError(f"policy returned shape {actions.shape}, expected {(len(chunk), n, 2)}")
        expert = np.stack([r.expert_actions for r in chunk]).astype(np.float64)
        pos = np.cumsum(actions, axis=1)
        l2_all.append(np.linalg.norm(pos - np.cumsum(expert, axis=1), axis=-1))
        for rec, p in zip(chunk, pos):
            flags_all.append(collision_flags_batch(p[None], dataset.scene(rec), rec.t, dataset.world)[0])
    return EvalResult([r.key for r in records], np.concatenate(l2_all), np.stack(flags_all), domain)


# -- long-tail subsets -------------------------------------------------------------

@dataclass(frozen=True)
class LongTailSpec:
    mode: str = "collision"
    l2_thresholds: tuple = LONGTAIL_L2

    def __post_init__(self):
        if self.mode not in ("l2", "collision"):
            raise ValueError(f"long-tail mode must be 'l2' or 'collision', got {self.mode!r}")
        t = self.l2_thresholds
        if len(t) != 3 or not (t[0] < t[1] < t[2]):
            raise ValueError("long-tail L2 thresholds must be three strictly increasing values")


def _longtail_keys(keys, l2, col_3s, spec):
    if spec.mode == "l2":
        mask = np.all(np.asarray(l2) > np.asarray(spec.l2_thresholds), axis=1)
    else:
        mask = np.asarray(col_3s, dtype=bool)
    out = [k for k, m in zip(keys, mask) if m]
    if not out:
        warnings.warn(f"long-tail subset ({spec.mode}) is empty", RuntimeWarning, stacklevel=3)
    return out


def build_longtail(baseline, spec=LongTailSpec()):
    """Record keys on which the baseline fails: large L2 at every horizon, or a 3 s collision."""
    if isinstance(spec, str):
        spec = LongTailSpec(spec)
    return _longtail_keys(baseline.keys, baseline.l2, baseline.collisions[:, 2], spec)


def longtail_from_dump(text, spec=LongTailSpec()):
    """Same selection applied to a per-record dump written by :meth:`EvalResult.dump_csv`."""
    if isinstance(spec, str):
        spec = LongTailSpec(spec)
    keys, l2, col = read_dump(text)
    return _longtail_keys(keys, l2, col[:, 2], spec)


# -- generalization ------------------------------------------------------------------

def check_domain_leakage(train_manifest, train_domain, eval_sets=()):
    """Abort if training used scenes outside ``train_domain`` or shares scenes with an eval set."""
    foreign = [s["scene_id"] for s in train_manifest.get("scenes", []) if s["domain"] != train_domain]
    if foreign:
        raise DomainLeakageError(f"training set contains {len(foreign)} scene(s) outside domain "
                                 f"{train_domain}: {foreign[:3]}")
    train_ids = {s["scene_id"] for s in train_manifest.get("scenes", [])}
    for ds in eval_sets:
        shared = train_ids & set(ds.scene_ids())
        if shared:
            raise DomainLeakageError(f"evaluation set shares {len(shared)} scene(s) with training: "
                                     f"{sorted(shared)[:3]}")


def generalization_eval(policy, train_manifest, train_domain, test_sets):
    """Evaluate on held-out sets keyed by domain; returns per-domain summaries and gaps."""
    check_domain_leakage(train_manifest, train_domain, test_sets.values())
    results = {}
    for dom, ds in sorted(test_sets.items()):
        wrong = {s["domain"] for s in ds.manifest["scenes"]} - {dom}
        if wrong:
            raise EvaluationError(f"test set for domain {dom} contains domains {sorted(wrong)}")
        results[dom] = evaluate(policy, ds, domain=dom)
    base = results.get(train_domain)
    gaps = {}
    if base is not None:
        b = base.summary()
        for dom, res in results.items():
            if dom == train_domain:
                continue
            s = res.summary()
            gaps[dom] = {k: s[k] - b[k] for k in ("l2_avg", "col_avg")}
    return results, gaps


def write_report(result, out_dir, name="eval"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}_dump.csv").write_text(result.dump_csv(), encoding="utf-8")
    (out / f"{name}_summary.json").write_text(json.dumps(result.summary(), sort_keys=True, indent=1) + "\n",
                                              encoding="utf-8")
