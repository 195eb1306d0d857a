"""Offline expert dataset: JSON-lines records plus a manifest."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .observe import observe
from .scene import DEFAULT_WORLD, WorldConfig, generate_scene


class DatasetError(RuntimeError):
    pass


@dataclass
class ExpertRecord:
    scene_id: str
    t: int
    obs: np.ndarray
    expert_actions: np.ndarray   # (n, 2)
    next_obs: np.ndarray
    env: dict                    # {"seed", "domain", "difficulty"}; regenerates the scene

    @property
    def key(self):
        return f"{self.scene_id}/{self.t}"

    def to_json(self):
        return json.dumps({
            "scene_id": self.scene_id,
            "t": self.t,
            "obs": [float(x) for x in self.obs],
            "expert_actions": [[float(x) for x in row] for row in self.expert_actions],
            "next_obs": [float(x) for x in self.next_obs],
            "env": self.env,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, line):
        d = json.loads(line)
        return cls(d["scene_id"], int(d["t"]), np.array(d["obs"]), np.array(d["expert_actions"]),
                   np.array(d["next_obs"]), d["env"])


def scene_records(scene, cfg=DEFAULT_WORLD):
    n = cfg.n_steps
    env = {"seed": scene.seed, "domain": scene.domain, "difficulty": scene.difficulty}
    obs = [observe(scene, t, cfg) for t in range(scene.horizon - n + 1)]
    return [
        ExpertRecord(scene.scene_id, t, obs[t], scene.expert_actions[t:t + n].copy(), obs[t + 1], env)
        for t in range(scene.horizon - n)
    ]


def parse_domain_mix(text):
    """'A:B' weights such as '1:0' or '0.7:0.3'."""
    try:
        a, b = (float(x) for x in str(text).split(":"))
    except ValueError:
        raise ValueError(f"domain mix must look like 'wA:wB', got {text!r}") from None
    if a < 0 or b < 0 or a + b <= 0:
        raise ValueError(f"domain mix weights must be non-negative and not both zero: {text!r}")
    return a, b


def scene_plan(num_scenes, seed, domain_mix=(1.0, 0.0)):
    """Deterministic (scene_seed, domain, difficulty) triples."""
    wa, wb = domain_mix
    rng = np.random.default_rng([int(seed), 7919])
    plan = []
    for k in range(num_scenes):
        domain = "A" if rng.uniform() < wa / (wa + wb) else "B"
        difficulty = round(float(rng.uniform(0.0, 1.0)), 6)
        plan.append((int(seed) * 100_000 + k, domain, difficulty))
    return plan


def config_hash(payload):
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def build_dataset(num_scenes, seed, domain_mix, output_path, cfg=DEFAULT_WORLD):
    """Generate scenes, write one ExpertRecord per line and a ``.manifest.json`` beside it."""
    if isinstance(domain_mix, str):
        domain_mix = parse_domain_mix(domain_mix)
    out = Path(output_path)
    manifest_path = manifest_path_for(out)
    plan = scene_plan(num_scenes, seed, domain_mix)
    scenes = []
    count = 0
    hasher = hashlib.sha256()
    try:
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            for scene_seed, domain, difficulty in plan:
                scene = generate_scene(scene_seed, domain, difficulty, cfg)
                scenes.append({"scene_id": scene.scene_id, "domain": domain,
                               "seed": scene_seed, "difficulty": difficulty})
                for rec in scene_records(scene, cfg):
                    line = rec.to_json() + "\n"
                    fh.write(line)
                    hasher.update(line.encode())
                    count += 1
        settings = {"num_scenes": num_scenes, "seed": int(seed), "domain_mix": list(domain_mix),
                    "world": cfg.to_dict()}
        manifest = {
            "records": count,
            "num_scenes": num_scenes,
            "seed": int(seed),
            "domain_mix": list(domain_mix),
            "world": cfg.to_dict(),
            "world_hash": cfg.hash(),
            "config_hash": config_hash(settings),
            "data_sha256": hasher.hexdigest(),
            "scenes": scenes,
        }
        manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    except BaseException:
        for p in (out, manifest_path):
            if p.exists():
                os.remove(p)
        raise
    return manifest


def manifest_path_for(path):
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


class Dataset:
    """Records plus lazily regenerated scenes for collision queries."""

    def __init__(self, records, manifest, path=None):
        self.records = records
        self.manifest = manifest
        self.path = path
        self.world = WorldConfig(**manifest["world"])
        self._scenes = {}

    def __len__(self):
        return len(self.records)

    def scene(self, rec):
        sc = self._scenes.get(rec.scene_id)
        if sc is None:
            sc = _cached_scene(int(rec.env["seed"]), rec.env["domain"], float(rec.env["difficulty"]), self.world)
            self._scenes[rec.scene_id] = sc
        return sc

    def scene_ids(self):
        return sorted({r.scene_id for r in self.records})

    def domains(self):
        return {s["scene_id"]: s["domain"] for s in self.manifest["scenes"]}

    def subset(self, scene_ids=None, keys=None):
        if scene_ids is not None:
            scene_ids = set(scene_ids)
            recs = [r for r in self.records if r.scene_id in scene_ids]
            scenes = [s for s in self.manifest["scenes"] if s["scene_id"] in scene_ids]
        else:
            keys = set(keys)
            recs = [r for r in self.records if r.key in keys]
            ids = {r.scene_id for r in recs}
            scenes = [s for s in self.manifest["scenes"] if s["scene_id"] in ids]
        manifest = dict(self.manifest, scenes=scenes, records=len(recs))
        sub = Dataset(recs, manifest, self.path)
        sub._scenes = self._scenes
        return sub


@lru_cache(maxsize=4096)
def _cached_scene(seed, domain, difficulty, world):
    return generate_scene(seed, domain, difficulty, world)


def load_dataset(path):
    path = Path(path)
    mpath = manifest_path_for(path)
    if not mpath.exists():
        raise DatasetError(f"missing manifest {mpath}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    with open(path, encoding="utf-8") as fh:
        records = [ExpertRecord.from_json(line) for line in fh if line.strip()]
    if len(records) != manifest["records"]:
        raise DatasetError(f"{path}: {len(records)} records but manifest says {manifest['records']}")
    return Dataset(records, manifest, path)
