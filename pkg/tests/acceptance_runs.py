"""Expensive acceptance runs (full training, ablation grid) with an on-disk cache.

Artifacts live under ``tests/.acceptance_cache/<key>/`` where the key hashes the
run settings and every source file that can change a trained weight or a reported
number. Running this file directly populates the cache:

    python tests/acceptance_runs.py [train|ablate|all]
"""

from __future__ import annotations

import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import torch

import jointflow
from jointflow import ablate, world
from jointflow.config import parse_config
from jointflow.train import PairData, load_checkpoint, pretrain_base, save_checkpoint, train_joint

log = logging.getLogger("acceptance")

CACHE = Path(__file__).resolve().parent / ".acceptance_cache"
SRC = Path(jointflow.__file__).resolve().parent

N_TRAIN, N_HELDOUT, SEED = 2000, 200, 0
TRAIN_SOURCES = ("blocks.py", "config.py", "flow.py", "io.py", "model.py", "rng.py", "timesteps.py",
                 "train.py", "world.py")
EVAL_SOURCES = TRAIN_SOURCES + ("ablate.py", "experiment.py", "metrics.py", "tasks.py")

# ablation: reduced joint steps per cell, see the README
ABLATION_SEEDS = (0, 1, 2)
ABLATION_STEPS = 500
ABLATION_GENERATE = 16


def _key(tag: str, sources, settings: dict) -> str:
    h = hashlib.sha256(json.dumps({"tag": tag, **settings}, sort_keys=True).encode())
    for name in sources:
        h.update(name.encode())
        h.update((SRC / name).read_bytes())
    return f"{tag}-{h.hexdigest()[:16]}"


def datasets():
    train = PairData.from_arrays(*world.generate_scenes(N_TRAIN, SEED, "train"))
    held = PairData.from_arrays(*world.generate_scenes(N_HELDOUT, SEED, "heldout"))
    return train, held


def _settings():
    return {"n_train": N_TRAIN, "n_heldout": N_HELDOUT, "seed": SEED}


def train_dir() -> Path:
    return CACHE / _key("train", TRAIN_SOURCES, _settings())


def trained_models(build: bool = True):
    """``(base, joint, meta)`` after default-config pretraining and joint training."""
    d = train_dir()
    if not (d / "meta.json").exists():
        if not build:
            return None
        d.mkdir(parents=True, exist_ok=True)
        train, held = datasets()
        mcfg, bcfg = parse_config("")
        _, jcfg = parse_config("phase = joint")
        t0 = time.perf_counter()
        base, bh = pretrain_base(bcfg, mcfg, train, held)
        t1 = time.perf_counter()
        save_checkpoint(base, d / "base.bin")
        joint, jh = train_joint(jcfg, base, train, held)
        t2 = time.perf_counter()
        save_checkpoint(joint, d / "joint.bin")
        meta = {"pretrain_seconds": t1 - t0, "joint_seconds": t2 - t1, "threads": torch.get_num_threads(),
                "base_history": bh.records, "joint_history": jh.records}
        (d / "meta.json").write_text(json.dumps(meta, indent=1), encoding="utf-8")
    meta = json.loads((d / "meta.json").read_text(encoding="utf-8"))
    return load_checkpoint(d / "base.bin"), load_checkpoint(d / "joint.bin"), meta


def ablation_rows(build: bool = True):
    settings = {**_settings(), "seeds": ABLATION_SEEDS, "steps": ABLATION_STEPS,
                "n_generate": ABLATION_GENERATE}
    d = CACHE / _key("ablate", EVAL_SOURCES, settings)
    path = d / "rows.json"
    if not path.exists():
        if not build:
            return None
        base, _, _ = trained_models()
        train, held = datasets()
        _, template = parse_config("phase = joint")
        template = replace(template, steps=ABLATION_STEPS)
        rows = ablate.run_ablation_grid(base.eval(), train, held, list(ABLATION_SEEDS), template,
                                        n_generate=ABLATION_GENERATE)
        d.mkdir(parents=True, exist_ok=True)
        ablate.write_csv(d / "ablation.csv", rows)
        ablate.write_summary(d / "summary.csv", rows)
        path.write_text(json.dumps([vars(r) for r in rows], indent=1), encoding="utf-8")
    return [ablate.AblationRow(**r) for r in json.loads(path.read_text(encoding="utf-8"))]


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(1)
    what = sys.argv[1] if len(sys.argv) > 1 else "all"
    if what in ("train", "all"):
        trained_models()
        log.info("training cached in %s", train_dir())
    if what in ("ablate", "all"):
        ablation_rows()
        log.info("ablation cached")
