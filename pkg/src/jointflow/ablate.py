"""Ablation grid over the two training techniques: adaptive weights x unbalanced sampling."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, replace
from itertools import product
from typing import Sequence

import numpy as np

from .config import TrainConfig
from .experiment import evaluate_model
from .model import BaseDiT
from .train import PairData, train_joint

log = logging.getLogger(__name__)

CSV_HEADER = ["adaptive", "unbalanced", "seed", "absrel", "delta1", "joint_consistency", "val_loss"]
CELLS = tuple(product((True, False), (True, False)))


@dataclass
class AblationRow:
    adaptive: bool
    unbalanced: bool
    seed: int
    absrel: float
    delta1: float
    joint_consistency: float
    val_loss: float
    train_losses: list


class AblationError(RuntimeError):
    pass


def cell_config(template: TrainConfig, adaptive: bool, unbalanced: bool, seed: int) -> TrainConfig:
    return replace(template, phase="joint", seed=seed, adaptive_weights_enabled=adaptive,
                   unbalanced_sampling_enabled=unbalanced)


def run_ablation_grid(base: BaseDiT, data: PairData, heldout: PairData, seeds: Sequence[int],
                      template: TrainConfig, n_generate: int = 64) -> list[AblationRow]:
    """Train and evaluate all four toggle cells for every seed."""
    rows = []
    for seed in seeds:
        for adaptive, unbalanced in CELLS:
            cfg = cell_config(template, adaptive, unbalanced, seed)
            try:
                model, hist = train_joint(cfg, base, data, heldout)
            except Exception as e:
                raise AblationError(f"cell adaptive={adaptive} unbalanced={unbalanced} seed={seed} "
                                    f"failed: {e}") from e
            res = evaluate_model(model, heldout, seed=seed, n_generate=n_generate)
            val = [r["val_loss"] for r in hist.records]
            rows.append(AblationRow(adaptive, unbalanced, seed, res.depth_absrel, res.depth_delta1,
                                    res.joint_consistency, val[-1] if val else float("nan"),
                                    [r["loss"] for r in hist.records]))
            log.info("ablation cell %s", rows[-1])
    return rows


def summarize(rows: Sequence[AblationRow]) -> dict:
    """Mean over seeds per cell, keyed by ``(adaptive, unbalanced)``."""
    out = {}
    for cell in CELLS:
        sel = [r for r in rows if (r.adaptive, r.unbalanced) == cell]
        if sel:
            out[cell] = {k: float(np.mean([getattr(r, k) for r in sel]))
                         for k in ("absrel", "delta1", "joint_consistency", "val_loss")}
    return out


def direction_holds(rows: Sequence[AblationRow]) -> bool:
    s = summarize(rows)
    return s[(True, True)]["absrel"] <= s[(False, False)]["absrel"]


def write_csv(path, rows: Sequence[AblationRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([int(r.adaptive), int(r.unbalanced), r.seed, f"{r.absrel:.6g}",
                        f"{r.delta1:.6g}", f"{r.joint_consistency:.6g}", f"{r.val_loss:.6g}"])


def write_summary(path, rows: Sequence[AblationRow]) -> None:
    seeds = sorted({r.seed for r in rows})
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["adaptive", "unbalanced", "seeds", "absrel", "delta1", "joint_consistency", "val_loss"])
        for (a, u), m in summarize(rows).items():
            w.writerow([int(a), int(u), " ".join(map(str, seeds)), f"{m['absrel']:.6g}",
                        f"{m['delta1']:.6g}", f"{m['joint_consistency']:.6g}", f"{m['val_loss']:.6g}"])
        w.writerow([])
        w.writerow(["# per-cell training losses"])
        for r in rows:
            w.writerow([int(r.adaptive), int(r.unbalanced), r.seed]
                       + [f"{x:.6g}" for x in r.train_losses if x == x])


def config_diff(a: TrainConfig, b: TrainConfig) -> set:
    da, db = asdict(a), asdict(b)
    return {k for k in da if da[k] != db[k]}
