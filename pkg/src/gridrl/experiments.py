"""Scripted experiments: split-mode SFT instability and the single-object generalization probe."""

from __future__ import annotations

import dataclasses
from typing import Callable, Optional, Sequence

import torch

from .metrics import eval_mmu, eval_t2i
from .model import UnifiedModel
from .sampling import DecodeConfig
from .taskgen import Category, TaskInstance
from .trainer import GrpoConfig, posttrain


def split_sft_instability(
    model: UnifiedModel,
    train: Sequence[TaskInstance],
    test: Sequence[TaskInstance],
    cfg: GrpoConfig,
    seed: int = 0,
    report_every: int = 250,
    callback: Optional[Callable] = None,
) -> tuple[UnifiedModel, list, dict]:
    """SFT on self-generated images without a cross-branch gradient path.

    Returns (model, step records, report). The report holds the loss and
    accuracy trajectory; it is descriptive and carries no verdict.
    """
    cfg = dataclasses.replace(cfg, mode="split")
    decode = cfg.decode
    trajectory = []

    def snapshot(step: int, m: UnifiedModel, loss: Optional[float]) -> None:
        t2i = eval_t2i(m, test, decode, torch.Generator().manual_seed(seed))
        mmu = eval_mmu(m, test, decode)
        trajectory.append({"step": step, "loss": loss, "t2i_overall": t2i["overall"], "mmu_overall": mmu["overall"]})

    snapshot(0, model, None)
    window: list = []

    def cb(step, m, rec):
        window.append(rec["loss"])
        if (step + 1) % report_every == 0 or step + 1 == cfg.steps:
            snapshot(step + 1, m, sum(window) / len(window))
            window.clear()
        if callback is not None:
            callback(step, m, rec)

    model, records = posttrain(model, train, cfg, method="sft", seed=seed, callback=cb)
    t2i = [p["t2i_overall"] for p in trajectory]
    report = {
        "experiment": "split_sft_instability",
        "seed": seed,
        "steps": cfg.steps,
        "trajectory": trajectory,
        "t2i_start": t2i[0],
        "t2i_end": t2i[-1],
        "t2i_min": min(t2i),
        "t2i_max_drop": max(t2i[0] - x for x in t2i),
    }
    return model, records, report


def single_object_mmu(model: UnifiedModel, test: Sequence[TaskInstance], decode: DecodeConfig) -> Optional[float]:
    """Answer accuracy on the single-object tasks of a disjoint-object test set."""
    tasks = [t for t in test if t.category is Category.SINGLE_OBJECT]
    return eval_mmu(model, tasks, decode)["per_category"][Category.SINGLE_OBJECT.value]


def single_object_probe(results: dict) -> dict:
    """Compare per-seed single-object accuracy ``{seed: {"sft": a, "grpo": b}}``."""
    wins = {s: r["grpo"] >= r["sft"] for s, r in results.items()}
    return {"per_seed": results, "grpo_at_least_sft": wins, "n_grpo_wins": sum(wins.values())}
