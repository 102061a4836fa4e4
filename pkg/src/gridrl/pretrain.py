"""Baseline ("original model") training on oracle-rendered scenes.

Category sampling is skewed on purpose so the baseline is imbalanced
across categories, leaving room for post-training to help.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .model import ModelConfig, UnifiedModel, mtp_loss, ntp_loss
from .optim import AdamState, adam_step
from .taskgen import CATEGORIES, Category, ObjectSplit, reference_image, sample_task
from .tensor import backward
from .vocab import Vocabulary, encode_image

log = logging.getLogger(__name__)

DEFAULT_SKEW = {c.value: (0.1 if c is Category.POSITION else 1.0) for c in CATEGORIES}


@dataclass
class PretrainConfig:
    steps: int = 8000
    batch_size: int = 32
    learning_rate: float = 3e-3
    skew_t2i: dict = field(default_factory=lambda: dict(DEFAULT_SKEW))
    skew_mmu: dict = field(default_factory=lambda: dict(DEFAULT_SKEW))
    mmu_batch_size: int = 16
    warmup_steps: int = 200
    lr_schedule: str = "cosine"
    prompt_dropout: float = 0.1
    bank_per_category: int = 4000
    seed: int = 0


def learning_rate_at(cfg: PretrainConfig, step: int) -> float:
    if step < cfg.warmup_steps:
        return cfg.learning_rate * (step + 1) / cfg.warmup_steps
    if cfg.lr_schedule == "constant":
        return cfg.learning_rate
    progress = (step - cfg.warmup_steps) / max(1, cfg.steps - cfg.warmup_steps)
    return cfg.learning_rate * (0.05 + 0.95 * 0.5 * (1 + math.cos(math.pi * progress)))


def _category_probs(skew: dict) -> np.ndarray:
    w = np.array([float(skew.get(c.value, 1.0)) for c in CATEGORIES])
    if (w < 0).any() or w.sum() <= 0:
        raise ValueError(f"invalid skew weights {skew}")
    return w / w.sum()


class ExampleBank:
    """Pre-rendered (task, reference scene) pairs per category over all objects."""

    def __init__(self, v: Vocabulary, per_category: int, seed: int):
        everything = ObjectSplit(tuple(range(len(v.object_names))), ())
        rng = np.random.default_rng([seed, 2])
        self.tasks, self.images = [], []
        for cat in CATEGORIES:
            tasks = []
            for _ in range(per_category):
                task_seed = int(rng.integers(2**31))
                tasks.append(sample_task(np.random.default_rng(task_seed), cat, "train", everything, v, seed=task_seed))
            self.tasks.append(tasks)
            self.images.append(torch.tensor([encode_image(reference_image(t, v), v).ids for t in tasks]))

    def draw(self, rng: np.random.Generator, probs: np.ndarray, n: int):
        cats = rng.choice(len(CATEGORIES), size=n, p=probs)
        idx = rng.integers(len(self.tasks[0]), size=n)
        tasks = [self.tasks[c][i] for c, i in zip(cats, idx)]
        images = torch.stack([self.images[c][i] for c, i in zip(cats, idx)])
        return tasks, images


def t2i_loss(model: UnifiedModel, prompts, image_ids: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    """Masked-token (mtp) or teacher-forced (ntp) image loss."""
    target = image_ids - model.img_start
    if model.config.gen_mode == "ntp":
        logits = model.t2i_logits(prompts, image_ids)
        return ntp_loss(logits, target)
    B, N = image_ids.shape
    n_mask = torch.randint(1, N + 1, (B,), generator=generator)
    scores = torch.rand(B, N, generator=generator)
    rank = scores.argsort(dim=1).argsort(dim=1)
    mask = rank < n_mask[:, None]
    inp = torch.where(mask, model.vocab.special("MASK"), image_ids)
    logits = model.t2i_logits(prompts, inp)
    return mtp_loss(logits, target, mask)


def mmu_loss(model: UnifiedModel, image_ids: torch.Tensor, questions, answers) -> torch.Tensor:
    logits = model.mmu_logits(image_ids, questions, answers)
    return ntp_loss(logits, model.answer_targets(answers))


def pretrain(
    config: ModelConfig,
    v: Vocabulary,
    objects: ObjectSplit,
    cfg: PretrainConfig,
    model: UnifiedModel | None = None,
    callback=None,
) -> tuple[UnifiedModel, list]:
    """Jointly fit image generation and answering on reference scenes.

    Returns the model and the per-step loss history.
    """
    model = model or UnifiedModel(config, v, seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    gen = torch.Generator().manual_seed(cfg.seed + 7)
    p_t2i, p_mmu = _category_probs(cfg.skew_t2i), _category_probs(cfg.skew_mmu)
    state = AdamState()
    history = []
    bank = ExampleBank(v, cfg.bank_per_category, cfg.seed) if cfg.steps else None
    for step in range(cfg.steps):
        tasks, images = bank.draw(rng, p_t2i, cfg.batch_size)
        drop = rng.random(len(tasks)) < cfg.prompt_dropout
        prompts = [() if d else t.prompt.ids for t, d in zip(tasks, drop)]
        loss_t2i = t2i_loss(model, prompts, images, gen)
        tasks, images = bank.draw(rng, p_mmu, cfg.mmu_batch_size)
        loss_mmu = mmu_loss(model, images, [t.question.ids for t in tasks], [t.answer.ids for t in tasks])
        loss = loss_t2i + loss_mmu
        grads = backward(loss, model.params)
        adam_step(model.params, grads, state, learning_rate_at(cfg, step))
        history.append(
            {"step": step, "loss": loss.item(), "t2i": loss_t2i.item(), "mmu": loss_mmu.item()}
        )
        if callback is not None:
            callback(step, model, history[-1])
        if step % 200 == 0:
            log.debug("pretrain step %d loss %.4f", step, history[-1]["loss"])
    return model, history
