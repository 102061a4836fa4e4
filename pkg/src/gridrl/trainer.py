"""Self-improving post-training: SFT, end-to-end GRPO and decoupled GRPO."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .model import UnifiedModel, UnsupportedPathError
from .optim import AdamState, adam_step
from .reward import rule_for, score_answer
from .sampling import (
    DecodeConfig,
    GumbelConfig,
    image_distributions,
    image_token_logprobs,
    replay_rows,
    sample_answer,
    sample_image,
)
from .taskgen import CATEGORIES, TaskInstance
from .tensor import backward

log = logging.getLogger(__name__)


class TrainerError(ValueError):
    pass


class ContractError(RuntimeError):
    """A post-condition of a training step did not hold."""


@dataclass
class GrpoConfig:
    group_size: int = 3
    alpha: float = 1.0
    beta: float = 0.2
    delta: float = 0.2
    lam: float = 0.04
    learning_rate: float = 1e-5
    steps: int = 3000
    variant: str = "weighted"
    mode: str = "e2e"
    refresh_every: int = 1
    batch_size: int = 1
    tau: float = 1.0
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    def __post_init__(self):
        if self.group_size < 2:
            raise TrainerError("group_size must be >= 2")
        if not self.alpha > 0:
            raise TrainerError("alpha must be positive")
        if self.beta < 0:
            raise TrainerError("beta must be >= 0")
        if not 0 < self.delta < 1:
            raise TrainerError("delta must lie in (0, 1)")
        if self.variant not in ("weighted", "clip"):
            raise TrainerError(f"unknown variant {self.variant!r}")
        if self.mode not in ("e2e", "split"):
            raise TrainerError(f"unknown mode {self.mode!r}")
        if self.refresh_every < 1 or self.batch_size < 1 or self.steps < 0:
            raise TrainerError("refresh_every and batch_size must be >= 1, steps >= 0")

    @property
    def gumbel(self) -> GumbelConfig:
        return GumbelConfig(tau=self.tau)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RolloutGroup:
    task: TaskInstance
    images: list  # K tuples of global image ids
    answers: list  # K tuples of global answer ids
    rewards: list
    r_mean: float
    rows: Optional[torch.Tensor] = None  # (K, N, codebook) ST rows, e2e only
    terminated: list = field(default_factory=list)

    def __post_init__(self):
        k = len(self.rewards)
        if len(self.images) != k or len(self.answers) != k:
            raise TrainerError("rollout lists must all have length K")


# --- algebra ------------------------------------------------------------
def grpo_weights(rewards: Sequence[float], alpha: float = 1.0) -> np.ndarray:
    """softmax(alpha * (r - mean(r))) in float64."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 1:
        raise TrainerError("grpo_weights needs at least one reward")
    if not np.isfinite(r).all():
        raise TrainerError(f"non-finite reward in {list(rewards)}")
    if not alpha > 0:
        raise TrainerError("alpha must be positive")
    z = alpha * (r - r.mean())
    e = np.exp(z - z.max())
    return e / e.sum()


def advantages(rewards: Sequence[float]) -> np.ndarray:
    """(r - mean) / population std; all zeros when the rewards are constant."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise TrainerError("advantages needs at least two rewards")
    sd = r.std()
    if sd == 0 or (r == r[0]).all():
        return np.zeros_like(r)
    return (r - r.mean()) / sd


def clipped_surrogate(ratios, adv, delta: float) -> torch.Tensor:
    """mean(min(s * A, clip(s, 1 - delta, 1 + delta) * A))."""
    s = ratios if torch.is_tensor(ratios) else torch.as_tensor(ratios, dtype=torch.float64)
    a = torch.as_tensor(adv, dtype=s.dtype)
    if s.shape != a.shape:
        raise TrainerError(f"ratios {tuple(s.shape)} and advantages {tuple(a.shape)} differ")
    return torch.minimum(s * a, s.clamp(1 - delta, 1 + delta) * a).mean()


def categorical_kl(logp: torch.Tensor, logq: torch.Tensor) -> torch.Tensor:
    """KL(p || q) over the last axis from log-probabilities."""
    return (logp.exp() * (logp - logq)).sum(-1)


def snapshot_reference(model: UnifiedModel) -> UnifiedModel:
    ref = model.clone()
    for _, p in ref.params.items():
        p.requires_grad_(False)
    return ref


def kl_penalty(model: UnifiedModel, reference: UnifiedModel, image, questions, answers, terminated=None) -> torch.Tensor:
    """Mean per-token KL(p_model || p_ref) over the answer positions."""
    _, valid, logits = model.answer_token_logprobs(image, questions, answers, terminated)
    return _kl_at(logits, valid, reference, image, questions, answers)


def _kl_at(logits, valid, reference, image, questions, answers) -> torch.Tensor:
    with torch.no_grad():
        ref_image = image.detach() if image.dtype.is_floating_point else image
        ref_logits = reference.mmu_logits(ref_image, questions, answers)
    kl = categorical_kl(torch.log_softmax(logits, -1), torch.log_softmax(ref_logits, -1))
    return (kl * valid).sum() / valid.sum().clamp(min=1)


# --- steps --------------------------------------------------------------
@dataclass
class StepResult:
    loss: float
    rewards: list
    weights: list
    kl: float
    grad_norm_gen: float
    grad_norm_mmu: float


@dataclass
class _Term:
    loss: torch.Tensor
    rewards: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    kl: float = 0.0


def _check_e2e(model: UnifiedModel, what: str) -> None:
    if model.config.repr_mode != "shared":
        raise UnsupportedPathError(f"{what} needs shared image representations; use grpo_step_split in split mode")


def _apply(model, terms: list, state: AdamState, lr: float, exclude=(), require_gen: str = "") -> StepResult:
    """Average the terms, backpropagate and take one Adam step on the non-excluded params."""
    loss = sum(t.loss for t in terms) / len(terms)
    grads = backward(loss, model.params)
    gen = model.params.grad_norm(model.gen_only_names)
    mmu = model.params.grad_norm(model.und_only_names)
    if require_gen and not gen > 0:
        raise ContractError(f"{require_gen} produced no gradient on the generation parameters")
    names = [n for n in model.params.names() if n not in exclude]
    adam_step(model.params, grads, state, lr, names=names)
    return StepResult(
        loss.item(),
        [r for t in terms for r in t.rewards],
        [w for t in terms for w in t.weights],
        sum(t.kl for t in terms) / len(terms),
        gen,
        mmu,
    )


def _rollout(sampler, task, cfg, generator, greedy=False) -> tuple:
    prompts = [task.prompt.ids] * cfg.group_size
    questions = [task.question.ids] * cfg.group_size
    sample = sample_image(sampler, prompts, cfg.decode, generator)
    ans = sample_answer(sampler, sample.ids, questions, cfg.decode, generator, greedy=greedy)
    rule = rule_for(task)
    rewards = [float(score_answer(rule, a)) for a in ans.answers]
    group = RolloutGroup(task, sample.as_lists(), ans.answers, rewards, sum(rewards) / len(rewards),
                         terminated=ans.terminated)
    return group, sample, prompts, questions


def _answer_objective(model, reference, sampler, image, questions, group, cfg) -> _Term:
    """Weighted (or clipped) answer objective plus the KL term."""
    w = grpo_weights(group.rewards, cfg.alpha)
    logp, valid, logits = model.answer_token_logprobs(image, questions, group.answers, group.terminated)
    if image.dtype.is_floating_point:
        # the anchor acts on the answer policy only, not through the image path
        kl = kl_penalty(model, reference, image.detach(), questions, group.answers, group.terminated)
    else:
        kl = _kl_at(logits, valid, reference, image, questions, group.answers)
    if cfg.variant == "weighted":
        wt = torch.as_tensor(w, dtype=logp.dtype)
        loss = -(wt * logp.sum(1)).sum() + cfg.beta * kl
    else:
        with torch.no_grad():
            old_image = image.detach() if image.dtype.is_floating_point else image
            old, _, _ = sampler.answer_token_logprobs(old_image, questions, group.answers, group.terminated)
        adv = torch.as_tensor(advantages(group.rewards), dtype=logp.dtype)[:, None].expand_as(logp)
        loss = -clipped_surrogate(torch.exp(logp - old)[valid], adv[valid], cfg.delta) + cfg.lam * kl
    return _Term(loss, group.rewards, w.tolist(), kl.item())


def sft_loss(model, task, cfg, generator) -> _Term:
    """Teacher-forced answer NLL on one self-generated differentiable image."""
    _check_e2e(model, "sft_step")
    sample = sample_image(model, [task.prompt.ids], cfg.decode, generator, differentiable=True, gumbel=cfg.gumbel)
    logp, _, _ = model.answer_token_logprobs(sample.rows, [task.question.ids], [task.answer.ids])
    return _Term(-logp.sum())


def grpo_e2e_loss(model, reference, task, cfg, generator, sampler=None) -> _Term:
    """Answer-side GRPO whose gradient reaches generation through ST rows."""
    _check_e2e(model, "grpo_step_e2e")
    sampler = sampler or model
    group, sample, prompts, questions = _rollout(sampler, task, cfg, generator)
    rows = replay_rows(model, prompts, sample, cfg.decode, cfg.gumbel)
    return _answer_objective(model, reference, sampler, rows, questions, group, cfg)


def grpo_split_t2i_loss(model, reference, task, cfg, generator, sampler=None) -> _Term:
    """Image-sequence GRPO with rewards from greedy answers on the hard images."""
    sampler = sampler or model
    group, sample, prompts, _ = _rollout(sampler, task, cfg, generator, greedy=True)
    w = grpo_weights(group.rewards, cfg.alpha)
    scale = cfg.decode.guidance_scale  # score images under the policy that drew them
    logp, ctx = image_token_logprobs(model, prompts, sample, scale)
    cur = image_distributions(model, prompts, ctx, scale)
    with torch.no_grad():
        ref = image_distributions(reference, prompts, ctx, scale)
    kl = categorical_kl(cur, ref).mean()
    if cfg.variant == "weighted":
        loss = -(torch.as_tensor(w, dtype=logp.dtype) * logp.sum(1)).sum() + cfg.beta * kl
    else:
        with torch.no_grad():
            old, _ = image_token_logprobs(sampler, prompts, sample, scale)
        adv = torch.as_tensor(advantages(group.rewards), dtype=logp.dtype)[:, None].expand_as(logp)
        loss = -clipped_surrogate(torch.exp(logp - old).flatten(), adv.flatten(), cfg.delta) + cfg.lam * kl
    return _Term(loss, group.rewards, w.tolist(), kl.item())


def grpo_split_mmu_loss(model, reference, task, cfg, generator, sampler=None) -> _Term:
    """Answer GRPO on hard self-generated images."""
    sampler = sampler or model
    group, sample, _, questions = _rollout(sampler, task, cfg, generator)
    return _answer_objective(model, reference, sampler, sample.ids, questions, group, cfg)


def split_sft_loss(model, task, cfg, generator) -> _Term:
    """Self-supervision without a gradient path between the branches.

    The sampled image is its own generation target and the input for
    teacher-forced answering. Used only by the instability experiment.
    """
    prompts = [task.prompt.ids]
    sample = sample_image(model, prompts, cfg.decode, generator)
    logp_img, _ = image_token_logprobs(model, prompts, sample)
    logp_ans, _, _ = model.answer_token_logprobs(sample.ids, [task.question.ids], [task.answer.ids])
    return _Term(-logp_img.sum() - logp_ans.sum())


def sft_step(model, task, cfg: GrpoConfig, state: AdamState, generator) -> StepResult:
    return _apply(model, [sft_loss(model, task, cfg, generator)], state, cfg.learning_rate, require_gen="sft_step")


def grpo_step_e2e(model, reference, task, cfg: GrpoConfig, state: AdamState, generator, sampler=None) -> StepResult:
    term = grpo_e2e_loss(model, reference, task, cfg, generator, sampler)
    return _apply(model, [term], state, cfg.learning_rate, require_gen="grpo_step_e2e")


def grpo_step_split_t2i(model, reference, task, cfg: GrpoConfig, state: AdamState, generator, sampler=None) -> StepResult:
    """Updates everything except the understanding-only parameters."""
    term = grpo_split_t2i_loss(model, reference, task, cfg, generator, sampler)
    return _apply(model, [term], state, cfg.learning_rate, exclude=model.und_only_names)


def grpo_step_split_mmu(model, reference, task, cfg: GrpoConfig, state: AdamState, generator, sampler=None) -> StepResult:
    """Updates everything except the generation-only parameters."""
    term = grpo_split_mmu_loss(model, reference, task, cfg, generator, sampler)
    return _apply(model, [term], state, cfg.learning_rate, exclude=model.gen_only_names)


def split_sft_step(model, task, cfg: GrpoConfig, state: AdamState, generator) -> StepResult:
    return _apply(model, [split_sft_loss(model, task, cfg, generator)], state, cfg.learning_rate)


# --- loop ---------------------------------------------------------------
def step_generator(seed: int, step: int) -> torch.Generator:
    state = np.random.SeedSequence([int(seed), int(step)]).generate_state(2, dtype=np.uint32)
    return torch.Generator().manual_seed(int(state[0]) << 32 | int(state[1]))


def pick_task(tasks_by_category: dict, seed: int, step: int, index: int = 0) -> TaskInstance:
    """Uniform category, then a uniform task within it."""
    rng = np.random.default_rng([int(seed), int(step), int(index), 17])
    cats = [c for c in CATEGORIES if tasks_by_category.get(c)]
    if not cats:
        raise TrainerError("no training tasks")
    pool = tasks_by_category[cats[int(rng.integers(len(cats)))]]
    return pool[int(rng.integers(len(pool)))]


def group_tasks(tasks: Sequence[TaskInstance]) -> dict:
    out = {c: [] for c in CATEGORIES}
    for t in tasks:
        out[t.category].append(t)
    return out


def posttrain(
    model: UnifiedModel,
    tasks: Sequence[TaskInstance],
    cfg: GrpoConfig,
    method: str = "grpo",
    seed: int = 0,
    callback: Optional[Callable] = None,
) -> tuple[UnifiedModel, list]:
    """Run ``cfg.steps`` post-training steps; returns (model, per-step log records).

    ``method`` is ``sft`` or ``grpo``. Split-mode SFT runs the self-supervised
    step used by the instability experiment.
    """
    if method not in ("sft", "grpo"):
        raise TrainerError(f"unknown method {method!r}")
    if cfg.mode == "e2e" and model.config.repr_mode != "shared":
        raise UnsupportedPathError("e2e post-training needs shared image representations")
    by_cat = group_tasks(tasks)
    reference = snapshot_reference(model)
    sampler = model
    states = [AdamState(), AdamState()]  # split mode keeps one per objective
    records = []
    for step in range(cfg.steps):
        if cfg.refresh_every > 1 and step % cfg.refresh_every == 0:
            sampler = snapshot_reference(model)
        gen = step_generator(seed, step)
        batch = [pick_task(by_cat, seed, step, i) for i in range(cfg.batch_size)]
        lr = cfg.learning_rate
        if method == "sft" and cfg.mode == "e2e":
            res = _apply(model, [sft_loss(model, t, cfg, gen) for t in batch], states[0], lr, require_gen="sft_step")
        elif method == "sft":
            res = _apply(model, [split_sft_loss(model, t, cfg, gen) for t in batch], states[0], lr)
        elif cfg.mode == "e2e":
            terms = [grpo_e2e_loss(model, reference, t, cfg, gen, sampler) for t in batch]
            res = _apply(model, terms, states[0], lr, require_gen="grpo_step_e2e")
        else:
            terms = [grpo_split_t2i_loss(model, reference, t, cfg, gen, sampler) for t in batch]
            r1 = _apply(model, terms, states[0], lr, exclude=model.und_only_names)
            terms = [grpo_split_mmu_loss(model, reference, t, cfg, gen, sampler) for t in batch]
            r2 = _apply(model, terms, states[1], lr, exclude=model.gen_only_names)
            res = StepResult(r1.loss + r2.loss, r1.rewards, r1.weights, r1.kl + r2.kl, r1.grad_norm_gen, r2.grad_norm_mmu)
        rec = {
            "step": step,
            "task_category": batch[0].category.value,
            "rewards": res.rewards,
            "r_mean": sum(res.rewards) / len(res.rewards) if res.rewards else None,
            "weights": res.weights,
            "loss": res.loss,
            "kl": res.kl,
            "grad_norm_gen": res.grad_norm_gen,
            "grad_norm_mmu": res.grad_norm_mmu,
            "seed": seed,
        }
        if not all(math.isfinite(rec[k]) for k in ("loss", "kl")):
            raise ContractError(f"non-finite loss at step {step}")
        records.append(rec)
        if callback is not None:
            callback(step, model, rec)
    return model, records
