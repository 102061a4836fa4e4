"""Stochastic decoders for images and answers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch

from .model import UnifiedModel

U_MIN, U_MAX = 1e-10, 1.0 - 1e-7


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class GumbelConfig:
    tau: float = 1.0
    hard: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise SamplingError(f"tau must be positive, got {self.tau}")


@dataclass(frozen=True)
class DecodeConfig:
    mtp_steps: int = 16
    guidance_scale: float = 2.0
    answer_temperature: float = 1.0
    max_answer_len: int = 12
    st_rounds: str = "all"  # mtp rounds whose commits carry ST gradients: all | final

    def __post_init__(self):
        if self.st_rounds not in ("all", "final"):
            raise SamplingError(f"st_rounds must be 'all' or 'final', got {self.st_rounds!r}")
        if self.mtp_steps < 1:
            raise SamplingError("mtp_steps must be >= 1")
        if self.guidance_scale < 1:
            raise SamplingError("guidance_scale must be >= 1")


def gumbel_noise(shape, generator: torch.Generator, dtype=None) -> torch.Tensor:
    u = torch.rand(shape, generator=generator, dtype=dtype or torch.get_default_dtype())
    u = u.clamp(U_MIN, U_MAX)
    return -torch.log(-torch.log(u))


def argmax_lowest(x: torch.Tensor) -> torch.Tensor:
    """Argmax over the last axis, ties broken toward the lowest index."""
    K = x.shape[-1]
    top = x.max(dim=-1, keepdim=True).values
    idx = torch.arange(K).expand(x.shape)
    return torch.where(x == top, idx, K).min(dim=-1).values


def gumbel_softmax(
    logits: torch.Tensor,
    cfg: GumbelConfig = GumbelConfig(),
    generator: Optional[torch.Generator] = None,
    noise: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Relaxed one-hot sample ``softmax((logits + g) / tau)``.

    ``logits`` play the role of unnormalised log-probabilities. Pass
    ``noise`` to fix ``g`` (zeros turn this into a tempered softmax).
    """
    if not bool(torch.isfinite(logits).all()):
        raise SamplingError("gumbel_softmax got non-finite logits")
    if noise is None:
        if generator is None:
            raise SamplingError("gumbel_softmax needs a generator or explicit noise")
        noise = gumbel_noise(logits.shape, generator, logits.dtype)
    return torch.softmax((logits + noise) / cfg.tau, dim=-1)


def st_hard_sample(y: torch.Tensor) -> torch.Tensor:
    """Hard one-hot forward; gradients pass straight through to ``y``."""
    hard = torch.nn.functional.one_hot(argmax_lowest(y), y.shape[-1]).to(y.dtype)
    return hard - y.detach() + y


@dataclass
class ImageSample:
    ids: torch.Tensor  # (B, N) global image ids
    rows: Optional[torch.Tensor] = None  # (B, N, codebook) ST rows when differentiable
    # mtp: list of (state ids before the round, bool commit mask)
    rounds: list = field(default_factory=list)
    noise: Optional[torch.Tensor] = None  # mtp (S, B, N, codebook); ntp (B, N, codebook)

    def as_lists(self) -> list:
        return [tuple(int(i) for i in row) for row in self.ids]


def _guided_logits(model: UnifiedModel, prompts, ids: torch.Tensor, scale: float) -> torch.Tensor:
    if scale == 1.0:
        return model.t2i_logits(prompts, ids)
    B = len(prompts)
    both = model.t2i_logits(list(prompts) + [()] * B, torch.cat([ids, ids]))
    cond, uncond = both[:B], both[B:]
    return scale * cond + (1.0 - scale) * uncond


def mask_schedule(n: int, steps: int) -> list:
    """Number of positions still masked after each round (cosine schedule)."""
    out = []
    for t in range(steps):
        out.append(0 if t == steps - 1 else int(math.floor(n * math.cos(math.pi / 2 * (t + 1) / steps))))
    return out


def sample_image(
    model: UnifiedModel,
    prompts,
    cfg: DecodeConfig,
    generator: torch.Generator,
    differentiable: bool = False,
    gumbel: GumbelConfig = GumbelConfig(),
    greedy: bool = False,
) -> ImageSample:
    """Decode hard images; ``differentiable`` adds ST rows via :func:`replay_rows`.

    ``greedy`` replaces the Gumbel noise with zeros (argmax decoding).
    """
    noise_fn = (lambda shape, dtype: torch.zeros(shape, dtype=dtype)) if greedy else (
        lambda shape, dtype: gumbel_noise(shape, generator, dtype)
    )
    with torch.no_grad():
        if model.config.gen_mode == "mtp":
            sample = _sample_mtp(model, prompts, cfg, noise_fn)
        else:
            sample = _sample_ntp(model, prompts, cfg, noise_fn)
    if differentiable:
        sample.rows = replay_rows(model, prompts, sample, cfg, gumbel)
    return sample


def _sample_mtp(model, prompts, cfg, noise_fn) -> ImageSample:
    v = model.vocab
    B, N = len(prompts), v.n_cells
    ids = torch.full((B, N), v.special("MASK"), dtype=torch.long)
    masked = torch.ones(B, N, dtype=torch.bool)
    rounds, noises = [], []
    for keep_masked in mask_schedule(N, cfg.mtp_steps):
        logits = _guided_logits(model, prompts, ids, cfg.guidance_scale)
        noise = noise_fn(logits.shape, logits.dtype)
        sampled = argmax_lowest(logits + noise)
        conf = torch.softmax(logits, -1).gather(-1, sampled[..., None])[..., 0]
        conf = torch.where(masked, conf, torch.full_like(conf, -1.0))
        n_commit = masked.sum(1) - keep_masked
        # stable descending sort: equal confidence keeps the lower index first
        order = torch.sort(-conf, dim=1, stable=True).indices
        rank = torch.empty_like(order)
        rank.scatter_(1, order, torch.arange(N).expand(B, N))
        commit = (rank < n_commit[:, None]) & masked
        rounds.append((ids.clone(), commit))
        noises.append(noise)
        ids = torch.where(commit, sampled + model.img_start, ids)
        masked = masked & ~commit
    return ImageSample(ids, None, rounds, torch.stack(noises))


def _sample_ntp(model, prompts, cfg, noise_fn) -> ImageSample:
    v = model.vocab
    B, N = len(prompts), v.n_cells
    ids = torch.full((B, N), v.empty_id, dtype=torch.long)
    noises = []
    for m in range(N):
        logits = _guided_logits(model, prompts, ids, cfg.guidance_scale)[:, m]
        noise = noise_fn(logits.shape, logits.dtype)
        noises.append(noise)
        ids[:, m] = argmax_lowest(logits + noise) + model.img_start
    return ImageSample(ids, None, [], torch.stack(noises, dim=1))


def replay_rows(
    model: UnifiedModel, prompts, sample: ImageSample, cfg: DecodeConfig, gumbel: GumbelConfig = GumbelConfig()
) -> torch.Tensor:
    """ST-Gumbel-Softmax rows of ``sample`` under ``model``'s current parameters.

    Each token's relaxation uses the logits of the step that produced it
    (its commit round for mtp, its raster position for ntp) and the recorded
    noise. The hard forward value is always the recorded token.
    """
    if model.config.gen_mode == "ntp":
        logits = _guided_logits(model, prompts, sample.ids, cfg.guidance_scale)
        soft = gumbel_softmax(logits, gumbel, noise=sample.noise)
    else:
        S = len(sample.rounds)
        states = torch.cat([st for st, _ in sample.rounds])
        commits = torch.stack([c for _, c in sample.rounds])
        if cfg.st_rounds == "final":
            states, commits, S = sample.rounds[-1][0], commits[-1:], 1
        logits = _guided_logits(model, list(prompts) * S, states, cfg.guidance_scale)
        noise = sample.noise[-S:].reshape(logits.shape)
        y = gumbel_softmax(logits, gumbel, noise=noise).view(commits.shape + logits.shape[-1:])
        soft = (y * commits[..., None]).sum(0)
        if cfg.st_rounds == "final":
            # earlier commits are constants
            soft = torch.where(commits[0][..., None], soft, _one_hot_rows(model, sample.ids))
    if not gumbel.hard:
        return soft
    hard = _one_hot_rows(model, sample.ids)
    return hard - soft.detach() + soft


def _one_hot_rows(model: UnifiedModel, ids: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.one_hot(ids - model.img_start, model.vocab.image_codebook_size).to(
        torch.get_default_dtype()
    )


def image_token_logprobs(model: UnifiedModel, prompts, sample: ImageSample, guidance: float = 1.0) -> tuple:
    """Per-position log-probs of the sampled image under the policy with guidance ``guidance``.

    Returns ``(logp (B, N), contexts)`` where ``contexts`` lets callers
    recompute the same conditional distributions under another model.
    """
    if model.config.gen_mode == "ntp":
        logits = _guided_logits(model, prompts, sample.ids, guidance)
        logp = torch.log_softmax(logits, -1)
        picked = logp.gather(-1, (sample.ids - model.img_start)[..., None])[..., 0]
        return picked, ("ntp", sample.ids, None)
    states = torch.cat([s for s, _ in sample.rounds])
    commits = torch.stack([c for _, c in sample.rounds])  # (S, B, N)
    S = commits.shape[0]
    logits = _guided_logits(model, list(prompts) * S, states, guidance)
    logp = torch.log_softmax(logits, -1).view(S, len(prompts), -1, logits.shape[-1])
    target = (sample.ids - model.img_start)[None].expand(S, -1, -1)
    picked = logp.gather(-1, target[..., None])[..., 0]
    return (picked * commits).sum(0), ("mtp", states, commits)


def image_distributions(model: UnifiedModel, prompts, contexts, guidance: float = 1.0) -> tuple:
    """Log-distributions at the committed positions described by ``contexts``. (rows, V)"""
    kind, states, commits = contexts
    if kind == "ntp":
        logits = _guided_logits(model, prompts, states, guidance)
        return torch.log_softmax(logits, -1).reshape(-1, logits.shape[-1])
    S = commits.shape[0]
    logits = _guided_logits(model, list(prompts) * S, states, guidance)
    logp = torch.log_softmax(logits, -1).view(S, len(prompts), -1, logits.shape[-1])
    return logp[commits]


@dataclass
class AnswerSample:
    answers: list  # list of tuples of global ids (no EOS)
    terminated: list  # bool per row; False means max length reached without EOS

    @property
    def truncated(self) -> list:
        return [not t for t in self.terminated]


def sample_answer(
    model: UnifiedModel,
    image,
    questions,
    cfg: DecodeConfig,
    generator: Optional[torch.Generator] = None,
    greedy: bool = True,
) -> AnswerSample:
    B = image.shape[0]
    if not greedy and generator is None:
        raise SamplingError("sampling answers needs a generator")
    image = image.detach() if image.dtype.is_floating_point else image
    answers = [[] for _ in range(B)]
    done = [False] * B
    active = list(range(B))
    with torch.no_grad():
        for _ in range(cfg.max_answer_len):
            if not active:
                break
            idx = torch.tensor(active)
            logits = model.mmu_logits(
                image[idx], [questions[b] for b in active], [answers[b] for b in active]
            )[:, -1]
            if greedy:
                nxt = argmax_lowest(logits)
            else:
                noise = gumbel_noise(logits.shape, generator, logits.dtype)
                nxt = argmax_lowest(logits / cfg.answer_temperature + noise)
            still = []
            for b, tok in zip(active, nxt.tolist()):
                if tok == model.eos_local:
                    done[b] = True
                else:
                    answers[b].append(int(model.answer_ids[tok]))
                    still.append(b)
            active = still
    return AnswerSample([tuple(a) for a in answers], done)
