"""Micro unified multimodal transformer.

One backbone serves text-to-image generation (masked or next-token image
prediction) and multimodal understanding (next-token answer prediction).

Parameter groups:

* ``txt_emb``: text + special token embeddings.
* ``img_emb``: image codebook embeddings used by generation, and by
  understanding too in ``shared`` mode.
* ``und_img_emb``: understanding-side codebook embeddings (``split`` mode only).
* ``gen_head`` / ``mmu_head``: output projections over the image codebook
  and over the answer vocabulary (EOS + text words).
* everything else is backbone.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import torch
import torch.nn.functional as F

from . import tensor as T
from .tensor import ParamStore
from .vocab import Vocabulary

NEG_INF = float("-inf")


class ModelError(ValueError):
    pass


class UnsupportedPathError(ModelError):
    """Raised for gradient paths the representation mode cannot carry."""


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    d_model: int = 64
    heads: int = 4
    repr_mode: str = "shared"
    gen_mode: str = "mtp"
    max_prompt_len: int = 12
    max_question_len: int = 16
    max_answer_len: int = 12
    mlp_ratio: int = 4
    init_std: float = 0.02
    split_noise: float = 0.1

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ModelError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.repr_mode not in ("shared", "split"):
            raise ModelError(f"repr_mode must be shared|split, got {self.repr_mode!r}")
        if self.gen_mode not in ("mtp", "ntp"):
            raise ModelError(f"gen_mode must be mtp|ntp, got {self.gen_mode!r}")

    @property
    def max_seq_len(self) -> int:
        return max(self.max_prompt_len + 2, self.max_question_len + self.max_answer_len + 3)

    def to_dict(self) -> dict:
        return asdict(self)


GEN_ONLY = ("gen_head", "gen_bias")
UND_ONLY = ("mmu_head", "mmu_bias")


def _init_params(cfg: ModelConfig, v: Vocabulary, seed: int) -> ParamStore:
    g = torch.Generator().manual_seed(seed)
    d, std = cfg.d_model, cfg.init_std
    dt = torch.get_default_dtype()

    def normal(*shape, scale=std):
        return torch.randn(*shape, generator=g, dtype=dt) * scale

    n_txt = v.n_special + v.n_text
    n_img = v.image_codebook_size
    p = ParamStore()
    p.add("txt_emb", normal(n_txt, d))
    p.add("img_emb", normal(n_img, d))
    if cfg.repr_mode == "split":
        p.add("und_img_emb", p["img_emb"].detach() + normal(n_img, d, scale=cfg.split_noise))
    p.add("pos_text", normal(cfg.max_seq_len, d))
    p.add("pos_img", normal(v.n_cells, d))
    hidden = cfg.mlp_ratio * d
    for i in range(cfg.layers):
        pre = f"layer{i}."
        p.add(pre + "ln1_g", torch.ones(d, dtype=dt))
        p.add(pre + "ln1_b", torch.zeros(d, dtype=dt))
        for w in ("wq", "wk", "wv"):
            p.add(pre + w, normal(d, d))
        p.add(pre + "wo", normal(d, d, scale=std / math.sqrt(2 * cfg.layers)))
        p.add(pre + "ln2_g", torch.ones(d, dtype=dt))
        p.add(pre + "ln2_b", torch.zeros(d, dtype=dt))
        p.add(pre + "w1", normal(d, hidden))
        p.add(pre + "b1", torch.zeros(hidden, dtype=dt))
        p.add(pre + "w2", normal(hidden, d, scale=std / math.sqrt(2 * cfg.layers)))
        p.add(pre + "b2", torch.zeros(d, dtype=dt))
    p.add("lnf_g", torch.ones(d, dtype=dt))
    p.add("lnf_b", torch.zeros(d, dtype=dt))
    p.add("gen_head", normal(d, n_img))
    p.add("gen_bias", torch.zeros(n_img, dtype=dt))
    p.add("mmu_head", normal(d, 1 + v.n_text))
    p.add("mmu_bias", torch.zeros(1 + v.n_text, dtype=dt))
    return p


class UnifiedModel:
    """Configuration, vocabulary and parameters of one unified model."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary, params: ParamStore | None = None, seed: int = 0):
        self.config = config
        self.vocab = vocab
        self.params = params if params is not None else _init_params(config, vocab, seed)
        v = vocab
        self.answer_ids = torch.tensor([v.special("EOS")] + list(v.text_range), dtype=torch.long)
        self._global_to_answer = {int(g): i for i, g in enumerate(self.answer_ids)}
        self.eos_local = 0
        self.img_start = v.image_range.start

    # --- bookkeeping --------------------------------------------------
    def clone(self) -> "UnifiedModel":
        return UnifiedModel(self.config, self.vocab, self.params.clone())

    def to(self, dtype) -> "UnifiedModel":
        return UnifiedModel(self.config, self.vocab, self.params.clone(dtype))

    @property
    def gen_only_names(self) -> tuple:
        names = GEN_ONLY
        if self.config.repr_mode == "split":
            names = names + ("img_emb",)
        return names

    @property
    def und_only_names(self) -> tuple:
        names = UND_ONLY
        if self.config.repr_mode == "split":
            names = names + ("und_img_emb",)
        return names

    def answer_local(self, global_ids) -> list:
        try:
            return [self._global_to_answer[int(i)] for i in global_ids]
        except KeyError as exc:
            raise ModelError(f"token {exc.args[0]} is not in the answer vocabulary") from None

    def answer_global(self, local_ids) -> list:
        return [int(self.answer_ids[i]) for i in local_ids]

    # --- backbone -----------------------------------------------------
    def _backbone(self, x: torch.Tensor, key_pad: torch.Tensor, causal: bool) -> torch.Tensor:
        cfg, p = self.config, self.params
        B, L, d = x.shape
        H, dh = cfg.heads, d // cfg.heads
        allowed = ~key_pad[:, None, None, :]
        if causal:
            tri = torch.ones(L, L, dtype=torch.bool).tril()
            allowed = allowed & tri[None, None]
        bias = torch.zeros(allowed.shape, dtype=x.dtype).masked_fill(~allowed, NEG_INF)
        for i in range(cfg.layers):
            pre = f"layer{i}."
            h = T.layer_norm(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
            q = (h @ p[pre + "wq"]).view(B, L, H, dh).transpose(1, 2)
            k = (h @ p[pre + "wk"]).view(B, L, H, dh).transpose(1, 2)
            val = (h @ p[pre + "wv"]).view(B, L, H, dh).transpose(1, 2)
            att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dh) + bias, dim=-1)
            out = (att @ val).transpose(1, 2).reshape(B, L, d)
            x = x + out @ p[pre + "wo"]
            h = T.layer_norm(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
            x = x + T.gelu(h @ p[pre + "w1"] + p[pre + "b1"]) @ p[pre + "w2"] + p[pre + "b2"]
        return T.layer_norm(x, p["lnf_g"], p["lnf_b"])

    def _text_embed(self, ids: torch.Tensor) -> torch.Tensor:
        return F.embedding(ids, self.params["txt_emb"])

    def _pad_text(self, seqs, length: int, what: str) -> torch.Tensor:
        pad = self.vocab.special("PAD")
        out = torch.full((len(seqs), length), pad, dtype=torch.long)
        for b, s in enumerate(seqs):
            s = list(s)
            if len(s) > length:
                raise ModelError(f"{what} of length {len(s)} exceeds maximum {length}")
            out[b, : len(s)] = torch.tensor(s, dtype=torch.long)
        return out

    # --- text to image ------------------------------------------------
    def t2i_hidden(self, prompts, image_ids: torch.Tensor) -> torch.Tensor:
        """Hidden states at the positions that predict each image slot. (B, N, d)"""
        v, cfg, p = self.vocab, self.config, self.params
        B, N = image_ids.shape
        if N != v.n_cells:
            raise ModelError(f"image slots must number {v.n_cells}, got {N}")
        mask_id = v.special("MASK")
        is_mask = image_ids == mask_id
        if cfg.gen_mode == "ntp" and bool(is_mask.any()):
            raise ModelError("MASK tokens are not allowed in ntp generation mode")
        if bool(((image_ids < self.img_start) & ~is_mask).any()):
            raise ModelError("image slots may only hold image tokens or MASK")
        P = cfg.max_prompt_len
        text = torch.cat(
            [
                torch.full((B, 1), v.special("TASK_T2I"), dtype=torch.long),
                self._pad_text(prompts, P, "prompt"),
                torch.full((B, 1), v.special("SEP"), dtype=torch.long),
            ],
            dim=1,
        )
        x_text = self._text_embed(text) + p["pos_text"][: P + 2]
        img_local = (image_ids - self.img_start).clamp(min=0)
        x_img = F.embedding(img_local, p["img_emb"])
        if bool(is_mask.any()):
            x_img = torch.where(is_mask[..., None], p["txt_emb"][mask_id].expand_as(x_img), x_img)
        x_img = x_img + p["pos_img"]
        x = torch.cat([x_text, x_img], dim=1)
        key_pad = torch.cat([text == v.special("PAD"), torch.zeros(B, N, dtype=torch.bool)], dim=1)
        h = self._backbone(x, key_pad, causal=cfg.gen_mode == "ntp")
        if cfg.gen_mode == "mtp":
            return h[:, P + 2 :]
        return h[:, P + 1 : P + 1 + N]

    def t2i_logits(self, prompts, image_ids: torch.Tensor) -> torch.Tensor:
        """Logits over the image codebook (local ids). (B, N, codebook)"""
        h = self.t2i_hidden(prompts, image_ids)
        return h @ self.params["gen_head"] + self.params["gen_bias"]

    def forward_t2i(self, prompts, image_ids: torch.Tensor) -> torch.Tensor:
        """Full-vocabulary logits; every non-image id carries ``-inf``."""
        local = self.t2i_logits(prompts, image_ids)
        full = torch.full(local.shape[:-1] + (self.vocab.size,), NEG_INF, dtype=local.dtype)
        full[..., self.img_start : self.img_start + local.shape[-1]] = local
        return full

    # --- understanding ------------------------------------------------
    def mmu_logits(self, image, questions, answer_prefixes) -> torch.Tensor:
        """Next-token logits over the answer vocabulary.

        ``image`` is a (B, N) LongTensor of global image ids, or a (B, N, codebook)
        row-stochastic tensor. Returns (B, A + 1, 1 + n_text) where ``A`` is the
        longest prefix; row ``t`` predicts answer token ``t``.
        """
        v, cfg, p = self.vocab, self.config, self.params
        soft = image.dtype.is_floating_point
        B, N = image.shape[:2]
        if N != v.n_cells:
            raise ModelError(f"image must have {v.n_cells} slots, got {N}")
        table = p["img_emb"]
        if cfg.repr_mode == "split":
            if soft:
                raise UnsupportedPathError(
                    "split representation mode cannot consume soft image rows; "
                    "use the decoupled (split) trainer path"
                )
            table = p["und_img_emb"]
        if soft:
            if image.shape[-1] != v.image_codebook_size:
                raise ModelError(f"soft rows must have width {v.image_codebook_size}")
            x_img = image @ table
        else:
            if bool(((image < self.img_start) | (image >= self.img_start + v.image_codebook_size)).any()):
                raise ModelError("image input holds non-image tokens")
            x_img = F.embedding(image - self.img_start, table)
        x_img = x_img + p["pos_img"]
        Q = cfg.max_question_len
        A = max((len(a) for a in answer_prefixes), default=0)
        if A > cfg.max_answer_len:
            raise ModelError(f"answer prefix of length {A} exceeds maximum {cfg.max_answer_len}")
        sep = v.special("SEP")
        text = torch.cat(
            [
                torch.full((B, 1), sep, dtype=torch.long),
                self._pad_text(questions, Q, "question"),
                torch.full((B, 1), sep, dtype=torch.long),
                self._pad_text(answer_prefixes, A, "answer"),
            ],
            dim=1,
        )
        task = torch.full((B, 1), v.special("TASK_MMU"), dtype=torch.long)
        pos = p["pos_text"]
        x = torch.cat(
            [
                self._text_embed(task) + pos[0],
                x_img,
                self._text_embed(text) + pos[1 : 1 + text.shape[1]],
            ],
            dim=1,
        )
        pad = v.special("PAD")
        key_pad = torch.cat([torch.zeros(B, 1 + N, dtype=torch.bool), text == pad], dim=1)
        h = self._backbone(x, key_pad, causal=True)
        start = 1 + N + 1 + Q  # position of the SEP before the answer
        h = h[:, start : start + A + 1]
        return h @ p["mmu_head"] + p["mmu_bias"]

    def forward_mmu(self, image, questions, answer_prefixes) -> torch.Tensor:
        """Full-vocabulary logits; ids outside EOS + text carry ``-inf``."""
        local = self.mmu_logits(image, questions, answer_prefixes)
        full = torch.full(local.shape[:-1] + (self.vocab.size,), NEG_INF, dtype=local.dtype)
        full[..., self.answer_ids] = local
        return full

    def answer_targets(self, answers) -> torch.Tensor:
        """Local target ids for teacher forcing: answer tokens then EOS, ``-1`` padded."""
        A = max(len(a) for a in answers)
        out = torch.full((len(answers), A + 1), -1, dtype=torch.long)
        for b, a in enumerate(answers):
            local = self.answer_local(a) + [self.eos_local]
            out[b, : len(local)] = torch.tensor(local, dtype=torch.long)
        return out

    def answer_token_logprobs(self, image, questions, answers, terminated=None):
        """Per-token log-probs of ``answers`` (+EOS where terminated) and the valid mask."""
        logits = self.mmu_logits(image, questions, answers)
        targets = self.answer_targets(answers)
        if terminated is not None:
            for b, (a, done) in enumerate(zip(answers, terminated)):
                if not done:
                    targets[b, len(a)] = -1
        valid = targets >= 0
        logp = torch.log_softmax(logits, dim=-1)
        picked = logp.gather(-1, targets.clamp(min=0)[..., None])[..., 0]
        return picked * valid, valid, logits


def ntp_loss(logits: torch.Tensor, targets: torch.Tensor, ignore_index: int = -1) -> torch.Tensor:
    """Mean negative log-likelihood over targets not equal to ``ignore_index``."""
    return T.cross_entropy(logits, targets, ignore_index=ignore_index)


def mtp_loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean NLL over masked image positions only."""
    if not bool(mask.any()):
        raise ModelError("mtp_loss needs at least one masked position")
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets[..., None])[..., 0]
    return nll[mask].mean()


def with_config(model: UnifiedModel, **changes) -> ModelConfig:
    return replace(model.config, **changes)
