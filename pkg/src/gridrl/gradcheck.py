"""Central finite-difference audit of every op and of the full model in float64."""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from typing import Callable

import torch

from . import tensor as T
from .model import ModelConfig, UnifiedModel
from .sampling import DecodeConfig, GumbelConfig, gumbel_noise, gumbel_softmax, replay_rows, sample_image, st_hard_sample
from .vocab import default_vocabulary

TOLERANCE = 1e-4
EPSILON = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    passed: bool
    seconds: float


def _proj(shape, g):
    return torch.randn(shape, generator=g, dtype=torch.float64)


def op_checks(g: torch.Generator) -> list:
    """(name, f, point) triples for the primitive ops."""
    r = lambda *s: torch.randn(*s, generator=g, dtype=torch.float64)  # noqa: E731
    a, b = r(3, 4), r(4, 5)
    x = r(2, 3, 4)
    gain, bias = r(4), r(4)
    table = r(6, 3)
    ids = torch.tensor([[0, 5, 2], [2, 2, 1]])
    targets = torch.tensor([1, 0, -1, 3])
    P = {k: _proj(s, g) for k, s in {
        "mm": (3, 5), "x": (2, 3, 4), "emb": (2, 3, 3), "bc": (2, 3, 4), "t": (2, 4, 3), "rs": (6, 4), "row": (3,)
    }.items()}
    return [
        ("matmul.a", lambda t: (T.matmul(t, b) * P["mm"]).sum(), a),
        ("matmul.b", lambda t: (T.matmul(a, t) * P["mm"]).sum(), b),
        ("add", lambda t: (T.add(t, gain) * P["x"]).sum(), x),
        ("add.broadcast", lambda t: (T.add(x, t) * P["x"]).sum(), gain),
        ("multiply", lambda t: (T.multiply(t, x) * P["x"]).sum(), x.clone()),
        ("multiply.broadcast", lambda t: (T.multiply(x, t) * P["x"]).sum(), gain),
        ("broadcast", lambda t: (T.broadcast(t, (2, 3, 4)) * P["bc"]).sum(), gain),
        ("embedding", lambda t: (T.embedding(t, ids) * P["emb"]).sum(), table),
        ("softmax", lambda t: (T.softmax(t) * P["x"]).sum(), x),
        ("log_softmax", lambda t: (T.log_softmax(t) * P["x"]).sum(), x),
        ("layer_norm.x", lambda t: (T.layer_norm(t, gain, bias) * P["x"]).sum(), x),
        ("layer_norm.gain", lambda t: (T.layer_norm(x, t, bias) * P["x"]).sum(), gain),
        ("layer_norm.bias", lambda t: (T.layer_norm(x, gain, t) * P["x"]).sum(), bias),
        ("gelu", lambda t: (T.gelu(t) * P["x"]).sum(), x),
        ("reshape", lambda t: (T.reshape(t, (6, 4)) * P["rs"]).sum(), x),
        ("transpose", lambda t: (T.transpose(t) * P["t"]).sum(), x),
        ("cross_entropy", lambda t: T.cross_entropy(t, targets, ignore_index=-1), r(4, 5)),
        ("reduce_sum", lambda t: (T.reduce_sum(t, dim=-1) * P["x"][..., 0]).sum(), x),
        ("reduce_mean", lambda t: (T.reduce_mean(t, dim=1) * P["x"][:, 0]).sum(), x),
    ]


@contextlib.contextmanager
def _swapped(model: UnifiedModel, name: str, value: torch.Tensor):
    old = model.params._params[name]
    model.params._params[name] = value
    try:
        yield
    finally:
        model.params._params[name] = old


def _param_checks(model: UnifiedModel, tag: str, fn: Callable, g: torch.Generator, n_coords: int) -> list:
    out = []
    for name, p in model.params.items():
        def f(t, name=name):
            with _swapped(model, name, t):
                return fn(model)

        coords = torch.randperm(p.numel(), generator=g)[:n_coords].tolist()
        out.append((f"{tag}:{name}", f, p.detach().clone(), coords))
    return out


def _model_checks(g: torch.Generator, n_coords: int) -> list:
    v = default_vocabulary()
    checks = []
    prompts = [(v.word_id("a"), v.word_id("red"), v.word_id("cup")), (v.word_id("two"), v.word_id("vases"))]
    questions = [(v.word_id("what"),), (v.word_id("how"), v.word_id("many"))]
    answers = [(v.word_id("cup"),), (v.word_id("two"), v.word_id("vases"))]
    image = torch.randint(v.image_range.start, v.image_range.stop, (2, v.n_cells), generator=g)
    masked = image.clone()
    masked[:, ::3] = v.special("MASK")
    small = dict(layers=2, d_model=8, heads=2, init_std=0.5, max_prompt_len=4, max_question_len=3, max_answer_len=3)
    for repr_mode, gen_mode in (("shared", "mtp"), ("split", "ntp")):
        cfg = ModelConfig(repr_mode=repr_mode, gen_mode=gen_mode, **small)
        model = UnifiedModel(cfg, v, seed=int(torch.randint(1000, (1,), generator=g)))
        inp = masked if gen_mode == "mtp" else image
        Pt = _proj((2, v.n_cells, v.image_codebook_size), g)
        Pm = _proj((2, 3, 1 + v.n_text), g)
        checks += _param_checks(model, f"{repr_mode}.t2i", lambda m: (m.t2i_logits(prompts, inp) * Pt).sum(), g, n_coords)
        checks += _param_checks(
            model, f"{repr_mode}.mmu", lambda m: (m.mmu_logits(image, questions, answers) * Pm).sum(), g, n_coords
        )

    # soft path: relaxed image rows from the generation head feed the answer head
    cfg = ModelConfig(**small)
    model = UnifiedModel(cfg, v, seed=11)
    decode = DecodeConfig(mtp_steps=3, guidance_scale=2.0)
    gen = torch.Generator().manual_seed(5)
    sample = sample_image(model, [prompts[0], prompts[1]], decode, gen)
    Pm = _proj((2, 3, 1 + v.n_text), g)
    soft = GumbelConfig(tau=0.7, hard=False)

    def soft_fn(m):
        rows = replay_rows(m, prompts, sample, decode, soft)
        return (m.mmu_logits(rows, questions, answers) * Pm).sum()

    checks += _param_checks(model, "soft_path", soft_fn, g, n_coords)

    # gumbel-softmax relaxation and the straight-through backward rule
    logits = _proj((4, 7), g)
    noise = gumbel_noise((4, 7), torch.Generator().manual_seed(3), torch.float64)
    Pg = _proj((4, 7), g)
    checks.append(("gumbel_softmax", lambda t: (gumbel_softmax(t, GumbelConfig(tau=0.7), noise=noise) * Pg).sum(), logits))
    lg = logits.clone().requires_grad_(True)
    hard = st_hard_sample(gumbel_softmax(lg, GumbelConfig(tau=0.7), noise=noise))
    (st_grad,) = torch.autograd.grad((hard * Pg).sum(), lg)
    checks.append(("st_hard_sample", lambda t: (gumbel_softmax(t, GumbelConfig(tau=0.7), noise=noise) * Pg).sum(),
                   logits, None, st_grad))
    return checks


def run_suite(seed: int = 0, n_coords: int = 12, tolerance: float = TOLERANCE, log: Callable | None = None) -> list:
    """Run every check in float64; returns one :class:`CheckResult` per check."""
    results = []
    with T.float64_mode():
        g = torch.Generator().manual_seed(seed)
        checks = [(n, f, x, None, None) for n, f, x in op_checks(g)]
        checks += [c + (None,) * (5 - len(c)) for c in _model_checks(g, n_coords)]
        for name, f, point, coords, analytic in checks:
            t0 = time.perf_counter()
            err = T.finite_diff_check(f, point, EPSILON, analytic=analytic, coords=coords)
            res = CheckResult(name, err, err < tolerance, time.perf_counter() - t0)
            results.append(res)
            if log is not None:
                log(res)
    return results
