"""Per-category accuracies and the two-chain balance metric."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch

from .oracle import check_image
from .reward import answer_correct, rule_for
from .sampling import DecodeConfig, sample_answer, sample_image
from .taskgen import CATEGORIES, TaskInstance, reference_image
from .vocab import decode_image, encode_image

EVAL_BATCH = 256


def _ratio(num: int, den: int) -> Optional[float]:
    return None if den == 0 else num / den


def overall(per_category: dict) -> Optional[float]:
    """Unweighted mean of the defined category values."""
    vals = [x for x in per_category.values() if x is not None]
    return sum(vals) / len(vals) if vals else None


def conditional_accuracies(n_images: int, n_answers: int, n_both_image: int, n_both_answer: int | None = None):
    """(answer accuracy given a correct image, image accuracy given a correct answer).

    A zero denominator yields ``None`` (undefined).
    """
    if n_both_answer is None:
        n_both_answer = n_both_image
    return _ratio(n_both_image, n_images), _ratio(n_both_answer, n_answers)


def generate_images(model, tasks: Sequence[TaskInstance], cfg: DecodeConfig, generator) -> list:
    out = []
    with torch.no_grad():
        for i in range(0, len(tasks), EVAL_BATCH):
            chunk = tasks[i : i + EVAL_BATCH]
            sample = sample_image(model, [t.prompt.ids for t in chunk], cfg, generator)
            out.extend(decode_image(row, model.vocab) for row in sample.as_lists())
    return out


def answer_images(model, tasks: Sequence[TaskInstance], images, cfg: DecodeConfig) -> list:
    v = model.vocab
    out = []
    for i in range(0, len(tasks), EVAL_BATCH):
        chunk = tasks[i : i + EVAL_BATCH]
        ids = torch.tensor([encode_image(img, v).ids for img in images[i : i + EVAL_BATCH]], dtype=torch.long)
        sample = sample_answer(model, ids, [t.question.ids for t in chunk], cfg, greedy=True)
        out.extend(sample.answers)
    return out


def _per_category(tasks, flags) -> dict:
    out = {}
    for cat in CATEGORIES:
        vals = [f for t, f in zip(tasks, flags) if t.category is cat]
        out[cat.value] = _ratio(sum(vals), len(vals))
    return out


def eval_t2i(model, tasks, cfg: DecodeConfig, generator, generate=None) -> dict:
    """Oracle accuracy of one sampled image per task.

    ``generate(tasks) -> images`` overrides the model's sampler (test doubles).
    """
    images = generate(tasks) if generate else generate_images(model, tasks, cfg, generator)
    flags = [check_image(t.spec, img) for t, img in zip(tasks, images)]
    per = _per_category(tasks, flags)
    return {"per_category": per, "overall": overall(per), "n": len(tasks), "flags": flags}


def eval_mmu(model, tasks, cfg: DecodeConfig, answer=None) -> dict:
    """Greedy answer accuracy on oracle-rendered reference scenes."""
    if answer is not None:
        answers = answer(tasks)
    else:
        images = [reference_image(t, model.vocab) for t in tasks]
        answers = answer_images(model, tasks, images, cfg)
    flags = [answer_correct(rule_for(t), a) for t, a in zip(tasks, answers)]
    per = _per_category(tasks, flags)
    return {"per_category": per, "overall": overall(per), "n": len(tasks), "flags": flags}


@dataclass
class BalanceCounts:
    n_images_correct: int = 0
    n_answers_correct: int = 0
    n_both_image_chain: int = 0  # correct answers among correct generated images
    n_both_answer_chain: int = 0  # correct regenerations among correct answers
    per_category: dict = field(default_factory=dict)

    def accuracies(self):
        return conditional_accuracies(
            self.n_images_correct, self.n_answers_correct, self.n_both_image_chain, self.n_both_answer_chain
        )


def balance_from_trace(trace: Sequence[dict]) -> dict:
    """Aggregate a per-task trace into counts and conditional accuracies."""
    per = {c.value: [0, 0, 0, 0] for c in CATEGORIES}
    for rec in trace:
        row = per[rec["category"]]
        if rec["chain"] == "t2i_mmu":
            if rec["image_ok"]:
                row[0] += 1
                row[2] += bool(rec["answer_ok"])
        elif rec["answer_ok"]:
            row[1] += 1
            row[3] += bool(rec["image_ok"])
    totals = [sum(r[i] for r in per.values()) for i in range(4)]
    counts = BalanceCounts(*totals, per_category={k: tuple(v) for k, v in per.items()})
    mmu_given_t2i = {k: _ratio(r[2], r[0]) for k, r in per.items()}
    t2i_given_mmu = {k: _ratio(r[3], r[1]) for k, r in per.items()}
    acc1, acc2 = counts.accuracies()
    return {
        "counts": counts,
        "mmu_given_t2i": acc1,
        "t2i_given_mmu": acc2,
        "mmu_given_t2i_per_category": mmu_given_t2i,
        "t2i_given_mmu_per_category": t2i_given_mmu,
        "mmu_given_t2i_overall": overall(mmu_given_t2i),
        "t2i_given_mmu_overall": overall(t2i_given_mmu),
    }


def balance(model, tasks, cfg: DecodeConfig, seed: int, generate=None, answer=None) -> tuple[dict, list]:
    """Run both chains on every task; returns (summary, per-task trace).

    Chain 1 generates an image and asks the question only if the image is
    correct. Chain 2 answers on the reference scene and regenerates the image
    only if the answer is correct. The chains use independent generators.
    """
    if not tasks:
        raise ValueError("balance needs a non-empty task set")
    v = model.vocab if model is not None else None
    g1 = torch.Generator().manual_seed(int(seed) * 2 + 1)
    g2 = torch.Generator().manual_seed(int(seed) * 2 + 2)
    gen = generate or (lambda ts, g: generate_images(model, ts, cfg, g))
    ans = answer or (lambda ts, imgs: answer_images(model, ts, imgs, cfg))
    trace = []

    images = gen(tasks, g1)
    ok_img = [check_image(t.spec, img) for t, img in zip(tasks, images)]
    asked = [i for i, ok in enumerate(ok_img) if ok]
    answers = ans([tasks[i] for i in asked], [images[i] for i in asked]) if asked else []
    ok_ans = {i: answer_correct(rule_for(tasks[i]), a) for i, a in zip(asked, answers)}
    for i, t in enumerate(tasks):
        trace.append(
            {"task_id": i, "category": t.category.value, "chain": "t2i_mmu",
             "image_ok": ok_img[i], "answer_ok": ok_ans.get(i)}
        )

    refs = [reference_image(t, v) for t in tasks]
    answers = ans(list(tasks), refs)
    ok_ans2 = [answer_correct(rule_for(t), a) for t, a in zip(tasks, answers)]
    asked = [i for i, ok in enumerate(ok_ans2) if ok]
    regen = gen([tasks[i] for i in asked], g2) if asked else []
    ok_img2 = {i: check_image(tasks[i].spec, img) for i, img in zip(asked, regen)}
    for i, t in enumerate(tasks):
        trace.append(
            {"task_id": i, "category": t.category.value, "chain": "mmu_t2i",
             "image_ok": ok_img2.get(i), "answer_ok": ok_ans2[i]}
        )
    return balance_from_trace(trace), trace


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def eval_report(model, tasks, cfg: DecodeConfig, seed: int, cfg_hash: str = "") -> dict:
    g = torch.Generator().manual_seed(int(seed))
    t2i = eval_t2i(model, tasks, cfg, g)
    mmu = eval_mmu(model, tasks, cfg)
    return {
        "t2i": {"per_category": t2i["per_category"], "overall": t2i["overall"]},
        "mmu": {"per_category": mmu["per_category"], "overall": mmu["overall"]},
        "n_tasks": len(tasks),
        "config_hash": cfg_hash,
        "seed": seed,
    }
