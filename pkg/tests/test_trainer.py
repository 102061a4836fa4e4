import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import tiny_model
from gridrl.model import UnsupportedPathError
from gridrl.optim import AdamState
from gridrl.sampling import DecodeConfig
from gridrl.taskgen import Category, SceneSpec, build_task, make_task_set
from gridrl.trainer import (
    ContractError,
    GrpoConfig,
    RolloutGroup,
    TrainerError,
    advantages,
    categorical_kl,
    clipped_surrogate,
    grpo_e2e_loss,
    sft_loss,
    grpo_step_e2e,
    grpo_step_split_mmu,
    grpo_step_split_t2i,
    grpo_weights,
    kl_penalty,
    pick_task,
    group_tasks,
    posttrain,
    sft_step,
    snapshot_reference,
    split_sft_step,
    step_generator,
)

FAST = DecodeConfig(mtp_steps=2)


def _cfg(**kw):
    return GrpoConfig(**{"decode": FAST, "learning_rate": 1e-3, **kw})


@pytest.fixture
def task(vocab):
    return build_task(SceneSpec(Category.COUNTING, (vocab.object_names.index("vase"),), count=3), vocab)


# --- weights and advantages --------------------------------------------
def test_weights_equal_rewards_uniform():
    for alpha in (0.1, 1.0, 7.0):
        assert np.allclose(grpo_weights([2, 2, 2], alpha), [1 / 3] * 3, atol=1e-15)


def test_weights_match_independent_softmax():
    # independent evaluation: softmax of alpha * (r - mean) by plain math
    z = [1.0, 0.0, -1.0]
    den = math.fsum(math.exp(x) for x in z)
    expect = [math.exp(x) / den for x in z]
    got = grpo_weights([2, 1, 0], 1.0)
    assert np.allclose(got, expect, atol=5e-7)
    assert np.allclose(got, [0.6652, 0.2447, 0.0900], atol=1e-4)


def test_weights_single_and_errors():
    assert grpo_weights([3.5], 1.0).tolist() == [1.0]
    with pytest.raises(TrainerError):
        grpo_weights([1.0, float("inf")])
    with pytest.raises(TrainerError):
        grpo_weights([1.0, 2.0], alpha=0.0)


def test_weights_small_alpha_uniform():
    w = grpo_weights([4, 0, 1, 3], alpha=1e-6)
    assert np.abs(w - 0.25).max() < 1e-4


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=8), st.floats(0.05, 5.0), st.randoms())
def test_weights_properties(rewards, alpha, rnd):
    w = grpo_weights(rewards, alpha)
    assert abs(w.sum() - 1) < 1e-9
    perm = list(range(len(rewards)))
    rnd.shuffle(perm)
    assert np.allclose(grpo_weights([rewards[i] for i in perm], alpha), w[perm], atol=1e-15)
    for i in range(len(rewards)):
        for j in range(len(rewards)):
            if rewards[i] > rewards[j]:
                assert w[i] > w[j]


def test_advantages_cases():
    a = advantages([1, 2, 3])
    s = math.sqrt(2 / 3)
    assert np.allclose(a, [-1 / s, 0, 1 / s], atol=1e-12)
    assert np.allclose(a, [-1.2247, 0, 1.2247], atol=1e-4)
    assert advantages([5, 5, 5]).tolist() == [0, 0, 0]
    with pytest.raises(TrainerError):
        advantages([1.0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=8))
def test_advantages_normalized(rewards):
    a = advantages(rewards)
    r = np.asarray(rewards)
    if r.std() > 0 and not (r == r[0]).all():
        mean = math.fsum(a) / len(a)
        std = math.sqrt(math.fsum((x - mean) ** 2 for x in a) / len(a))
        assert abs(mean) < 1e-9 and abs(std - 1) < 1e-9
    else:
        assert not a.any()


def test_advantages_shift_and_scale_invariant():
    r = [0.0, 1.0, 3.0, 2.0]
    base = advantages(r)
    assert np.array_equal(advantages([x * 4 for x in r]), base)
    assert np.allclose(advantages([x + 7.5 for x in r]), base, atol=1e-12)
    assert np.allclose(advantages([x * 3.3 for x in r]), base, atol=1e-12)


def test_clipped_surrogate_cases():
    A = torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64)
    assert float(clipped_surrogate(torch.ones(3, dtype=torch.float64), A, 0.2)) == float(A.mean())
    assert float(clipped_surrogate([1.5], [1.0], 0.2)) == pytest.approx(1.2, abs=0)
    assert float(clipped_surrogate([0.5], [-1.0], 0.2)) == pytest.approx(-0.8, abs=0)
    with pytest.raises(TrainerError):
        clipped_surrogate([1.0, 1.0], [1.0], 0.2)


def test_clipped_surrogate_pessimism():
    g = torch.Generator().manual_seed(0)
    for _ in range(200):
        s = torch.rand(6, generator=g, dtype=torch.float64) * 2
        a = torch.randn(6, generator=g, dtype=torch.float64)
        assert float(clipped_surrogate(s, a, 0.2)) <= float((s * a).mean()) + 1e-15


# --- KL -----------------------------------------------------------------
def test_kl_closed_form():
    p = torch.log(torch.tensor([0.9, 0.1], dtype=torch.float64))
    q = torch.log(torch.tensor([0.5, 0.5], dtype=torch.float64))
    expect = 0.9 * math.log(1.8) + 0.1 * math.log(0.2)
    assert abs(float(categorical_kl(p, q)) - expect) < 1e-12
    assert abs(float(categorical_kl(p, q)) - 0.3681) < 1e-4


def test_kl_nonnegative_and_zero_on_identical():
    g = torch.Generator().manual_seed(1)
    logp = torch.log_softmax(torch.randn(1000, 6, generator=g, dtype=torch.float64) * 3, -1)
    logq = torch.log_softmax(torch.randn(1000, 6, generator=g, dtype=torch.float64) * 3, -1)
    assert (categorical_kl(logp, logq) >= 0).all()
    assert categorical_kl(logp, logp).abs().max() == 0


def test_kl_penalty_identical_models(vocab, objects):
    m = tiny_model(vocab)
    ref = snapshot_reference(m)
    tasks = make_task_set(vocab, objects, "train", 1, seed=0)
    imgs = torch.full((len(tasks), 16), vocab.empty_id)
    kl = kl_penalty(m, ref, imgs, [t.question.ids for t in tasks], [t.answer.ids for t in tasks])
    assert abs(kl.item()) < 1e-9


def test_reference_frozen_across_training(vocab, objects):
    m = tiny_model(vocab)
    ref = snapshot_reference(m)
    digest = ref.params.digest()
    tasks = make_task_set(vocab, objects, "train", 2, seed=0)
    state = AdamState()
    cfg = _cfg()
    for step in range(100):
        grpo_step_e2e(m, ref, tasks[step % len(tasks)], cfg, state, step_generator(0, step))
    assert ref.params.digest() == digest
    assert m.params.digest() != digest
    assert not any(p.requires_grad for _, p in ref.params.items())


# --- steps --------------------------------------------------------------
def test_sft_step_reaches_generation(vocab, task):
    m = tiny_model(vocab)
    res = sft_step(m, task, _cfg(), AdamState(), step_generator(0, 0))
    assert res.grad_norm_gen > 0 and res.grad_norm_mmu > 0


def test_sft_step_rejects_split(vocab, task):
    with pytest.raises(UnsupportedPathError, match="split"):
        sft_step(tiny_model(vocab, repr_mode="split"), task, _cfg(), AdamState(), step_generator(0, 0))
    with pytest.raises(UnsupportedPathError):
        grpo_step_e2e(tiny_model(vocab, repr_mode="split"), None, task, _cfg(), AdamState(), step_generator(0, 0))


def test_sft_overfits_one_task(vocab, task):
    m = tiny_model(vocab)
    state = AdamState()
    cfg = _cfg(learning_rate=3e-3)
    losses = [sft_step(m, task, cfg, state, step_generator(0, s)).loss for s in range(500)]
    assert np.mean(losses[-20:]) < 0.1


def test_sft_loss_vanishes_on_perfect_answer(vocab, task):
    m = tiny_model(vocab)
    targets = m.answer_targets([task.answer.ids])
    perfect = torch.full(targets.shape + (1 + vocab.n_text,), -1e4)
    perfect.scatter_(-1, targets[..., None], 1e4)
    orig = m.mmu_logits
    m.mmu_logits = lambda image, q, a: orig(image, q, a) * 0 + perfect
    assert sft_loss(m, task, _cfg(), step_generator(0, 0)).loss.item() < 1e-6


def _manual_rollout(m, task, cfg, seed):
    """Recompute a GRPO group with the public sampling and reward pieces."""
    from gridrl.reward import rule_for, score_answer
    from gridrl.sampling import replay_rows, sample_answer, sample_image

    g = step_generator(seed, 0)
    prompts = [task.prompt.ids] * cfg.group_size
    qs = [task.question.ids] * cfg.group_size
    s = sample_image(m, prompts, cfg.decode, g)
    ans = sample_answer(m, s.ids, qs, cfg.decode, g, greedy=False)
    rewards = [score_answer(rule_for(task), a) for a in ans.answers]
    rows = replay_rows(m, prompts, s, cfg.decode, cfg.gumbel)
    logp, _, _ = m.answer_token_logprobs(rows, qs, ans.answers, ans.terminated)
    return rewards, logp.sum(1).detach()


def test_beta_zero_is_weighted_nll(vocab, task):
    m = tiny_model(vocab)
    cfg = _cfg(beta=0.0)
    term = grpo_e2e_loss(m, snapshot_reference(m), task, cfg, step_generator(5, 0))
    rewards, seq_logp = _manual_rollout(m, task, cfg, 5)
    z = [r - sum(rewards) / len(rewards) for r in rewards]
    w = [math.exp(x) / math.fsum(math.exp(y) for y in z) for x in z]
    expect = -sum(wi * float(lp) for wi, lp in zip(w, seq_logp))
    assert term.rewards == rewards
    assert abs(term.loss.item() - expect) < 1e-4


def test_e2e_kl_does_not_reach_generation_params(vocab, task):
    m = tiny_model(vocab)
    ref = tiny_model(vocab, seed=3)  # a distinct reference so the KL has a gradient
    grads = []
    for beta in (0.0, 50.0):
        term = grpo_e2e_loss(m, ref, task, _cfg(beta=beta), step_generator(5, 0))
        names = m.gen_only_names
        grads.append(torch.autograd.grad(term.loss, [m.params[n] for n in names], allow_unused=True))
    for a, b in zip(*grads):
        assert a is not None and torch.allclose(a, b, atol=1e-6)
    assert term.kl > 0


def test_equal_rewards_give_uniform_nll(vocab, task):
    m = tiny_model(vocab)
    cfg = _cfg(beta=0.2)
    for seed in range(40):
        rewards, seq_logp = _manual_rollout(m, task, cfg, seed)
        if len(set(rewards)) == 1:
            break
    else:
        pytest.skip("no constant-reward group found")
    term = grpo_e2e_loss(m, snapshot_reference(m), task, cfg, step_generator(seed, 0))
    assert term.weights == pytest.approx([1 / 3] * 3, abs=1e-15)
    # the reference equals the model, so the KL term vanishes
    assert abs(term.loss.item() + float(seq_logp.mean())) < 1e-4


def test_e2e_step_reaches_both_branches(vocab, objects):
    m = tiny_model(vocab)
    ref = snapshot_reference(m)
    state = AdamState()
    for i, t in enumerate(make_task_set(vocab, objects, "train", 1, seed=2)):
        res = grpo_step_e2e(m, ref, t, _cfg(), state, step_generator(0, i))
        assert res.grad_norm_gen > 0 and res.grad_norm_mmu > 0


def test_e2e_contract_violation_raises(vocab, task, monkeypatch):
    m = tiny_model(vocab)
    import gridrl.trainer as tr

    # constant one-hot rows cut the path from answers back to generation
    def constant_rows(model, prompts, sample, *args):
        return torch.nn.functional.one_hot(sample.ids - vocab.image_range.start, vocab.image_codebook_size).float()

    monkeypatch.setattr(tr, "replay_rows", constant_rows)
    with pytest.raises(ContractError):
        grpo_step_e2e(m, snapshot_reference(m), task, _cfg(), AdamState(), step_generator(0, 0))


@pytest.mark.parametrize("repr_mode", ["shared", "split"])
def test_split_t2i_leaves_understanding_alone(vocab, task, repr_mode):
    m = tiny_model(vocab, repr_mode=repr_mode)
    before = {n: m.params[n].detach().clone() for n in m.und_only_names}
    gen_before = m.params["gen_head"].detach().clone()
    res = grpo_step_split_t2i(m, snapshot_reference(m), task, _cfg(), AdamState(), step_generator(0, 1))
    assert res.grad_norm_mmu == 0
    assert all(torch.equal(m.params[n].detach(), before[n]) for n in before)
    assert not torch.equal(m.params["gen_head"].detach(), gen_before)


@pytest.mark.parametrize("repr_mode", ["shared", "split"])
def test_split_mmu_leaves_generation_alone(vocab, task, repr_mode):
    m = tiny_model(vocab, repr_mode=repr_mode)
    before = {n: m.params[n].detach().clone() for n in m.gen_only_names}
    head = m.params["mmu_head"].detach().clone()
    res = grpo_step_split_mmu(m, snapshot_reference(m), task, _cfg(), AdamState(), step_generator(0, 1))
    assert res.grad_norm_gen == 0
    assert all(torch.equal(m.params[n].detach(), before[n]) for n in before)
    assert not torch.equal(m.params["mmu_head"].detach(), head)


def test_split_weights_uniform_on_equal_rewards(vocab, task):
    m = tiny_model(vocab, repr_mode="split")
    for seed in range(40):
        res = grpo_step_split_t2i(m.clone(), snapshot_reference(m), task, _cfg(), AdamState(), step_generator(seed, 0))
        if len(set(res.rewards)) == 1:
            assert res.weights == pytest.approx([1 / 3] * 3, abs=1e-15)
            return
    pytest.skip("no constant-reward group found")


def test_split_sft_step_runs(vocab, task):
    m = tiny_model(vocab, repr_mode="split")
    res = split_sft_step(m, task, _cfg(), AdamState(), step_generator(0, 0))
    assert math.isfinite(res.loss) and res.grad_norm_gen > 0


def _displacement(vocab, objects, beta, steps=30):
    m = tiny_model(vocab)
    start = m.params.clone()
    ref = snapshot_reference(m)
    state = AdamState()
    tasks = make_task_set(vocab, objects, "train", 1, seed=3)
    for s in range(steps):
        grpo_step_e2e(m, ref, tasks[s % len(tasks)], _cfg(beta=beta, learning_rate=3e-3), state, step_generator(0, s))
    return math.sqrt(sum(float(((m.params[n] - start[n]) ** 2).sum().detach()) for n in m.params.names()))


def test_large_beta_moves_params_less(vocab, objects):
    assert _displacement(vocab, objects, 100.0) < _displacement(vocab, objects, 0.0)


def test_config_validation():
    with pytest.raises(TrainerError):
        GrpoConfig(group_size=1)
    with pytest.raises(TrainerError):
        GrpoConfig(delta=1.0)
    with pytest.raises(TrainerError):
        GrpoConfig(variant="ppo")
    with pytest.raises(TrainerError):
        RolloutGroup(None, [()], [(), ()], [1.0], 1.0)


def test_pick_task_uniform_categories(vocab, objects):
    by_cat = group_tasks(make_task_set(vocab, objects, "train", 4, seed=0))
    counts = {}
    for step in range(3000):
        c = pick_task(by_cat, 0, step).category
        counts[c] = counts.get(c, 0) + 1
    assert len(counts) == 6 and min(counts.values()) > 400


RECORD_KEYS = {"step", "task_category", "rewards", "r_mean", "weights", "loss", "kl", "grad_norm_gen", "grad_norm_mmu", "seed"}


@pytest.mark.parametrize(
    "method, mode, repr_mode, variant",
    [("grpo", "e2e", "shared", "weighted"), ("grpo", "e2e", "shared", "clip"), ("sft", "e2e", "shared", "weighted"),
     ("grpo", "split", "split", "weighted"), ("grpo", "split", "split", "clip"), ("sft", "split", "split", "weighted")],
)
def test_posttrain_records_and_determinism(vocab, objects, method, mode, repr_mode, variant):
    tasks = make_task_set(vocab, objects, "train", 2, seed=0)
    cfg = _cfg(steps=4, mode=mode, variant=variant, batch_size=2, refresh_every=2)
    runs = []
    for _ in range(2):
        m, recs = posttrain(tiny_model(vocab, repr_mode=repr_mode), tasks, cfg, method, seed=3)
        runs.append((m.params.digest(), recs))
    assert runs[0] == runs[1]
    recs = runs[0][1]
    assert [r["step"] for r in recs] == [0, 1, 2, 3]
    for r in recs:
        assert set(r) == RECORD_KEYS
        if method == "grpo":
            assert len(r["rewards"]) == 2 * cfg.group_size
            assert abs(sum(r["weights"]) - 2) < 1e-9


def test_posttrain_zero_steps_is_identity(vocab, objects):
    m = tiny_model(vocab)
    d = m.params.digest()
    out, recs = posttrain(m, make_task_set(vocab, objects, "train", 1, seed=0), _cfg(steps=0))
    assert out.params.digest() == d and recs == []


def test_posttrain_rejects_e2e_on_split(vocab, objects):
    with pytest.raises(UnsupportedPathError):
        posttrain(tiny_model(vocab, repr_mode="split"), make_task_set(vocab, objects, "train", 1, seed=0), _cfg(steps=1))
    with pytest.raises(TrainerError):
        posttrain(tiny_model(vocab), [], _cfg(steps=1), method="dpo")
