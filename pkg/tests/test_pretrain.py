import dataclasses

import numpy as np
import pytest

from gridrl.model import ModelConfig, UnifiedModel
from gridrl.pretrain import PretrainConfig, learning_rate_at, pretrain
from conftest import TINY

SMALL = PretrainConfig(steps=300, batch_size=8, mmu_batch_size=8, learning_rate=3e-3, warmup_steps=20, bank_per_category=40)


def test_zero_steps_returns_init(vocab, objects):
    cfg = ModelConfig(**TINY)
    m, hist = pretrain(cfg, vocab, objects, dataclasses.replace(SMALL, steps=0))
    assert hist == []
    assert m.params.digest() == UnifiedModel(cfg, vocab, seed=0).params.digest()


def test_loss_window_decreases_and_is_deterministic(vocab, objects):
    cfg = ModelConfig(**TINY)
    m1, h1 = pretrain(cfg, vocab, objects, SMALL)
    m2, h2 = pretrain(cfg, vocab, objects, SMALL)
    assert h1 == h2 and m1.params.digest() == m2.params.digest()
    losses = [r["loss"] for r in h1]
    assert np.mean(losses[-100:]) < np.mean(losses[:100])


def test_learning_rate_schedule():
    cfg = PretrainConfig(steps=1000, learning_rate=1.0, warmup_steps=100)
    assert learning_rate_at(cfg, 0) == pytest.approx(0.01)
    assert learning_rate_at(cfg, 99) == pytest.approx(1.0)
    assert learning_rate_at(cfg, 100) == pytest.approx(1.0)
    assert learning_rate_at(cfg, 999) == pytest.approx(0.05, abs=1e-4)
    flat = dataclasses.replace(cfg, lr_schedule="constant")
    assert learning_rate_at(flat, 700) == 1.0


def test_invalid_skew(vocab, objects):
    bad = dataclasses.replace(SMALL, steps=1, skew_t2i={"position": -1.0})
    with pytest.raises(ValueError):
        pretrain(ModelConfig(**TINY), vocab, objects, bad)
