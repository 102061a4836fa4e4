"""scikit-learn style facade over pretraining, post-training and evaluation."""

from __future__ import annotations

import dataclasses
from typing import Optional, Sequence

import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig
from .metrics import answer_images, eval_t2i, generate_images
from .model import UnifiedModel
from .pretrain import pretrain
from .taskgen import TaskInstance, reference_image
from .trainer import posttrain


class UnifiedPostTrainer(BaseEstimator):
    """Fit = (optional) baseline pretraining followed by self-improving post-training.

    ``X`` is always a sequence of :class:`TaskInstance`; there is no ``y``
    because rewards come from the tasks themselves.

    Parameters
    ----------
    method : "grpo", "sft" or "none" (pretraining only).
    mode : "e2e" or "split"; split requires ``repr_mode="split"``.
    base_model : a pretrained :class:`UnifiedModel`; pretrained from scratch when None.
    config : a :class:`RunConfig` supplying every other setting.
    """

    def __init__(
        self,
        method: str = "grpo",
        mode: str = "e2e",
        steps: Optional[int] = None,
        learning_rate: Optional[float] = None,
        seed: int = 0,
        base_model: Optional[UnifiedModel] = None,
        config: Optional[RunConfig] = None,
    ):
        self.method = method
        self.mode = mode
        self.steps = steps
        self.learning_rate = learning_rate
        self.seed = seed
        self.base_model = base_model
        self.config = config

    def _run_config(self) -> RunConfig:
        return dataclasses.replace(self.config or RunConfig(), seed=self.seed)

    def fit(self, X: Sequence[TaskInstance], y=None):
        cfg = self._run_config()
        if self.method not in ("grpo", "sft", "none"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.base_model is not None:
            model = self.base_model.clone()
        else:
            v = cfg.vocabulary()
            model, self.pretrain_history_ = pretrain(cfg.model, v, cfg.object_split(v), cfg.pretrain)
        self.history_ = []
        if self.method != "none":
            gcfg = cfg.posttrain_config(self.method, self.mode)
            changes = {k: v for k, v in (("steps", self.steps), ("learning_rate", self.learning_rate)) if v is not None}
            gcfg = dataclasses.replace(gcfg, **changes)
            model, self.history_ = posttrain(model, list(X), gcfg, self.method, self.seed)
        self.model_ = model
        return self

    def predict(self, X: Sequence[TaskInstance]) -> list:
        """One generated :class:`GridImage` per task prompt."""
        check_is_fitted(self, "model_")
        gen = torch.Generator().manual_seed(self.seed)
        return generate_images(self.model_, list(X), self._run_config().decode, gen)

    def predict_answers(self, X: Sequence[TaskInstance], images=None) -> list:
        """Greedy answers (global token ids); reference scenes when ``images`` is None."""
        check_is_fitted(self, "model_")
        tasks = list(X)
        if images is None:
            images = [reference_image(t, self.model_.vocab) for t in tasks]
        return answer_images(self.model_, tasks, images, self._run_config().decode)

    def score(self, X: Sequence[TaskInstance], y=None) -> float:
        """Overall T2I oracle accuracy."""
        check_is_fitted(self, "model_")
        gen = torch.Generator().manual_seed(self.seed)
        return eval_t2i(self.model_, list(X), self._run_config().decode, gen)["overall"]
