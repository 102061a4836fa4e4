"""Keyword reward: one point per keyword group present in the answer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from .taskgen import Category, SceneSpec, TaskInstance, build_task
from .vocab import Vocabulary

MAX_SCORE = {
    Category.SINGLE_OBJECT: 1,
    Category.TWO_OBJECTS: 2,
    Category.COUNTING: 2,
    Category.COLORS: 1,
    Category.POSITION: 3,
    Category.ATTRIBUTE: 4,
}


@dataclass(frozen=True)
class RewardRule:
    category: Category
    keyword_groups: tuple

    @property
    def max_score(self) -> int:
        return len(self.keyword_groups)


def rule_for(task: TaskInstance) -> RewardRule:
    return RewardRule(task.category, tuple(task.keywords))


def rule_for_spec(spec: SceneSpec, v: Vocabulary) -> RewardRule:
    return rule_for(build_task(spec, v))


def score_answer(rule: RewardRule, answer: Iterable[int]) -> int:
    present = set(answer)
    return sum(1 for group in rule.keyword_groups if group & present)


def answer_correct(rule: RewardRule, answer: Iterable[int]) -> bool:
    return score_answer(rule, answer) == rule.max_score
