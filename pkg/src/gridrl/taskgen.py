"""Prompt / question / answer synthesis for the six scene categories."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .vocab import (
    NUMBER_WORDS,
    RELATION_WORDS,
    GridImage,
    TokenSeq,
    Vocabulary,
    encode_text,
    plural,
)


class TaskError(ValueError):
    pass


class Category(str, enum.Enum):
    SINGLE_OBJECT = "single_object"
    TWO_OBJECTS = "two_objects"
    COUNTING = "counting"
    COLORS = "colors"
    POSITION = "position"
    ATTRIBUTE = "attribute"


CATEGORIES = tuple(Category)
COUNT_RANGE = (2, 3, 4)
TWO_OBJECT_CATEGORIES = (Category.TWO_OBJECTS, Category.POSITION, Category.ATTRIBUTE)

QUESTIONS = {
    Category.SINGLE_OBJECT: "what is the main object of the image",
    Category.TWO_OBJECTS: "what are two main objects of the image",
    Category.COUNTING: "how many items in this image",
    Category.COLORS: "what is the color of the object",
    Category.POSITION: "what are two objects and what is position relationship between two main items",
    Category.ATTRIBUTE: "what are two objects and the colors of two objects in the image",
}


@dataclass(frozen=True)
class SceneSpec:
    """Formal scene constraint.

    ``objects`` holds one or two object indices (two-object categories keep
    them in ascending order). ``colors`` is parallel to ``objects``; an entry
    is ``None`` when unconstrained. ``relation`` reads as
    ``objects[0] <relation> objects[1]``.
    """

    category: Category
    objects: tuple
    colors: tuple = ()
    count: Optional[int] = None
    relation: Optional[str] = None

    def __post_init__(self):
        cat = self.category
        n = len(self.objects)
        colors = self.colors or (None,) * n
        object.__setattr__(self, "colors", tuple(colors))
        if len(self.colors) != n:
            raise TaskError("colors must be parallel to objects")
        if cat in (Category.SINGLE_OBJECT, Category.COLORS, Category.COUNTING):
            if n != 1:
                raise TaskError(f"{cat.value} takes exactly one object")
        elif n != 2 or self.objects[0] == self.objects[1]:
            raise TaskError(f"{cat.value} takes two distinct objects")
        if cat is Category.COLORS and self.colors[0] is None:
            raise TaskError("colors spec needs a color")
        if cat is Category.COUNTING and self.count is None:
            raise TaskError("counting spec needs a count")
        if cat is Category.POSITION and self.relation not in RELATION_WORDS:
            raise TaskError(f"position spec needs a relation in {RELATION_WORDS}")
        if cat is Category.ATTRIBUTE and None in self.colors:
            raise TaskError("attribute spec needs both colors")

    def to_dict(self) -> dict:
        return {
            "category": self.category.value,
            "objects": list(self.objects),
            "colors": list(self.colors),
            "count": self.count,
            "relation": self.relation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            Category(d["category"]),
            tuple(d["objects"]),
            tuple(d.get("colors") or ()),
            d.get("count"),
            d.get("relation"),
        )


@dataclass(frozen=True)
class TaskInstance:
    category: Category
    prompt: TokenSeq
    question: TokenSeq
    answer: TokenSeq
    spec: SceneSpec
    keywords: tuple  # tuple of frozensets of token ids
    split: str = "train"
    seed: int = 0

    def to_json(self, v: Vocabulary) -> dict:
        return {
            "category": self.category.value,
            "prompt": " ".join(v.word(i) for i in self.prompt),
            "question": " ".join(v.word(i) for i in self.question),
            "answer": " ".join(v.word(i) for i in self.answer),
            "spec": self.spec.to_dict(),
            "split": self.split,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, d: dict, v: Vocabulary) -> "TaskInstance":
        spec = SceneSpec.from_dict(d["spec"])
        task = build_task(spec, v, split=d["split"], seed=d["seed"])
        if " ".join(v.word(i) for i in task.prompt) != d["prompt"]:
            raise TaskError(f"prompt {d['prompt']!r} does not match its spec")
        return task


@dataclass(frozen=True)
class ObjectSplit:
    train: tuple
    test: tuple

    def pool(self, split: str) -> tuple:
        if split == "train":
            return self.train
        if split == "test":
            return self.test
        raise TaskError(f"unknown split {split!r}")


def _article(next_word: str) -> str:
    return "an" if next_word[0] in "aeiou" else "a"


def _np(word: str) -> list[str]:
    """Noun phrase with an indefinite article."""
    return [_article(word), word]


def task_words(spec: SceneSpec, v: Vocabulary) -> tuple[list[str], list[str], list[list[str]]]:
    """(prompt words, answer words, keyword groups as word lists)."""
    cat = spec.category
    names = [v.object_names[o] for o in spec.objects]
    cols = [None if c is None else v.color_names[c] for c in spec.colors]
    head = ["a", "photo", "of"]
    if cat is Category.SINGLE_OBJECT:
        return head + _np(names[0]), [names[0]], [[names[0], plural(names[0])]]
    if cat is Category.TWO_OBJECTS:
        phrase = _np(names[0]) + ["and"] + _np(names[1])
        return head + phrase, phrase, [[n, plural(n)] for n in names]
    if cat is Category.COUNTING:
        number = NUMBER_WORDS[COUNT_RANGE.index(spec.count)]
        phrase = [number, plural(names[0])]
        return head + phrase, phrase, [[number], [names[0], plural(names[0])]]
    if cat is Category.COLORS:
        return head + _np(cols[0]) + [names[0]], [cols[0]], [[cols[0]]]
    if cat is Category.POSITION:
        prompt = head + _np(names[0]) + [spec.relation] + _np(names[1])
        answer = ["the", names[0], "is", spec.relation] + _np(names[1])
        groups = [[names[0], plural(names[0])], [spec.relation], [names[1], plural(names[1])]]
        return prompt, answer, groups
    # attribute
    prompt = head + _np(cols[0]) + [names[0], "and"] + _np(cols[1]) + [names[1]]
    answer = ["the", names[0], "is", cols[0], "and", "the", names[1], "is", cols[1]]
    groups = [[cols[0]], [names[0], plural(names[0])], [cols[1]], [names[1], plural(names[1])]]
    return prompt, answer, groups


def build_task(spec: SceneSpec, v: Vocabulary, split: str = "train", seed: int = 0) -> TaskInstance:
    prompt, answer, groups = task_words(spec, v)
    keywords = tuple(frozenset(v.word_id(w) for w in g) for g in groups)
    return TaskInstance(
        category=spec.category,
        prompt=encode_text(prompt, v),
        question=encode_text(QUESTIONS[spec.category].split(), v),
        answer=encode_text(answer, v),
        spec=spec,
        keywords=keywords,
        split=split,
        seed=seed,
    )


def split_objects(v: Vocabulary, test_fraction: float, rng: np.random.Generator) -> ObjectSplit:
    if not 0 < test_fraction < 1:
        raise TaskError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n = len(v.object_names)
    n_test = int(round(n * test_fraction))
    if n_test < 2 or n - n_test < 2:
        raise TaskError(
            f"test_fraction {test_fraction} leaves {n - n_test} train / {n_test} test objects; need >= 2 each"
        )
    order = rng.permutation(n)
    return ObjectSplit(tuple(sorted(int(i) for i in order[n_test:])), tuple(sorted(int(i) for i in order[:n_test])))


def sample_spec(rng: np.random.Generator, cat: Category, pool: Sequence[int], n_colors: int) -> SceneSpec:
    cat = Category(cat)
    if len(pool) == 0:
        raise TaskError("empty object pool")
    if cat in TWO_OBJECT_CATEGORIES and len(pool) < 2:
        raise TaskError(f"{cat.value} needs at least two objects in the pool")
    pick = lambda: int(pool[rng.integers(len(pool))])  # noqa: E731
    if cat is Category.SINGLE_OBJECT:
        return SceneSpec(cat, (pick(),))
    if cat is Category.COUNTING:
        return SceneSpec(cat, (pick(),), count=int(COUNT_RANGE[rng.integers(len(COUNT_RANGE))]))
    if cat is Category.COLORS:
        return SceneSpec(cat, (pick(),), (int(rng.integers(n_colors)),))
    a, b = sorted(int(x) for x in rng.choice(np.asarray(pool), size=2, replace=False))
    if cat is Category.TWO_OBJECTS:
        return SceneSpec(cat, (a, b))
    if cat is Category.POSITION:
        return SceneSpec(cat, (a, b), relation=RELATION_WORDS[rng.integers(len(RELATION_WORDS))])
    ca, cb = (int(x) for x in rng.choice(n_colors, size=2, replace=False))
    return SceneSpec(cat, (a, b), (ca, cb))


def sample_task(
    rng: np.random.Generator,
    cat: Category,
    split: str,
    objects: ObjectSplit,
    v: Vocabulary,
    seed: int = 0,
) -> TaskInstance:
    pool = objects.pool(split)
    if not pool:
        raise TaskError(f"object pool for split {split!r} is empty")
    spec = sample_spec(rng, cat, pool, len(v.color_names))
    return build_task(spec, v, split=split, seed=seed)


def render_reference_scene(spec: SceneSpec, side: int, rng: np.random.Generator, n_colors: int) -> GridImage:
    """Sample a scene that satisfies ``spec``.

    Position scenes align the two objects on the relation's axis
    (same column for above/below, same row for left-of/right-of) so that the
    scene has a single describable relation.
    """
    cat = spec.category
    n_cells = side * side
    color = lambda c: int(rng.integers(n_colors)) if c is None else c  # noqa: E731
    if cat is Category.COUNTING:
        if spec.count > n_cells:
            raise TaskError(f"count {spec.count} does not fit a {side}x{side} grid")
        cells = rng.choice(n_cells, size=spec.count, replace=False)
        return GridImage.from_dict(
            side, {divmod(int(p), side): (spec.objects[0], color(None)) for p in cells}
        )
    if cat is Category.POSITION:
        if side < 2:
            raise TaskError("position scenes need a grid side of at least 2")
        lo, hi = sorted(int(x) for x in rng.choice(side, size=2, replace=False))
        other = int(rng.integers(side))
        first_low = spec.relation in ("above", "left-of")
        a_line, b_line = (lo, hi) if first_low else (hi, lo)
        if spec.relation in ("above", "below"):
            pa, pb = (a_line, other), (b_line, other)
        else:
            pa, pb = (other, a_line), (other, b_line)
        return GridImage.from_dict(
            side,
            {pa: (spec.objects[0], color(spec.colors[0])), pb: (spec.objects[1], color(spec.colors[1]))},
        )
    n = len(spec.objects)
    if n > n_cells:
        raise TaskError(f"{n} objects do not fit a {side}x{side} grid")
    cells = rng.choice(n_cells, size=n, replace=False)
    return GridImage.from_dict(
        side,
        {divmod(int(p), side): (o, color(c)) for p, o, c in zip(cells, spec.objects, spec.colors)},
    )


def task_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def make_task_set(
    v: Vocabulary,
    objects: ObjectSplit,
    split: str,
    per_category: int,
    seed: int,
    categories: Sequence[Category] = CATEGORIES,
) -> list[TaskInstance]:
    """Deterministic task list; every task carries its own derived seed."""
    tasks = []
    for ci, cat in enumerate(categories):
        for i in range(per_category):
            task_seed = int(np.random.SeedSequence([seed, CATEGORIES.index(cat), i]).generate_state(1)[0])
            tasks.append(sample_task(task_rng(task_seed), cat, split, objects, v, seed=task_seed))
    return tasks


def reference_image(task: TaskInstance, v: Vocabulary) -> GridImage:
    """The oracle-rendered scene tied to a task's own seed."""
    return render_reference_scene(task.spec, v.grid_side, task_rng(task.seed + 1), len(v.color_names))


def write_jsonl(tasks: Sequence[TaskInstance], v: Vocabulary, path) -> None:
    with open(path, "w") as fh:
        for t in tasks:
            fh.write(json.dumps(t.to_json(v), sort_keys=True) + "\n")


def read_jsonl(path, v: Vocabulary) -> list[TaskInstance]:
    with open(path) as fh:
        return [TaskInstance.from_json(json.loads(line), v) for line in fh if line.strip()]
