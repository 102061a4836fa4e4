"""Exact scene checker and canonical describer (detector stand-in)."""

from __future__ import annotations

from .taskgen import COUNT_RANGE, Category, SceneSpec, TaskError, build_task
from .vocab import GridImage, TokenSeq, Vocabulary


class DescribeError(ValueError):
    pass


def _relation_holds(relation: str, a: tuple, b: tuple) -> bool:
    (ra, ca), (rb, cb) = a, b
    if relation == "above":
        return ra < rb
    if relation == "below":
        return ra > rb
    if relation == "left-of":
        return ca < cb
    if relation == "right-of":
        return ca > cb
    raise ValueError(f"unknown relation {relation!r}")


def check_image(spec: SceneSpec, img: GridImage) -> bool:
    """Whether ``img`` satisfies ``spec`` exactly (no extra objects tolerated)."""
    filled = img.filled()
    cat = spec.category
    if cat is Category.COUNTING:
        return len(filled) == spec.count and all(o == spec.objects[0] for _, _, o, _ in filled)
    if cat in (Category.SINGLE_OBJECT, Category.COLORS):
        if len(filled) != 1 or filled[0][2] != spec.objects[0]:
            return False
        return cat is Category.SINGLE_OBJECT or filled[0][3] == spec.colors[0]
    # two-object categories
    if len(filled) != 2:
        return False
    by_obj = {o: (r, c, col) for r, c, o, col in filled}
    if set(by_obj) != set(spec.objects) or len(by_obj) != 2:
        return False
    a, b = (by_obj[o] for o in spec.objects)
    if cat is Category.POSITION:
        return _relation_holds(spec.relation, a[:2], b[:2])
    if cat is Category.ATTRIBUTE:
        return a[2] == spec.colors[0] and b[2] == spec.colors[1]
    return True


def scene_spec_of(img: GridImage, cat: Category) -> SceneSpec:
    """Recover the unique spec of ``cat`` that describes ``img``."""
    cat = Category(cat)
    filled = img.filled()
    if cat is Category.COUNTING:
        objs = {o for _, _, o, _ in filled}
        if len(objs) != 1 or len(filled) not in COUNT_RANGE:
            raise DescribeError(f"counting scene needs 2-4 cells of one object, got {len(filled)} cells")
        return SceneSpec(cat, (objs.pop(),), count=len(filled))
    if cat in (Category.SINGLE_OBJECT, Category.COLORS):
        if len(filled) != 1:
            raise DescribeError(f"{cat.value} scene needs exactly one object, got {len(filled)}")
        _, _, o, col = filled[0]
        return SceneSpec(cat, (o,), (col,) if cat is Category.COLORS else ())
    if len(filled) != 2 or filled[0][2] == filled[1][2]:
        raise DescribeError(f"{cat.value} scene needs two distinct objects")
    first, second = sorted(filled, key=lambda cell: cell[2])
    objects = (first[2], second[2])
    if cat is Category.TWO_OBJECTS:
        return SceneSpec(cat, objects)
    if cat is Category.ATTRIBUTE:
        return SceneSpec(cat, objects, (first[3], second[3]))
    (ra, ca), (rb, cb) = first[:2], second[:2]
    if ca == cb:
        relation = "above" if ra < rb else "below"
    elif ra == rb:
        relation = "left-of" if ca < cb else "right-of"
    else:
        raise DescribeError("position scene is diagonal; relation is ambiguous")
    return SceneSpec(cat, objects, relation=relation)


def describe_image(img: GridImage, cat: Category, v: Vocabulary) -> TokenSeq:
    """Canonical answer tokens for ``img`` read as a ``cat`` scene."""
    try:
        spec = scene_spec_of(img, cat)
    except TaskError as exc:
        raise DescribeError(str(exc)) from exc
    return build_task(spec, v).answer

