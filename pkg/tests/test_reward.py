import numpy as np

from gridrl.reward import MAX_SCORE, answer_correct, rule_for, rule_for_spec, score_answer
from gridrl.taskgen import CATEGORIES, Category, SceneSpec, build_task, make_task_set
from gridrl.vocab import encode_text


def _o(v, name):
    return v.object_names.index(name)


def _c(v, name):
    return v.color_names.index(name)


def test_attribute_four(vocab):
    spec = SceneSpec(Category.ATTRIBUTE, (_o(vocab, "chair"), _o(vocab, "umbrella")), (_c(vocab, "blue"), _c(vocab, "red")))
    rule = rule_for_spec(spec, vocab)
    assert score_answer(rule, encode_text("blue chair red umbrella".split(), vocab)) == 4


def test_single_object_bench(vocab):
    rule = rule_for_spec(SceneSpec(Category.SINGLE_OBJECT, (_o(vocab, "bench"),)), vocab)
    assert score_answer(rule, encode_text(["bench"], vocab)) == 1
    assert score_answer(rule, encode_text(["table"], vocab)) == 0


def test_counting_three_vases(vocab):
    rule = rule_for_spec(SceneSpec(Category.COUNTING, (_o(vocab, "vase"),), count=3), vocab)
    assert score_answer(rule, encode_text(["three", "vase"], vocab)) == 2


def test_position_wrong_relation(vocab):
    spec = SceneSpec(Category.POSITION, (_o(vocab, "elephant"), _o(vocab, "train")), relation="below")
    rule = rule_for_spec(spec, vocab)
    assert rule.max_score == 3
    assert score_answer(rule, encode_text("the train is above an elephant".split(), vocab)) == 2
    assert score_answer(rule, encode_text("the elephant is below a train".split(), vocab)) == 3


def test_order_insensitive_and_duplicates(vocab):
    rule = rule_for_spec(SceneSpec(Category.TWO_OBJECTS, (0, 1)), vocab)
    a, b = vocab.object_names[0], vocab.object_names[1]
    assert score_answer(rule, encode_text([b, a], vocab)) == 2
    assert score_answer(rule, encode_text([a, a, a], vocab)) == 1


def test_max_scores(vocab, objects):
    for t in make_task_set(vocab, objects, "train", 2, seed=0):
        assert rule_for(t).max_score == MAX_SCORE[t.category]
        assert score_answer(rule_for(t), t.answer.ids) == MAX_SCORE[t.category]


def test_answer_correct_cross_check(vocab, objects):
    rng = np.random.default_rng(0)
    tasks = make_task_set(vocab, objects, "train", 10, seed=5)
    text = list(vocab.text_range)
    for i in range(1000):
        t = tasks[i % len(tasks)]
        rule = rule_for(t)
        answer = [int(x) for x in rng.choice(text, size=int(rng.integers(0, 8)))]
        if rng.random() < 0.3:
            answer += list(t.answer.ids)
        assert answer_correct(rule, answer) == (score_answer(rule, answer) == rule.max_score)


def test_one_missing_keyword(vocab):
    t = build_task(SceneSpec(Category.COUNTING, (2,), count=4), vocab)
    assert answer_correct(rule_for(t), t.answer.ids)
    assert not answer_correct(rule_for(t), t.answer.ids[1:])
    assert set(MAX_SCORE) == set(CATEGORIES)
