"""Reward rule tests, including an exhaustive subset-law check."""

from itertools import chain, combinations

import pytest

from cdpo.microworld import simulate
from cdpo.policy import TOK_ANS_CLOSE, TOK_ANS_OPEN, TOK_COMMA, TOK_EOS, TOK_THINK
from cdpo.qgen import Event
from cdpo.rewards import RewardWeights, format_reward, soft_accuracy, total_reward
from tests.test_qgen import make_question, make_world  # reuse helpers

A, B, C = 2, 3, 4  # letter token ids


def chain_world():
    world = make_world([(0.0, 1.0), (4.0, 0.0), (8.0, 0.0)], horizon=20, arena=40.0)
    return world, simulate(world)


def powerset(items):
    items = list(items)
    return chain.from_iterable(combinations(items, r) for r in range(len(items) + 1))


def test_format_reward_gates_on_grammar():
    assert format_reward((TOK_ANS_OPEN, A, TOK_ANS_CLOSE, TOK_EOS)) == 1.0
    assert format_reward((TOK_THINK, TOK_ANS_OPEN, A, TOK_COMMA, B, TOK_ANS_CLOSE, TOK_EOS)) == 1.0
    assert format_reward((TOK_ANS_OPEN, A, TOK_ANS_CLOSE)) == 0.0
    assert format_reward((A, B, C)) == 0.0
    assert format_reward(()) == 0.0


def test_soft_accuracy_examples():
    gold = frozenset("ABC")
    assert soft_accuracy(frozenset("A"), gold) == pytest.approx(1 / 3)
    assert soft_accuracy(frozenset("AB"), gold) == pytest.approx(2 / 3)
    assert soft_accuracy(frozenset("ABC"), gold) == 1.0
    assert soft_accuracy(frozenset("ABD"), gold) == 0.0  # any wrong letter zeroes
    assert soft_accuracy(frozenset("D"), gold) == 0.0
    assert soft_accuracy(frozenset(), gold) == 0.0
    assert soft_accuracy(None, gold) == 0.0


def test_soft_accuracy_rejects_empty_gold():
    with pytest.raises(ValueError):
        soft_accuracy(frozenset("A"), frozenset())


def test_soft_accuracy_subset_law_exhaustive():
    # over every (gold, prediction) pair drawn from five letters:
    # non-empty subsets score |P|/|G|, everything else scores zero
    letters = "ABCDE"
    for gold_tuple in powerset(letters):
        if not gold_tuple:
            continue
        gold = frozenset(gold_tuple)
        for pred_tuple in powerset(letters):
            pred = frozenset(pred_tuple)
            got = soft_accuracy(pred, gold)
            if pred and pred <= gold:
                assert got == pytest.approx(len(pred) / len(gold))
            else:
                assert got == 0.0


def test_total_reward_combines_terms():
    world, log = chain_world()
    # removing the kicker empties the log; negated question, both options correct
    q = make_question(world, log, removed=0, negated=True, events=[Event.of(0, 1), Event.of(1, 2)])
    assert q.answer_set == frozenset("AB")

    full = total_reward((TOK_ANS_OPEN, A, TOK_COMMA, B, TOK_ANS_CLOSE, TOK_EOS), q)
    assert full.format == 1.0
    assert full.accuracy == 1.0
    assert full.total == pytest.approx(1.5)
    assert full.parsed == frozenset("AB")

    half = total_reward((TOK_ANS_OPEN, A, TOK_ANS_CLOSE, TOK_EOS), q)
    assert half.accuracy == pytest.approx(0.5)
    assert half.total == pytest.approx(1.0)

    # well-formed but wrong: format point only
    q2 = make_question(world, log, removed=1, negated=False, events=[Event.of(0, 2), Event.of(0, 1)])
    assert q2.answer_set == frozenset("A")
    wrong = total_reward((TOK_ANS_OPEN, B, TOK_ANS_CLOSE, TOK_EOS), q2)
    assert wrong.accuracy == 0.0
    assert wrong.total == pytest.approx(0.5)

    broken = total_reward((TOK_THINK, TOK_THINK), q)
    assert broken.total == 0.0
    assert broken.parsed is None


def test_total_reward_custom_weights():
    world, log = chain_world()
    q = make_question(world, log, removed=0, negated=True, events=[Event.of(0, 1), Event.of(1, 2)])
    weights = RewardWeights(accuracy=2.0, format=0.25)
    r = total_reward((TOK_ANS_OPEN, A, TOK_ANS_CLOSE, TOK_EOS), q, weights)
    assert r.total == pytest.approx(2.0 * 0.5 + 0.25)
