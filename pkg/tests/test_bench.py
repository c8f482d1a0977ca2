import itertools
import json
import random

import pytest
from hypothesis import given, settings, strategies as st

from helpers import plain_item, player_chain
from trajqa.bench import (
    AgreementSample,
    Fact,
    ReasoningChain,
    ReviewStatus,
    approve,
    cohen_kappa,
    dataset_stats,
    enumerate_chains,
    flip_fact,
    load_corpus,
    load_templates,
    render_item,
    save_corpus,
    validate_chain,
)
from trajqa.core import StateAtom
from trajqa.errors import DegenerateAgreementError, MissingTemplateError, SchemaError, ValidationError
from trajqa.synthetic import TEMPLATES


def test_player_chain_is_valid():
    assert validate_chain(player_chain()) == []


def test_chain_violations():
    f = player_chain().facts
    assert validate_chain(ReasoningChain(f[:1])) == ["length", "interaction"]
    late, early = Fact(5, "a", StateAtom.relation("talks_to", "b")), Fact(3, "b", StateAtom.unary("sits"))
    assert validate_chain(ReasoningChain((late, early))) == ["monotonicity"]
    unary = (Fact(1, "a", StateAtom.unary("x")), Fact(2, "a", StateAtom.unary("y")))
    assert validate_chain(ReasoningChain(unary)) == ["interaction"]
    apart = (f[1], Fact(9, "referee", StateAtom.unary("whistles")))
    assert validate_chain(ReasoningChain(apart)) == ["connectivity"]


def test_enumerate_examples():
    assert enumerate_chains([], 3) == []
    chains = enumerate_chains(player_chain().facts, 3)
    assert player_chain() in chains
    assert all(not validate_chain(c) for c in chains)


def _random_facts(rng, n):
    ents = ["a", "b", "c"]
    facts = set()
    while len(facts) < n:
        s = rng.choice(ents)
        if rng.random() < 0.4:
            o = rng.choice([e for e in ents if e != s])
            atom = StateAtom.relation(rng.choice(["talks_to", "follows"]), o)
        else:
            atom = StateAtom.unary(rng.choice(["sits", "runs"]))
        facts.add(Fact(rng.choice([1, 2, 3, 4]), s, atom))
    return sorted(facts, key=Fact.sort_key)


def exhaustive_chains(facts, max_len):
    out = []
    for k in range(2, max_len + 1):
        for perm in itertools.permutations(facts, k):
            chain = ReasoningChain(perm)
            if not validate_chain(chain):
                out.append(chain)
    return out


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 6), st.integers(2, 4))
def test_enumerate_matches_exhaustive(seed, n, max_len):
    facts = _random_facts(random.Random(seed), n)
    got = enumerate_chains(facts, max_len)
    assert sorted(got, key=repr) == sorted(exhaustive_chains(facts, max_len), key=repr)
    assert len(set(got)) == len(got)


def test_render_player_chain():
    item = render_item(player_chain(), TEMPLATES, "i", "v")
    assert item.target_question == ("Is it true that player 66 wears a red shirt, and then player 66 passes "
                                     "the ball to player 27, and then player 27 scores a goal?")
    assert [s.text for s in item.sub_questions] == [
        "Does player 66 wear a red shirt?",
        "Does player 66 pass the ball to player 27?",
        "Does player 27 score a goal?",
    ]
    assert item.target_answer == "yes"
    assert [s.answer for s in item.sub_questions] == ["yes"] * 3


def test_render_joins_simultaneous_facts_with_and():
    f = player_chain().facts
    chain = ReasoningChain((Fact(8, "player_66", StateAtom.unary("wearing_red_shirt")), f[1], f[2]))
    assert render_item(chain, TEMPLATES).target_question.startswith(
        "Is it true that player 66 wears a red shirt and player 66 passes")


def test_negation_flips_second_fact():
    item = render_item(player_chain(), TEMPLATES, negate=1)
    assert item.target_answer == "no"
    assert [s.answer for s in item.sub_questions] == ["yes", "no", "yes"]
    assert item.sub_questions[1].text == "Does player 27 pass the ball to player 66?"
    assert item.negated_fact == 1


def test_flip_unary_moves_to_other_entity():
    f = player_chain().facts
    assert flip_fact(f[2], player_chain()).subject == "player_66"


def test_render_errors():
    with pytest.raises(MissingTemplateError):
        render_item(player_chain(), {})
    with pytest.raises(ValidationError):
        render_item(ReasoningChain(player_chain().facts[:1]), TEMPLATES)


def test_sub_question_count_equals_chain_length():
    rng = random.Random(1)
    templates = {p: {"declarative": "{subject} %s {object}" % p, "interrogative": "{subject} %s?" % p}
                 for p in ["talks_to", "follows", "sits", "runs"]}
    for _ in range(50):
        for chain in enumerate_chains(_random_facts(rng, 5), 4)[:5]:
            assert len(render_item(chain, templates).sub_questions) == len(chain)


def _kappa(a, b):
    return cohen_kappa([AgreementSample(x, y) for x, y in zip(a, b)])


def test_kappa_examples():
    assert _kappa("xyxy", "xyxy") == 1.0
    assert _kappa("xxyy", "xyxy") == 0.0
    assert _kappa("xxxy", "xxyy") == 0.5
    with pytest.raises(DegenerateAgreementError):
        _kappa("xxxx", "xxxx")


@given(st.lists(st.tuples(st.sampled_from("abc"), st.sampled_from("abc")), min_size=1, max_size=30))
def test_kappa_symmetric_and_relabel_invariant(pairs):
    a, b = [p[0] for p in pairs], [p[1] for p in pairs]
    try:
        k = _kappa(a, b)
    except DegenerateAgreementError:
        return
    assert -1.0 <= k <= 1.0
    assert _kappa(b, a) == k
    relabel = {"a": "z", "b": "a", "c": "q"}
    assert _kappa([relabel[x] for x in a], [relabel[x] for x in b]) == k


def test_dataset_stats():
    empty = dataset_stats([])
    assert empty["targets"] == 0 and empty["mean_sub_per_target"] == 0.0
    stats = dataset_stats([plain_item("a", 3), plain_item("b", 4, "action_sequence", "w")])
    assert stats["mean_sub_per_target"] == 3.5
    assert stats["videos"] == 2 and stats["sub_questions"] == 7
    assert stats["by_question_type"]["action_sequence"] == 1


def test_corpus_roundtrip_and_review(tmp_path):
    items = [approve(plain_item("a", 2)), plain_item("b", 3)]
    path = tmp_path / "c.jsonl"
    save_corpus(items, path)
    assert load_corpus(path) == items
    with pytest.raises(SchemaError) as err:
        load_corpus(path, official=True)
    assert err.value.line == 2
    discarded = items[1].__class__(**{**items[1].__dict__, "review_status": ReviewStatus.DISCARDED})
    save_corpus([items[0], discarded], path)
    assert load_corpus(path, official=True) == [items[0]]


def test_corpus_schema_errors_carry_line_numbers(tmp_path):
    path = tmp_path / "c.jsonl"
    good = json.dumps(plain_item("a", 2).to_dict())
    path.write_text(good + "\n\n{\"item_id\": \"x\"}\n")
    with pytest.raises(SchemaError) as err:
        load_corpus(path)
    assert err.value.line == 3
    path.write_text(good + "\n" + good + "\n")
    with pytest.raises(SchemaError, match="duplicate"):
        load_corpus(path)


def test_load_templates(tmp_path):
    p = tmp_path / "t.json"
    p.write_text(json.dumps({"Scores Goal": {"declarative": "d", "interrogative": "i"}}))
    assert "scores_goal" in load_templates(p)
    p.write_text(json.dumps({"x": {"declarative": "d"}}))
    with pytest.raises(SchemaError):
        load_templates(p)
