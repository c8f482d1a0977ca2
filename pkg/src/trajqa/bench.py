"""Benchmark item tooling: facts, reasoning chains, templated questions, agreement."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, replace
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .core import AtomKind, StateAtom, normalize_token, timestamp
from .errors import DegenerateAgreementError, MissingTemplateError, SchemaError, ValidationError


@dataclass(frozen=True)
class Fact:
    t: float
    subject: str
    atom: StateAtom

    def __post_init__(self) -> None:
        object.__setattr__(self, "t", timestamp(self.t))
        object.__setattr__(self, "subject", normalize_token(self.subject))

    @property
    def entities(self) -> frozenset:
        return frozenset(e for e in (self.subject, self.atom.object2) if e is not None)

    def sort_key(self):
        return (self.t, self.subject, self.atom.sort_key())

    def to_dict(self) -> dict:
        return {"t": self.t, "subject": self.subject, "atom": self.atom.to_dict()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Fact":
        return cls(d["t"], d["subject"], StateAtom.from_dict(d["atom"]))


@dataclass(frozen=True)
class ReasoningChain:
    facts: Tuple[Fact, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "facts", tuple(self.facts))

    def __len__(self) -> int:
        return len(self.facts)

    def to_dict(self) -> dict:
        return {"facts": [f.to_dict() for f in self.facts]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ReasoningChain":
        return cls(tuple(Fact.from_dict(f) for f in d["facts"]))


MIN_CHAIN_LENGTH = 2


def validate_chain(chain: ReasoningChain) -> List[str]:
    """Names of violated constraints, empty when the chain is valid.

    Possible names: ``length``, ``monotonicity``, ``interaction``, ``connectivity``.
    """
    facts = chain.facts
    violations = []
    if len(facts) < MIN_CHAIN_LENGTH:
        violations.append("length")
    if any(b.t < a.t for a, b in zip(facts, facts[1:])):
        violations.append("monotonicity")
    if not any(f.atom.kind is AtomKind.RELATION for f in facts):
        violations.append("interaction")
    if any(not (a.entities & b.entities) for a, b in zip(facts, facts[1:])):
        violations.append("connectivity")
    return violations


def enumerate_chains(facts: Iterable[Fact], max_len: int) -> List[ReasoningChain]:
    """Every valid chain of 2..max_len distinct facts.

    Output is ordered by length, then by the positions of the facts in the
    canonical (time, subject, atom) ordering.
    """
    if max_len < MIN_CHAIN_LENGTH:
        raise ValueError("max_len must be >= 2")
    pool = sorted(set(facts), key=Fact.sort_key)
    found: List[Tuple[int, ...]] = []

    def extend(path: List[int], has_rel: bool) -> None:
        if len(path) >= MIN_CHAIN_LENGTH and has_rel:
            found.append(tuple(path))
        if len(path) == max_len:
            return
        last = pool[path[-1]]
        for j, f in enumerate(pool):
            if j in path or f.t < last.t or not (f.entities & last.entities):
                continue
            path.append(j)
            extend(path, has_rel or f.atom.kind is AtomKind.RELATION)
            path.pop()

    for i, f in enumerate(pool):
        extend([i], f.atom.kind is AtomKind.RELATION)
    found.sort(key=lambda p: (len(p), p))
    return [ReasoningChain(tuple(pool[i] for i in p)) for p in found]


class QuestionType(str, Enum):
    STATE_CHANGE = "state_change"
    IDENTITY_TRACKING = "identity_tracking"
    ACTION_SEQUENCE = "action_sequence"
    MULTI_OBJECT_INTERACTION = "multi_object_interaction"


class ReviewStatus(str, Enum):
    PENDING = "pending"
    APPROVED = "approved"
    DISCARDED = "discarded"


ERROR_TAGS = ("object_hallucination", "state_misattribution", "temporal_order_error")


@dataclass(frozen=True)
class SubQuestion:
    text: str
    answer: str
    fact_index: int
    error_tag: Optional[str] = None

    def __post_init__(self) -> None:
        if self.error_tag is not None and self.error_tag not in ERROR_TAGS:
            raise ValueError(f"unknown error tag {self.error_tag!r}")

    def to_dict(self) -> dict:
        d = {"text": self.text, "answer": self.answer, "fact_index": self.fact_index}
        if self.error_tag is not None:
            d["error_tag"] = self.error_tag
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SubQuestion":
        return cls(d["text"], d["answer"], int(d["fact_index"]), d.get("error_tag"))


@dataclass(frozen=True)
class BenchItem:
    item_id: str
    video_id: str
    target_question: str
    target_answer: str
    sub_questions: Tuple[SubQuestion, ...]
    chain: ReasoningChain
    question_type: QuestionType = QuestionType.MULTI_OBJECT_INTERACTION
    review_status: ReviewStatus = ReviewStatus.PENDING
    negated_fact: Optional[int] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "sub_questions", tuple(self.sub_questions))
        object.__setattr__(self, "question_type", QuestionType(self.question_type))
        object.__setattr__(self, "review_status", ReviewStatus(self.review_status))
        probed = sorted(s.fact_index for s in self.sub_questions)
        if probed != list(range(len(self.chain))):
            raise ValueError(
                f"item {self.item_id}: sub-questions must probe each chain fact exactly once, got {probed}"
            )

    def to_dict(self) -> dict:
        d = {
            "item_id": self.item_id,
            "video_id": self.video_id,
            "target_question": self.target_question,
            "target_answer": self.target_answer,
            "sub_questions": [s.to_dict() for s in self.sub_questions],
            "chain": self.chain.to_dict(),
            "question_type": self.question_type.value,
            "review_status": self.review_status.value,
        }
        if self.negated_fact is not None:
            d["negated_fact"] = self.negated_fact
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "BenchItem":
        return cls(
            item_id=str(d["item_id"]),
            video_id=str(d["video_id"]),
            target_question=d["target_question"],
            target_answer=d["target_answer"],
            sub_questions=tuple(SubQuestion.from_dict(s) for s in d["sub_questions"]),
            chain=ReasoningChain.from_dict(d["chain"]),
            question_type=d.get("question_type", QuestionType.MULTI_OBJECT_INTERACTION.value),
            review_status=d.get("review_status", ReviewStatus.PENDING.value),
            negated_fact=d.get("negated_fact"),
        )


# -- question rendering -------------------------------------------------------

Templates = Mapping[str, Mapping[str, str]]


def load_templates(path: str | Path) -> Dict[str, Dict[str, str]]:
    raw = json.loads(Path(path).read_text())
    out = {}
    for pred, forms in raw.items():
        if not {"declarative", "interrogative"} <= set(forms):
            raise SchemaError(f"template for {pred!r} needs declarative and interrogative forms", path=str(path))
        out[normalize_token(pred)] = dict(forms)
    return out


def entity_words(oid: str) -> str:
    return oid.replace("_", " ")


def _template(templates: Templates, predicate: str) -> Mapping[str, str]:
    try:
        return templates[predicate]
    except KeyError:
        raise MissingTemplateError(predicate) from None


def _fill(form: str, fact: Fact) -> str:
    obj = entity_words(fact.atom.object2) if fact.atom.object2 else ""
    return form.format(subject=entity_words(fact.subject), object=obj)


def flip_fact(fact: Fact, chain: ReasoningChain) -> Fact:
    """Counterfactual variant of ``fact`` used for hard negatives.

    Relations swap their direction; unary states move to another entity of the chain.
    """
    if fact.atom.kind is AtomKind.RELATION:
        if fact.subject == fact.atom.object2:
            raise ValueError("cannot flip a self-relation")
        flipped = Fact(fact.t, fact.atom.object2, StateAtom.relation(fact.atom.predicate, fact.subject))
    else:
        others = sorted(set().union(*(f.entities for f in chain.facts)) - {fact.subject})
        if not others:
            raise ValueError("no other entity in the chain to move the state to")
        flipped = Fact(fact.t, others[0], fact.atom)
    if flipped in chain.facts:
        raise ValueError(f"flipped fact {flipped} already holds in the chain")
    return flipped


def question_facts(item: BenchItem) -> List[Fact]:
    """Facts as asserted by the item's questions (with the negated one flipped)."""
    facts = list(item.chain.facts)
    if item.negated_fact is not None:
        facts[item.negated_fact] = flip_fact(facts[item.negated_fact], item.chain)
    return facts


def render_item(
    chain: ReasoningChain,
    templates: Templates,
    item_id: str = "",
    video_id: str = "",
    negate: Optional[int] = None,
    question_type: QuestionType = QuestionType.MULTI_OBJECT_INTERACTION,
) -> BenchItem:
    """Template a yes/no target question plus one sub-question per chain fact."""
    problems = validate_chain(chain)
    if problems:
        raise ValidationError(f"invalid chain: {', '.join(problems)}")
    for f in chain.facts:
        _template(templates, f.atom.predicate)
    asked = list(chain.facts)
    if negate is not None:
        if not 0 <= negate < len(asked):
            raise IndexError(f"negate index {negate} out of range")
        asked[negate] = flip_fact(asked[negate], chain)

    clauses = [_fill(_template(templates, f.atom.predicate)["declarative"], f) for f in asked]
    body = clauses[0]
    for prev, fact, clause in zip(asked, asked[1:], clauses[1:]):
        body += (" and " if fact.t == prev.t else ", and then ") + clause
    target = f"Is it true that {body}?"

    subs = tuple(
        SubQuestion(
            _fill(_template(templates, f.atom.predicate)["interrogative"], f),
            "no" if i == negate else "yes",
            i,
        )
        for i, f in enumerate(asked)
    )
    return BenchItem(
        item_id=item_id,
        video_id=video_id,
        target_question=target,
        target_answer="no" if negate is not None else "yes",
        sub_questions=subs,
        chain=chain,
        question_type=question_type,
        negated_fact=negate,
    )


# -- agreement and statistics ------------------------------------------------

@dataclass(frozen=True)
class AgreementSample:
    rater_a: str
    rater_b: str


def cohen_kappa(samples: Sequence[AgreementSample]) -> float:
    if not samples:
        raise ValueError("need at least one sample")
    n = len(samples)
    p_o = Fraction(sum(s.rater_a == s.rater_b for s in samples), n)
    ca = Counter(s.rater_a for s in samples)
    cb = Counter(s.rater_b for s in samples)
    p_e = sum((Fraction(ca[c], n) * Fraction(cb[c], n) for c in ca.keys() | cb.keys()), Fraction(0))
    if p_e == 1:
        raise DegenerateAgreementError("chance agreement is 1; kappa undefined")
    if p_o == 1:
        return 1.0
    return float((p_o - p_e) / (1 - p_e))


def dataset_stats(items: Sequence[BenchItem]) -> dict:
    n_subs = sum(len(i.sub_questions) for i in items)
    by_type = Counter(i.question_type.value for i in items)
    return {
        "videos": len({i.video_id for i in items}),
        "targets": len(items),
        "sub_questions": n_subs,
        "mean_sub_per_target": n_subs / len(items) if items else 0.0,
        "by_question_type": {qt.value: by_type.get(qt.value, 0) for qt in QuestionType},
    }


# -- corpus files ------------------------------------------------------------

def load_corpus(path: str | Path, official: bool = False) -> List[BenchItem]:
    """Read a JSON-lines corpus.

    Discarded items are always skipped. With ``official`` set, any item still
    pending review is an error.
    """
    items = []
    seen: set = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                item = BenchItem.from_dict(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise SchemaError(str(exc) or type(exc).__name__, line=lineno, path=str(path)) from exc
            if item.item_id in seen:
                raise SchemaError(f"duplicate item_id {item.item_id!r}", line=lineno, path=str(path))
            seen.add(item.item_id)
            if item.review_status is ReviewStatus.DISCARDED:
                continue
            if official and item.review_status is not ReviewStatus.APPROVED:
                raise SchemaError(f"item {item.item_id!r} not approved for official runs", line=lineno, path=str(path))
            items.append(item)
    return items


def save_corpus(items: Iterable[BenchItem], path: str | Path) -> None:
    with open(path, "w") as fh:
        for item in items:
            fh.write(json.dumps(item.to_dict(), sort_keys=True) + "\n")


def approve(item: BenchItem) -> BenchItem:
    return replace(item, review_status=ReviewStatus.APPROVED)


def target_qid(item: BenchItem) -> str:
    return item.item_id


def sub_qid(item: BenchItem, j: int) -> str:
    return f"{item.item_id}#sub{j}"
