"""Synthetic worlds for offline end-to-end runs.

A world is a ground-truth fact list per video. :class:`WorldExtractor` reports
exactly the facts visible from the sampled frames, and
:class:`LookupAnswerBackend` answers a question by searching the rendered
trajectory block for the clauses the question asserts. Together they give a
pipeline whose only source of error is what the sampling and linking stages
lose.
"""
from __future__ import annotations

import bisect
import json
import random
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from .bench import (
    BenchItem,
    Fact,
    QuestionType,
    ReasoningChain,
    SubQuestion,
    approve,
    flip_fact,
    question_facts,
    render_item,
    save_corpus,
    sub_qid,
    target_qid,
    validate_chain,
)
from .core import Observation, StateAtom, timestamp
from .retrieval import parse_trajectory_block


@dataclass(frozen=True)
class WorldObject:
    attributes: Tuple[str, ...]
    box: Optional[Tuple[float, float, float, float]] = None

    def to_dict(self) -> dict:
        return {"attributes": list(self.attributes), "box": list(self.box) if self.box else None}

    @classmethod
    def from_dict(cls, d: Mapping) -> "WorldObject":
        return cls(tuple(d.get("attributes", ())), tuple(d["box"]) if d.get("box") else None)


@dataclass
class World:
    video_id: str
    duration: float
    objects: Dict[str, WorldObject]
    facts: List[Fact]
    visibility: float = 0.5  # seconds a fact stays visible around its timestamp

    def to_dict(self) -> dict:
        return {
            "video_id": self.video_id,
            "duration": self.duration,
            "visibility": self.visibility,
            "objects": {k: v.to_dict() for k, v in sorted(self.objects.items())},
            "facts": [f.to_dict() for f in sorted(self.facts, key=Fact.sort_key)],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "World":
        return cls(
            d["video_id"],
            float(d["duration"]),
            {k: WorldObject.from_dict(v) for k, v in d["objects"].items()},
            [Fact.from_dict(f) for f in d["facts"]],
            float(d.get("visibility", 0.5)),
        )


class WorldExtractor:
    """Fact-faithful extractor over ground-truth worlds.

    Every object is reported in every chunk with records at the first and last
    sampled frame. A fact is reported at the sampled frame nearest to it when
    that frame lies within the world's visibility window.
    """

    single_flight = False

    def __init__(self, worlds: Mapping[str, World]):
        self.worlds = dict(worlds)
        self.calls = 0
        self._lock = threading.Lock()

    @classmethod
    def from_dir(cls, directory: str | Path) -> "WorldExtractor":
        worlds = [World.from_dict(json.loads(p.read_text())) for p in sorted(Path(directory).glob("*.json"))]
        return cls({w.video_id: w for w in worlds})

    def extract(self, video_id, chunk, timestamps, frames):
        with self._lock:
            self.calls += 1
        world = self.worlds[video_id]
        times = sorted(timestamps)
        out = []
        for oid, obj in sorted(world.objects.items()):
            states: Dict[float, set] = {times[0]: set(), times[-1]: set()}
            for fact in world.facts:
                if fact.subject != oid or not chunk.start <= fact.t < chunk.end:
                    continue
                s = nearest(times, fact.t)
                if abs(s - fact.t) <= world.visibility + 1e-9:
                    states.setdefault(s, set()).add(fact.atom)
            out.append(Observation(oid, chunk.index, frozenset(obj.attributes), obj.box,
                                   {t: frozenset(a) for t, a in states.items()}))
        return out


def nearest(times: Sequence[float], t: float) -> float:
    i = bisect.bisect_left(times, t)
    cands = times[max(0, i - 1): i + 1]
    return min(cands, key=lambda s: (abs(s - t), s))


def clauses_hold(block: str, clauses: Sequence[Fact]) -> bool:
    """True when every clause appears on its subject's trajectory, in nondecreasing time."""
    parsed = parse_trajectory_block(block)
    t_prev = float("-inf")
    for clause in clauses:
        times = sorted(
            t for t, atoms in parsed.get(clause.subject, ()) if clause.atom in atoms and t >= t_prev
        )
        if not times:
            return False
        t_prev = times[0]
    return True


class LookupAnswerBackend:
    """Answers yes/no questions by looking their clauses up in the trajectory block."""

    def __init__(self, clauses: Mapping[str, Sequence[Fact]]):
        self.clauses = {k: list(v) for k, v in clauses.items()}
        self.calls = 0

    @classmethod
    def from_items(cls, items: Sequence[BenchItem]) -> "LookupAnswerBackend":
        table: Dict[str, List[Fact]] = {}
        for item in items:
            asked = question_facts(item)
            table[target_qid(item)] = asked
            for j, sq in enumerate(item.sub_questions):
                table[sub_qid(item, j)] = [asked[sq.fact_index]]
        return cls(table)

    def answer(self, request: dict) -> str:
        self.calls += 1
        clauses = self.clauses[request["question_id"]]
        return "Yes." if clauses_hold(request.get("trajectory_block", ""), clauses) else "No."


# -- corpus generation ------------------------------------------------------

TEMPLATES: Dict[str, Dict[str, str]] = {
    "wearing_red_shirt": {"declarative": "{subject} wears a red shirt",
                          "interrogative": "Does {subject} wear a red shirt?"},
    "scores_goal": {"declarative": "{subject} scores a goal", "interrogative": "Does {subject} score a goal?"},
    "falls_down": {"declarative": "{subject} falls down", "interrogative": "Does {subject} fall down?"},
    "raises_hand": {"declarative": "{subject} raises a hand", "interrogative": "Does {subject} raise a hand?"},
    "sits_down": {"declarative": "{subject} sits down", "interrogative": "Does {subject} sit down?"},
    "opens_door": {"declarative": "{subject} opens the door", "interrogative": "Does {subject} open the door?"},
    "passes_to": {"declarative": "{subject} passes the ball to {object}",
                  "interrogative": "Does {subject} pass the ball to {object}?"},
    "talks_to": {"declarative": "{subject} talks to {object}", "interrogative": "Does {subject} talk to {object}?"},
    "follows": {"declarative": "{subject} follows {object}", "interrogative": "Does {subject} follow {object}?"},
    "hands_bag_to": {"declarative": "{subject} hands a bag to {object}",
                     "interrogative": "Does {subject} hand a bag to {object}?"},
}
UNARY = ["wearing_red_shirt", "scores_goal", "falls_down", "raises_hand", "sits_down", "opens_door"]
RELATIONS = ["passes_to", "talks_to", "follows", "hands_bag_to"]

ENTITIES = {
    "player_66": ("number_66", "striped_socks"),
    "player_27": ("number_27", "white_headband"),
    "referee": ("black_uniform", "whistle"),
    "goalkeeper": ("yellow_gloves", "green_jersey"),
    "man_in_hat": ("straw_hat", "grey_beard"),
    "woman_with_umbrella": ("blue_umbrella", "long_coat"),
}


@dataclass
class SyntheticCorpus:
    worlds: Dict[str, World]
    items: List[BenchItem]
    templates: Dict[str, Dict[str, str]] = field(default_factory=lambda: dict(TEMPLATES))

    def center_visible(self, world: World) -> List[Fact]:
        center = timestamp(world.duration / 2)
        return [f for f in world.facts if abs(f.t - center) <= world.visibility]


def _make_chain(rng: random.Random, entities: List[str], times: List[float]) -> ReasoningChain:
    """A connected chain with one relation, over the given nondecreasing times."""
    rel_at = rng.randrange(len(times))
    facts = []
    current = rng.choice(entities)
    for k, t in enumerate(times):
        if k == rel_at:
            other = rng.choice([e for e in entities if e != current])
            facts.append(Fact(t, current, StateAtom.relation(rng.choice(RELATIONS), other)))
            current = rng.choice([current, other])
        else:
            facts.append(Fact(t, current, StateAtom.unary(rng.choice(UNARY))))
    return ReasoningChain(tuple(facts))


def _question_type(chain: ReasoningChain) -> QuestionType:
    subjects = {f.subject for f in chain.facts}
    span = chain.facts[-1].t - chain.facts[0].t
    if span > 30:
        return QuestionType.IDENTITY_TRACKING
    if len(subjects) > 1:
        return QuestionType.MULTI_OBJECT_INTERACTION
    unary = [f for f in chain.facts if f.atom.kind.value == "unary"]
    return QuestionType.STATE_CHANGE if len(unary) > 1 else QuestionType.ACTION_SEQUENCE


def _error_tags(item: BenchItem) -> BenchItem:
    tags = []
    seen = set()
    for sq in item.sub_questions:
        f = item.chain.facts[sq.fact_index]
        if f.subject not in seen:
            tag = "object_hallucination"
        elif f.atom.kind.value == "relation":
            tag = "temporal_order_error"
        else:
            tag = "state_misattribution"
        seen.add(f.subject)
        tags.append(SubQuestion(sq.text, sq.answer, sq.fact_index, tag))
    return BenchItem(item.item_id, item.video_id, item.target_question, item.target_answer, tuple(tags),
                     item.chain, item.question_type, item.review_status, item.negated_fact)


def make_corpus(n_videos: int = 10, seed: int = 0, items_per_video: int = 4) -> SyntheticCorpus:
    """Generate worlds and approved items.

    Per video, the first item's facts sit within the visibility window of the
    center frame (solvable from that frame alone); the others are spread over
    the timeline away from the center; the last one is a flipped negative.
    """
    rng = random.Random(seed)
    worlds: Dict[str, World] = {}
    items: List[BenchItem] = []
    names = sorted(ENTITIES)
    for v in range(n_videos):
        vid = f"vid{v:02d}"
        duration = float(rng.randrange(60, 181))
        center = timestamp(duration / 2)
        ents = sorted(rng.sample(names, rng.choice([3, 4])))
        objects = {}
        for k, e in enumerate(ents):
            objects[e] = WorldObject(ENTITIES[e], (0.05 + 0.22 * k, 0.3 + 0.1 * (k % 2), 0.15, 0.4))
        world = World(vid, duration, objects, [])
        chains: List[ReasoningChain] = []
        for q in range(items_per_video):
            k = rng.choice([2, 3, 4])
            if q == 0:
                times = sorted(timestamp(center + rng.uniform(-0.4, 0.4)) for _ in range(k))
            else:
                times = []
                while len(times) < k:
                    t = timestamp(rng.uniform(0.5, duration - 0.5))
                    if abs(t - center) > 3 * world.visibility:
                        times.append(t)
                times.sort()
            chain = _make_chain(rng, ents, times)
            while len(set(chain.facts)) < len(chain):
                chain = _make_chain(rng, ents, times)
            assert not validate_chain(chain), validate_chain(chain)
            chains.append(chain)
            world.facts.extend(f for f in chain.facts if f not in world.facts)
        truth = {(f.subject, f.atom) for f in world.facts}
        for q, chain in enumerate(chains):
            negate = None
            if q == items_per_video - 1:
                for i in range(len(chain)):
                    try:
                        flipped = flip_fact(chain.facts[i], chain)
                    except ValueError:
                        continue
                    if (flipped.subject, flipped.atom) not in truth:
                        negate = i
                        break
            item = render_item(chain, TEMPLATES, f"{vid}-q{q}", vid, negate, _question_type(chain))
            items.append(approve(_error_tags(item)))
        worlds[vid] = world
    return SyntheticCorpus(worlds, items)


def write_corpus(corpus: SyntheticCorpus, out_dir: str | Path) -> Dict[str, Path]:
    """Write worlds, manifest, corpus, templates and a ready-to-run config under ``out_dir``."""
    out = Path(out_dir)
    (out / "worlds").mkdir(parents=True, exist_ok=True)
    manifest = []
    for vid, world in sorted(corpus.worlds.items()):
        p = out / "worlds" / f"{vid}.json"
        p.write_text(json.dumps(world.to_dict(), indent=2, sort_keys=True))
        manifest.append({"video_id": vid, "duration": world.duration, "path": f"worlds/{vid}.json"})
    (out / "videos.json").write_text(json.dumps(manifest, indent=2))
    save_corpus(corpus.items, out / "corpus.jsonl")
    (out / "templates.json").write_text(json.dumps(corpus.templates, indent=2, sort_keys=True))
    config = {
        "extractor": {"kind": "world", "dir": "worlds"},
        "answerer": {"kind": "lookup"},
        "summarizer": {"kind": "concat"},
        "frames": {"kind": "symbolic"},
        "cache_dir": "cache",
    }
    (out / "config.json").write_text(json.dumps(config, indent=2))
    return {k: out / n for k, n in [("videos", "videos.json"), ("corpus", "corpus.jsonl"),
                                    ("templates", "templates.json"), ("config", "config.json")]}
