"""Fixture builders shared by the test modules."""
from __future__ import annotations

import itertools
import random
from typing import List, Sequence

from trajqa.bench import BenchItem, Fact, QuestionType, ReasoningChain, SubQuestion
from trajqa.chunking import ChunkObservations
from trajqa.core import Observation, StateAtom
from trajqa.metrics import PredictionRecord

VOCAB = ["red", "blue", "tall", "hat", "bag", "dog", "cap", "coat"]


def plain_item(item_id: str, n_subs: int, qtype: str = "state_change", video_id: str = "v") -> BenchItem:
    """Item whose target and sub answers are all "yes"; the chain content is irrelevant for scoring."""
    facts = tuple(Fact(float(i), "p", StateAtom.unary(f"s{i}")) for i in range(n_subs))
    subs = tuple(SubQuestion(f"q{i}?", "yes", i) for i in range(n_subs))
    return BenchItem(item_id, video_id, "target?", "yes", subs, ReasoningChain(facts), QuestionType(qtype))


def pred_for(item: BenchItem, target_ok: bool, subs_ok: int) -> PredictionRecord:
    subs = tuple(
        sq.answer if j < subs_ok else ("no" if sq.answer == "yes" else "yes")
        for j, sq in enumerate(item.sub_questions)
    )
    target = item.target_answer if target_ok else ("no" if item.target_answer == "yes" else "yes")
    return PredictionRecord(item.item_id, target, subs)


def four_item_fixture():
    """Targets 3/4 correct; subs 1/2, 3/3, 3/4 on the correct ones and 1/1 on the wrong one.

    a_target = 3/4, a_sub = 8/10, a_cons = (1/2 + 1 + 3/4) / 3 = 3/4.
    """
    items = [plain_item("i1", 2), plain_item("i2", 3, "action_sequence"),
             plain_item("i3", 4), plain_item("i4", 1)]
    preds = [pred_for(items[0], True, 1), pred_for(items[1], True, 3),
             pred_for(items[2], True, 3), pred_for(items[3], False, 1)]
    return items, preds


def random_chunks(rng: random.Random, n_chunks: int, max_obs: int, chunk_seconds: float = 15.0,
                  box_prob: float = 0.5, empty_prob: float = 0.1) -> List[ChunkObservations]:
    chunks = []
    for c in range(n_chunks):
        obs = []
        for k in range(rng.randint(0, max_obs)):
            attrs = frozenset(rng.sample(VOCAB, rng.randint(0, 3)))
            box = None
            if rng.random() < box_prob:
                x, y = rng.random() * 0.8, rng.random() * 0.8
                box = (x, y, 0.2, 0.2)
            states = {}
            if rng.random() >= empty_prob:
                for _ in range(rng.randint(1, 3)):
                    t = round(c * chunk_seconds + rng.random() * chunk_seconds * 0.999, 3)
                    states[t] = frozenset({StateAtom.unary(rng.choice(["run", "walk", "sit"]))})
            obs.append(Observation(f"o{k}", c, attrs, box, states))
        chunks.append(ChunkObservations(c, obs))
    return chunks


def brute_force_max(weights: Sequence[Sequence[float]]) -> float:
    """Best total over all partial one-to-one assignments (non-positive entries never help)."""
    n, m = len(weights), len(weights[0]) if weights else 0
    if n == 0 or m == 0:
        return 0.0
    best = 0.0
    if n <= m:
        for cols in itertools.permutations(range(m), n):
            best = max(best, sum(max(0.0, weights[i][j]) for i, j in enumerate(cols)))
    else:
        for rows in itertools.permutations(range(n), m):
            best = max(best, sum(max(0.0, weights[i][j]) for j, i in enumerate(rows)))
    return best


def player_chain() -> ReasoningChain:
    return ReasoningChain((
        Fact(3.0, "player_66", StateAtom.unary("wearing_red_shirt")),
        Fact(8.0, "player_66", StateAtom.relation("passes_to", "player_27")),
        Fact(12.0, "player_27", StateAtom.unary("scores_goal")),
    ))


def synthetic_pipeline(cache_root, n_videos=3, seed=0, config=None, summarizer=True):
    """Pipeline over a generated corpus with the world extractor and lookup answerer."""
    from trajqa.aggregation import ConcatSummarizer
    from trajqa.cache import TrajectoryCache
    from trajqa.pipeline import Pipeline, PipelineConfig, VideoRef
    from trajqa.synthetic import LookupAnswerBackend, WorldExtractor, make_corpus

    corpus = make_corpus(n_videos, seed)
    config = config or PipelineConfig()
    pipe = Pipeline(
        config,
        extractor=WorldExtractor(corpus.worlds),
        answerer=LookupAnswerBackend.from_items(corpus.items),
        cache=TrajectoryCache(cache_root),
        summarizer=ConcatSummarizer(config.link) if summarizer else None,
    )
    videos = {vid: VideoRef(vid, w.duration) for vid, w in corpus.worlds.items()}
    return corpus, pipe, videos


def single_frame_solvable(corpus) -> float:
    """Share of items a lookup answerer gets right from the center frame alone, from world truth."""
    from trajqa.bench import question_facts

    ok = 0
    for item in corpus.items:
        world = corpus.worlds[item.video_id]
        visible = {(f.subject, f.atom) for f in corpus.center_visible(world)}
        asked = question_facts(item)
        holds = all((f.subject, f.atom) in visible for f in asked)
        ok += holds == (item.target_answer == "yes")
    return ok / len(corpus.items)
