"""Identity linking of per-chunk observations into global trajectories.

Linking runs in four steps: pairwise similarity scoring, temporal/confidence
filtering, one-to-one conflict resolution, and merging of linked observations.
"""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Protocol, Sequence, Tuple

from .chunking import ChunkObservations
from .core import (
    AtomKind,
    ObsKey,
    Observation,
    StateAtom,
    Trajectory,
    TrajectorySet,
    merge_record,
)
from .matching import greedy_matching, max_weight_matching


class Resolution(str, Enum):
    BIPARTITE = "bipartite"
    GREEDY = "greedy"


@dataclass(frozen=True)
class LinkConfig:
    delta_t_max: float = 15.0
    tau_conf: float = 0.75
    attr_weight: float = 0.7
    spatial_weight: float = 0.3
    resolution: Resolution = Resolution.BIPARTITE

    def __post_init__(self) -> None:
        object.__setattr__(self, "resolution", Resolution(self.resolution))
        if self.delta_t_max <= 0:
            raise ValueError("delta_t_max must be positive")
        if not 0.0 <= self.tau_conf <= 1.0:
            raise ValueError("tau_conf must be in [0, 1]")
        if not (0 <= self.attr_weight <= 1 and 0 <= self.spatial_weight <= 1):
            raise ValueError("weights must be in [0, 1]")
        if not math.isclose(self.attr_weight + self.spatial_weight, 1.0, abs_tol=1e-9):
            raise ValueError("attr_weight + spatial_weight must equal 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolution"] = self.resolution.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "LinkConfig":
        return cls(**dict(d))


@dataclass(frozen=True)
class CandidateLink:
    a: ObsKey
    b: ObsKey
    score: float
    gap: float

    def to_dict(self) -> dict:
        return {"a": list(self.a), "b": list(self.b), "score": self.score, "gap": self.gap}


def jaccard(a: Iterable[str], b: Iterable[str]) -> float:
    a, b = set(a), set(b)
    union = a | b
    return len(a & b) / len(union) if union else 0.0


def similarity(a: Observation, b: Observation, cfg: LinkConfig) -> float:
    """Weighted attribute Jaccard plus spatial closeness of box centers.

    Without a box on both sides the spatial term is dropped and the Jaccard
    index alone is returned. Two empty attribute sets have Jaccard 0.
    """
    j = jaccard(a.attributes, b.attributes)
    if a.spatial_hint is None or b.spatial_hint is None:
        return j
    ax, ay, aw, ah = a.spatial_hint
    bx, by, bw, bh = b.spatial_hint
    dist = math.hypot((ax + aw / 2) - (bx + bw / 2), (ay + ah / 2) - (by + bh / 2))
    spatial = 1.0 - min(1.0, dist / math.sqrt(2.0))
    return min(1.0, max(0.0, cfg.attr_weight * j + cfg.spatial_weight * spatial))


def _candidate_order(c: CandidateLink):
    return (c.a[0], c.gap, -c.score, c.a[1], c.b[0], c.b[1])


def build_candidates(chunks: Sequence[ChunkObservations], cfg: LinkConfig) -> List[CandidateLink]:
    chunks = sorted(chunks, key=lambda c: c.chunk_index)
    out = []
    for i, ca in enumerate(chunks):
        for cb in chunks[i + 1:]:
            if cb.chunk_index <= ca.chunk_index:
                continue
            for a in ca.observations:
                if a.last_seen is None:
                    continue
                for b in cb.observations:
                    if b.first_seen is None:
                        continue
                    gap = round(b.first_seen - a.last_seen, 3)
                    if gap >= cfg.delta_t_max:
                        continue
                    score = similarity(a, b, cfg)
                    if score > cfg.tau_conf:
                        out.append(CandidateLink(a.key, b.key, score, gap))
    out.sort(key=_candidate_order)
    return out


def resolve(candidates: Sequence[CandidateLink], cfg: LinkConfig) -> List[CandidateLink]:
    """Pick a one-to-one subset of candidate links.

    Bipartite mode handles chunk pairs nearest-first (by chunk distance) and
    solves a maximum-total-score assignment over observations that are still
    free on the relevant side. Greedy mode walks the candidate order.
    """
    if cfg.resolution is Resolution.GREEDY:
        chosen = greedy_matching((c.a, c.b, c) for c in sorted(candidates, key=_candidate_order))
        return sorted((e[2] for e in chosen), key=_candidate_order)

    groups: Dict[Tuple[int, int], List[CandidateLink]] = defaultdict(list)
    for c in candidates:
        groups[(c.a[0], c.b[0])].append(c)
    has_succ: set = set()
    has_pred: set = set()
    accepted = []
    for ca, cb in sorted(groups, key=lambda p: (p[1] - p[0], p[0], p[1])):
        eligible = {
            (c.a, c.b): c for c in groups[(ca, cb)] if c.a not in has_succ and c.b not in has_pred
        }
        for a, b, _ in max_weight_matching([(a, b, c.score) for (a, b), c in eligible.items()]):
            has_succ.add(a)
            has_pred.add(b)
            accepted.append(eligible[(a, b)])
    return sorted(accepted, key=_candidate_order)


def link_observations(chunks: Sequence[ChunkObservations], cfg: LinkConfig) -> List[CandidateLink]:
    return resolve(build_candidates(chunks, cfg), cfg)


def links_to_json(links: Sequence[CandidateLink]) -> str:
    return json.dumps([c.to_dict() for c in links], indent=2)


def _components(keys: Sequence[ObsKey], links: Sequence[CandidateLink]) -> List[List[ObsKey]]:
    parent = {k: k for k in keys}

    def find(k):
        while parent[k] != k:
            parent[k] = parent[parent[k]]
            k = parent[k]
        return k

    for c in links:
        ra, rb = find(c.a), find(c.b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    groups: Dict[ObsKey, List[ObsKey]] = defaultdict(list)
    for k in keys:
        groups[find(k)].append(k)
    return [sorted(g) for g in groups.values()]


def build_trajectories(
    chunks: Sequence[ChunkObservations],
    links: Sequence[CandidateLink],
    video_id: str = "",
    provenance: str = "",
) -> TrajectorySet:
    """Merge each linked component into one trajectory named after its earliest observation."""
    obs: Dict[ObsKey, Observation] = {}
    for chunk in chunks:
        for o in chunk.observations:
            obs[o.key] = o

    def earliest(key: ObsKey):
        o = obs[key]
        first = o.first_seen if o.first_seen is not None else math.inf
        return (o.chunk_index, first, o.local_id)

    components = [sorted(c, key=earliest) for c in _components(sorted(obs), links)]
    components.sort(key=lambda c: earliest(c[0]))

    names: Dict[ObsKey, str] = {}
    taken: set = set()
    for comp in components:
        base = obs[comp[0]].local_id
        name, k = base, 2
        while name in taken:
            name, k = f"{base}_{k}", k + 1
        taken.add(name)
        for key in comp:
            names[key] = name

    def remap(atom: StateAtom, chunk_index: int) -> StateAtom:
        if atom.kind is AtomKind.RELATION:
            target = names.get((chunk_index, atom.object2))
            if target is not None and target != atom.object2:
                return StateAtom.relation(atom.predicate, target)
        return atom

    trajectories = {}
    for comp in components:
        name = names[comp[0]]
        traj = Trajectory(name, source_observations=tuple(comp),
                          attributes=frozenset().union(*(obs[k].attributes for k in comp)))
        for key in comp:
            o = obs[key]
            for t, states in o.states.items():
                traj = merge_record(traj, t, (remap(a, o.chunk_index) for a in states))
        trajectories[name] = traj
    return TrajectorySet(video_id, dict(sorted(trajectories.items())), provenance)


def aggregate(
    chunks: Sequence[ChunkObservations],
    cfg: LinkConfig,
    video_id: str = "",
    provenance: str = "",
    identity_linking: bool = True,
) -> TrajectorySet:
    links = link_observations(chunks, cfg) if identity_linking else []
    return build_trajectories(chunks, links, video_id, provenance)


class Summarizer(Protocol):
    def summarize(self, video_id: str, chunks: Sequence[ChunkObservations]) -> str: ...


def summarize_aggregate(
    chunks: Sequence[ChunkObservations],
    summarizer: Summarizer,
    video_id: str = "",
    provenance: str = "",
) -> TrajectorySet:
    """Aggregate by asking a model to summarize the raw observations.

    The free-text reply is parsed as a structured trajectory block. Parsed
    objects are grounded to the observations whose local id matches; objects
    with no such observation are dropped, and observations the reply omits
    become state-less trajectories so every observation is still accounted for.
    """
    from .retrieval import parse_trajectory_block

    text = summarizer.summarize(video_id, chunks)
    parsed = parse_trajectory_block(text)
    by_local: Dict[str, List[ObsKey]] = defaultdict(list)
    attrs: Dict[ObsKey, frozenset] = {}
    for chunk in chunks:
        for o in chunk.observations:
            by_local[o.local_id].append(o.key)
            attrs[o.key] = o.attributes
    trajectories: Dict[str, Trajectory] = {}
    claimed: set = set()
    for oid, records in sorted(parsed.items()):
        sources = tuple(sorted(k for k in by_local.get(oid, ()) if k not in claimed))
        if not sources:
            continue
        claimed.update(sources)
        traj = Trajectory(oid, source_observations=sources,
                          attributes=frozenset().union(*(attrs[k] for k in sources)))
        for t, atoms in records:
            traj = merge_record(traj, t, atoms)
        trajectories[oid] = traj
    for key in sorted(attrs):
        if key in claimed:
            continue
        name, k = key[1], 2
        while name in trajectories:
            name, k = f"{key[1]}_{k}", k + 1
        trajectories[name] = Trajectory(name, source_observations=(key,), attributes=attrs[key])
    return TrajectorySet(video_id, dict(sorted(trajectories.items())), provenance)


class ConcatSummarizer:
    """Summarizer stand-in that links deterministically and renders the result."""

    def __init__(self, cfg: Optional[LinkConfig] = None):
        self.cfg = cfg or LinkConfig()

    def summarize(self, video_id, chunks):
        from .retrieval import AnswerConfig, render_trajectories

        return render_trajectories(aggregate(chunks, self.cfg, video_id), AnswerConfig())


class ScriptedSummarizer:
    """Replays recorded summaries keyed by video id."""

    def __init__(self, responses: Mapping[str, str]):
        self.responses = dict(responses)

    def summarize(self, video_id, chunks):
        return self.responses.get(video_id, "")


class RemoteSummarizer:
    """POSTs ``{model, video_id, chunks}`` and takes the response body as the summary."""

    def __init__(self, endpoint: str, model: str = "", api_key: Optional[str] = None,
                 timeout: float = 300.0, client=None):
        import httpx

        self.endpoint = endpoint
        self.model = model
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.client = client or httpx.Client(timeout=timeout, headers=headers)

    def summarize(self, video_id, chunks):
        from .errors import BackendError

        payload = {"model": self.model, "video_id": video_id, "chunks": [c.to_dict() for c in chunks]}
        try:
            resp = self.client.post(self.endpoint, json=payload)
            resp.raise_for_status()
        except Exception as exc:
            raise BackendError(f"summarizer request failed: {exc}") from exc
        return resp.text
