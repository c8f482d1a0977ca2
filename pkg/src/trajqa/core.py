"""Object-centric data model: state atoms, observations, trajectories.

Timestamps are plain floats in seconds, rounded to millisecond resolution by
:func:`timestamp`. Object ids and predicates are normalized text tokens.
"""
from __future__ import annotations

import bisect
import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Tuple

_SPLIT = re.compile(r"[\W_]+")

Box = Tuple[float, float, float, float]
ObsKey = Tuple[int, str]


class EmptyTokenError(ValueError):
    pass


def normalize_token(raw: str) -> str:
    """Lowercase ``raw`` and collapse runs of whitespace/punctuation to ``_``."""
    token = _SPLIT.sub("_", str(raw).strip().lower()).strip("_")
    if not token:
        raise EmptyTokenError(f"cannot normalize blank token {raw!r}")
    return token


def timestamp(seconds: float) -> float:
    seconds = round(float(seconds), 3)
    if seconds < 0:
        raise ValueError(f"timestamp must be non-negative, got {seconds}")
    return seconds + 0.0  # drops -0.0


class AtomKind(str, Enum):
    UNARY = "unary"
    RELATION = "relation"


@dataclass(frozen=True, order=True)
class StateAtom:
    kind: AtomKind
    predicate: str
    object2: Optional[str] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", AtomKind(self.kind))
        object.__setattr__(self, "predicate", normalize_token(self.predicate))
        if self.object2 is not None:
            object.__setattr__(self, "object2", normalize_token(self.object2))
        if (self.kind is AtomKind.RELATION) != (self.object2 is not None):
            raise ValueError("object2 must be present iff kind is relation")

    @classmethod
    def unary(cls, predicate: str) -> "StateAtom":
        return cls(AtomKind.UNARY, predicate)

    @classmethod
    def relation(cls, predicate: str, object2: str) -> "StateAtom":
        return cls(AtomKind.RELATION, predicate, object2)

    def sort_key(self) -> Tuple[str, str, str]:
        return (self.kind.value, self.predicate, self.object2 or "")

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "predicate": self.predicate, "object2": self.object2}

    @classmethod
    def from_dict(cls, d: Mapping) -> "StateAtom":
        return cls(AtomKind(d["kind"]), d["predicate"], d.get("object2"))


def _atoms_to_list(atoms: Iterable[StateAtom]) -> List[dict]:
    return [a.to_dict() for a in sorted(atoms, key=StateAtom.sort_key)]


def _ts_key(t: float) -> str:
    return f"{t:.3f}"


@dataclass(frozen=True)
class Observation:
    """One object instance seen inside one chunk."""

    local_id: str
    chunk_index: int
    attributes: FrozenSet[str] = frozenset()
    spatial_hint: Optional[Box] = None
    states: Mapping[float, FrozenSet[StateAtom]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "local_id", normalize_token(self.local_id))
        if self.chunk_index < 0:
            raise ValueError("chunk_index must be >= 0")
        object.__setattr__(self, "attributes", frozenset(normalize_token(a) for a in self.attributes))
        if self.spatial_hint is not None:
            box = tuple(float(v) for v in self.spatial_hint)
            if len(box) != 4 or not all(0.0 <= v <= 1.0 for v in box):
                raise ValueError(f"spatial_hint must be 4 values in [0,1], got {self.spatial_hint}")
            object.__setattr__(self, "spatial_hint", box)
        states = {timestamp(t): frozenset(s) for t, s in self.states.items()}
        object.__setattr__(self, "states", dict(sorted(states.items())))

    @property
    def key(self) -> ObsKey:
        return (self.chunk_index, self.local_id)

    @property
    def first_seen(self) -> Optional[float]:
        return next(iter(self.states), None)

    @property
    def last_seen(self) -> Optional[float]:
        return next(reversed(self.states), None) if self.states else None

    def to_dict(self) -> dict:
        return {
            "local_id": self.local_id,
            "chunk_index": self.chunk_index,
            "attributes": sorted(self.attributes),
            "spatial_hint": list(self.spatial_hint) if self.spatial_hint is not None else None,
            "states": {_ts_key(t): _atoms_to_list(s) for t, s in self.states.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Observation":
        return cls(
            local_id=d["local_id"],
            chunk_index=int(d["chunk_index"]),
            attributes=frozenset(d.get("attributes") or ()),
            spatial_hint=tuple(d["spatial_hint"]) if d.get("spatial_hint") is not None else None,
            states={
                float(t): frozenset(StateAtom.from_dict(a) for a in atoms)
                for t, atoms in (d.get("states") or {}).items()
            },
        )


Record = Tuple[float, FrozenSet[StateAtom]]


@dataclass(frozen=True)
class Trajectory:
    """Time-sorted state sequence of one persistent object.

    ``attributes`` carries the union of visual descriptors of the linked
    observations so downstream retrieval can score against them.
    """

    object: str
    records: Tuple[Record, ...] = ()
    source_observations: Tuple[ObsKey, ...] = ()
    attributes: FrozenSet[str] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "object", normalize_token(self.object))
        times = [t for t, _ in self.records]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("trajectory records must be strictly sorted by timestamp")
        if len(set(self.source_observations)) != len(self.source_observations):
            raise ValueError("duplicate source observations")

    @property
    def timestamps(self) -> List[float]:
        return [t for t, _ in self.records]

    def to_dict(self) -> dict:
        return {
            "object": self.object,
            "attributes": sorted(self.attributes),
            "records": [{"seconds": t, "states": _atoms_to_list(s)} for t, s in self.records],
            "source_observations": [[c, lid] for c, lid in self.source_observations],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Trajectory":
        return cls(
            object=d["object"],
            records=tuple(
                (timestamp(r["seconds"]), frozenset(StateAtom.from_dict(a) for a in r["states"]))
                for r in d.get("records", ())
            ),
            source_observations=tuple((int(c), str(lid)) for c, lid in d.get("source_observations", ())),
            attributes=frozenset(d.get("attributes") or ()),
        )


def state_at(traj: Trajectory, t: float) -> FrozenSet[StateAtom]:
    """States of the latest record at or before ``t`` (carried forward)."""
    times = traj.timestamps
    i = bisect.bisect_right(times, timestamp(t))
    if i == 0:
        return frozenset()
    return traj.records[i - 1][1]


def merge_record(traj: Trajectory, t: float, states: Iterable[StateAtom]) -> Trajectory:
    t = timestamp(t)
    states = frozenset(states)
    records = list(traj.records)
    times = [r[0] for r in records]
    i = bisect.bisect_left(times, t)
    if i < len(records) and records[i][0] == t:
        records[i] = (t, records[i][1] | states)
    else:
        records.insert(i, (t, states))
    return replace(traj, records=tuple(records))


@dataclass(frozen=True)
class TrajectorySet:
    video_id: str
    trajectories: Dict[str, Trajectory] = field(default_factory=dict)
    provenance: str = ""

    def __post_init__(self) -> None:
        for oid, traj in self.trajectories.items():
            if oid != traj.object:
                raise ValueError(f"trajectory key {oid!r} does not match object {traj.object!r}")
        seen: set = set()
        for traj in self.trajectories.values():
            for key in traj.source_observations:
                if key in seen:
                    raise ValueError(f"observation {key} referenced by two trajectories")
                seen.add(key)

    def __len__(self) -> int:
        return len(self.trajectories)

    def subset(self, object_ids: Iterable[str]) -> "TrajectorySet":
        keep = {oid: self.trajectories[oid] for oid in sorted(set(object_ids))}
        return TrajectorySet(self.video_id, keep, self.provenance)

    def to_dict(self) -> dict:
        return {
            "video_id": self.video_id,
            "provenance": self.provenance,
            "trajectories": {oid: self.trajectories[oid].to_dict() for oid in sorted(self.trajectories)},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrajectorySet":
        return cls(
            video_id=d["video_id"],
            trajectories={oid: Trajectory.from_dict(t) for oid, t in d.get("trajectories", {}).items()},
            provenance=d.get("provenance", ""),
        )

    @classmethod
    def from_json(cls, text: str) -> "TrajectorySet":
        return cls.from_dict(json.loads(text))
