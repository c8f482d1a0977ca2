"""Query-time stages: trajectory retrieval, rendering and answer generation."""
from __future__ import annotations

import json
import random
import re
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Protocol, Sequence, Tuple

from .chunking import FrameSampleSpec, sample_timestamps
from .core import AtomKind, EmptyTokenError, StateAtom, TrajectorySet, normalize_token, timestamp
from .errors import AnswerBackendError, BackendError
from .frames import FrameProvider, frame_refs

UNPARSEABLE = "unparseable"


class AnswerForm(str, Enum):
    YES_NO = "yes_no"
    MULTIPLE_CHOICE = "multiple_choice"
    FREE_TEXT = "free_text"


@dataclass(frozen=True)
class Query:
    question_id: str
    text: str
    choices: Optional[Tuple[str, ...]] = None
    expected_form: AnswerForm = AnswerForm.YES_NO

    def __post_init__(self) -> None:
        object.__setattr__(self, "expected_form", AnswerForm(self.expected_form))
        if self.choices is not None:
            object.__setattr__(self, "choices", tuple(self.choices))
        if (self.choices is not None) != (self.expected_form is AnswerForm.MULTIPLE_CHOICE):
            raise ValueError("choices must be given iff expected_form is multiple_choice")


class RetrievalMode(str, Enum):
    SCORED = "scored"
    NONE = "none"
    RANDOM_TOPK = "random_topk"


@dataclass(frozen=True)
class RetrievalConfig:
    mode: RetrievalMode = RetrievalMode.SCORED
    top_k: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", RetrievalMode(self.mode))
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")

    def to_dict(self) -> dict:
        return {"mode": self.mode.value, "top_k": self.top_k, "seed": self.seed}


class Modality(str, Enum):
    TEXT_AND_FRAMES = "text_and_frames"
    TEXT_ONLY = "text_only"
    FRAMES_ONLY = "frames_only"


class TrajectoryOrder(str, Enum):
    SORTED = "sorted"
    SHUFFLED = "shuffled"


class StateFormat(str, Enum):
    STRUCTURED = "structured"
    PROSE = "prose"
    CAPTION = "caption"


@dataclass(frozen=True)
class AnswerConfig:
    frames_at_answerer: int = 64
    modality: Modality = Modality.TEXT_AND_FRAMES
    trajectory_order: TrajectoryOrder = TrajectoryOrder.SORTED
    seed: int = 0
    state_format: StateFormat = StateFormat.STRUCTURED
    token_budget: Optional[int] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "modality", Modality(self.modality))
        object.__setattr__(self, "trajectory_order", TrajectoryOrder(self.trajectory_order))
        object.__setattr__(self, "state_format", StateFormat(self.state_format))
        if self.frames_at_answerer < 0:
            raise ValueError("frames_at_answerer must be >= 0")
        if (self.frames_at_answerer == 0) != (self.modality is Modality.TEXT_ONLY):
            raise ValueError("frames_at_answerer must be 0 exactly when modality is text_only")
        if self.token_budget is not None and self.token_budget < 1:
            raise ValueError("token_budget must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("modality", "trajectory_order", "state_format"):
            d[k] = d[k].value
        return d


def _tokens(text: str) -> set:
    try:
        return set(normalize_token(text).split("_"))
    except EmptyTokenError:
        return set()


def relevance(traj, query_tokens: set) -> int:
    vocab = set(traj.object.split("_"))
    for a in traj.attributes:
        vocab.update(a.split("_"))
    for _, atoms in traj.records:
        for atom in atoms:
            vocab.update(atom.predicate.split("_"))
    return len(vocab & query_tokens)


def retrieve(traj_set: TrajectorySet, q: Query, cfg: RetrievalConfig) -> TrajectorySet:
    if cfg.mode is RetrievalMode.NONE:
        return traj_set
    ids = sorted(traj_set.trajectories)
    if cfg.mode is RetrievalMode.RANDOM_TOPK:
        keep = random.Random(cfg.seed).sample(ids, min(cfg.top_k, len(ids)))
        return traj_set.subset(keep)
    qt = _tokens(q.text)
    ranked = sorted(ids, key=lambda oid: (-relevance(traj_set.trajectories[oid], qt), oid))
    return traj_set.subset(ranked[: cfg.top_k])


def _atom_text(atom: StateAtom) -> str:
    if atom.kind is AtomKind.RELATION:
        return f"{atom.predicate} → {atom.object2}"
    return atom.predicate


def _ordered_records(traj, cfg: AnswerConfig):
    records = [(t, atoms) for t, atoms in traj.records if atoms]
    if cfg.trajectory_order is TrajectoryOrder.SHUFFLED:
        random.Random(f"{cfg.seed}:{traj.object}").shuffle(records)
    return records


def _words(token: str) -> str:
    return token.replace("_", " ")


def render_trajectories(s_q: TrajectorySet, cfg: AnswerConfig) -> str:
    """Serialize trajectories into the text block handed to the answer backend."""
    lines = [f"# trajectories: {len(s_q)}"]
    if cfg.state_format is StateFormat.CAPTION:
        timeline: Dict[float, List[str]] = defaultdict(list)
        for oid in sorted(s_q.trajectories):
            for t, atoms in _ordered_records(s_q.trajectories[oid], cfg):
                for atom in sorted(atoms, key=StateAtom.sort_key):
                    timeline[t].append(f"{_words(oid)} {_words(_atom_text(atom))}")
        times = list(timeline)
        if cfg.trajectory_order is TrajectoryOrder.SORTED:
            times.sort()
        for t in times:
            lines.append(f"[{t:.3f} s] " + "; ".join(timeline[t]) + ".")
        return "\n".join(lines)
    for oid in sorted(s_q.trajectories):
        traj = s_q.trajectories[oid]
        if cfg.state_format is StateFormat.PROSE:
            parts = [
                f"at {t:.3f} s it is {_words(_atom_text(a))}"
                for t, atoms in _ordered_records(traj, cfg)
                for a in sorted(atoms, key=StateAtom.sort_key)
            ]
            desc = f" ({', '.join(_words(a) for a in sorted(traj.attributes))})" if traj.attributes else ""
            lines.append(f"{_words(oid)}{desc}: " + ("; ".join(parts) if parts else "no observed states") + ".")
            continue
        lines.append(f"object: {oid}")
        if traj.attributes:
            lines.append(f"  attributes: {', '.join(sorted(traj.attributes))}")
        for t, atoms in _ordered_records(traj, cfg):
            for atom in sorted(atoms, key=StateAtom.sort_key):
                lines.append(f"  t={t:.3f}: {_atom_text(atom)}")
    return "\n".join(lines)


_OBJECT_LINE = re.compile(r"^\s*object:\s*(\S+)\s*$")
_RECORD_LINE = re.compile(r"^\s*t=([0-9.]+):\s*([^\s→]+)(?:\s*→\s*(\S+))?\s*$")


def parse_trajectory_block(text: str) -> Dict[str, List[Tuple[float, List[StateAtom]]]]:
    """Inverse of the structured rendering; lines that do not parse are skipped."""
    out: Dict[str, List[Tuple[float, List[StateAtom]]]] = {}
    current = None
    for line in text.splitlines():
        m = _OBJECT_LINE.match(line)
        if m:
            try:
                current = normalize_token(m.group(1))
            except EmptyTokenError:
                current = None
                continue
            out.setdefault(current, [])
            continue
        m = _RECORD_LINE.match(line)
        if m and current is not None:
            try:
                t = timestamp(float(m.group(1)))
                atom = (StateAtom.relation(m.group(2), m.group(3)) if m.group(3)
                        else StateAtom.unary(m.group(2)))
            except ValueError:
                continue
            out[current].append((t, [atom]))
    return out


def truncate_tokens(block: str, budget: Optional[int]) -> str:
    """Keep whole lines while the running whitespace-token count stays within budget."""
    if budget is None:
        return block
    kept, used = [], 0
    for line in block.splitlines():
        n = len(line.split())
        if used + n > budget:
            break
        kept.append(line)
        used += n
    return "\n".join(kept)


_YES_NO = re.compile(r"\b(yes|no)\b", re.IGNORECASE)


def _choice_letters(q: Query) -> List[str]:
    return [chr(ord("A") + i) for i in range(len(q.choices or ()))]


def normalize_answer(raw: str, q: Query) -> str:
    raw = raw or ""
    if q.expected_form is AnswerForm.YES_NO:
        m = _YES_NO.search(raw)
        return m.group(1).lower() if m else UNPARSEABLE
    if q.expected_form is AnswerForm.MULTIPLE_CHOICE:
        letters = _choice_letters(q)
        hits = []
        m = re.search(r"(?<![A-Za-z])([%s])(?![A-Za-z])" % "".join(letters), raw)
        if m:
            hits.append((m.start(), m.group(1)))
        low = raw.lower()
        for letter, option in zip(letters, q.choices or ()):
            opt = option.strip().lower()
            if len(opt) > 1:
                pos = low.find(opt)
                if pos >= 0:
                    hits.append((pos, letter))
        return min(hits)[1] if hits else UNPARSEABLE
    text = raw.strip().lower()
    return text or UNPARSEABLE


class AnswerBackend(Protocol):
    def answer(self, request: dict) -> str: ...


def build_request(
    traj_set: TrajectorySet,
    q: Query,
    rcfg: RetrievalConfig,
    acfg: AnswerConfig,
    frames: Optional[FrameProvider],
    duration: Optional[float],
) -> dict:
    if acfg.modality is Modality.FRAMES_ONLY:
        block = ""
    else:
        block = truncate_tokens(render_trajectories(retrieve(traj_set, q, rcfg), acfg), acfg.token_budget)
    refs: List[str] = []
    if acfg.modality is not Modality.TEXT_ONLY and acfg.frames_at_answerer > 0 and duration:
        times = sample_timestamps(0.0, duration, FrameSampleSpec(acfg.frames_at_answerer))
        refs = frame_refs(frames, traj_set.video_id, times) if frames is not None else []
    req = {"question_id": q.question_id, "question_text": q.text, "trajectory_block": block, "frame_refs": refs}
    if q.choices is not None:
        req["choices"] = list(q.choices)
    return req


def answer(
    traj_set: TrajectorySet,
    q: Query,
    rcfg: RetrievalConfig,
    acfg: AnswerConfig,
    backend: AnswerBackend,
    frames: Optional[FrameProvider] = None,
    duration: Optional[float] = None,
) -> str:
    """Retrieve, render, attach frames, call the backend and normalize its reply.

    ``traj_set`` is used as-is; trajectories are never rebuilt here.
    """
    request = build_request(traj_set, q, rcfg, acfg, frames, duration)
    try:
        raw = backend.answer(request)
    except Exception as exc:
        raise AnswerBackendError(q.question_id, exc) from exc
    return normalize_answer(raw, q)


class ScriptedAnswerBackend:
    """Replays raw responses keyed by question id (the record/replay fixture format)."""

    def __init__(self, responses: Mapping[str, str]):
        self.responses = dict(responses)
        self.requests: List[dict] = []

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedAnswerBackend":
        return cls(json.loads(Path(path).read_text()))

    def answer(self, request: dict) -> str:
        self.requests.append(request)
        try:
            return self.responses[request["question_id"]]
        except KeyError:
            raise BackendError(f"no recorded response for {request['question_id']!r}") from None


class RecordingAnswerBackend:
    """Wraps a backend and keeps every raw response for later replay."""

    def __init__(self, inner: AnswerBackend):
        self.inner = inner
        self.responses: Dict[str, str] = {}

    def answer(self, request: dict) -> str:
        raw = self.inner.answer(request)
        self.responses[request["question_id"]] = raw
        return raw

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.responses, indent=2, sort_keys=True))


class RemoteAnswerBackend:
    """POSTs the request schema plus ``model`` and returns the response body text."""

    def __init__(self, endpoint: str, model: str = "", api_key: Optional[str] = None,
                 timeout: float = 120.0, client=None):
        import httpx

        self.endpoint = endpoint
        self.model = model
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.client = client or httpx.Client(timeout=timeout, headers=headers)

    def answer(self, request: dict) -> str:
        resp = self.client.post(self.endpoint, json={"model": self.model, **request})
        resp.raise_for_status()
        return resp.text
