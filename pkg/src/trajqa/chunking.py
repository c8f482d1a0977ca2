"""Chunk planning, frame sampling and parallel per-chunk state extraction."""
from __future__ import annotations

import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple

from .core import Observation, timestamp
from .errors import BackendError, PartialExtractionError, SchemaError
from .frames import FrameProvider, frame_refs

log = logging.getLogger(__name__)

DEFAULT_CHUNK_SECONDS = 15.0
DEFAULT_FRAMES_PER_CHUNK = 60


@dataclass(frozen=True)
class Chunk:
    index: int
    start: float
    end: float

    def __contains__(self, t: float) -> bool:
        return self.start <= t < self.end


@dataclass(frozen=True)
class ChunkPlan:
    video_id: str
    duration: float
    chunk_seconds: float
    chunks: Tuple[Chunk, ...]

    def __len__(self) -> int:
        return len(self.chunks)

    def chunk_of(self, t: float) -> Chunk:
        for chunk in self.chunks:
            if t in chunk:
                return chunk
        raise ValueError(f"t={t} outside [0, {self.duration})")


def plan_chunks(duration: float, chunk_seconds: float = DEFAULT_CHUNK_SECONDS, video_id: str = "") -> ChunkPlan:
    """Split ``[0, duration)`` into consecutive chunks; the last one may be shorter."""
    if duration <= 0 or chunk_seconds <= 0:
        raise ValueError("duration and chunk_seconds must be positive")
    # integer milliseconds keep the ceiling exact (183/15, 7.5 s chunks, ...)
    total_ms = int(round(duration * 1000))
    step_ms = int(round(chunk_seconds * 1000))
    if total_ms <= 0 or step_ms <= 0:
        raise ValueError("duration and chunk_seconds must be at least 1 ms")
    n = -(-total_ms // step_ms)
    chunks = tuple(
        Chunk(i, i * step_ms / 1000, min((i + 1) * step_ms, total_ms) / 1000) for i in range(n)
    )
    return ChunkPlan(video_id, total_ms / 1000, step_ms / 1000, chunks)


class SamplingStrategy(str, Enum):
    UNIFORM = "uniform"
    CENTER_ONLY = "center_only"


@dataclass(frozen=True)
class FrameSampleSpec:
    frames_per_chunk: int = DEFAULT_FRAMES_PER_CHUNK
    strategy: SamplingStrategy = SamplingStrategy.UNIFORM

    def __post_init__(self) -> None:
        object.__setattr__(self, "strategy", SamplingStrategy(self.strategy))
        if self.frames_per_chunk < 1:
            raise ValueError("frames_per_chunk must be >= 1")


def sample_timestamps(start: float, end: float, spec: FrameSampleSpec) -> List[float]:
    """Midpoints of ``n`` equal sub-intervals of ``[start, end)``.

    Timestamps colliding after millisecond rounding are merged, so very short
    intervals may yield fewer than ``n`` values.
    """
    if not start < end:
        raise ValueError("start must be < end")
    n = 1 if spec.strategy is SamplingStrategy.CENTER_ONLY else spec.frames_per_chunk
    width = (end - start) / n
    out = []
    for j in range(n):
        t = timestamp(start + (j + 0.5) * width)
        if t >= end:
            t = timestamp(end - 0.001)
        if t < start:
            continue
        if not out or t > out[-1]:
            out.append(t)
    return out


@dataclass
class ChunkObservations:
    chunk_index: int
    observations: List[Observation] = field(default_factory=list)

    def __post_init__(self) -> None:
        ids = [o.local_id for o in self.observations]
        if len(ids) != len(set(ids)):
            raise SchemaError(f"duplicate local ids in chunk {self.chunk_index}")

    def to_dict(self) -> dict:
        return {"chunk_index": self.chunk_index, "observations": [o.to_dict() for o in self.observations]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ChunkObservations":
        try:
            return cls(int(d["chunk_index"]), [Observation.from_dict(o) for o in d["observations"]])
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed chunk observations: {exc}") from exc


class ExtractorBackend(Protocol):
    """Returns the observations visible in one chunk.

    Backends that cannot be called concurrently set ``single_flight = True``.
    """

    single_flight: bool

    def extract(
        self, video_id: str, chunk: Chunk, timestamps: Sequence[float], frames: Sequence[str]
    ) -> List[Observation]: ...


def check_observations(chunk: Chunk, observations: Sequence[Observation]) -> ChunkObservations:
    for obs in observations:
        if obs.chunk_index != chunk.index:
            raise SchemaError(f"observation {obs.local_id!r} tagged chunk {obs.chunk_index}, expected {chunk.index}")
        bad = [t for t in obs.states if t not in chunk]
        if bad:
            raise SchemaError(f"observation {obs.local_id!r} has timestamps {bad} outside chunk {chunk.index}")
    return ChunkObservations(chunk.index, list(observations))


def extract_all(
    plan: ChunkPlan,
    spec: FrameSampleSpec,
    backend: ExtractorBackend,
    frames: Optional[FrameProvider] = None,
    workers: int = 4,
    retries: int = 2,
    backoff: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
) -> List[ChunkObservations]:
    """Run ``backend`` over every chunk and return results ordered by chunk index.

    Each chunk is attempted ``1 + retries`` times with exponential backoff; any
    chunk still failing raises :class:`PartialExtractionError` after all chunks ran.
    """
    lock = threading.Lock() if getattr(backend, "single_flight", False) else None

    def run(chunk: Chunk) -> ChunkObservations:
        times = sample_timestamps(chunk.start, chunk.end, spec)
        refs = frame_refs(frames, plan.video_id, times) if frames is not None else []
        for attempt in range(retries + 1):
            try:
                if lock is not None:
                    with lock:
                        obs = backend.extract(plan.video_id, chunk, times, refs)
                else:
                    obs = backend.extract(plan.video_id, chunk, times, refs)
                return check_observations(chunk, obs)
            except Exception as exc:
                if attempt == retries:
                    raise
                log.warning("chunk %d of %s failed (%s); retrying", chunk.index, plan.video_id, exc)
                sleep(backoff * 2**attempt)
        raise AssertionError("unreachable")

    results: Dict[int, ChunkObservations] = {}
    causes: Dict[int, BaseException] = {}
    n_workers = 1 if lock is not None else max(1, workers)
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        futures = {chunk.index: pool.submit(run, chunk) for chunk in plan.chunks}
        for index, fut in futures.items():
            try:
                results[index] = fut.result()
            except Exception as exc:
                causes[index] = exc
    if causes:
        raise PartialExtractionError(causes, plan.video_id, causes)
    return [results[i] for i in sorted(results)]


def load_fixture(path: str | Path) -> Dict[int, List[Observation]]:
    """Read a fixtures file: ``{"<chunk_index>": [Observation, ...], ...}``."""
    try:
        raw = json.loads(Path(path).read_text())
        return {int(k): [Observation.from_dict(o) for o in v] for k, v in raw.items()}
    except (ValueError, KeyError, TypeError, AttributeError) as exc:
        raise SchemaError(f"bad fixtures file: {exc}", path=str(path)) from exc


class ScriptedExtractorBackend:
    """Replays fixed per-chunk observations, keyed by video id then chunk index."""

    single_flight = False

    def __init__(self, fixtures: Mapping[str, Mapping[int, Sequence[Observation]]]):
        self.fixtures = {vid: {int(k): list(v) for k, v in chunks.items()} for vid, chunks in fixtures.items()}
        self.calls = 0
        self._lock = threading.Lock()

    @classmethod
    def from_dir(cls, directory: str | Path) -> "ScriptedExtractorBackend":
        return cls({p.stem: load_fixture(p) for p in sorted(Path(directory).glob("*.json"))})

    def extract(self, video_id, chunk, timestamps, frames):
        with self._lock:
            self.calls += 1
        try:
            chunks = self.fixtures[video_id]
        except KeyError:
            raise BackendError(f"no fixtures for video {video_id!r}") from None
        return list(chunks.get(chunk.index, []))


class RemoteExtractorBackend:
    """Posts sampled frame references to an HTTP model endpoint.

    Request body: ``{model, video_id, chunk_index, start, end, timestamps, frame_refs}``.
    The response must be JSON shaped like :meth:`ChunkObservations.to_dict`.
    """

    single_flight = False

    def __init__(self, endpoint: str, model: str = "", api_key: Optional[str] = None,
                 timeout: float = 120.0, client=None):
        import httpx

        self.endpoint = endpoint
        self.model = model
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.client = client or httpx.Client(timeout=timeout, headers=headers)

    def extract(self, video_id, chunk, timestamps, frames):
        payload = {
            "model": self.model,
            "video_id": video_id,
            "chunk_index": chunk.index,
            "start": chunk.start,
            "end": chunk.end,
            "timestamps": list(timestamps),
            "frame_refs": list(frames),
        }
        try:
            resp = self.client.post(self.endpoint, json=payload)
            resp.raise_for_status()
            body = resp.json()
        except Exception as exc:
            raise BackendError(f"extractor request failed: {exc}") from exc
        parsed = ChunkObservations.from_dict(body)
        if parsed.chunk_index != chunk.index:
            raise SchemaError(f"response for chunk {parsed.chunk_index}, expected {chunk.index}")
        return parsed.observations
