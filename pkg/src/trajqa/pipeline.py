"""End-to-end orchestration: configuration, per-video trajectory building with
caching, per-question answering, budget audits and the ablation grid."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import string
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

from .aggregation import (
    ConcatSummarizer,
    LinkConfig,
    RemoteSummarizer,
    ScriptedSummarizer,
    Summarizer,
    aggregate,
    summarize_aggregate,
)
from .bench import BenchItem, sub_qid, target_qid
from .cache import TrajectoryCache, file_hash
from .chunking import (
    ChunkPlan,
    FrameSampleSpec,
    RemoteExtractorBackend,
    SamplingStrategy,
    ScriptedExtractorBackend,
    extract_all,
    plan_chunks,
)
from .core import TrajectorySet
from .errors import AnswerBackendError, CacheMissError, ConfigConflictError, SchemaError, ValidationError
from .frames import CommandFrameProvider, DirectoryFrameProvider, FrameProvider, SymbolicFrameProvider
from .metrics import MetricReport, PredictionRecord, compute_report
from .retrieval import (
    AnswerBackend,
    AnswerConfig,
    Modality,
    Query,
    RemoteAnswerBackend,
    RetrievalConfig,
    RetrievalMode,
    ScriptedAnswerBackend,
    StateFormat,
    TrajectoryOrder,
    answer,
)

log = logging.getLogger(__name__)

AUDIT_MODES = ("single_frame", "equal_frames", "equal_calls", "equal_tokens")
AGGREGATORS = ("link", "llm_summarize")


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class PipelineConfig:
    chunk_seconds: float = 15.0
    frames_per_chunk: int = 60
    sampling: SamplingStrategy = SamplingStrategy.UNIFORM
    link: LinkConfig = field(default_factory=LinkConfig)
    identity_linking: bool = True
    aggregator: str = "link"
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    answer: AnswerConfig = field(default_factory=AnswerConfig)
    audit: Optional[str] = None
    frame_budget: int = 64
    token_budget: int = 2048
    extractor: Mapping = field(default_factory=lambda: {"kind": "scripted", "fixtures_dir": "fixtures"})
    answerer: Mapping = field(default_factory=lambda: {"kind": "scripted", "responses": "responses.json"})
    summarizer: Optional[Mapping] = None
    frames: Mapping = field(default_factory=lambda: {"kind": "symbolic"})
    workers: int = 4
    answer_workers: int = 4
    retries: int = 2
    backoff: float = 0.5
    cache_dir: str = ".trajqa-cache"

    def __post_init__(self) -> None:
        object.__setattr__(self, "sampling", SamplingStrategy(self.sampling))
        if self.chunk_seconds <= 0 or self.frames_per_chunk < 1:
            raise ValidationError("chunk_seconds and frames_per_chunk must be positive")
        if self.aggregator not in AGGREGATORS:
            raise ValidationError(f"aggregator must be one of {AGGREGATORS}")
        if self.audit is not None and self.audit not in AUDIT_MODES:
            raise ValidationError(f"audit must be one of {AUDIT_MODES}")
        if self.frame_budget < 2 or self.token_budget < 1 or self.workers < 1 or self.answer_workers < 1:
            raise ValidationError("budgets and worker limits must be positive (frame_budget >= 2)")
        if self.retries < 0:
            raise ValidationError("retries must be >= 0")

    @property
    def frames_at_answerer(self) -> int:
        return self.answer.frames_at_answerer

    def to_dict(self) -> dict:
        return {
            "chunk_seconds": self.chunk_seconds,
            "frames_per_chunk": self.frames_per_chunk,
            "sampling": self.sampling.value,
            "link": self.link.to_dict(),
            "identity_linking": self.identity_linking,
            "aggregator": self.aggregator,
            "retrieval": self.retrieval.to_dict(),
            "answer": self.answer.to_dict(),
            "audit": self.audit,
            "frame_budget": self.frame_budget,
            "token_budget": self.token_budget,
            "extractor": dict(self.extractor),
            "answerer": dict(self.answerer),
            "summarizer": dict(self.summarizer) if self.summarizer is not None else None,
            "frames": dict(self.frames),
            "workers": self.workers,
            "answer_workers": self.answer_workers,
            "retries": self.retries,
            "backoff": self.backoff,
            "cache_dir": self.cache_dir,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PipelineConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SchemaError(f"unknown config keys: {sorted(unknown)}")
        if "link" in d:
            d["link"] = LinkConfig.from_dict(d["link"])
        if "retrieval" in d:
            d["retrieval"] = RetrievalConfig(**d["retrieval"])
        if "answer" in d:
            d["answer"] = AnswerConfig(**d["answer"])
        return cls(**d)

    def fingerprint(self) -> str:
        """Hash of every behavior-relevant field (worker limits and cache path excluded)."""
        d = self.to_dict()
        for k in ("workers", "answer_workers", "cache_dir", "backoff"):
            d.pop(k)
        return _digest(d)


def load_config(path: str | Path, overrides: Optional[Mapping] = None) -> PipelineConfig:
    """Read a JSON config, expanding ``${VAR}`` from the environment first."""
    text = string.Template(Path(path).read_text()).safe_substitute(os.environ)
    try:
        raw = json.loads(text)
    except ValueError as exc:
        raise SchemaError(f"config is not valid JSON: {exc}", path=str(path)) from exc
    if overrides:
        raw = merge_overrides(raw, overrides)
    return PipelineConfig.from_dict(raw)


def merge_overrides(raw: Mapping, overrides: Mapping) -> dict:
    """Apply dotted-key overrides, e.g. ``{"answer.frames_at_answerer": 8}``."""
    out = json.loads(json.dumps(raw))
    for key, value in overrides.items():
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return out


# -- videos -----------------------------------------------------------------

@dataclass(frozen=True)
class VideoRef:
    video_id: str
    duration: float
    path: Optional[str] = None

    def content_hash(self) -> str:
        if self.path and Path(self.path).is_file():
            return file_hash(self.path)
        return hashlib.sha256(f"{self.video_id}:{self.duration:.3f}".encode()).hexdigest()


def load_videos(path: str | Path) -> Dict[str, VideoRef]:
    """Manifest: JSON list of ``{video_id, duration, path?}``; paths are relative to the manifest."""
    base = Path(path).parent
    try:
        raw = json.loads(Path(path).read_text())
        refs = {}
        for entry in raw:
            p = entry.get("path")
            if p is not None and not os.path.isabs(p):
                p = str(base / p)
            refs[entry["video_id"]] = VideoRef(entry["video_id"], float(entry["duration"]), p)
        return refs
    except (ValueError, KeyError, TypeError) as exc:
        raise SchemaError(f"bad video manifest: {exc}", path=str(path)) from exc


# -- budget audits -----------------------------------------------------------

@dataclass(frozen=True)
class VideoPlan:
    chunk_seconds: float
    sample: FrameSampleSpec
    frames_at_answerer: int


def split_frame_budget(duration: float, chunk_seconds: float, frames_per_chunk: int,
                       frames_at_answerer: int, budget: int) -> VideoPlan:
    """Fit extractor plus answerer frames into ``budget``.

    A plan already inside the budget is kept. Otherwise the answerer keeps at
    most half the budget, the rest is spread evenly over the chunks, and chunks
    are lengthened if there are more chunks than extractor frames.
    """
    n_chunks = len(plan_chunks(duration, chunk_seconds))
    if n_chunks * frames_per_chunk + frames_at_answerer <= budget:
        return VideoPlan(chunk_seconds, FrameSampleSpec(frames_per_chunk), frames_at_answerer)
    answerer = min(frames_at_answerer, budget // 2)
    extractor = budget - answerer
    if n_chunks > extractor:
        chunk_seconds = math.ceil(duration * 1000 / extractor) / 1000
        n_chunks = len(plan_chunks(duration, chunk_seconds))
    per_chunk = max(1, min(frames_per_chunk, extractor // n_chunks))
    return VideoPlan(chunk_seconds, FrameSampleSpec(per_chunk), answerer)


AUDIT_OVERRIDES = {
    "single_frame": {"chunk_seconds", "sampling", "frames_at_answerer"},
    "equal_frames": {"frames_per_chunk", "frames_at_answerer"},
    "equal_calls": {"chunk_seconds"},
    "equal_tokens": set(),
}


def apply_audit(config: PipelineConfig, mode: str, explicit: Iterable[str] = ()) -> PipelineConfig:
    """Switch ``config`` into an audit mode, refusing to silently override user settings."""
    if mode not in AUDIT_MODES:
        raise ValidationError(f"unknown audit mode {mode!r}")
    clash = AUDIT_OVERRIDES[mode] & set(explicit)
    if clash:
        raise ConfigConflictError(f"audit {mode!r} overrides explicitly set {sorted(clash)}")
    if mode == "single_frame" and config.answer.modality is Modality.TEXT_ONLY:
        raise ConfigConflictError("single_frame audit needs one answerer frame but modality is text_only")
    return replace(config, audit=mode)


def video_plan(config: PipelineConfig, duration: float) -> VideoPlan:
    fa = config.answer.frames_at_answerer
    sample = FrameSampleSpec(config.frames_per_chunk, config.sampling)
    if config.audit == "single_frame":
        return VideoPlan(duration, FrameSampleSpec(1, SamplingStrategy.CENTER_ONLY), 1)
    if config.audit == "equal_calls":
        return VideoPlan(duration, sample, fa)
    if config.audit == "equal_frames":
        plan = split_frame_budget(duration, config.chunk_seconds, config.frames_per_chunk, fa, config.frame_budget)
        return replace(plan, sample=FrameSampleSpec(plan.sample.frames_per_chunk, config.sampling))
    return VideoPlan(config.chunk_seconds, sample, fa)


def answer_config(config: PipelineConfig, plan: VideoPlan) -> AnswerConfig:
    acfg = config.answer
    if plan.frames_at_answerer != acfg.frames_at_answerer and acfg.modality is not Modality.TEXT_ONLY:
        acfg = replace(acfg, frames_at_answerer=plan.frames_at_answerer)
    if config.audit == "equal_tokens":
        acfg = replace(acfg, token_budget=config.token_budget)
    return acfg


# -- backend construction ---------------------------------------------------

def _api_key(spec: Mapping) -> Optional[str]:
    env = spec.get("api_key_env")
    return os.environ.get(env) if env else None


def _resolve(base: Path, p: str) -> Path:
    return Path(p) if os.path.isabs(p) else base / p


def build_extractor(spec: Mapping, base: Path = Path(".")):
    kind = spec.get("kind")
    if kind == "scripted":
        return ScriptedExtractorBackend.from_dir(_resolve(base, spec["fixtures_dir"]))
    if kind == "world":
        from .synthetic import WorldExtractor

        return WorldExtractor.from_dir(_resolve(base, spec["dir"]))
    if kind == "remote":
        return RemoteExtractorBackend(spec["endpoint"], spec.get("model", ""), _api_key(spec))
    raise ValidationError(f"unknown extractor kind {kind!r}")


def build_answerer(spec: Mapping, items: Sequence[BenchItem] = (), base: Path = Path(".")) -> AnswerBackend:
    kind = spec.get("kind")
    if kind == "scripted":
        return ScriptedAnswerBackend.from_file(_resolve(base, spec["responses"]))
    if kind == "lookup":
        from .synthetic import LookupAnswerBackend

        return LookupAnswerBackend.from_items(items)
    if kind == "remote":
        return RemoteAnswerBackend(spec["endpoint"], spec.get("model", ""), _api_key(spec))
    raise ValidationError(f"unknown answerer kind {kind!r}")


def build_summarizer(spec: Optional[Mapping], link: LinkConfig, base: Path = Path(".")) -> Optional[Summarizer]:
    if spec is None:
        return None
    kind = spec.get("kind")
    if kind == "concat":
        return ConcatSummarizer(link)
    if kind == "scripted":
        return ScriptedSummarizer(json.loads(_resolve(base, spec["responses"]).read_text()))
    if kind == "remote":
        return RemoteSummarizer(spec["endpoint"], spec.get("model", ""), _api_key(spec))
    raise ValidationError(f"unknown summarizer kind {kind!r}")


def build_frames(spec: Mapping, videos: Mapping[str, VideoRef] = (), base: Path = Path(".")) -> FrameProvider:
    kind = spec.get("kind", "symbolic")
    if kind == "symbolic":
        return SymbolicFrameProvider()
    if kind == "directory":
        return DirectoryFrameProvider(_resolve(base, spec["root"]), spec.get("ext", "jpg"))
    if kind == "command":
        paths = {vid: v.path for vid, v in dict(videos).items()}
        return CommandFrameProvider(spec["argv"], paths, _resolve(base, spec["out_dir"]), spec.get("ext", "jpg"))
    raise ValidationError(f"unknown frame provider kind {kind!r}")


# -- the pipeline -----------------------------------------------------------

@dataclass
class RunResult:
    predictions: List[PredictionRecord]
    failures: Dict[str, str]


class Pipeline:
    """Builds (or loads) one trajectory set per video and answers every question against it."""

    def __init__(
        self,
        config: PipelineConfig,
        extractor=None,
        answerer: Optional[AnswerBackend] = None,
        frames: Optional[FrameProvider] = None,
        cache: Optional[TrajectoryCache] = None,
        summarizer: Optional[Summarizer] = None,
    ):
        self.config = config
        self.extractor = extractor
        self.answerer = answerer
        self.frames = frames or SymbolicFrameProvider()
        self.cache = cache
        self.summarizer = summarizer
        self._memo: Dict[Tuple[str, str], TrajectorySet] = {}
        self._lock = threading.Lock()

    def extraction_fingerprint(self, plan: VideoPlan) -> str:
        cfg = self.config
        ex = dict(cfg.extractor)
        ex.pop("api_key_env", None)
        params = {
            "chunk_seconds": plan.chunk_seconds,
            "frames_per_chunk": plan.sample.frames_per_chunk,
            "sampling": plan.sample.strategy.value,
            "aggregator": cfg.aggregator,
            "identity_linking": cfg.identity_linking,
            "extractor": ex,
        }
        if cfg.aggregator == "link":
            params["link"] = cfg.link.to_dict()
        else:
            params["summarizer"] = {k: v for k, v in dict(cfg.summarizer or {}).items() if k != "api_key_env"}
        return _digest(params)

    def extract(self, video: VideoRef, plan: Optional[VideoPlan] = None) -> TrajectorySet:
        """Run extraction and aggregation for one video, bypassing the cache."""
        if self.extractor is None:
            raise ValidationError("no extractor backend configured")
        plan = plan or video_plan(self.config, video.duration)
        chunk_plan = plan_chunks(video.duration, plan.chunk_seconds, video.video_id)
        chunks = extract_all(chunk_plan, plan.sample, self.extractor, self.frames,
                             self.config.workers, self.config.retries, self.config.backoff)
        fp = self.extraction_fingerprint(plan)
        if self.config.aggregator == "llm_summarize":
            if self.summarizer is None:
                raise ValidationError("aggregator llm_summarize needs a summarizer backend")
            return summarize_aggregate(chunks, self.summarizer, video.video_id, fp)
        return aggregate(chunks, self.config.link, video.video_id, fp, self.config.identity_linking)

    def trajectories(self, video: VideoRef, auto_extract: bool = True) -> Tuple[TrajectorySet, bool]:
        """Cached trajectory set for ``video``; the flag tells whether it was a cache hit."""
        plan = video_plan(self.config, video.duration)
        fp = self.extraction_fingerprint(plan)
        key = (video.video_id, fp)
        with self._lock:
            if key in self._memo:
                return self._memo[key], True
        content = video.content_hash()
        if self.cache is not None:
            hit = self.cache.get(content, fp)
            if hit is not None:
                with self._lock:
                    self._memo[key] = hit
                return hit, True
        if not auto_extract:
            raise CacheMissError(video.video_id)
        traj_set = self.extract(video, plan)
        if self.cache is not None:
            self.cache.put(content, fp, traj_set)
        with self._lock:
            self._memo[key] = traj_set
        return traj_set, False

    def queries(self, item: BenchItem) -> List[Query]:
        qs = [Query(target_qid(item), item.target_question)]
        qs += [Query(sub_qid(item, j), sq.text) for j, sq in enumerate(item.sub_questions)]
        return qs

    def answer_item(self, item: BenchItem, traj_set: TrajectorySet, video: VideoRef) -> PredictionRecord:
        """Target and each sub-question are asked as independent queries."""
        if self.answerer is None:
            raise ValidationError("no answer backend configured")
        plan = video_plan(self.config, video.duration)
        acfg = answer_config(self.config, plan)
        answers = [
            answer(traj_set, q, self.config.retrieval, acfg, self.answerer, self.frames, video.duration)
            for q in self.queries(item)
        ]
        return PredictionRecord(item.item_id, answers[0], tuple(answers[1:]))

    def run(
        self,
        items: Sequence[BenchItem],
        videos: Mapping[str, VideoRef],
        auto_extract: bool = True,
        skip: Iterable[str] = (),
        on_prediction: Optional[Callable[[PredictionRecord], None]] = None,
    ) -> RunResult:
        skip = set(skip)
        todo = [i for i in items if i.item_id not in skip]
        missing = sorted({i.video_id for i in todo} - set(videos))
        if missing:
            raise ValidationError(f"videos missing from manifest: {missing}")
        sets = {vid: self.trajectories(videos[vid], auto_extract)[0] for vid in sorted({i.video_id for i in todo})}
        failures: Dict[str, str] = {}
        results: Dict[str, PredictionRecord] = {}

        def work(item: BenchItem):
            try:
                return item.item_id, self.answer_item(item, sets[item.video_id], videos[item.video_id]), None
            except AnswerBackendError as exc:
                return item.item_id, None, str(exc)

        with ThreadPoolExecutor(max_workers=self.config.answer_workers) as pool:
            for item_id, pred, err in pool.map(work, todo):
                if err is not None:
                    failures[item_id] = err
                    continue
                results[item_id] = pred
                if on_prediction is not None:
                    on_prediction(pred)
        return RunResult([results[i.item_id] for i in todo if i.item_id in results], failures)

    def evaluate(self, items: Sequence[BenchItem], videos: Mapping[str, VideoRef],
                 auto_extract: bool = True) -> Tuple[MetricReport, RunResult]:
        result = self.run(items, videos, auto_extract)
        if result.failures:
            raise AnswerBackendError(sorted(result.failures)[0], "; ".join(result.failures.values()))
        return compute_report(items, result.predictions, self.config.fingerprint()), result


def run_audit(
    mode: str,
    pipeline: Pipeline,
    items: Sequence[BenchItem],
    videos: Mapping[str, VideoRef],
    explicit: Iterable[str] = (),
) -> MetricReport:
    """Evaluate ``items`` under an audit mode; the report carries the applied config fingerprint."""
    audited = apply_audit(pipeline.config, mode, explicit)
    runner = Pipeline(audited, pipeline.extractor, pipeline.answerer, pipeline.frames,
                      pipeline.cache, pipeline.summarizer)
    report, _ = runner.evaluate(items, videos)
    return report


# -- ablation grid ------------------------------------------------------------

def _answer(cfg: PipelineConfig, **kw) -> PipelineConfig:
    return replace(cfg, answer=replace(cfg.answer, **kw))


def _retrieval(cfg: PipelineConfig, **kw) -> PipelineConfig:
    return replace(cfg, retrieval=replace(cfg.retrieval, **kw))


def _prose(cfg: PipelineConfig, retrieval: RetrievalMode) -> PipelineConfig:
    cfg = replace(cfg, identity_linking=False)
    return _retrieval(_answer(cfg, state_format=StateFormat.PROSE), mode=retrieval)


BASE_ROW = "base configuration"

GridRowFn = Callable[[PipelineConfig], PipelineConfig]

CLUSTERS: Dict[str, Tuple[str, List[Tuple[str, GridRowFn]]]] = {
    "A": ("visual budget at the answerer", [
        ("frames_at_answerer=32", lambda c: _answer(c, frames_at_answerer=32)),
        ("frames_at_answerer=16", lambda c: _answer(c, frames_at_answerer=16)),
        ("frames_at_answerer=8", lambda c: _answer(c, frames_at_answerer=8)),
    ]),
    "B": ("visual budget at the extractor", [
        ("frames_per_chunk=30", lambda c: replace(c, frames_per_chunk=30)),
        ("frames_per_chunk=15", lambda c: replace(c, frames_per_chunk=15)),
        ("frames_per_chunk=8", lambda c: replace(c, frames_per_chunk=8)),
    ]),
    "C": ("retrieval ablations", [
        ("no filter (full timeline)", lambda c: _retrieval(c, mode=RetrievalMode.NONE)),
        ("random filter (top-k)", lambda c: _retrieval(c, mode=RetrievalMode.RANDOM_TOPK)),
    ]),
    "D": ("temporal aggregation", [
        ("aggregator: llm-summarize", lambda c: replace(c, aggregator="llm_summarize")),
    ]),
    "E": ("modality drop-outs at the answerer", [
        ("text-only (no frames)", lambda c: _answer(c, modality=Modality.TEXT_ONLY, frames_at_answerer=0)),
        ("frames-only (no trajectories)", lambda c: _answer(c, modality=Modality.FRAMES_ONLY)),
    ]),
    "F": ("chunk granularity", [
        ("30s chunks", lambda c: replace(c, chunk_seconds=30.0)),
        ("7.5s chunks", lambda c: replace(c, chunk_seconds=7.5)),
    ]),
    "G": ("form representation", [
        ("prose extractor, no retrieval", lambda c: _prose(c, RetrievalMode.NONE)),
        ("prose extractor + prose retrieval", lambda c: _prose(c, RetrievalMode.SCORED)),
    ]),
    "H": ("trajectory alternatives", [
        ("dense captioning (prose state)",
         lambda c: _retrieval(_answer(replace(c, identity_linking=False), state_format=StateFormat.CAPTION),
                              mode=RetrievalMode.NONE)),
        ("shuffled trajectory (no temporal order)",
         lambda c: _answer(c, trajectory_order=TrajectoryOrder.SHUFFLED)),
    ]),
}


@dataclass
class GridRow:
    cluster: str
    label: str
    config: PipelineConfig
    report: Optional[MetricReport] = None
    status: str = "pending"

    def to_dict(self) -> dict:
        return {
            "cluster": self.cluster,
            "label": self.label,
            "chunk_seconds": self.config.chunk_seconds,
            "frames_per_chunk": self.config.frames_per_chunk,
            "frames_at_answerer": self.config.answer.frames_at_answerer,
            "fingerprint": self.config.fingerprint(),
            "status": self.status,
            "report": self.report.to_dict() if self.report is not None else None,
        }


def grid_rows(cluster: str, base: PipelineConfig) -> List[GridRow]:
    """Base row followed by the cluster's ablation rows."""
    key = cluster.upper()
    if key not in CLUSTERS:
        raise ValidationError(f"unknown cluster {cluster!r}; expected one of {sorted(CLUSTERS)}")
    rows = [GridRow(key, BASE_ROW, base)]
    rows += [GridRow(key, label, fn(base)) for label, fn in CLUSTERS[key][1]]
    return rows


def run_grid(
    cluster: str,
    pipeline: Pipeline,
    items: Sequence[BenchItem],
    videos: Mapping[str, VideoRef],
    dry_run: bool = False,
) -> List[GridRow]:
    rows = grid_rows(cluster, pipeline.config)
    for row in rows:
        if dry_run:
            row.status = "planned"
            continue
        if row.config.aggregator == "llm_summarize" and pipeline.summarizer is None:
            row.status = "skipped: no summarizer configured"
            continue
        runner = Pipeline(row.config, pipeline.extractor, pipeline.answerer, pipeline.frames,
                          pipeline.cache, pipeline.summarizer)
        row.report, _ = runner.evaluate(items, videos)
        row.status = "ok"
    return rows
