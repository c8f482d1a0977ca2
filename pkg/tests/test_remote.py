import json
import sys

import httpx
import pytest

from trajqa.aggregation import RemoteSummarizer, summarize_aggregate
from trajqa.chunking import (
    ChunkObservations,
    FrameSampleSpec,
    RemoteExtractorBackend,
    extract_all,
    plan_chunks,
)
from trajqa.core import Observation, StateAtom, TrajectorySet
from trajqa.errors import AnswerBackendError, BackendError, PartialExtractionError, SchemaError
from trajqa.frames import CommandFrameProvider, SymbolicFrameProvider
from trajqa.retrieval import AnswerConfig, Query, RemoteAnswerBackend, RetrievalConfig, answer


def _client(handler, key=None):
    headers = {"Authorization": f"Bearer {key}"} if key else {}
    return httpx.Client(transport=httpx.MockTransport(handler), headers=headers)


def test_remote_extractor_payload_and_parse():
    seen = []

    def handler(request):
        body = json.loads(request.content)
        seen.append((body, request.headers.get("authorization")))
        obs = Observation("p", body["chunk_index"], frozenset({"red"}), None,
                          {body["timestamps"][0]: frozenset({StateAtom.unary("run")})})
        return httpx.Response(200, json=ChunkObservations(body["chunk_index"], [obs]).to_dict())

    backend = RemoteExtractorBackend("http://x/extract", "vlm-1", client=_client(handler, "k"))
    out = extract_all(plan_chunks(30, 15, "vid"), FrameSampleSpec(2), backend, SymbolicFrameProvider())
    assert [c.chunk_index for c in out] == [0, 1]
    body, auth = sorted(seen, key=lambda s: s[0]["chunk_index"])[1]
    assert auth == "Bearer k"
    assert body == {"model": "vlm-1", "video_id": "vid", "chunk_index": 1, "start": 15.0, "end": 30.0,
                    "timestamps": [18.75, 26.25], "frame_refs": ["vid@18.750", "vid@26.250"]}


def test_remote_extractor_rejects_bad_responses():
    def wrong_chunk(request):
        return httpx.Response(200, json={"chunk_index": 7, "observations": []})

    backend = RemoteExtractorBackend("http://x", client=_client(wrong_chunk))
    with pytest.raises(PartialExtractionError) as err:
        extract_all(plan_chunks(15, 15, "v"), FrameSampleSpec(1), backend, retries=0)
    assert isinstance(err.value.causes[0], SchemaError)

    def server_error(request):
        return httpx.Response(503)

    backend = RemoteExtractorBackend("http://x", client=_client(server_error))
    with pytest.raises(PartialExtractionError) as err:
        extract_all(plan_chunks(15, 15, "v"), FrameSampleSpec(1), backend, retries=1, sleep=lambda s: None)
    assert isinstance(err.value.causes[0], BackendError)


def test_remote_answerer_roundtrip():
    def handler(request):
        body = json.loads(request.content)
        assert body["model"] == "qa" and body["question_id"] == "q1"
        assert body["frame_refs"] == []
        return httpx.Response(200, text="Yes, it does.")

    backend = RemoteAnswerBackend("http://x/answer", "qa", client=_client(handler))
    got = answer(TrajectorySet("v"), Query("q1", "?"), RetrievalConfig(), AnswerConfig(0, "text_only"), backend)
    assert got == "yes"


def test_remote_answerer_errors_wrap():
    backend = RemoteAnswerBackend("http://x", client=_client(lambda r: httpx.Response(500)))
    with pytest.raises(AnswerBackendError):
        answer(TrajectorySet("v"), Query("q", "?"), RetrievalConfig(), AnswerConfig(), backend)


def test_remote_summarizer():
    chunks = [ChunkObservations(0, [Observation("a", 0, frozenset({"p"}), None, {3.0: frozenset()})])]

    def handler(request):
        body = json.loads(request.content)
        assert body["chunks"][0]["observations"][0]["local_id"] == "a"
        return httpx.Response(200, text="object: a\n  t=3.000: waves\n")

    ts = summarize_aggregate(chunks, RemoteSummarizer("http://x", client=_client(handler)), "v")
    assert dict(ts.trajectories["a"].records) == {3.0: frozenset({StateAtom.unary("waves")})}


def test_command_frame_provider_runs_once_per_frame(tmp_path):
    script = tmp_path / "grab.py"
    script.write_text("import sys, pathlib\np = pathlib.Path(sys.argv[3])\n"
                      "p.write_text(sys.argv[1] + '@' + sys.argv[2])\n")
    prov = CommandFrameProvider([sys.executable, str(script), "{video}", "{seconds}", "{out}"],
                                {"v": "/videos/v.mp4"}, tmp_path / "frames", "txt")
    ref = prov.frame_ref("v", 1.5)
    assert ref.endswith("v/00001500.txt")
    with open(ref) as fh:
        assert fh.read() == "/videos/v.mp4@1.500"
    script.write_text("raise SystemExit(1)\n")
    assert prov.frame_ref("v", 1.5) == ref
