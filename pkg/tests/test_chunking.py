import json
import random

import pytest
from hypothesis import given, strategies as st

from trajqa.chunking import (
    ChunkObservations,
    FrameSampleSpec,
    ScriptedExtractorBackend,
    extract_all,
    load_fixture,
    plan_chunks,
    sample_timestamps,
)
from trajqa.core import Observation, StateAtom
from trajqa.errors import PartialExtractionError, SchemaError
from trajqa.frames import DirectoryFrameProvider, SymbolicFrameProvider


def test_plan_chunks_examples():
    plan = plan_chunks(183, 15)
    assert len(plan) == 13
    assert (plan.chunks[-1].start, plan.chunks[-1].end) == (180.0, 183.0)
    assert [(c.start, c.end) for c in plan_chunks(30, 15).chunks] == [(0, 15), (15, 30)]
    assert [(c.start, c.end) for c in plan_chunks(10, 15).chunks] == [(0, 10)]
    assert len(plan_chunks(183, 7.5)) == 25


@given(st.floats(0.01, 2000, allow_nan=False), st.sampled_from([1.0, 7.5, 15.0, 30.0, 4.2]))
def test_plan_chunks_tiles_the_video(duration, chunk):
    plan = plan_chunks(duration, chunk)
    assert plan.chunks[0].start == 0
    assert plan.chunks[-1].end == plan.duration
    for a, b in zip(plan.chunks, plan.chunks[1:]):
        assert a.end == b.start
        assert a.end - a.start == pytest.approx(chunk)
    assert 0 < plan.chunks[-1].end - plan.chunks[-1].start <= chunk + 1e-9


def test_sample_timestamps_examples():
    assert sample_timestamps(0, 15, FrameSampleSpec(3)) == [2.5, 7.5, 12.5]
    assert sample_timestamps(0, 15, FrameSampleSpec(60, "center_only")) == [7.5]
    assert sample_timestamps(0, 15, FrameSampleSpec(1)) == [7.5]
    assert len(sample_timestamps(0, 15, FrameSampleSpec(60))) == 60


@given(st.floats(0, 500, allow_nan=False), st.floats(0.01, 40, allow_nan=False), st.integers(1, 80))
def test_sample_timestamps_inside_and_increasing(start, width, n):
    start = round(start, 3)
    end = round(start + width, 3)
    if end <= start:
        return
    ts = sample_timestamps(start, end, FrameSampleSpec(n))
    assert 1 <= len(ts) <= n
    assert all(start <= t < end for t in ts)
    assert ts == sorted(set(ts))


def _fixture(n_chunks):
    return {
        c: [Observation(f"obj{k}", c, frozenset({f"a{k}"}), None,
                        {c * 15 + 1.0 + k: frozenset({StateAtom.unary("walk")})}) for k in range(2)]
        for c in range(n_chunks)
    }


def test_extract_all_orders_chunks_and_matches_sequential():
    plan = plan_chunks(183, 15, "v")
    backend = ScriptedExtractorBackend({"v": _fixture(13)})
    parallel = extract_all(plan, FrameSampleSpec(4), backend, SymbolicFrameProvider(), workers=8)
    sequential = extract_all(plan, FrameSampleSpec(4), backend, None, workers=1)
    assert [c.chunk_index for c in parallel] == list(range(13))
    assert [c.to_dict() for c in parallel] == [c.to_dict() for c in sequential]
    assert backend.calls == 26


class FlakyBackend:
    single_flight = False

    def __init__(self, fail_chunk, fail_times):
        self.fail_chunk, self.fail_times, self.calls = fail_chunk, fail_times, {}

    def extract(self, video_id, chunk, timestamps, frames):
        self.calls[chunk.index] = self.calls.get(chunk.index, 0) + 1
        if chunk.index == self.fail_chunk and self.calls[chunk.index] <= self.fail_times:
            raise RuntimeError("boom")
        return []


def test_extract_all_partial_failure_names_chunk():
    backend = FlakyBackend(1, 99)
    sleeps = []
    with pytest.raises(PartialExtractionError) as err:
        extract_all(plan_chunks(45, 15, "vid"), FrameSampleSpec(2), backend, retries=2, backoff=0.1,
                    sleep=sleeps.append)
    assert set(err.value.failed) == {1}
    assert err.value.video_id == "vid"
    assert backend.calls[1] == 3
    assert sleeps == [0.1, 0.2]


def test_extract_all_retry_recovers():
    backend = FlakyBackend(0, 1)
    out = extract_all(plan_chunks(30, 15), FrameSampleSpec(2), backend, retries=1, sleep=lambda s: None)
    assert len(out) == 2


def test_extract_all_rejects_out_of_chunk_states():
    bad = {0: [Observation("x", 0, states={20.0: frozenset()})]}
    with pytest.raises(PartialExtractionError):
        extract_all(plan_chunks(30, 15, "v"), FrameSampleSpec(2), ScriptedExtractorBackend({"v": bad}),
                    retries=0)


def test_chunk_observations_duplicate_ids():
    with pytest.raises(SchemaError):
        ChunkObservations(0, [Observation("a", 0), Observation("a", 0)])


def test_load_fixture(tmp_path):
    fx = _fixture(2)
    path = tmp_path / "v.json"
    path.write_text(json.dumps({str(k): [o.to_dict() for o in v] for k, v in fx.items()}))
    assert load_fixture(path) == fx
    assert ScriptedExtractorBackend.from_dir(tmp_path).fixtures == {"v": fx}
    path.write_text("{\"0\": [{\"chunk_index\": 0}]}")
    with pytest.raises(SchemaError):
        load_fixture(path)


def test_directory_frame_provider(tmp_path):
    prov = DirectoryFrameProvider(tmp_path, "jpg")
    assert prov.frame_ref("v", 1.5).endswith("v/00001500.jpg")
    assert SymbolicFrameProvider().frame_ref("v", 12.5) == "v@12.500"


def test_random_plans_extract_everything():
    rng = random.Random(3)
    for _ in range(20):
        n = rng.randint(1, 6)
        plan = plan_chunks(n * 15, 15, "v")
        fx = _fixture(n)
        out = extract_all(plan, FrameSampleSpec(rng.randint(1, 5)), ScriptedExtractorBackend({"v": fx}),
                          workers=rng.randint(1, 4))
        assert {c.chunk_index: c.observations for c in out} == fx
