import json

import pytest

from helpers import four_item_fixture
from trajqa.bench import load_corpus, save_corpus
from trajqa.cache import TrajectoryCache
from trajqa.cli import build_pipeline, main
from trajqa.metrics import compute_report, load_predictions, save_predictions
from trajqa.pipeline import load_config, load_videos, run_audit


@pytest.fixture
def synth(tmp_path, capsys):
    out = tmp_path / "syn"
    assert main(["synth", "--out", str(out), "--videos", "3", "--seed", "2"]) == 0
    capsys.readouterr()
    return out


def _common(d):
    return ["--config", str(d / "config.json"), "--videos", str(d / "videos.json")]


def test_extract_then_cached(synth, capsys):
    assert main(["extract", *_common(synth)]) == 0
    first = capsys.readouterr().out.splitlines()
    assert len(first) == 3 and all(line.endswith("extracted") for line in first)
    assert main(["extract", *_common(synth)]) == 0
    assert all(line.endswith("cached") for line in capsys.readouterr().out.splitlines())

    cfg = load_config(synth / "config.json")
    videos = load_videos(synth / "videos.json")
    pipe = build_pipeline(cfg, synth, videos)
    direct = pipe.extract(videos["vid00"])
    (entry,) = [k for k, v in TrajectoryCache(synth / "cache").index().items() if v["video_id"] == "vid00"]
    stored = (synth / "cache" / "objects" / entry[:2] / f"{entry}.json").read_text()
    assert stored == direct.to_json()
    assert first[0].split("\t")[1] == f"{len(direct.trajectories)} trajectories"


def test_extract_unknown_video(synth, capsys):
    assert main(["extract", *_common(synth), "--video", "nope"]) == 1
    assert "nope" in capsys.readouterr().err


def test_answer_matches_library_and_resumes(synth, capsys):
    preds = synth / "preds.jsonl"
    corpus = synth / "corpus.jsonl"
    assert main(["answer", *_common(synth), "--corpus", str(corpus), "--out", str(preds)]) == 1
    assert "vid00" in capsys.readouterr().err
    assert main(["answer", *_common(synth), "--corpus", str(corpus), "--out", str(preds), "--auto-extract"]) == 0
    got = {p.item_id: p for p in load_predictions(preds)}

    items = load_corpus(corpus)
    cfg = load_config(synth / "config.json")
    videos = load_videos(synth / "videos.json")
    lib = build_pipeline(cfg, synth, videos, items).run(items, videos)
    assert got == {p.item_id: p for p in lib.predictions}

    lines = preds.read_text().splitlines()
    preds.write_text("\n".join(lines[:5]) + "\n")
    head = preds.read_text()
    assert main(["answer", *_common(synth), "--corpus", str(corpus), "--out", str(preds), "--resume"]) == 0
    assert "skipped 5" in capsys.readouterr().out
    assert preds.read_text().startswith(head)
    assert {p.item_id: p for p in load_predictions(preds)} == got


def test_answer_with_scripted_responses_and_failures(synth, capsys):
    items = load_corpus(synth / "corpus.jsonl")
    responses = {}
    for item in items:
        responses[item.item_id] = "Yes." if item.target_answer == "yes" else "No, it does not."
        for j, sq in enumerate(item.sub_questions):
            responses[f"{item.item_id}#sub{j}"] = sq.answer.upper()
    del responses[items[0].item_id]
    (synth / "responses.json").write_text(json.dumps(responses))
    cfg = json.loads((synth / "config.json").read_text())
    cfg["answerer"] = {"kind": "scripted", "responses": "responses.json"}
    (synth / "scripted.json").write_text(json.dumps(cfg))
    preds = synth / "p.jsonl"
    argv = ["answer", "--config", str(synth / "scripted.json"), "--videos", str(synth / "videos.json"),
            "--corpus", str(synth / "corpus.jsonl"), "--out", str(preds), "--auto-extract"]
    assert main(argv) == 2
    captured = capsys.readouterr()
    assert f"FAILED {items[0].item_id}" in captured.err
    got = load_predictions(preds)
    assert len(got) == len(items) - 1
    for p in got:
        item = next(i for i in items if i.item_id == p.item_id)
        assert p.target_pred == item.target_answer
        assert list(p.sub_preds) == [s.answer for s in item.sub_questions]


def test_eval_fixture_report_and_bootstrap(tmp_path, capsys):
    items, preds = four_item_fixture()
    save_corpus(items, tmp_path / "c.jsonl")
    save_predictions(preds, tmp_path / "p.jsonl")
    argv = ["eval", "--corpus", str(tmp_path / "c.jsonl"), "--predictions", str(tmp_path / "p.jsonl"),
            "--baseline", str(tmp_path / "p.jsonl"), "--resamples", "500", "--seed", "3",
            "--report", str(tmp_path / "r.json"), "--table", str(tmp_path / "t.md"),
            "--figure", str(tmp_path / "f.png")]
    assert main(argv) == 0
    out = capsys.readouterr().out
    assert "| system   | 75.0     | 80.0  | 75.0   |" in out
    report = json.loads((tmp_path / "r.json").read_text())
    assert (report["report"]["a_target"], report["report"]["a_sub"], report["report"]["a_cons"]) == (0.75, 0.8, 0.75)
    assert report["report"] == compute_report(items, preds, "system").to_dict()
    assert report["bootstrap"]["p_value"] == 1.0
    assert (tmp_path / "f.png").stat().st_size > 0
    first = (tmp_path / "r.json").read_bytes()
    assert main(argv) == 0
    assert (tmp_path / "r.json").read_bytes() == first


def test_eval_schema_error_exit_code(tmp_path, capsys):
    items, preds = four_item_fixture()
    save_corpus(items, tmp_path / "c.jsonl")
    (tmp_path / "p.jsonl").write_text("{broken\n")
    assert main(["eval", "--corpus", str(tmp_path / "c.jsonl"), "--predictions", str(tmp_path / "p.jsonl")]) == 1
    assert ":1:" in capsys.readouterr().err


def test_grid_dry_run_and_full(synth, tmp_path, capsys):
    assert main(["grid", "--cluster", "A", "--dry-run", "--out-dir", str(tmp_path / "g")]) == 0
    rows = capsys.readouterr().out.strip().splitlines()[1:]
    assert [r.split("\t")[1] for r in rows] == ["base configuration", "frames_at_answerer=32",
                                                "frames_at_answerer=16", "frames_at_answerer=8"]
    saved = json.loads((tmp_path / "g" / "grid_A.json").read_text())
    assert [r["frames_at_answerer"] for r in saved] == [64, 32, 16, 8]
    assert main(["grid", "--cluster", "Q", "--dry-run"]) == 1
    capsys.readouterr()

    out = tmp_path / "h"
    assert main(["grid", "--cluster", "h", *_common(synth), "--corpus", str(synth / "corpus.jsonl"),
                 "--out-dir", str(out)]) == 0
    lines = (out / "grid_H.tsv").read_text().splitlines()
    assert len(lines) == 4 and all("\tok\t" in line for line in lines[1:])
    assert (out / "grid_H.png").stat().st_size > 0


def test_bench_validate(synth, tmp_path, capsys):
    assert main(["bench-validate", "--corpus", str(synth / "corpus.jsonl"), "--official"]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["videos"] == 3 and stats["targets"] == 12
    items, _ = four_item_fixture()
    save_corpus(items, tmp_path / "c.jsonl")
    assert main(["bench-validate", "--corpus", str(tmp_path / "c.jsonl")]) == 1
    assert "i1\t" in capsys.readouterr().out


def test_audit_matches_library(synth, tmp_path, capsys):
    corpus = synth / "corpus.jsonl"
    argv = ["audit", "--mode", "single_frame", *_common(synth), "--corpus", str(corpus),
            "--report", str(tmp_path / "a.json")]
    assert main(argv) == 0
    got = json.loads((tmp_path / "a.json").read_text())["report"]
    items = load_corpus(corpus)
    cfg = load_config(synth / "config.json")
    videos = load_videos(synth / "videos.json")
    lib = run_audit("single_frame", build_pipeline(cfg, synth, videos, items), items, videos)
    assert got == lib.to_dict()
    capsys.readouterr()
    assert main(argv + ["--chunk-seconds", "30"]) == 1
    assert "chunk_seconds" in capsys.readouterr().err


def test_flags_override_config(synth):
    from trajqa.cli import build_parser, config_from_args

    args = build_parser().parse_args(["extract", *_common(synth), "--frames-at-answerer", "8",
                                      "--tau-conf", "0.9", "--no-identity-linking"])
    cfg, base, explicit = config_from_args(args)
    assert cfg.frames_at_answerer == 8 and cfg.link.tau_conf == 0.9 and cfg.identity_linking is False
    assert base == synth.resolve()
    assert set(explicit) == {"frames_at_answerer", "tau_conf", "identity_linking"}
