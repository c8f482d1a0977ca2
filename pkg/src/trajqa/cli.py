"""Command-line entry point: ``trajqa <subcommand>``.

Exit codes: 0 success, 1 validation failure, 2 backend failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from .bench import dataset_stats, load_corpus, validate_chain
from .cache import TrajectoryCache
from .errors import BackendError, ValidationError
from .metrics import compute_report, format_table, load_predictions, paired_bootstrap, save_predictions
from .pipeline import (
    AUDIT_MODES,
    CLUSTERS,
    Pipeline,
    PipelineConfig,
    build_answerer,
    build_extractor,
    build_frames,
    build_summarizer,
    load_config,
    load_videos,
    merge_overrides,
    run_audit,
    run_grid,
)

# flag dest -> (dotted config key, name used for audit conflict checks)
CONFIG_FLAGS: Dict[str, Tuple[str, str]] = {
    "chunk_seconds": ("chunk_seconds", "chunk_seconds"),
    "frames_per_chunk": ("frames_per_chunk", "frames_per_chunk"),
    "sampling": ("sampling", "sampling"),
    "frames_at_answerer": ("answer.frames_at_answerer", "frames_at_answerer"),
    "modality": ("answer.modality", "modality"),
    "trajectory_order": ("answer.trajectory_order", "trajectory_order"),
    "state_format": ("answer.state_format", "state_format"),
    "delta_t_max": ("link.delta_t_max", "delta_t_max"),
    "tau_conf": ("link.tau_conf", "tau_conf"),
    "resolution": ("link.resolution", "resolution"),
    "retrieval_mode": ("retrieval.mode", "retrieval_mode"),
    "top_k": ("retrieval.top_k", "top_k"),
    "retrieval_seed": ("retrieval.seed", "retrieval_seed"),
    "aggregator": ("aggregator", "aggregator"),
    "identity_linking": ("identity_linking", "identity_linking"),
    "frame_budget": ("frame_budget", "frame_budget"),
    "token_budget": ("token_budget", "token_budget"),
    "workers": ("workers", "workers"),
    "answer_workers": ("answer_workers", "answer_workers"),
    "retries": ("retries", "retries"),
    "cache_dir": ("cache_dir", "cache_dir"),
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("pipeline configuration (overrides the config file)")
    g.add_argument("--config", type=Path, help="JSON config; ${VAR} expands from the environment")
    g.add_argument("--chunk-seconds", type=float)
    g.add_argument("--frames-per-chunk", type=int)
    g.add_argument("--sampling", choices=["uniform", "center_only"])
    g.add_argument("--frames-at-answerer", type=int)
    g.add_argument("--modality", choices=["text_and_frames", "text_only", "frames_only"])
    g.add_argument("--trajectory-order", choices=["sorted", "shuffled"])
    g.add_argument("--state-format", choices=["structured", "prose", "caption"])
    g.add_argument("--delta-t-max", type=float)
    g.add_argument("--tau-conf", type=float)
    g.add_argument("--resolution", choices=["bipartite", "greedy"])
    g.add_argument("--retrieval-mode", choices=["scored", "none", "random_topk"])
    g.add_argument("--top-k", type=int)
    g.add_argument("--retrieval-seed", type=int)
    g.add_argument("--aggregator", choices=["link", "llm_summarize"])
    g.add_argument("--no-identity-linking", dest="identity_linking", action="store_const", const=False)
    g.add_argument("--frame-budget", type=int)
    g.add_argument("--token-budget", type=int)
    g.add_argument("--workers", type=int)
    g.add_argument("--answer-workers", type=int)
    g.add_argument("--retries", type=int)
    g.add_argument("--cache-dir")


def config_from_args(args: argparse.Namespace) -> Tuple[PipelineConfig, Path, List[str]]:
    """Config file plus flag overrides; also returns the base dir and the explicitly set names."""
    overrides, explicit = {}, []
    for dest, (key, name) in CONFIG_FLAGS.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = value
            explicit.append(name)
    if args.config is not None:
        base = args.config.resolve().parent
        cfg = load_config(args.config, overrides)
    else:
        base = Path.cwd()
        cfg = PipelineConfig.from_dict(merge_overrides({}, overrides))
    return cfg, base, explicit


def build_pipeline(cfg: PipelineConfig, base: Path, videos=(), items=()) -> Pipeline:
    cache_dir = Path(cfg.cache_dir)
    if not cache_dir.is_absolute():
        cache_dir = base / cache_dir
    return Pipeline(
        cfg,
        extractor=build_extractor(cfg.extractor, base),
        answerer=build_answerer(cfg.answerer, items, base),
        frames=build_frames(cfg.frames, videos, base),
        cache=TrajectoryCache(cache_dir),
        summarizer=build_summarizer(cfg.summarizer, cfg.link, base),
    )


def _write_json(obj, path: Optional[Path]) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)


# -- subcommands ----------------------------------------------------------------

def cmd_extract(args) -> int:
    cfg, base, _ = config_from_args(args)
    videos = load_videos(args.videos)
    wanted = args.video or sorted(videos)
    unknown = sorted(set(wanted) - set(videos))
    if unknown:
        raise ValidationError(f"videos not in manifest: {unknown}")
    pipe = build_pipeline(cfg, base, videos)
    with ThreadPoolExecutor(max_workers=max(1, min(cfg.workers, len(wanted)))) as pool:
        results = list(pool.map(lambda v: pipe.trajectories(videos[v], auto_extract=True), wanted))
    for vid, (traj_set, hit) in zip(wanted, results):
        print(f"{vid}\t{len(traj_set.trajectories)} trajectories\t{'cached' if hit else 'extracted'}")
    return 0


def cmd_answer(args) -> int:
    cfg, base, _ = config_from_args(args)
    items = load_corpus(args.corpus, official=args.official)
    videos = load_videos(args.videos)
    pipe = build_pipeline(cfg, base, videos, items)
    done = set()
    if args.resume and args.out.exists():
        done = {p.item_id for p in load_predictions(args.out)}
    elif args.out.exists():
        args.out.unlink()
    args.out.parent.mkdir(parents=True, exist_ok=True)
    result = pipe.run(items, videos, auto_extract=args.auto_extract, skip=done,
                      on_prediction=lambda p: save_predictions([p], args.out, append=True))
    print(f"answered {len(result.predictions)} items, skipped {len(done)}, failed {len(result.failures)}")
    for item_id, err in sorted(result.failures.items()):
        print(f"  FAILED {item_id}: {err}", file=sys.stderr)
    return 2 if result.failures else 0


def cmd_eval(args) -> int:
    items = load_corpus(args.corpus, official=args.official)
    preds = load_predictions(args.predictions)
    report = compute_report(items, preds, args.name)
    out: dict = {"report": report.to_dict()}
    rows = [(args.name, report)]
    baseline = None
    if args.baseline is not None:
        base_preds = load_predictions(args.baseline)
        baseline = compute_report(items, base_preds, args.baseline_name)
        rows.append((args.baseline_name, baseline))
        boot = paired_bootstrap(items, preds, base_preds, args.resamples, args.seed, args.workers)
        out["baseline_report"] = baseline.to_dict()
        out["bootstrap"] = boot.to_dict()
    table = format_table(rows)
    print(table)
    if "bootstrap" in out:
        b = out["bootstrap"]
        print(f"\npaired bootstrap ({b['resamples']} resamples, seed {b['seed']}): "
              f"p = {b['p_value']:.4g}, 95% CI [{b['ci_low']:.4f}, {b['ci_high']:.4f}]")
    if args.report is not None:
        _write_json(out, args.report)
    if args.table is not None:
        args.table.write_text(table + "\n")
    if args.figure is not None:
        from .plotting import plot_report

        plot_report(report, args.figure, args.name, baseline)
    return 0


def cmd_grid(args) -> int:
    cluster = args.cluster.upper()
    if cluster not in CLUSTERS:
        raise ValidationError(f"unknown cluster {args.cluster!r}; expected one of {sorted(CLUSTERS)}")
    cfg, base, _ = config_from_args(args)
    if args.dry_run:
        items, videos = [], {}
        pipe = Pipeline(cfg)
    else:
        if args.corpus is None or args.videos is None:
            raise ValidationError("grid needs --corpus and --videos unless --dry-run is given")
        items = load_corpus(args.corpus, official=args.official)
        videos = load_videos(args.videos)
        pipe = build_pipeline(cfg, base, videos, items)
    rows = run_grid(cluster, pipe, items, videos, dry_run=args.dry_run)
    header = ["cluster", "label", "status", "a_target", "a_sub", "a_cons", "fingerprint"]
    lines = ["\t".join(header)]
    for r in rows:
        rep = r.report
        vals = ["" if rep is None else f"{v:.6f}" if v is not None else "NA"
                for v in ((rep.a_target, rep.a_sub, rep.a_cons) if rep else (None,) * 3)]
        lines.append("\t".join([r.cluster, r.label, r.status, *vals, r.config.fingerprint()]))
    tsv = "\n".join(lines) + "\n"
    sys.stdout.write(tsv)
    if args.out_dir is not None:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        stem = args.out_dir / f"grid_{cluster}"
        stem.with_suffix(".tsv").write_text(tsv)
        _write_json([r.to_dict() for r in rows], stem.with_suffix(".json"))
        if not args.dry_run:
            from .plotting import plot_grid

            plot_grid(rows, stem.with_suffix(".png"), f"cluster {cluster}: {CLUSTERS[cluster][0]}")
    return 0


def cmd_bench_validate(args) -> int:
    items = load_corpus(args.corpus, official=args.official)
    bad = 0
    for item in items:
        violations = validate_chain(item.chain)
        if violations:
            bad += 1
            print(f"{item.item_id}\t{','.join(violations)}")
    _write_json(dataset_stats(items), None)
    if bad:
        print(f"{bad} of {len(items)} items have invalid chains", file=sys.stderr)
        return 1
    return 0


def cmd_audit(args) -> int:
    cfg, base, explicit = config_from_args(args)
    items = load_corpus(args.corpus, official=args.official)
    videos = load_videos(args.videos)
    pipe = build_pipeline(cfg, base, videos, items)
    report = run_audit(args.mode, pipe, items, videos, explicit)
    print(format_table([(f"audit: {args.mode}", report)]))
    if args.report is not None:
        _write_json({"mode": args.mode, "report": report.to_dict()}, args.report)
    if args.figure is not None:
        from .plotting import plot_report

        plot_report(report, args.figure, f"audit: {args.mode}")
    return 0


def cmd_synth(args) -> int:
    from .synthetic import make_corpus, write_corpus

    corpus = make_corpus(args.videos, args.seed, args.items_per_video)
    paths = write_corpus(corpus, args.out)
    for name, p in paths.items():
        print(f"{name}\t{p}")
    return 0


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trajqa", description="Object-trajectory video QA pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="build and cache trajectory sets per video")
    p.add_argument("--videos", type=Path, required=True, help="video manifest (JSON list)")
    p.add_argument("--video", action="append", help="restrict to these video ids")
    _add_config_flags(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("answer", help="answer every target and sub-question of a corpus")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--videos", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="predictions JSONL")
    p.add_argument("--resume", action="store_true", help="keep existing predictions and append the rest")
    p.add_argument("--auto-extract", action="store_true", help="extract videos missing from the cache")
    p.add_argument("--official", action="store_true", help="require every item to be approved")
    _add_config_flags(p)
    p.set_defaults(func=cmd_answer)

    p = sub.add_parser("eval", help="score predictions; two files add a paired bootstrap")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--predictions", type=Path, required=True)
    p.add_argument("--baseline", type=Path, help="second predictions file for significance testing")
    p.add_argument("--name", default="system")
    p.add_argument("--baseline-name", default="baseline")
    p.add_argument("--resamples", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--report", type=Path, help="JSON report path")
    p.add_argument("--table", type=Path, help="text table path")
    p.add_argument("--figure", type=Path, help="PNG figure path")
    p.add_argument("--official", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grid", help="run one ablation cluster")
    p.add_argument("--cluster", required=True, help="A..H")
    p.add_argument("--corpus", type=Path)
    p.add_argument("--videos", type=Path)
    p.add_argument("--out-dir", type=Path)
    p.add_argument("--dry-run", action="store_true", help="enumerate rows without running them")
    p.add_argument("--official", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("bench-validate", help="check chain validity and print corpus statistics")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--official", action="store_true")
    p.set_defaults(func=cmd_bench_validate)

    p = sub.add_parser("audit", help="evaluate under a budget-matched audit mode")
    p.add_argument("--mode", choices=AUDIT_MODES, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--videos", type=Path, required=True)
    p.add_argument("--report", type=Path)
    p.add_argument("--figure", type=Path)
    p.add_argument("--official", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("synth", help="write a synthetic corpus with a ready-to-run config")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--videos", type=int, default=10)
    p.add_argument("--items-per-video", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
