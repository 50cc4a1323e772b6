"""Command-line entry point: one subcommand per pipeline stage.

Usage: memecap <stage> --config path [--seed N] [--workers K]
Exit codes: 0 ok, 1 validation error, 2 missing upstream artifact.
MEMECAP_DATA_DIR overrides the artifact root from the config file.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline
from .annotate import AnnotationService, ResponseStore, build_tasks, create_app
from .config import GridSpec, load_config
from .decoder import CaptionDecoder
from .errors import DependencyError, MemecapError

_STAGES = [s for s in pipeline.STAGE_ORDER if s != "annotate-serve"]


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="INI config file; defaults apply when omitted")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--workers", type=int, default=None, help="worker threads for per-record stages")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memecap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in _STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        _add_common(p)
        if stage == "evaluate":
            p.add_argument("--baseline", default=None, help="summary.json to diff against")
            p.add_argument("--force", action="store_true", help="compare across config hashes")
        if stage == "heatmap":
            p.add_argument("--meme-id", default=None)
            p.add_argument("--token-index", type=int, default=0)

    p = sub.add_parser("stats", help="print corpus statistics")
    _add_common(p)

    p = sub.add_parser("annotate-serve", help="serve annotation tasks over HTTP")
    _add_common(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8321)
    p.add_argument("--kinds", default="pair", help="comma list of task kinds: pair,rubric")
    p.add_argument("--static-dir", default=None, help="serve the annotation UI bundle from this dir")

    p = sub.add_parser("grid-search", help="sweep loss-weight combinations end-to-end")
    _add_common(p)
    p.add_argument("--objective", default="Average", help="summary column to maximize")
    return parser


def _config_from_args(args) -> "pipeline.TrainConfig":
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    return load_config(args.config, overrides)


def _cmd_stats(cfg) -> int:
    root = pipeline.data_root(cfg)
    stats_file = root / "corpus" / "stats.json"
    if not stats_file.exists():
        raise DependencyError("missing corpus/stats.json; run `ingest` first")
    print(stats_file.read_text(encoding="utf-8"), end="")
    return 0


def _cmd_annotate_serve(cfg, args) -> int:
    import uvicorn

    root = pipeline.data_root(cfg)
    if not (root / "candidates" / "candidates.jsonl").exists():
        raise DependencyError("missing candidates/candidates.jsonl; run `candidates` first")
    candidate_sets = pipeline.load_candidate_sets(root)
    kinds = tuple(k.strip() for k in args.kinds.split(",") if k.strip())
    tasks = build_tasks(
        candidate_sets,
        fraction=cfg.annotation_fraction,
        seed=cfg.seed,
        kinds=kinds,
    )
    annotate_dir = root / "annotate"
    annotate_dir.mkdir(parents=True, exist_ok=True)
    (annotate_dir / "tasks.json").write_text(
        json.dumps([t.to_dict() for t in tasks], sort_keys=True, indent=1), encoding="utf-8"
    )

    manifest_dir = root / "corpus"

    def image_resolver(meme_id: str):
        path = manifest_dir / "images" / f"{meme_id}.png"
        return path if path.exists() else None

    service = AnnotationService(
        tasks,
        ResponseStore(annotate_dir / "responses.jsonl"),
        annotators=cfg.annotators,
        min_annotators=cfg.min_annotators,
        image_resolver=image_resolver,
    )
    app = create_app(service, static_dir=args.static_dir)
    print(f"serving {len(tasks)} tasks for annotators {', '.join(cfg.annotators)}")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def _cmd_grid_search(cfg, args) -> int:
    base_root = pipeline.data_root(cfg)

    def run_combo(combo: dict) -> dict:
        overrides = dict(combo)
        sub_cfg = load_config(
            None,
            {
                **{k: v for k, v in cfg.to_dict().items() if k != "data_dir"},
                **overrides,
                "data_dir": str(base_root / f"grid_{'_'.join(f'{v:g}' for v in combo.values())}"),
            },
        )
        pipeline.run_all(sub_cfg)
        summary = json.loads(
            (pipeline.data_root(sub_cfg) / "evaluate" / "summary.json").read_text(encoding="utf-8")
        )
        cols = dict(summary["columns"])
        if cols.get("Average") is None:
            cols["Average"] = cols.get("MAverage")
        return cols

    best, table = pipeline.grid_search(GridSpec(), run_combo, args.objective)
    out = {"objective": args.objective, "best": best, "table": table}
    print(json.dumps(out, indent=1, sort_keys=True))
    (base_root / "grid_search.json").write_text(
        json.dumps(out, indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config_from_args(args)
        if args.command == "stats":
            return _cmd_stats(cfg)
        if args.command == "annotate-serve":
            return _cmd_annotate_serve(cfg, args)
        if args.command == "grid-search":
            return _cmd_grid_search(cfg, args)
        if args.command == "evaluate":
            summary = pipeline.stage_evaluate(
                cfg,
                force=args.force,
                baseline=Path(args.baseline) if args.baseline else None,
            )
            print(json.dumps(summary, indent=1, sort_keys=True))
            return 0
        if args.command == "heatmap":
            written = pipeline.stage_heatmap(cfg, meme_id=args.meme_id, token_index=args.token_index)
            for path in written:
                print(path)
            return 0
        result = pipeline.run_stage(args.command, cfg)
        if args.command == "gen-corpus":
            print(result)
        elif args.command == "sft" and isinstance(result, CaptionDecoder):
            print(f"sft checkpoint {result.checksum()[:12]}")
        return 0
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return 2
    except MemecapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
