"""Command-line entry point: ``visprobe <subcommand>``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .embedding import StoreError, read_embedding_store
from .pipeline import STAGES, DependencyError, Pipeline, PipelineError, dump_config, load_config
from .tasks import TASKS

STAGE_COMMANDS = {
    "segment": "segment",
    "stats": "stats",
    "encode": "encode",
    "ingest": "encode",
    "dict": "dict",
    "sentences": "sentences",
    "task": "tasks",
    "probe": "probes",
    "report": "report",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="visprobe", description=__doc__)
    parser.add_argument("--config", type=Path, help="YAML config (defaults used when omitted)")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--workers", type=int, help="worker processes for per-image stages")
    parser.add_argument("--out", type=Path, help="output directory (overrides config 'out')")
    parser.add_argument("--force", action="store_true", help="re-run stages even when up to date")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("segment", help="SLIC label maps at every resolution")
    sub.add_parser("stats", help="per-superpixel area, perimeter, CO and ICV")
    sub.add_parser("encode", help="encode superpixels and images with the configured encoders")
    ing = sub.add_parser("ingest", help="ingest external embedding stores (same stage as encode)")
    ing.add_argument("--check", type=Path, metavar="STORE",
                     help="only validate and summarise one store file")
    sub.add_parser("dict", help="concepts, filtering and the visual-word dictionary")
    sub.add_parser("sentences", help="assign words and build visual sentences")
    for name, helptext in (("task", "build one probing dataset"), ("probe", "train one task's probes")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("name", choices=[*TASKS, "all"])
    sub.add_parser("report", help="Table-2 layout, per-word and per-feature tables")
    sub.add_parser("run", help="all configured stages in order")
    show = sub.add_parser("config", help="print the effective config")
    show.add_argument("--json", action="store_true")
    synth = sub.add_parser("synth", help="write the planted-motif dataset and its config")
    synth.add_argument("directory", type=Path)
    synth.add_argument("--n-images", type=int, default=200)
    return parser


def _config(args) -> dict:
    overrides = {"seed": args.seed, "workers": args.workers,
                 "out": str(args.out.resolve()) if args.out else None}
    return load_config(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            from .synthetic import generate_dataset, write_dataset, write_synthetic_config

            images = generate_dataset(args.n_images, seed=args.seed or 0)
            manifest = write_dataset(images, args.directory)
            config = write_synthetic_config(args.directory)
            print(f"wrote {len(images)} images, {manifest} and {config}")
            return 0
        if args.command == "ingest" and args.check is not None:
            store = read_embedding_store(args.check)
            print(f"{args.check}: role={store.role} dim={store.dim} entries={len(store)}")
            return 0
        cfg = _config(args)
        if args.command == "config":
            print(json.dumps(cfg, indent=1) if args.json else dump_config(cfg), end="")
            return 0
        pipe = Pipeline(cfg)
        if args.command == "run":
            status = pipe.run(force=args.force)
        else:
            stage = STAGE_COMMANDS[args.command]
            tasks = None
            if stage in ("tasks", "probes") and args.name != "all":
                tasks = [args.name]
            status = pipe.run([stage], tasks=tasks, force=args.force)
        for key, value in status.items():
            print(f"{key}: {value}")
        return 0
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return 2
    except (PipelineError, StoreError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())


__all__ = ["main", "build_parser", "STAGES"]
