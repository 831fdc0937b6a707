"""Command-line entry point: extract features and write a dataset directory.

Logs go to stderr; a JSON summary goes to stdout. On failure the last
stderr line is a machine-readable JSON object with the error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ExtractorConfig, load_config
from .export import export_dataset, run_extraction
from .samples import load_raw_manifest
from .services import HttpConfig, HttpServices, StubServices, ThrottledServices

log = logging.getLogger("rxf_extract")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rxf-extract", description=__doc__)
    parser.add_argument("--manifest", required=True, help="raw-manifest JSON path")
    parser.add_argument("--out", required=True, help="output dataset directory")
    parser.add_argument("--services", choices=("stub", "http"), default="http")
    parser.add_argument("--http-config", help="endpoint config JSON (http services)")
    parser.add_argument("--config", help="extractor config JSON")
    parser.add_argument("--cache", help="resume-cache directory")
    parser.add_argument("--jobs", type=int, default=1, help="samples extracted in parallel")
    parser.add_argument("--budget", type=int, default=4, help="max in-flight calls per service")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    return parser


def run(args: argparse.Namespace) -> int:
    config = load_config(args.config) if args.config else ExtractorConfig()
    manifest = load_raw_manifest(args.manifest)
    if args.services == "stub":
        services = StubServices(config)
    else:
        if not args.http_config:
            raise ValueError("--services http requires --http-config")
        services = HttpServices(HttpConfig(**json.loads(Path(args.http_config).read_text())), config)
    if args.jobs > 1:
        services = ThrottledServices(services, budget=args.budget)

    result = run_extraction(manifest, services, config, cache_dir=args.cache, jobs=args.jobs)
    manifest_path = export_dataset(result, manifest, config, args.out)
    written = json.loads(manifest_path.read_text())
    print(
        json.dumps(
            {
                "dataset_id": written["dataset_id"],
                "split": written["split"],
                "manifest": str(manifest_path),
                "n_samples": len(manifest.samples),
                "n_extracted": len(result.samples),
                "n_failed": len(result.failures),
                "cache_hits": result.cache_hits,
                "n_images": sum(len(e["image_ids"]) for e in written["environments"]),
                "n_queries": len(written["queries"]),
            },
            indent=2,
        )
    )
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return run(args)
    except Exception as err:  # surface a machine-readable last line
        log.error("%s", err)
        print(json.dumps({"error": str(err), "type": type(err).__name__}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
