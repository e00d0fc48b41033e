"""Command-line entry point: ``inmateria --config run.json --out runs/a --stage pipeline``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import ConfigError
from .pipeline import PIPELINE, STAGES, Run, RunConfig, run_stage

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

_GROUPS = {"pipeline": PIPELINE, "all": STAGES}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="inmateria", description=__doc__)
    ap.add_argument("--config", help="JSON run configuration (defaults apply to omitted keys)")
    ap.add_argument("--seed", type=int, help="override the top-level seed")
    ap.add_argument("--out", default="run", help="output directory; every artifact path is relative to it")
    ap.add_argument("--channels", type=int, help="override the number of DNPU channels")
    ap.add_argument("--stage", default="pipeline", choices=list(STAGES) + list(_GROUPS),
                    help="one stage, 'pipeline' (extract..energy) or 'all' (characterize first)")
    ap.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
    ap.add_argument("-q", "--quiet", action="store_true")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(name)s: %(message)s")
    try:
        if args.config:
            cfg = RunConfig.load(args.config, args.seed, args.channels)
        else:
            cfg = RunConfig.from_dict({}, args.seed, args.channels)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if args.print_config:
        print(json.dumps(cfg.data, indent=1, sort_keys=True))
        return EXIT_OK
    stages = _GROUPS.get(args.stage, (args.stage,))
    run = Run(args.out, cfg)
    for stage in stages:
        try:
            outputs = run_stage(run, stage)
        except ConfigError as e:
            print(f"config error in stage {stage}: {e}", file=sys.stderr)
            return EXIT_CONFIG
        except Exception as e:  # any failure inside a stage maps to one exit code
            print(f"stage {stage} failed: {type(e).__name__}: {e}", file=sys.stderr)
            return EXIT_STAGE
        for rel in outputs:
            logging.getLogger("inmateria").info("  wrote %s", rel)
        if stage == "infer" and not args.quiet:
            print((run.path("infer/report.txt")).read_text(), end="")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
