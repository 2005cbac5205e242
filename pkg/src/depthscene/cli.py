"""Command-line entry point: ``depthscene <command> --config cfg.json --out DIR``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical
failure (for example every hypothesis scoring zero).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import experiments, render
from .config import COMMANDS, ConfigError, defaults, load_config
from .inference import DegenerateWeights
from .io import FormatError

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

HANDLERS = {
    "learn": experiments.cmd_learn,
    "generate": experiments.cmd_generate,
    "infer": experiments.cmd_infer,
    "track": experiments.cmd_track,
    "bench-tracking": experiments.cmd_bench_tracking,
    "pose-benchmark": experiments.cmd_pose_benchmark,
    "type-benchmark": experiments.cmd_type_benchmark,
    "ablate": experiments.cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="depthscene", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON config; omitted keys take their defaults")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1, help="worker threads; never changes results")
        p.add_argument("--print-config", action="store_true",
                       help="print the effective config (defaults merged with --config) and exit")
    return ap


def _fail(code: int, msg: str) -> int:
    print(f"depthscene: error: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.command, args.config)
    except ConfigError as e:
        return _fail(EXIT_CONFIG, str(e))
    if args.print_config:
        print(json.dumps(cfg.model_dump(mode="json") if args.config else defaults(args.command),
                         indent=2, sort_keys=True))
        return EXIT_OK
    render.set_threads(args.threads)
    try:
        HANDLERS[args.command](cfg, args.out, args.seed)
    except (DegenerateWeights, FloatingPointError) as e:
        return _fail(EXIT_NUMERIC, f"numerical failure: {e}")
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        name = getattr(e, "filename", None)
        return _fail(EXIT_IO, f"cannot access {name}: {e.strerror}" if name else str(e))
    except (FormatError, OSError) as e:
        return _fail(EXIT_IO, str(e))
    except (ValueError, KeyError) as e:
        return _fail(EXIT_CONFIG, str(e))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
