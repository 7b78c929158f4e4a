"""Command line: ``bohmlab run|validate|replay``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ..configspace import EvolutionError
from ..ensemble import EnsembleIntegrationError
from ..io import read_ensemble
from ..pilotwave import NodeUnderflowError
from . import run, validate
from .config import CONFIG_PATH_ENV, ConfigError

EXIT_INVALID = 2
EXIT_NUMERICAL = 3


def _parser():
    p = argparse.ArgumentParser(prog="bohmlab", description="Bohmian trajectory and perception-measure experiments.",
                                epilog=f"Config files are also looked up in ${CONFIG_PATH_ENV} (path-separated dirs).")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the experiment named in a config")
    r.add_argument("config")
    r.add_argument("-o", "--out", help="output directory (default: output.dir or out/<name>)")
    r.add_argument("--seed", type=int, help="override the config seed")
    r.add_argument("-j", "--threads", type=int, default=1, help="threads for ensemble integration")

    v = sub.add_parser("validate", help="list every problem in a config")
    v.add_argument("config")

    rp = sub.add_parser("replay", help="re-analyze an exported ensemble without re-integrating")
    rp.add_argument("config")
    rp.add_argument("--ensemble", required=True, help="ensemble CSV written by a previous run")
    rp.add_argument("-o", "--out")
    rp.add_argument("--seed", type=int)
    return p


def _numerical(err) -> str:
    if isinstance(err, EvolutionError):
        return f"configspace: {err}"
    if isinstance(err, EnsembleIntegrationError):
        return f"ensemble: {err}"
    return f"pilotwave: {err}"


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "validate":
        try:
            problems = validate(args.config)
        except OSError as err:
            print(f"error: {err}", file=sys.stderr)
            return EXIT_INVALID
        for line in problems:
            print(line)
        if not problems:
            print("ok")
        return EXIT_INVALID if problems else 0

    ensemble = None
    if args.command == "replay":
        path = Path(args.ensemble)
        ensemble = read_ensemble(path, path.with_suffix(".json"))
    try:
        manifest = run(args.config, args.out, args.seed, getattr(args, "threads", 1), ensemble)
    except ConfigError as err:
        for line in err.diagnostics:
            print(line, file=sys.stderr)
        return EXIT_INVALID
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except (EvolutionError, NodeUnderflowError, EnsembleIntegrationError) as err:
        print(_numerical(err), file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"{manifest['experiment']}: wrote {len(manifest['files'])} files "
          f"(config {manifest['config_hash']}, {manifest['wall_time']} s)")
    return 0
