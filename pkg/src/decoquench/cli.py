"""Command line entry point: ``decoquench run|analyze|validate|version``.

Exit codes: 0 success, 1 invalid configuration, 2 runtime failure,
3 partial completion (some runs censored or failed).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .runner import ConfigError, analyze, output_dir, parse_config, run_experiment

log = logging.getLogger("decoquench")


def _load(path: str):
    p = Path(path)
    return parse_config(p.read_text(), base_dir=p.parent)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="decoquench", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)
    for verb, helptext in (("run", "execute a sweep"),
                           ("analyze", "fit scaling laws to finished sweeps"),
                           ("validate", "check a configuration without running it")):
        sp = sub.add_parser(verb, help=helptext)
        sp.add_argument("config")
    sub.add_parser("version", help="print the toolkit version")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")

    if args.verb == "version":
        print(__version__)
        return 0
    try:
        cfg = _load(args.config)
    except (ConfigError, OSError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 1
    if args.verb == "validate":
        print(f"ok: {cfg.kind}, {len(cfg.runs()) if cfg.kind != 'analyze' else len(cfg.manifests)} "
              f"{'runs' if cfg.kind != 'analyze' else 'manifests'}")
        return 0
    if args.verb == "analyze" and cfg.kind != "analyze":
        print("analyze needs a config of kind 'analyze'", file=sys.stderr)
        return 1
    try:
        man = analyze(cfg) if cfg.kind == "analyze" else run_experiment(cfg)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = output_dir(cfg)
    print(f"{man.status}: {len(man.files)} files in {out}")
    if cfg.kind == "analyze":
        print((out / "fit_summary.txt").read_text(), end="")
    for r in man.runs:
        if r.get("status") not in ("ok", None):
            log.warning("run %s: %s (%s)", r.get("index"), r["status"], r.get("error"))
    return man.exit_code


if __name__ == "__main__":
    sys.exit(main())
