"""Command-line verbs over :mod:`koopman_mpc.experiments`.

Usage::

    python3 -m koopman_mpc VERB [--config FILE] [--seed N] [--scale desk|paper] [--out-dir DIR]

On success a one-line JSON summary goes to stdout and the exit code is 0.
On failure a single ``error: {...}`` JSON line goes to stderr and the exit
code is nonzero (2 for configuration and usage errors, 1 otherwise).
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .config import ConfigError
from .experiments import PRESETS, VERBS, load_settings


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="koopman_mpc", description="Koopman MPC experiments")
    parser.add_argument("verb", choices=sorted(VERBS))
    parser.add_argument("--config", default=None, help="flat 'name = value' overrides")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--scale", choices=sorted(PRESETS), default="desk")
    parser.add_argument("--out-dir", default="out")
    return parser


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.integer, np.floating, np.bool_)):
        return value.item()
    return value


def _fail(verb, exc: Exception, code: int) -> int:
    line = {"verb": verb, "error": type(exc).__name__, "message": str(exc)}
    for attr in ("path", "line"):
        if getattr(exc, attr, None) is not None:
            line[attr] = str(getattr(exc, attr)) if attr == "path" else exc.line
    print("error: " + json.dumps(line, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    verb = None
    try:
        args = build_parser().parse_args(argv)
        verb = args.verb
        settings = load_settings(args.config, args.scale, args.seed)
        summary = VERBS[verb](settings, args.out_dir)
    except ConfigError as exc:
        return _fail(verb, exc, 2)
    except Exception as exc:  # every other failure still ends in one parseable line
        return _fail(verb, exc, 1)
    print(json.dumps({"verb": verb, "ok": True, "summary": _jsonable(summary)}, sort_keys=True))
    return 0
