"""``kvctl``: admin CLI for a running manager. Every command prints JSON."""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading

import numpy as np

from .manager import ControlClient, Manager

logger = logging.getLogger(__name__)


def load_tokens(args) -> list[int]:
    """Tokens from ``--tokens 1,2,3`` or ``--tokens-file`` (JSON list or ``.npy``)."""
    if args.tokens:
        return [int(t) for t in args.tokens.split(",") if t.strip()]
    if args.tokens_file:
        if args.tokens_file.endswith(".npy"):
            return np.load(args.tokens_file).astype(int).tolist()
        with open(args.tokens_file) as f:
            return [int(t) for t in json.load(f)]
    raise SystemExit("give --tokens or --tokens-file")


def _token_args(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--tokens", help="comma-separated token ids")
    g.add_argument("--tokens-file", help="JSON list of token ids, or a .npy array")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kvctl", description=__doc__)
    p.add_argument("--manager", default="127.0.0.1:7070", help="manager endpoint host:port")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("lookup", help="prefix-hit tokens per instance")
    _token_args(s)
    s = sub.add_parser("instances", help="registered instances and their endpoints")
    s.add_argument("ids", nargs="*", help="only these instances (query_ip)")
    s = sub.add_parser("move", help="relocate cached tokens between instances")
    s.add_argument("--src", required=True)
    s.add_argument("--dst", required=True)
    _token_args(s)
    for verb in ("clear", "pin", "compress"):
        s = sub.add_parser(verb, help=f"{verb} cached tokens on one instance")
        s.add_argument("--instance", required=True)
        s.add_argument("--tier", required=True, help="ram, disk or remote:<name>")
        _token_args(s)
        if verb == "pin":
            s.add_argument("--off", action="store_true", help="unpin instead")
        if verb == "compress":
            s.add_argument("--method", required=True, help="codec name, e.g. identity or q8-scale")
    s = sub.add_parser("manager", help="run a manager in the foreground")
    s.add_argument("--endpoint", default="127.0.0.1:7070")
    return p


def run_manager(endpoint: str) -> None:
    with Manager(endpoint) as m:
        print(json.dumps({"manager": m.endpoint}), flush=True)
        stop = threading.Event()
        signal.signal(signal.SIGTERM, lambda *_: stop.set())
        try:
            stop.wait()
        except KeyboardInterrupt:
            pass


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    if args.cmd == "manager":
        run_manager(args.endpoint)
        return 0
    try:
        with ControlClient(args.manager) as c:
            if args.cmd == "lookup":
                out = c.lookup(load_tokens(args))
            elif args.cmd == "instances":
                out = c.query_ip(args.ids) if args.ids else c.instances()
            elif args.cmd == "move":
                out = c.move(args.src, args.dst, load_tokens(args))
            elif args.cmd == "clear":
                out = c.clear(load_tokens(args), args.instance, args.tier)
            elif args.cmd == "pin":
                out = c.pin(load_tokens(args), args.instance, args.tier, on=not args.off)
            else:
                out = c.compress(load_tokens(args), args.instance, args.tier, args.method)
    except Exception as e:  # noqa: BLE001 - report as JSON
        print(json.dumps({"error": type(e).__name__, "detail": str(e)}))
        return 1
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
