"""Command-line client: one subcommand per experiment pipeline.

Runs in-process by default; with ``--server URL`` the config is posted to a
running service and the returned artifacts are written locally.
"""

from __future__ import annotations

import argparse
import sys

from .cli_io import EXPERIMENTS, RunManifest, execute, load_config, parse_config, write_outputs
from .errors import ConfigInvalid, PipelineFailure


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ymhstab", description="Vortex and tube stability experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} pipeline")
        p.add_argument("--config", metavar="PATH", help="YAML experiment config")
        p.add_argument("--out", metavar="DIR", help="output directory (overrides the config)")
        p.add_argument("--seed", type=int, metavar="N", help="random seed (overrides the config)")
        p.add_argument("--server", metavar="URL", help="post the run to a running service")
        p.add_argument("--strict", action="store_true", help="exit with status 3 if any check fails")
    return parser


def resolve_config(args):
    cfg = load_config(args.config) if args.config else parse_config({"experiment": args.command})
    if cfg.experiment != args.command:
        raise ConfigInvalid(f"config is for '{cfg.experiment}', not '{args.command}'")
    update = {}
    if args.out is not None:
        update["out"] = args.out
    if args.seed is not None:
        update["seed"] = args.seed
    return parse_config({**cfg.model_dump(), **update})


def _remote(url: str, cfg):
    import httpx

    resp = httpx.post(url.rstrip("/") + "/run", json=cfg.model_dump(mode="json"), timeout=None)
    if resp.status_code != 200:
        raise PipelineFailure(f"server returned {resp.status_code}: {resp.text}")
    body = resp.json()
    return RunManifest.model_validate(body["manifest"]), body["artifacts"]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        manifest, arts = _remote(args.server, cfg) if args.server else execute(cfg)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except PipelineFailure as exc:
        print(f"pipeline failure: {exc}", file=sys.stderr)
        return 1
    outdir = write_outputs(cfg.out, cfg, manifest, arts)
    for c in manifest.checks:
        value = "" if c.value is None else f" value={c.value:.6g}"
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}{value}")
    print(f"wrote {len(arts)} artifacts and manifest.yaml to {outdir}")
    return 3 if args.strict and not manifest.passed else 0


if __name__ == "__main__":
    sys.exit(main())
