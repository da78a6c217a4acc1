"""Command-line interface.

A thin client over the runners: each subcommand builds a typed request,
prints the fully resolved config, executes locally (or against a running
service via --server), and prints a one-line summary.  Exit codes: 0 on
success, 1 on usage/validation errors, 2 on runtime errors.

Adapter backends may need credentials or checkpoint paths; pass those
through the DIFFCOMPOSE_ADAPTER_PATH environment variable, which this tool
never interprets.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Any, Optional

from pydantic import ValidationError

from . import __version__, runners
from .errors import ComposeError, ConfigurationError
from .service import schemas

_STEPS_SECTIONS = {
    "remove": ("removal",),
    "harmonize": ("harmonization",),
    "compose": ("composition",),
    "pipeline": ("removal", "harmonization", "composition"),
}

_SERVER_PATHS = {
    "remove": "/v1/remove",
    "paste": "/v1/paste",
    "harmonize": "/v1/harmonize",
    "compose": "/v1/compose",
    "pipeline": "/v1/pipeline",
    "diagnose": "/v1/diagnose",
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _add_common(sp: argparse.ArgumentParser, with_steps: bool = True,
                with_backend: bool = True) -> None:
    sp.add_argument("--config", help="TOML run config path")
    if with_backend:
        sp.add_argument(
            "--backend",
            help="analytic | toy-attention | adapter:<module:factory> "
                 "(default: analytic)")
        sp.add_argument("--seed", type=int,
                        help="base RNG seed (default: 0)")
    if with_steps:
        sp.add_argument("--steps", type=int,
                        help="optimization steps override "
                             "(defaults: removal 150, harmonization 200, "
                             "composition 500 text / 200 sketch)")
    sp.add_argument("--resolution", type=int,
                    help="working resolution (default: 512)")
    sp.add_argument("--server",
                    help="base URL of a running service; executes remotely")
    sp.add_argument("--dry-run", action="store_true",
                    help="print the resolved config and exit")
    sp.add_argument("-v", "--verbose", action="count", default=0,
                    help="increase log verbosity (-v, -vv)")


def build_parser() -> _Parser:
    parser = _Parser(prog="diffcompose",
                     description="Zero-shot image composition toolkit")
    parser.add_argument("--version", action="version",
                        version=f"diffcompose {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    remove = sub.add_parser(
        "remove", help="erase a masked object from an image")
    remove.add_argument("--image", required=True, help="input image PNG")
    remove.add_argument("--mask", required=True,
                        help="grayscale mask PNG of the region to remove")
    remove.add_argument("--out", required=True, help="output image PNG")
    _add_common(remove)

    paste = sub.add_parser(
        "paste", help="copy-paste a masked object into a background")
    paste.add_argument("--background", required=True)
    paste.add_argument("--object-image", required=True)
    paste.add_argument("--object-mask", required=True)
    paste.add_argument("--region-mask",
                       help="target region mask (bbox-fit placement)")
    paste.add_argument("--out", required=True)
    paste.add_argument("--out-mask",
                       help="pasted-mask PNG (default: <out>.mask.png)")
    paste.add_argument("--offset", type=int, nargs=2, metavar=("Y", "X"),
                       help="explicit top-left placement in pixels")
    paste.add_argument("--scale", type=float,
                       help="explicit object scale (default: 1.0)")
    _add_common(paste, with_steps=False, with_backend=False)

    harmonize = sub.add_parser(
        "harmonize", help="blend a pasted object's appearance into a scene")
    harmonize.add_argument("--image", required=True, help="paste image PNG")
    harmonize.add_argument("--mask", required=True,
                           help="pasted-object mask PNG")
    harmonize.add_argument("--out", required=True)
    _add_common(harmonize)

    compose = sub.add_parser(
        "compose", help="steer structure by source/target conditions")
    compose.add_argument("--image", required=True)
    compose.add_argument("--out", required=True)
    compose.add_argument("--kind", choices=["text", "sketch", "canny"],
                         default="text",
                         help="condition kind (default: text)")
    compose.add_argument("--source", required=True,
                         help="source prompt, or condition image for "
                              "sketch/canny")
    compose.add_argument("--target", required=True,
                         help="target prompt, or condition image for "
                              "sketch/canny")
    _add_common(compose)

    pipeline = sub.add_parser(
        "pipeline", help="full run: remove, paste, harmonize, compose")
    pipeline.add_argument("--image", required=True,
                          help="background source image PNG")
    pipeline.add_argument("--region-mask", required=True)
    pipeline.add_argument("--object-image", required=True)
    pipeline.add_argument("--object-mask", required=True)
    pipeline.add_argument("--out-dir", required=True)
    pipeline.add_argument("--kind", choices=["text", "sketch", "canny"],
                          help="optional composition condition kind")
    pipeline.add_argument("--source")
    pipeline.add_argument("--target")
    pipeline.add_argument("--offset", type=int, nargs=2, metavar=("Y", "X"))
    pipeline.add_argument("--scale", type=float)
    _add_common(pipeline)

    diagnose = sub.add_parser(
        "diagnose", help="write a low-density heatmap for an image")
    diagnose.add_argument("--image", required=True)
    diagnose.add_argument("--out", required=True, help="heatmap PNG "
                          "(min-max normalized grayscale)")
    diagnose.add_argument("--samples", type=int,
                          help="noise draws (default: 1000)")
    diagnose.add_argument("--t-set", type=int, nargs="+",
                          help="timesteps sampled (default: 100 500 900)")
    diagnose.add_argument("--prompt", default="",
                          help="prompt for the predictions (default: empty)")
    _add_common(diagnose, with_steps=False)

    serve = sub.add_parser("serve", help="run the HTTP service")
    serve.add_argument("--host", default="127.0.0.1",
                       help="bind address (default: 127.0.0.1)")
    serve.add_argument("--port", type=int, default=8732,
                       help="port (default: 8732)")
    return parser


def _request_for(args: argparse.Namespace):
    common = dict(
        config=args.config,
        backend=getattr(args, "backend", None),
        seed=getattr(args, "seed", None),
        steps=getattr(args, "steps", None),
        resolution=args.resolution,
    )
    if args.command == "remove":
        return schemas.RemoveRequest(image=args.image, mask=args.mask,
                                     out=args.out, **common)
    if args.command == "paste":
        return schemas.PasteRequest(
            background=args.background, object_image=args.object_image,
            object_mask=args.object_mask, region_mask=args.region_mask,
            out=args.out, out_mask=args.out_mask,
            offset=tuple(args.offset) if args.offset else None,
            scale=args.scale, config=args.config,
            resolution=args.resolution)
    if args.command == "harmonize":
        return schemas.HarmonizeRequest(image=args.image, mask=args.mask,
                                        out=args.out, **common)
    if args.command == "compose":
        return schemas.ComposeRequest(
            image=args.image, out=args.out, kind=args.kind,
            source=args.source, target=args.target, **common)
    if args.command == "pipeline":
        return schemas.PipelineRequest(
            image=args.image, region_mask=args.region_mask,
            object_image=args.object_image, object_mask=args.object_mask,
            out_dir=args.out_dir, kind=args.kind, source=args.source,
            target=args.target,
            offset=tuple(args.offset) if args.offset else None,
            scale=args.scale, **common)
    if args.command == "diagnose":
        common.pop("steps", None)
        return schemas.DiagnoseRequest(
            image=args.image, out=args.out, samples=args.samples,
            t_set=args.t_set, prompt=args.prompt, **common)
    raise ConfigurationError(f"unknown command {args.command!r}")


_RUNNERS = {
    "remove": runners.run_remove,
    "paste": runners.run_paste,
    "harmonize": runners.run_harmonize,
    "compose": runners.run_compose,
    "pipeline": runners.run_pipeline_cmd,
    "diagnose": runners.run_diagnose,
}


def _resolved_config_dict(args: argparse.Namespace) -> dict[str, Any]:
    flags = runners.build_flag_overrides(
        backend=getattr(args, "backend", None),
        seed=getattr(args, "seed", None),
        resolution=args.resolution,
        steps=getattr(args, "steps", None),
        steps_sections=_STEPS_SECTIONS.get(args.command, ()),
    )
    resp = runners.run_resolve(schemas.ResolveConfigRequest(
        config=args.config, overrides=flags))
    return resp.resolved


def _summary_line(command: str, response) -> str:
    data = response if isinstance(response, dict) else response.model_dump()
    parts = []
    for key in ("out", "out_dir", "out_mask", "log", "manifest"):
        if data.get(key):
            parts.append(f"{key}={data[key]}")
    final = data.get("final")
    if final:
        parts.append(f"total={final['total']:.6g}")
        parts.append(f"dds={final['dds']:.6g}")
    if data.get("stats"):
        stats = data["stats"]
        parts.append(f"median={stats['median']:.6g}")
        parts.append(f"max={stats['max']:.6g}")
    if "wall_time_s" in data:
        parts.append(f"wall={data['wall_time_s']:.2f}s")
    return f"{command}: " + " ".join(parts)


def _run_remote(base_url: str, command: str, request) -> dict[str, Any]:
    import httpx

    url = base_url.rstrip("/") + _SERVER_PATHS[command]
    reply = httpx.post(url, json=request.model_dump(), timeout=600.0)
    if reply.status_code >= 400:
        try:
            body = reply.json()
        except ValueError:
            body = {"error": "HTTPError", "message": reply.text}
        if reply.status_code == 400:
            raise ConfigurationError(body.get("message", reply.text))
        raise ComposeError(body.get("message", reply.text))
    return reply.json()


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    if args.command == "serve":
        import uvicorn

        from .service import create_app

        uvicorn.run(create_app(), host=args.host, port=args.port)
        return 0

    logging.basicConfig(
        level=(logging.DEBUG if args.verbose >= 2
               else logging.INFO if args.verbose == 1 else logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s")
    try:
        request = _request_for(args)
        resolved = _resolved_config_dict(args)
        print(json.dumps({"resolved_config": resolved}, indent=2,
                         sort_keys=True))
        if args.dry_run:
            return 0
        if args.server:
            response = _run_remote(args.server, args.command, request)
        else:
            response = _RUNNERS[args.command](request)
        print(_summary_line(args.command, response))
        return 0
    except ValidationError as exc:
        print(f"error: invalid request: {exc}", file=sys.stderr)
        return 1
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ComposeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
