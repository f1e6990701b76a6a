"""Command-line interface: a thin client over the detection service.

Subcommands map one-to-one onto service endpoints. By default requests run
against an in-process instance of the service; pass --server to target a
running deployment instead. Exit codes: 0 success, 1 usage error, 2 data
error.
"""

from __future__ import annotations

import argparse
import json
import sys

from .client import ServiceClient

USAGE_EXIT = 1
DATA_EXIT = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(USAGE_EXIT)


def _add_common(parser):
    parser.add_argument("--config", help="flat dotted-key JSON config file")
    parser.add_argument("--server", help="base URL of a running service "
                        "(default: in-process)")


def build_parser():
    parser = _Parser(prog="hf", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth", help="generate synthetic scenes", add_help=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--out", required=True, help="output dataset directory")
    _add_common(p)

    p = sub.add_parser("train", help="train a model on a scene directory")
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True, help="model JSON output path")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float, default=None, help="learning rate (default 2e-4)")
    p.add_argument("--seed", type=int)
    _add_common(p)

    p = sub.add_parser("infer", help="run detection over scenes")
    p.add_argument("--scenes", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="detections JSONL path")
    _add_common(p)

    p = sub.add_parser("eval", help="score detections against ground truth")
    p.add_argument("--preds", required=True)
    p.add_argument("--gts", required=True, help="scene directory with labels")
    p.add_argument("--iou", type=float)
    p.add_argument("--classes", help="comma-separated class names")
    p.add_argument("--out", help="write the report JSON here as well")
    _add_common(p)

    p = sub.add_parser("render-bev", help="render a BEV visualization to PPM")
    p.add_argument("--scenes", required=True)
    p.add_argument("--scene", help="scene id (default: first)")
    p.add_argument("--preds", help="detections JSONL to overlay")
    p.add_argument("--model", help="render refined BEV features as background")
    p.add_argument("--iou", type=float, default=0.3)
    p.add_argument("--out", required=True, help="output PPM path")
    _add_common(p)

    p = sub.add_parser("serve", help="run the service with uvicorn")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    return parser


def _fail_from_response(resp):
    try:
        detail = resp.json().get("detail")
    except ValueError:
        detail = resp.text
    if isinstance(detail, dict) and detail.get("kind") == "data":
        sys.stderr.write(f"data error: {detail.get('message')}\n")
        return DATA_EXIT
    sys.stderr.write(f"error ({resp.status_code}): {detail}\n")
    return USAGE_EXIT if resp.status_code == 422 else DATA_EXIT


def _print_json(doc):
    sys.stdout.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return USAGE_EXIT
    if args.command == "serve":
        import uvicorn

        from .service.app import app
        uvicorn.run(app, host=args.host, port=args.port)
        return 0

    with ServiceClient(base_url=args.server) as client:
        if args.command == "synth":
            resp = client.synth({"out_dir": args.out, "seed": args.seed,
                                 "count": args.count, "config_path": args.config})
        elif args.command == "train":
            resp = client.train({"scenes_dir": args.scenes, "out_path": args.out,
                                 "steps": args.steps, "lr": args.lr,
                                 "seed": args.seed, "config_path": args.config})
        elif args.command == "infer":
            resp = client.infer({"scenes_dir": args.scenes, "model_path": args.model,
                                 "out_path": args.out, "config_path": args.config})
        elif args.command == "eval":
            classes = args.classes.split(",") if args.classes else None
            resp = client.evaluate({"preds_path": args.preds, "gts_dir": args.gts,
                                    "iou_thr": args.iou, "classes": classes,
                                    "out_path": args.out, "config_path": args.config})
        elif args.command == "render-bev":
            resp = client.render_bev({"scenes_dir": args.scenes, "scene_id": args.scene,
                                      "preds_path": args.preds, "model_path": args.model,
                                      "iou_thr": args.iou, "config_path": args.config})
        else:  # pragma: no cover - argparse restricts choices
            return USAGE_EXIT

        if resp.status_code != 200:
            return _fail_from_response(resp)
        if args.command == "render-bev":
            with open(args.out, "wb") as fh:
                fh.write(resp.content)
            sys.stdout.write(f"wrote {args.out}\n")
        else:
            _print_json(resp.json())
    return 0


if __name__ == "__main__":
    sys.exit(main())
