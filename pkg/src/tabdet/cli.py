"""Command-line surface: gen, train, predict, eval, gradcheck, params.

Every failure exits nonzero after printing a machine-readable JSON error
object to stderr: {"error": {"kind": <exception class>, "message": ...}}.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .datagen import BUILTIN_STYLES, generate_corpus, style_from_dict
from .io import (
    load_checkpoint,
    parse_config,
    read_detections,
    read_pages,
    save_checkpoint,
    write_detections,
)
from .metrics import DEFAULT_THRESHOLDS, PageEval, evaluate_dataset
from .postprocess import detect_tables
from .training import grad_check, train


def _load_style(spec: str):
    if spec in BUILTIN_STYLES:
        return BUILTIN_STYLES[spec]
    return style_from_dict(json.loads(Path(spec).read_text()))


def _cmd_gen(args: argparse.Namespace) -> int:
    style = _load_style(args.style)
    paths = generate_corpus(style, args.count, args.seed, args.out)
    print(json.dumps({k: str(v) for k, v in paths.items()}, indent=2))
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    model_cfg, train_cfg = parse_config(Path(args.config).read_text())
    train_pages = read_pages(args.train)
    val_pages = read_pages(args.val)
    weights, log = train(train_pages, val_pages, model_cfg, train_cfg)
    save_checkpoint(weights, model_cfg, args.out)
    with open(args.log, "w", encoding="utf-8") as fh:
        for record in log:
            fh.write(json.dumps(record, separators=(",", ":")))
            fh.write("\n")
    print(json.dumps({"checkpoint": args.out, "log": args.log, "epochs": len(log)}))
    return 0


def _cmd_predict(args: argparse.Namespace) -> int:
    weights, config = load_checkpoint(args.ckpt)
    pages = read_pages(args.pages)
    results = [
        detect_tables(
            page, weights, config, retain_attention=args.dump_attention
        )
        for page in pages
    ]
    write_detections(results, args.out)
    print(json.dumps({"pages": len(results), "out": args.out}))
    return 0


def _parse_thresholds(text: str) -> tuple[float, ...]:
    """Parse "start:step:stop" into an inclusive threshold grid."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError(f"thresholds must be start:step:stop, got {text!r}")
    start, step, stop = (float(p) for p in parts)
    if step <= 0 or stop < start:
        raise ValueError(f"bad threshold range {text!r}")
    out = []
    k = 0
    while True:
        tau = round(start + k * step, 10)
        if tau > stop + 1e-9:
            break
        out.append(round(tau, 4))
        k += 1
    return tuple(out)


def _cmd_eval(args: argparse.Namespace) -> int:
    gt_pages = read_pages(args.gt)
    thresholds = _parse_thresholds(args.thresholds) if args.thresholds else DEFAULT_THRESHOLDS

    if args.oracle_labels:
        entries = [
            PageEval(
                page.page_id,
                detect_tables(page, oracle_labels=True).detections,
                page.tables,
            )
            for page in gt_pages
        ]
    else:
        if not args.pred:
            raise ValueError("--pred is required unless --oracle-labels is set")
        by_id = {}
        for record in read_detections(args.pred):
            if record["page_id"] in by_id:
                raise ValueError(f"duplicate prediction for page {record['page_id']!r}")
            by_id[record["page_id"]] = [
                (tuple(d["box"]), float(d["confidence"])) for d in record["detections"]
            ]
        known = {p.page_id for p in gt_pages}
        stray = set(by_id) - known
        if stray:
            raise ValueError(f"predictions for unknown pages: {sorted(stray)[:5]}")
        entries = [
            PageEval(p.page_id, tuple(by_id.get(p.page_id, ())), p.tables) for p in gt_pages
        ]

    report = evaluate_dataset(entries, thresholds)
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
    print(report.to_text_table())
    return 0


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    model_cfg, _ = parse_config(Path(args.config).read_text())
    report = grad_check(model_cfg, seed=args.seed, tol=args.tol)
    print(
        json.dumps(
            {
                "passed": report.passed,
                "tolerance": report.tolerance,
                "max_relative_error": dict(sorted(report.errors.items())),
            },
            indent=2,
        )
    )
    return 0 if report.passed else 1


def _cmd_params(args: argparse.Namespace) -> int:
    from .model import param_count

    model_cfg, _ = parse_config(Path(args.config).read_text())
    print(param_count(model_cfg))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tabdet",
        description="Table detection from text-block geometry: data, training, "
        "inference, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    p.add_argument("--style", required=True,
                   help=f"builtin style ({', '.join(BUILTIN_STYLES)}) or a profile JSON path")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="train a block classifier")
    p.add_argument("--train", required=True, help="training pages JSONL")
    p.add_argument("--val", required=True, help="validation pages JSONL")
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", required=True, help="metrics log JSONL output path")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="detect tables with a trained checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pages", required=True, help="input pages JSONL")
    p.add_argument("--out", required=True, help="detections JSONL output path")
    p.add_argument("--dump-attention", action="store_true",
                   help="include per-head attention matrices in the output")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("eval", help="score detections against ground truth")
    p.add_argument("--pred", help="detections JSONL (optional with --oracle-labels)")
    p.add_argument("--gt", required=True, help="ground-truth pages JSONL")
    p.add_argument("--thresholds", help="IoU grid as start:step:stop (default 0.5:0.05:0.95)")
    p.add_argument("--out", help="write the report JSON here")
    p.add_argument("--oracle-labels", action="store_true",
                   help="run post-processing on gold labels instead of predictions")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="verify analytic gradients numerically")
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("params", help="print the exact parameter count")
    p.add_argument("--config", required=True, help="JSON config file")
    p.set_defaults(func=_cmd_params)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface every failure as machine-readable JSON
        print(
            json.dumps({"error": {"kind": type(exc).__name__, "message": str(exc)}}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
