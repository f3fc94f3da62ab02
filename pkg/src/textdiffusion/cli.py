"""Command-line interface.

Subcommands: train, generate, eval, plot-schedule.  Exit codes: 0 ok,
1 usage error, 2 data/config error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .autodiff import NumericsError
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig
from .corpus import CorpusError, tokenize
from .metrics import MetricError, evaluate
from .sampler import GenerationError, SampleConfig, generate_candidates, mbr_select, write_trace
from .schedule import ScheduleError
from .training import Trainer, TrainingAborted, load_model

__all__ = ["main", "entrypoint"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

_DATA_ERRORS = (ConfigError, CorpusError, CheckpointError, MetricError, ScheduleError,
                FileNotFoundError, IsADirectoryError)
_NUMERIC_ERRORS = (NumericsError, TrainingAborted, GenerationError)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we map usage to 1
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="textdiffusion", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a model from a JSON config")
    train.add_argument("--config", required=True, help="path to the run config (flat JSON)")
    train.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config key")
    train.add_argument("--resume", default="", help="checkpoint to resume from")
    train.add_argument("--steps", type=int, default=0,
                       help="train this many additional steps (default: to max_steps)")

    gen = sub.add_parser("generate", help="generate outputs for a file of sources")
    gen.add_argument("--ckpt", required=True)
    gen.add_argument("--in", dest="input", required=True, help="one source sentence per line")
    gen.add_argument("--out", dest="output", required=True)
    gen.add_argument("--mbr", type=int, default=0, help="candidate count (default: config)")
    gen.add_argument("--p1", type=float, default=None, help="prior-sampling replacement probability")
    gen.add_argument("--p2", type=float, default=None, help="prior-sampling step fraction")
    gen.add_argument("--clamp", action="store_true", help="snap predictions to nearest embeddings")
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--trace", default="", help="write per-step decodes of the first input (JSONL)")
    gen.add_argument("--candidates-out", default="", help="sidecar file with all candidates")

    ev = sub.add_parser("eval", help="score a hypothesis file against a reference file")
    ev.add_argument("--hyp", required=True)
    ev.add_argument("--ref", required=True)
    ev.add_argument("--out", default="", help="write the JSON report here (default: stdout)")

    plot = sub.add_parser("plot-schedule", help="export schedule curves as CSV (+ SVG)")
    plot.add_argument("--ckpt", required=True)
    plot.add_argument("--out", required=True, help="output directory")
    plot.add_argument("--positions", default="", help="comma-separated positions (default: all)")
    plot.add_argument("--svg", action="store_true", help="also render an SVG line chart")
    return parser


def _cmd_train(args) -> int:
    cfg = RunConfig.from_json(args.config).with_overrides(args.overrides)
    if args.resume:
        trainer = Trainer.from_checkpoint(args.resume, cfg)
    else:
        trainer = Trainer(cfg)
    trainer.train(args.steps or None)
    trainer.save_checkpoint(Path(trainer.out_dir) / "last.ckpt")
    print(f"trained to step {trainer.step}; checkpoint at {trainer.out_dir}/last.ckpt")
    return EXIT_OK


def _cmd_generate(args) -> int:
    model, sched, vocab, cfg, _ledger = load_model(args.ckpt)
    lines = Path(args.input).read_text(encoding="utf-8").splitlines()
    sample_cfg = SampleConfig(
        seed=cfg.seed if args.seed is None else args.seed,
        self_conditioning=cfg.self_conditioning,
        clamp=bool(args.clamp or cfg.clamp),
        prior_p1=cfg.prior_p1 if args.p1 is None else args.p1,
        prior_p2=cfg.prior_p2 if args.p2 is None else args.p2,
    )
    count = args.mbr or cfg.mbr_candidates
    outputs = []
    sidecar = []
    failures = 0
    for lineno, line in enumerate(lines):
        if not line.strip():
            outputs.append("")
            continue
        try:
            trace_this = bool(args.trace) and lineno == 0
            one_cfg = dataclasses.replace(sample_cfg, trace=trace_this)
            candidates = generate_candidates(line, model, sched, vocab, one_cfg, count)
            best = mbr_select(candidates) if count > 1 else candidates[0]
            outputs.append(" ".join(best.tokens))
            sidecar.append([" ".join(c.tokens) for c in candidates])
            if trace_this:
                write_trace(candidates[0], args.trace)
        except (NumericsError, GenerationError) as exc:
            failures += 1
            outputs.append("")
            print(f"line {lineno + 1}: generation failed: {exc}", file=sys.stderr)
    Path(args.output).write_text("\n".join(outputs) + "\n", encoding="utf-8")
    if args.candidates_out:
        Path(args.candidates_out).write_text(
            "\n".join(json.dumps(c) for c in sidecar) + "\n", encoding="utf-8"
        )
    print(f"wrote {len(outputs)} lines to {args.output} ({failures} failures)")
    return EXIT_OK


def _cmd_eval(args) -> int:
    hyp_lines = Path(args.hyp).read_text(encoding="utf-8").splitlines()
    ref_lines = Path(args.ref).read_text(encoding="utf-8").splitlines()
    report = evaluate([tokenize(h) for h in hyp_lines], [tokenize(r) for r in ref_lines])
    payload = report.to_json()
    if args.out:
        Path(args.out).write_text(payload + "\n", encoding="utf-8")
    else:
        print(payload)
    return EXIT_OK


def _svg_polyline(points: list[tuple[float, float]], color: str) -> str:
    coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
    return f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>'


def _render_svg(sched, positions: list[int], path: Path) -> None:
    """Hand-rolled alpha_bar-vs-t polylines, one per selected position."""
    width, height, margin = 640, 420, 48
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
              "#e377c2", "#17becf"]
    T = sched.T
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{width // 2}" y="{height - 10}" font-size="13" text-anchor="middle">'
        "time step t</text>",
        f'<text x="14" y="{height // 2}" font-size="13" text-anchor="middle" '
        f'transform="rotate(-90 14 {height // 2})">signal retention</text>',
    ]
    for idx, i in enumerate(positions):
        pts = []
        for t in range(T + 1):
            x = margin + (width - 2 * margin) * t / T
            y = height - margin - (height - 2 * margin) * sched.alpha_bar[t, i]
            pts.append((x, y))
        color = colors[idx % len(colors)]
        parts.append(_svg_polyline(pts, color))
        parts.append(
            f'<text x="{width - margin + 4}" y="{margin + 14 * idx + 10}" '
            f'font-size="11" fill="{color}">i={i}</text>'
        )
    parts.append("</svg>")
    path.write_text("\n".join(parts), encoding="utf-8")


def _cmd_plot_schedule(args) -> int:
    model, sched, vocab, cfg, ledger = load_model(args.ckpt)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.positions:
        positions = [int(p) for p in args.positions.split(",")]
    else:
        positions = list(range(sched.n))
    rows = sched.export_csv(out_dir / "schedule.csv", ledger=ledger, positions=positions)
    message = f"wrote {rows} rows to {out_dir / 'schedule.csv'}"
    if args.svg:
        _render_svg(sched, positions, out_dir / "schedule.svg")
        message += f" and {out_dir / 'schedule.svg'}"
    print(message)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    handlers = {
        "train": _cmd_train,
        "generate": _cmd_generate,
        "eval": _cmd_eval,
        "plot-schedule": _cmd_plot_schedule,
    }
    try:
        return handlers[args.command](args)
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except _NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entrypoint() -> None:
    raise SystemExit(main())
