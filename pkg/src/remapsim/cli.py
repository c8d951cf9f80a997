"""Command line entry point (``remapsim``)."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .calibrate import REFERENCE_NOISE, calibrate, desk_targets
from .errors import ScenarioError
from .extract import write_frame_csv, write_image, write_summary_csv
from .harness import (CONVERGENCE_COLUMNS, Campaign, emit_convergence_plot, run_campaign,
                      write_csv, write_outputs)
from .identify import IdentificationState, ScriptedSource, step
from .scenario import load_scenario

WORKED_EXAMPLE = [
    ([4, 8, 15, 16, 23, 42], [3, 8, 12, 15, 16, 23, 27]),
    ([6, 8, 15, 16, 23, 42], [2, 8, 12, 13, 15, 23]),
]


def _levels(text: str) -> list[float]:
    out = []
    for part in text.split(","):
        v = float(part)
        out.append(int(v) if v == int(v) else v)
    return out


def _frames(text: str) -> int | None:
    return None if text == "all" else int(text)


def _common(p: argparse.ArgumentParser, levels: bool = False) -> None:
    p.add_argument("--scenario", default="desk-vm",
                   help="scenario YAML file or bundled name (default: desk-vm)")
    p.add_argument("--service", default="apache-like")
    p.add_argument("--seed", type=int, default=0, help="base seed; run k uses seed+k")
    if levels:
        p.add_argument("--noise", type=_levels, default=[20, 30, 40, 50],
                       help="comma separated noise levels in requests/s")
    else:
        p.add_argument("--noise", type=float, default=20, help="noise level in requests/s")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")


def _limits(p: argparse.ArgumentParser) -> None:
    p.add_argument("--max-iterations", type=int, default=100)
    p.add_argument("--threshold", type=int, default=5, help="top set size counted as converged")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="remapsim",
                                     description="Page-remapping attack simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="fit noise to the reference statistics")
    _common(p, levels=True)

    p = sub.add_parser("identify", help="identification runs with per-iteration rows")
    _common(p)
    _limits(p)
    p.add_argument("--runs", type=int, default=1)

    p = sub.add_parser("extract", help="identify the resource, then read guest memory")
    _common(p)
    _limits(p)
    p.add_argument("--frames", type=_frames, default="all",
                   help="number of frames to read from frame 0, or 'all'")
    p.add_argument("--recheck-every", type=int, default=64)
    p.add_argument("--countermeasure", action="store_true", help="enable integrity mode")

    p = sub.add_parser("campaign", help="runs x noise levels, CSV tables and plot")
    _common(p, levels=True)
    _limits(p)
    p.add_argument("--runs", type=int, default=8)
    p.add_argument("--mode", choices=["identify", "extract", "full", "countermeasure"],
                   default="identify")
    p.add_argument("--countermeasure", action="store_true",
                   help="shorthand for --mode countermeasure")
    p.add_argument("--frames", type=_frames, default=1024)
    p.add_argument("--write-images", action="store_true")
    p.add_argument("--no-plot", action="store_true")

    p = sub.add_parser("plot", help="redraw the convergence plot from a CSV")
    p.add_argument("input", type=Path, help="results.csv or convergence.csv")
    p.add_argument("--out", type=Path, default=Path("out"))

    sub.add_parser("demo", help="run the two-iteration worked example")
    return parser


def cmd_demo(args) -> int:
    source = ScriptedSource(WORKED_EXAMPLE)
    state = IdentificationState.empty(source.guest_pages)
    for _ in WORKED_EXAMPLE:
        state, _ = step(state, source)
    ranking = state.ranking()
    print(f"R^2 = {sorted(state.refined_set())}")
    print(f"C^2 = {dict(sorted(state.candidates().items()))}")
    for e in ranking:
        print(f"P[{e.gpa}] = {e.probability}")
    print(f"ranking = {[e.gpa for e in ranking]}")
    return 0


def cmd_calibrate(args) -> int:
    sc = load_scenario(args.scenario)
    target = sc.services[args.service].target
    rows = []
    for level in args.noise:
        q, size = desk_targets(args.service, level)
        cal = calibrate(sc, args.service, target, level, q, size, seed=args.seed + int(level))
        row = cal.summary()
        rows.append(row)
        print(f"{args.service} noise={level}: x_noise {cal.measured_x_noise:.3f} "
              f"(target {q:.2f}), mean size {cal.measured_size:.0f} (target {size:.0f}), "
              f"volatile pool {cal.volatile_pool_size} x {cal.volatile_draw:.3f}")
    args.out.mkdir(parents=True, exist_ok=True)
    write_csv(args.out / "calibration.csv", list(rows[0]), rows)
    return 0


def _print_summary(result) -> None:
    for s in result.summary:
        conv = s["convergence_iteration"] or f"none within {result.campaign.max_iterations}"
        print(f"{s['service']} noise={s['noise_level']}: converged at {conv} "
              f"(reference {s['reference_convergence']}), x_noise {s['measured_x_noise']:.3f}, "
              f"mean |R| {s['measured_mean_size']:.0f}")
    for f in result.failures:
        print(f"failed: noise={f['noise_level']} run={f['run']}: {f['error']}", file=sys.stderr)


def cmd_identify(args) -> int:
    c = Campaign(args.scenario, args.service, [args.noise], args.runs, args.max_iterations,
                 args.seed, "identify", args.threshold)
    result = run_campaign(c)
    write_outputs(result, args.out, plot=False)
    for row in result.rows:
        print(f"run {row['run']} iter {row['iteration']}: |R|={row['r_size']} "
              f"|R^i|={row['refined_size']} |T|={row['top_size']}")
    _print_summary(result)
    return 0


def cmd_extract(args) -> int:
    mode = "countermeasure" if args.countermeasure else "extract"
    c = Campaign(args.scenario, args.service, [args.noise], 1, args.max_iterations,
                 args.seed, mode, args.threshold, extract_frames=args.frames,
                 recheck_every=args.recheck_every)
    result = run_campaign(c)
    if not result.extractions:
        _print_summary(result)
        return 1
    _, _, report = result.extractions[0]
    args.out.mkdir(parents=True, exist_ok=True)
    write_image(report, args.out / "memory.img")
    write_frame_csv(report, args.out / "extraction.csv")
    write_summary_csv(report, args.out / "summary.csv")
    s = report.summary()
    print(f"{s['outcome']}: {s['extracted']}/{s['frames']} frames, "
          f"{s['requests_issued']} requests, r={s['r']}")
    return 0 if not report.impossible else 3


def cmd_campaign(args) -> int:
    mode = "countermeasure" if args.countermeasure else args.mode
    c = Campaign(args.scenario, args.service, args.noise, args.runs, args.max_iterations,
                 args.seed, mode, args.threshold, extract_frames=args.frames,
                 write_images=args.write_images)
    result = run_campaign(c)
    write_outputs(result, args.out, plot=not args.no_plot)
    _print_summary(result)
    return 0


def cmd_plot(args) -> int:
    with open(args.input, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{args.input} has no rows")
    if "mean_top_size" in rows[0]:
        curve = [{k: r[k] for k in CONVERGENCE_COLUMNS} for r in rows]
        for r in curve:
            r["iteration"] = int(r["iteration"])
            r["mean_top_size"] = float(r["mean_top_size"])
    else:
        acc: dict[tuple, list] = {}
        for r in rows:
            key = (r["service"], r["noise_level"], int(r["iteration"]))
            acc.setdefault(key, []).append(float(r["top_size"]))
        curve = [{"service": s, "noise_level": n, "iteration": i,
                  "mean_top_size": sum(v) / len(v), "runs": len(v)}
                 for (s, n, i), v in sorted(acc.items(), key=lambda kv: (kv[0][0], float(kv[0][1]), kv[0][2]))]
    for path in emit_convergence_plot(curve, args.out):
        print(path)
    return 0


COMMANDS = {"demo": cmd_demo, "calibrate": cmd_calibrate, "identify": cmd_identify,
            "extract": cmd_extract, "campaign": cmd_campaign, "plot": cmd_plot}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ScenarioError, KeyError, ValueError, OSError, RuntimeError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc).strip("'\"")}
        if isinstance(exc, ScenarioError):
            err.update(path=exc.path, line=exc.line)
        print(json.dumps(err), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
