"""Seeded experiment campaigns: identification curves, extraction, countermeasure.

A campaign runs one service profile at several noise levels, several runs
each.  Every noise level is calibrated once to its reference X-noise rate
and recording size; run ``k`` then uses guest seed ``base_seed + k``.
All outputs are flat CSV files with stable formatting, so identical inputs
give byte-identical files.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .calibrate import REFERENCE_CONVERGENCE, REFERENCE_NOISE, calibrate, desk_targets
from .errors import CalibrationError, SimulationError, TargetLost
from .extract import (ExtractionReport, extract_all, live_reidentifier, plan,
                      write_frame_csv, write_image)
from .guest import GuestVm
from .identify import (IdentificationState, LiveSource, convergence_iteration,
                       ranking_stable, step)
from .scenario import VmScenario, load_scenario

log = logging.getLogger(__name__)

MODES = ("identify", "extract", "full", "countermeasure")

RESULT_COLUMNS = ["service", "noise_level", "run", "iteration", "r_size", "x_size",
                  "refined_size", "candidates", "top_size", "x_noise", "converged_at",
                  "requests_issued"]

SUMMARY_COLUMNS = ["service", "noise_level", "runs", "failed_runs", "calibrated",
                   "target_x_noise", "measured_x_noise", "target_mean_size", "measured_mean_size",
                   "convergence_iteration", "reference_convergence", "converged_runs",
                   "mean_converged_at", "top1_correct_runs", "final_mean_top_size",
                   "mean_requests", "extraction_coverage", "extraction_impossible_runs",
                   "guest_faults", "seconds"]

CONVERGENCE_COLUMNS = ["service", "noise_level", "iteration", "mean_top_size", "runs"]

EXTRACTION_COLUMNS = ["service", "noise_level", "run", "outcome", "frames", "extracted",
                      "coverage", "r", "requests_issued", "misidentified_slots",
                      "reidentifications", "wrong_other"]

TIME_NOT_REPORTED = "n/a (hardware-dependent)"


@dataclass
class Campaign:
    scenario: str | Path = "desk-vm"
    service: str = "apache-like"
    noise_levels: list[float] = field(default_factory=lambda: [20, 30, 40, 50])
    runs: int = 8
    max_iterations: int = 100
    base_seed: int = 0
    mode: str = "identify"
    threshold: int = 5
    patience: int = 5
    calibrate: bool = True
    # extraction modes read this many frames (None: the whole guest)
    extract_frames: int | None = 1024
    recheck_every: int = 64
    write_images: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.runs < 1 or self.max_iterations < 1:
            raise ValueError("runs and max_iterations must be positive")


@dataclass
class RunOutcome:
    rows: list[dict]
    converged_at: int | None
    top1_correct: bool
    x_noise: list[bool]
    r_sizes: list[int]
    requests: int
    extraction: ExtractionReport | None = None
    guest_faults: int = 0


@dataclass
class CampaignResult:
    campaign: Campaign
    rows: list[dict] = field(default_factory=list)
    summary: list[dict] = field(default_factory=list)
    convergence: list[dict] = field(default_factory=list)
    extractions: list[tuple[float, int, ExtractionReport]] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)


def _level_scenario(base: VmScenario, c: Campaign, level: float):
    """Calibrated scenario for one noise level plus its (X-noise, size) targets."""
    svc = base.services[c.service]
    if level == 0:
        return base.with_noise(level=0), None
    if c.calibrate and level in REFERENCE_NOISE.get(c.service, {}):
        q, size = desk_targets(c.service, level)
        cal = calibrate(base, c.service, svc.target, level, q, size,
                        seed=c.base_seed + int(level))
        return cal.scenario, (q, size)
    return base.with_noise(level=level), None


def _run(scenario: VmScenario, c: Campaign, level: float, run: int) -> RunOutcome:
    svc = scenario.services[c.service]
    integrity = c.mode == "countermeasure"
    vm = GuestVm(scenario, seed=c.base_seed + run, integrity_mode=integrity)
    tp = vm.resources[svc.target].gpas[0]
    attacker = c.mode in ("extract", "countermeasure")
    source = LiveSource(vm, c.service)
    state = IdentificationState.empty(vm.table.guest_pages)
    records, history = [], []
    for _ in range(c.max_iterations):
        state, rec = step(state, source, svc.target, svc.other, tp)
        records.append(rec)
        history.append(state.top_k(1))
        # the attacker stops once the ranking holds still
        if attacker and ranking_stable(history, c.patience):
            break
    converged_at = convergence_iteration([r.top_size for r in records], c.threshold)
    rows = []
    for rec in records:
        rows.append({
            "service": c.service, "noise_level": level, "run": run,
            "iteration": rec.iteration, "r_size": rec.r_size, "x_size": rec.x_size,
            "refined_size": rec.refined_size, "candidates": rec.candidate_cardinality,
            "top_size": rec.top_size, "x_noise": int(rec.x_noise),
            "converged_at": converged_at, "requests_issued": 2 * rec.iteration,
        })
    top1_ok = all(r.top1 == tp for r in records if r.top_size <= c.threshold)
    out = RunOutcome(rows, converged_at, top1_ok, [r.x_noise for r in records],
                     [r.r_size for r in records], 2 * len(records))
    if c.mode != "identify":
        target = vm.resources[svc.target]
        p = plan(state.ranking(), target.size_bytes, vm.page_size)
        frames = None if c.extract_frames is None else range(
            min(c.extract_frames, vm.scenario.guest_pages))
        report = extract_all(p, vm, c.service, svc.target, frames=frames,
                             recheck_every=c.recheck_every,
                             reidentify=live_reidentifier(vm, c.service, svc.target, svc.other,
                                                          c.max_iterations, c.patience))
        out.extraction = report
        out.requests += report.requests_issued
        if rows:
            rows[-1]["requests_issued"] = out.requests
    if integrity:
        # untampered guest under the countermeasure: plain client traffic
        for _ in range(50):
            s = vm.run_noise_window()
            out.guest_faults += s.failed
            _, s = vm.request(c.service, svc.target)
            out.guest_faults += s.failed
    return out


def run_campaign(c: Campaign) -> CampaignResult:
    base = load_scenario(c.scenario)
    base.validate()
    if c.service not in base.services:
        raise KeyError(f"scenario has no service {c.service!r}")
    out = CampaignResult(c)
    for level in c.noise_levels:
        try:
            scenario, targets = _level_scenario(base, c, level)
        except CalibrationError as exc:
            log.warning("noise %s: %s", level, exc)
            out.failures.append({"noise_level": level, "run": "", "error": str(exc)})
            continue
        outcomes: list[RunOutcome] = []
        for run in range(c.runs):
            try:
                outcome = _run(scenario, c, level, run)
            except (TargetLost, SimulationError) as exc:
                out.failures.append({"noise_level": level, "run": run, "error": str(exc)})
                continue
            outcomes.append(outcome)
            out.rows.extend(outcome.rows)
            if outcome.extraction is not None:
                out.extractions.append((level, run, outcome.extraction))
        out.summary.append(_summarize(c, level, targets, outcomes, c.runs - len(outcomes)))
        out.convergence.extend(_curve(c, level, outcomes))
    return out


def _mean_curve(outcomes: list[RunOutcome]) -> np.ndarray:
    n = max((len(o.rows) for o in outcomes), default=0)
    curves = []
    for o in outcomes:
        sizes = [r["top_size"] for r in o.rows]
        # a run that stopped early keeps its last size
        curves.append(sizes + [sizes[-1]] * (n - len(sizes)) if sizes else [])
    curves = [cv for cv in curves if cv]
    return np.mean(np.array(curves, dtype=float), axis=0) if curves else np.empty(0)


def _curve(c: Campaign, level: float, outcomes: list[RunOutcome]) -> list[dict]:
    mean = _mean_curve(outcomes)
    return [{"service": c.service, "noise_level": level, "iteration": i + 1,
             "mean_top_size": float(v), "runs": len(outcomes)} for i, v in enumerate(mean)]


def _summarize(c, level, targets, outcomes, failed) -> dict:
    conv = convergence_iteration(_mean_curve(outcomes).tolist(), c.threshold) if outcomes else None
    reference = REFERENCE_CONVERGENCE.get(c.service, {}).get(level, "")
    if reference is None:
        reference = f">{c.max_iterations}"
    xs = [x for o in outcomes for x in o.x_noise]
    sizes = [s for o in outcomes for s in o.r_sizes]
    runs_conv = [o.converged_at for o in outcomes if o.converged_at is not None]
    reports = [o.extraction for o in outcomes if o.extraction is not None]
    return {
        "service": c.service,
        "noise_level": level,
        "runs": len(outcomes),
        "failed_runs": failed,
        "calibrated": int(targets is not None),
        "target_x_noise": targets[0] if targets else "",
        "measured_x_noise": float(np.mean(xs)) if xs else "",
        "target_mean_size": targets[1] if targets else "",
        "measured_mean_size": float(np.mean(sizes)) if sizes else "",
        "convergence_iteration": conv if conv is not None else "",
        "reference_convergence": reference,
        "converged_runs": len(runs_conv),
        "mean_converged_at": float(np.mean(runs_conv)) if runs_conv else "",
        "top1_correct_runs": sum(o.top1_correct for o in outcomes if o.converged_at is not None),
        "final_mean_top_size": float(np.mean([o.rows[-1]["top_size"] for o in outcomes]))
        if outcomes else "",
        "mean_requests": float(np.mean([o.requests for o in outcomes])) if outcomes else "",
        "extraction_coverage": float(np.mean([r.coverage for r in reports])) if reports else "",
        "extraction_impossible_runs": sum(r.impossible for r in reports) if reports else "",
        "guest_faults": sum(o.guest_faults for o in outcomes),
        "seconds": TIME_NOT_REPORTED,
    }


# -- output --------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        if math.isfinite(v) and v == int(v) and abs(v) < 1e15:
            return str(int(v))
        return f"{v:.6f}"
    return str(v)


def write_csv(path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(k)) for k in columns])


def emit_convergence_plot(convergence: list[dict], out_dir, name: str = "convergence") -> list[Path]:
    """Tidy CSV of mean top-set size per iteration, plus a log-scale image if possible."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [out_dir / f"{name}.csv"]
    write_csv(written[0], CONVERGENCE_COLUMNS, convergence)
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.info("matplotlib unavailable; convergence plot skipped")
        return written
    curves: dict[tuple, list] = {}
    for row in convergence:
        curves.setdefault((row["service"], row["noise_level"]), []).append(
            (row["iteration"], row["mean_top_size"]))
    fig, ax = plt.subplots(figsize=(6, 4))
    for (svc, level), pts in curves.items():
        xs, ys = zip(*pts)
        ax.plot(xs, ys, marker="." if len(xs) == 1 else None, label=f"{svc} @ {_fmt(level)}/s")
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean top set size")
    ax.legend(fontsize="small")
    fig.tight_layout()
    img = out_dir / f"{name}.png"
    fig.savefig(img, dpi=120, metadata={"Software": None})
    plt.close(fig)
    written.append(img)
    return written


def write_outputs(result: CampaignResult, out_dir, plot: bool = True) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [out_dir / "results.csv", out_dir / "summary.csv"]
    write_csv(written[0], RESULT_COLUMNS, result.rows)
    write_csv(written[1], SUMMARY_COLUMNS, result.summary)
    if plot:
        written += emit_convergence_plot(result.convergence, out_dir)
    else:
        written.append(out_dir / "convergence.csv")
        write_csv(written[-1], CONVERGENCE_COLUMNS, result.convergence)
    if result.extractions:
        rows = []
        for level, run, rep in result.extractions:
            s = rep.summary()
            rows.append({"service": result.campaign.service, "noise_level": level, "run": run,
                         **{k: s[k] for k in EXTRACTION_COLUMNS if k in s}})
            if result.campaign.write_images:
                stem = f"memory-n{_fmt(level)}-r{run}"
                write_image(rep, out_dir / f"{stem}.img")
                write_frame_csv(rep, out_dir / f"{stem}.csv")
        written.append(out_dir / "extraction.csv")
        write_csv(written[-1], EXTRACTION_COLUMNS, rows)
    if result.failures:
        written.append(out_dir / "failures.csv")
        write_csv(written[-1], ["noise_level", "run", "error"], result.failures)
    return written


def campaign_dict(c: Campaign) -> dict:
    d = asdict(c)
    d["scenario"] = str(d["scenario"])
    return d
