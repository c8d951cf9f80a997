"""Resource identification from tracked page-access recordings.

Per iteration: record the pages touched while fetching the target
(``R_i``) and while fetching some other resource of the same service
(``X_i``); intersect the target recordings, subtract the other-resource
recording, and accumulate how often each page survived as a candidate.
Candidates are ranked by that multiplicity, ties going to the page that
was first touched latest.

The set-level functions below work on plain Python sets and dicts and
follow the definitions literally; :class:`IdentificationState` keeps the
same quantities as dense arrays for long noisy runs.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from . import _accel
from .errors import TargetLost
from .guest import GuestVm, NoiseSummary
from .memory import AccessRecording

PageSet = frozenset
PageMultiset = dict  # gpa -> positive multiplicity


# -- set algebra -----------------------------------------------------------------


def refine(refined: PageSet | None, recording) -> PageSet:
    """Running intersection of target recordings (``None`` before the first)."""
    recording = frozenset(recording)
    return recording if refined is None else frozenset(refined) & recording


def likely_candidates(refined, other_recording) -> PageSet:
    return frozenset(refined) - frozenset(other_recording)


def accumulate(prev: Mapping[int, int], candidates, refined) -> PageMultiset:
    """Multiset sum with this round's candidates, then intersect with ``refined``.

    Intersection multiplies multiplicities by the 0/1 membership in
    ``refined``, so anything that left the refined set disappears.
    """
    refined = frozenset(refined)
    out: PageMultiset = {}
    for p in set(prev) | set(candidates):
        if p in refined:
            m = prev.get(p, 0) + (p in candidates)
            if m:
                out[p] = m
    return out


class RankedPage(NamedTuple):
    gpa: int
    probability: Fraction
    last_touch: int


CandidateRanking = list  # of RankedPage, most likely first


def probabilities(candidates: Mapping[int, int],
                  last_touch: Mapping[int, int] | None = None) -> CandidateRanking:
    """Exact candidate probabilities, sorted; empty input means identification failed."""
    total = sum(candidates.values())
    if total == 0:
        return []
    last_touch = last_touch or {}
    ranked = [RankedPage(p, Fraction(m, total), last_touch.get(p, -1))
              for p, m in candidates.items()]
    ranked.sort(key=lambda e: (-e.probability, -e.last_touch, e.gpa))
    return ranked


def top_set_from(refined, ranking: CandidateRanking, tp: int) -> PageSet:
    """Pages of ``refined`` at least as likely as the true target ``tp``."""
    refined = frozenset(refined)
    if tp not in refined:
        raise TargetLost(f"target page {tp} is no longer in the refined set")
    prob = {e.gpa: e.probability for e in ranking}
    ref = prob.get(tp, Fraction(0))
    return frozenset(p for p in refined if prob.get(p, Fraction(0)) >= ref)


# -- dense state -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class IdentificationState:
    iteration: int
    refined: np.ndarray
    counts: np.ndarray
    last_touch: np.ndarray

    @classmethod
    def empty(cls, guest_pages: int) -> IdentificationState:
        return cls(0, np.zeros(guest_pages, dtype=bool), np.zeros(guest_pages, dtype=np.int64),
                   np.full(guest_pages, -1, dtype=np.int64))

    def update(self, r_pages, x_pages) -> IdentificationState:
        """State after one more (R_i, X_i) pair; ``self`` is left untouched."""
        refined, counts, last = self.refined.copy(), self.counts.copy(), self.last_touch.copy()
        _accel.identify_update(refined, counts, last,
                               np.asarray(r_pages, dtype=np.int64),
                               np.asarray(x_pages, dtype=np.int64),
                               self.iteration == 0)
        return replace(self, iteration=self.iteration + 1, refined=refined,
                       counts=counts, last_touch=last)

    def refined_set(self) -> PageSet:
        return frozenset(np.flatnonzero(self.refined).tolist())

    def candidates(self) -> PageMultiset:
        idx = np.flatnonzero(self.counts)
        return dict(zip(idx.tolist(), self.counts[idx].tolist()))

    @property
    def refined_size(self) -> int:
        return int(np.count_nonzero(self.refined))

    @property
    def candidate_cardinality(self) -> int:
        return int(self.counts.sum())

    @property
    def support_size(self) -> int:
        return int(np.count_nonzero(self.counts))

    def ranking(self, limit: int | None = None) -> CandidateRanking:
        idx = np.flatnonzero(self.counts)
        if idx.size == 0:
            return []
        order = np.lexsort((idx, -self.last_touch[idx], -self.counts[idx]))
        if limit is not None:
            order = order[:limit]
        total = int(self.counts.sum())
        return [RankedPage(int(idx[k]), Fraction(int(self.counts[idx[k]]), total),
                           int(self.last_touch[idx[k]])) for k in order]

    def top1(self) -> int | None:
        if not self.counts.any():
            return None
        best = self.counts.max()
        tied = np.flatnonzero(self.counts == best)
        lt = self.last_touch[tied]
        return int(tied[np.flatnonzero(lt == lt.max())[0]])

    def top_k(self, k: int) -> tuple[int, ...]:
        return tuple(e.gpa for e in self.ranking(limit=k))

    def top_set_size(self, tp: int) -> int:
        if not self.refined[tp]:
            raise TargetLost(f"target page {tp} is no longer in the refined set")
        return _accel.top_set_size(self.refined, self.counts, tp)

    def top_set(self, tp: int) -> TopSet:
        if not self.refined[tp]:
            raise TargetLost(f"target page {tp} is no longer in the refined set")
        mask = self.refined & (self.counts >= self.counts[tp])
        return TopSet(frozenset(np.flatnonzero(mask).tolist()), tp)


@dataclass(frozen=True)
class TopSet:
    elements: PageSet
    target: int

    def __len__(self) -> int:
        return len(self.elements)


def top_set(state: IdentificationState, ranking: CandidateRanking | None, tp: int) -> TopSet:
    if ranking is None:
        return state.top_set(tp)
    return TopSet(top_set_from(state.refined_set(), ranking, tp), tp)


# -- recording ---------------------------------------------------------------------


def _tracked(vm: GuestVm, service: str, resource: str, watch: str):
    vm.table.begin_tracking()
    try:
        _, summary = vm.request(service, resource, watch=watch)
    finally:
        recording = vm.table.end_tracking()
    return recording, summary


def record_R(vm: GuestVm, service: str, target: str) -> tuple[AccessRecording, NoiseSummary]:
    """Track one request for the target; concurrent client noise lands in it too."""
    return _tracked(vm, service, target, target)


def record_X(vm: GuestVm, service: str, other: str, target: str) -> tuple[AccessRecording, bool]:
    """Track one request for ``other``; the flag tells whether a client fetched the target."""
    recording, summary = _tracked(vm, service, other, target)
    return recording, summary.touched


class LiveSource:
    """Recordings taken from a running guest through the hypervisor."""

    def __init__(self, vm: GuestVm, service: str, keep: bool = False):
        self.vm = vm
        self.service = service
        self.keep = keep
        self.history: list[tuple[AccessRecording, AccessRecording]] = []

    @property
    def guest_pages(self) -> int:
        return self.vm.table.guest_pages

    def record_pair(self, target: str, other: str):
        r, _ = record_R(self.vm, self.service, target)
        x, x_noise = record_X(self.vm, self.service, other, target)
        if self.keep:
            self.history.append((r, x))
        return r, x, x_noise


class ScriptedSource:
    """Replays fixed (R_i, X_i) page lists, e.g. a worked example."""

    def __init__(self, pairs: Sequence[tuple[Sequence[int], Sequence[int]]],
                 guest_pages: int | None = None, x_noise: Sequence[bool] | None = None):
        self.pairs = [(AccessRecording(np.asarray(r, dtype=np.int64)),
                       AccessRecording(np.asarray(x, dtype=np.int64))) for r, x in pairs]
        top = max((max(list(r) + list(x), default=0) for r, x in pairs), default=0)
        self.guest_pages = guest_pages or top + 1
        self.x_noise = list(x_noise) if x_noise is not None else [False] * len(pairs)
        self._next = 0

    def record_pair(self, target, other):
        r, x = self.pairs[self._next]
        flag = self.x_noise[self._next]
        self._next += 1
        return r, x, flag


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    r_size: int
    x_size: int
    refined_size: int
    candidate_cardinality: int
    support_size: int
    top_size: int | None
    x_noise: bool
    top1: int | None


def step(state: IdentificationState, source, target: str | None = None,
         other: str | None = None, tp: int | None = None):
    """Run one identification iteration; returns ``(new_state, record)``.

    With the ground-truth page ``tp`` the record also carries the top-set size.
    """
    r, x, x_noise = source.record_pair(target, other)
    new = state.update(r.pages, x.pages)
    top_size = new.top_set_size(tp) if tp is not None else None
    rec = IterationRecord(new.iteration, len(r), len(x), new.refined_size,
                          new.candidate_cardinality, new.support_size, top_size,
                          bool(x_noise), new.top1())
    return new, rec


# -- stopping rules ----------------------------------------------------------------


def convergence_iteration(top_sizes: Sequence[float], threshold: float = 5) -> int | None:
    """First 1-based iteration whose top-set size is at most ``threshold``."""
    for i, size in enumerate(top_sizes, start=1):
        if size is not None and size <= threshold:
            return i
    return None


def converged(top_sizes: Sequence[float], threshold: float = 5) -> bool:
    return convergence_iteration(top_sizes, threshold) is not None


def ranking_stable(top_k_history: Sequence[tuple[int, ...]], patience: int = 5) -> bool:
    """Attacker-side rule: the top-k list stayed the same for ``patience`` iterations."""
    if len(top_k_history) < patience + 1:
        return False
    tail = top_k_history[-(patience + 1):]
    return bool(tail[0]) and all(t == tail[0] for t in tail)


@dataclass
class IdentificationRun:
    state: IdentificationState
    records: list[IterationRecord]
    converged_at: int | None

    def top_sizes(self) -> list[int | None]:
        return [r.top_size for r in self.records]


def identify(source, target: str, other: str, max_iterations: int = 100,
             tp: int | None = None, threshold: int = 5, patience: int = 5,
             top_k: int = 1, stop_when_converged: bool = False) -> IdentificationRun:
    """Iterate up to ``max_iterations``.

    With ``tp`` convergence means top-set size <= ``threshold``; without it
    the top-``top_k`` ranking must hold still for ``patience`` iterations.
    """
    state = IdentificationState.empty(source.guest_pages)
    records: list[IterationRecord] = []
    history: list[tuple[int, ...]] = []
    converged_at = None
    for _ in range(max_iterations):
        state, rec = step(state, source, target, other, tp)
        records.append(rec)
        if converged_at is None:
            if tp is not None:
                if rec.top_size <= threshold:
                    converged_at = rec.iteration
            else:
                history.append(state.top_k(top_k))
                if ranking_stable(history, patience):
                    converged_at = rec.iteration
        if converged_at is not None and stop_when_converged:
            break
    return IdentificationRun(state, records, converged_at)
