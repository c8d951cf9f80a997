"""Runtime model of the encrypted guest: services, client noise, eviction.

The guest never exposes frame contents directly.  An attacker sees only
what the hypervisor side sees (``vm.table``) and what a remote client sees
(responses of :meth:`GuestVm.request`).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import _accel
from .errors import IntegrityFault, RequestFailed, SimulationError
from .memory import PhysicalMemory, SecondLevelTable
from .scenario import Resource, VmScenario

# host frames past the guest range, owned by the hypervisor (probe sentinels)
HOST_SPARE_FRAMES = 2


class RelocationKind(enum.Enum):
    NONE = "none"
    MOVED = "moved"
    EVICTED = "evicted"


@dataclass(frozen=True)
class RelocationEvent:
    kind: RelocationKind
    new_gpas: tuple[int, ...] = ()


@dataclass
class NoiseSummary:
    requests: int = 0
    touched: bool = False
    failed: int = 0
    wrong_watched: int = 0
    wrong_other: int = 0
    pairs: list[tuple[str, str]] = field(default_factory=list)


class GuestVm:
    """A running guest built from a :class:`VmScenario`.

    Guest page ``g`` initially lives in host frame ``perm[g]`` for a seeded
    permutation; frames ``guest_pages`` and up are spare host frames.
    """

    def __init__(self, scenario: VmScenario, seed: int | None = None,
                 integrity_mode: bool = False):
        self.scenario = scenario.copy()
        self.page_size = scenario.page_size
        seed = scenario.rng_seed if seed is None else seed
        ss = np.random.SeedSequence([seed, 0x5e7])
        layout_rng, self.rng = (np.random.default_rng(s) for s in ss.spawn(2))
        n = scenario.guest_pages
        self.memory = PhysicalMemory(n + HOST_SPARE_FRAMES, scenario.page_size, seed)
        nonce = layout_rng.bytes(16)
        self.table = SecondLevelTable(self.memory, n, integrity_mode, nonce)
        perm = layout_rng.permutation(n)
        for g in range(n):
            self.table.map(g, int(perm[g]))
        self.resources: dict[str, Resource] = self.scenario.resources
        self.services = self.scenario.services
        self.noise = self.scenario.noise
        self.clock = 0.0
        self._free = set(self.scenario.free_pages().tolist())
        for r in self.resources.values():
            self._store(r)
        self._common = {
            name: np.concatenate([s.kernel_common, s.service_common]).astype(np.int64)
            for name, s in self.services.items()
        }

    # -- layout ------------------------------------------------------------------

    @property
    def host_spare_frames(self) -> list[int]:
        n = self.scenario.guest_pages
        return list(range(n, n + HOST_SPARE_FRAMES))

    @property
    def guest_frames(self) -> range:
        return range(self.scenario.guest_pages)

    def _store(self, r: Resource) -> None:
        for k, g in enumerate(r.gpas):
            chunk = r.content[k * self.page_size:(k + 1) * self.page_size]
            self.table.write_through(g, chunk)

    def _place(self, r: Resource) -> tuple[int, ...]:
        n = len(r.gpas) if r.gpas else math.ceil(r.size_bytes / self.page_size)
        free = sorted(self._free)
        if len(free) < n:
            raise SimulationError("no free guest pages left for relocation")
        picks = self.rng.choice(len(free), size=n, replace=False)
        new = [free[i] for i in picks]
        self._free.difference_update(new)
        self._free.update(r.gpas)
        r.gpas = new
        r.evicted = False
        self._store(r)
        return tuple(new)

    def maybe_relocate(self, resource: str, elapsed: float) -> RelocationEvent:
        """Move or evict a non-sticky resource at its relocation rate.

        Evicted resources are reloaded to fresh pages on their next request.
        """
        r = self.resources[resource]
        if r.sticky or r.relocation_rate == 0 or elapsed <= 0 or r.evicted:
            return RelocationEvent(RelocationKind.NONE)
        if self.rng.random() >= -math.expm1(-r.relocation_rate * elapsed):
            return RelocationEvent(RelocationKind.NONE)
        if self.rng.random() < 0.5:
            return RelocationEvent(RelocationKind.MOVED, self._place(r))
        self._free.update(r.gpas)
        r.evicted = True
        return RelocationEvent(RelocationKind.EVICTED)

    def tick(self, elapsed: float) -> list[tuple[str, RelocationEvent]]:
        self.clock += elapsed
        events = []
        for name, r in self.resources.items():
            if not r.sticky:
                ev = self.maybe_relocate(name, elapsed)
                if ev.kind is not RelocationKind.NONE:
                    events.append((name, ev))
        return events

    # -- requests ----------------------------------------------------------------

    def _lookup(self, service: str, resource: str) -> Resource:
        svc = self.services.get(service)
        if svc is None:
            raise KeyError(f"unknown service {service}")
        if resource not in svc.resources:
            raise KeyError(f"service {service} does not serve {resource}")
        r = self.resources[resource]
        if r.evicted:
            self._place(r)
        return r

    def _stream(self, service: str, r: Resource) -> np.ndarray:
        """One request's page accesses; the resource content pages come last."""
        svc = self.services[service]
        common = self._common[service]
        parts = [common]
        pool = svc.volatile_pool
        if pool.size and svc.volatile_draw > 0:
            parts.append(pool[self.rng.random(pool.size) < svc.volatile_draw])
        if svc.meta_spill > 0:
            for name in svc.resources:
                other = self.resources[name]
                if name != r.name and other.meta_gpas:
                    meta = np.asarray(other.meta_gpas, dtype=np.int64)
                    parts.append(meta[self.rng.random(meta.size) < svc.meta_spill])
        parts.append(np.asarray(r.meta_gpas, dtype=np.int64))
        parts.append(np.asarray(r.gpas, dtype=np.int64))
        # response path re-touches part of the common set; no new first touches
        cut = int(round(svc.pre_resource_fraction * common.size))
        parts.append(common[cut:])
        return np.concatenate(parts)

    def _respond(self, r: Resource) -> bytes:
        try:
            data = b"".join(self.table.read_through(g) for g in r.gpas)
        except IntegrityFault as exc:
            raise RequestFailed(f"request for {r.name} faulted") from exc
        return data[:r.size_bytes]

    def handle_request(self, service: str, resource: str) -> bytes:
        """Serve one request with no concurrent clients."""
        body, _ = self.request(service, resource, noise=False)
        return body

    def _sample_noise(self, window: float) -> list[tuple[str, str]]:
        lam = self.noise.level * window
        if lam <= 0 or not self.noise.pairs:
            return []
        n = int(self.rng.poisson(lam))
        idx = self.rng.choice(len(self.noise.pairs), size=n, p=self.noise.weights)
        return [self.noise.pairs[i] for i in idx.tolist()]

    def request(self, service: str | None, resource: str | None, noise: bool = True,
                watch: str | None = None, window: float | None = None):
        """Serve a foreground request while client noise runs in the same window.

        Returns ``(body, summary)``; ``body`` is ``None`` without a foreground
        request.  ``summary.touched`` tells whether any concurrent client
        requested ``watch``.
        """
        window = self.noise.window_seconds if window is None else window
        self.tick(window)
        pairs = self._sample_noise(window) if noise else []
        summary = NoiseSummary(requests=len(pairs), pairs=pairs)
        summary.touched = watch is not None and any(res == watch for _, res in pairs)
        jobs = [(service, self._lookup(service, resource))] if service is not None else []
        jobs += [(s, self._lookup(s, res)) for s, res in pairs]

        faulted = np.empty(0, dtype=np.int64)
        streams = None
        if self.table.tracking_active or self.table.integrity_mode:
            # outside tracking/integrity the page walk has no observable effect
            streams = [self._stream(s, r) for s, r in jobs]
            faulted = self.table.access_many(_accel.interleave(streams, self.rng))

        body = None
        for k, (s, r) in enumerate(jobs):
            foreground = service is not None and k == 0
            try:
                if faulted.size and np.isin(streams[k], faulted).any():
                    raise RequestFailed(f"request for {r.name} faulted")
                data = self._respond(r)
            except RequestFailed:
                if foreground:
                    raise
                summary.failed += 1
                continue
            if foreground:
                body = data
            elif data != r.content:
                if r.name == watch:
                    summary.wrong_watched += 1
                else:
                    summary.wrong_other += 1
        return body, summary

    def run_noise_window(self, window: float | None = None, watch: str | None = None) -> NoiseSummary:
        """Only client noise for one window (no foreground request)."""
        _, summary = self.request(None, None, noise=True, watch=watch, window=window)
        return summary
