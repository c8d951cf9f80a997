"""Physical frames and the hypervisor's second-level (GPA -> HPA) table.

The table supports three things an attacking hypervisor needs: present-flag
based page tracking, remapping guest pages to arbitrary host frames, and
restoring the original layout.  An optional integrity mode binds each guest
page to a digest of (frame content, gpa, nonce) and faults any access whose
binding no longer verifies.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import _accel
from .errors import DuplicateMappingError, IntegrityFault, TrackingError, UnmappedGpaError

Gpa = int
FrameId = int


class PhysicalMemory:
    """Host frames of ``page_size`` bytes each.

    Frame contents are pseudo-random and derived from ``seed`` on first use,
    so large machines cost nothing until a frame is actually read.
    """

    def __init__(self, n_frames: int, page_size: int = 4096, seed: int = 0):
        if page_size < 256 or page_size & (page_size - 1):
            raise ValueError(f"page_size must be a power of two >= 256, got {page_size}")
        if n_frames <= 0:
            raise ValueError("n_frames must be positive")
        self.n_frames = n_frames
        self.page_size = page_size
        self.seed = seed
        self._frames: dict[int, bytearray] = {}
        # bumped on every write; lets the integrity cache notice content changes
        self.versions = np.zeros(n_frames, dtype=np.int64)

    def _check(self, frame: FrameId) -> None:
        if not 0 <= frame < self.n_frames:
            raise IndexError(f"frame {frame} out of range [0, {self.n_frames})")

    def _materialize(self, frame: FrameId) -> bytearray:
        buf = self._frames.get(frame)
        if buf is None:
            self._check(frame)
            rng = np.random.default_rng([self.seed, frame])
            buf = bytearray(rng.bytes(self.page_size))
            self._frames[frame] = buf
        return buf

    def read(self, frame: FrameId, offset: int = 0, length: int | None = None) -> bytes:
        if length is None:
            length = self.page_size - offset
        if offset < 0 or length < 0 or offset + length > self.page_size:
            raise ValueError(f"read [{offset}, {offset + length}) outside page")
        return bytes(self._materialize(frame)[offset:offset + length])

    def write(self, frame: FrameId, offset: int, data: bytes) -> None:
        if offset < 0 or offset + len(data) > self.page_size:
            raise ValueError(f"write [{offset}, {offset + len(data)}) outside page")
        self._materialize(frame)[offset:offset + len(data)] = data
        self.versions[frame] += 1


class AccessOutcome(enum.Enum):
    OK = "ok"
    TRACKED_FAULT = "tracked-fault-then-ok"
    INTEGRITY_FAULT = "integrity-fault"


@dataclass(frozen=True)
class SltEntry:
    hpa: FrameId
    present: bool
    recorded: bool
    bound_hash: bytes | None


@dataclass(frozen=True, eq=False)
class AccessRecording:
    """Guest pages in the order they were first touched during one session."""

    pages: np.ndarray

    def __len__(self) -> int:
        return int(self.pages.shape[0])

    def __iter__(self):
        return iter(self.pages.tolist())

    def __eq__(self, other) -> bool:
        if not isinstance(other, AccessRecording):
            return NotImplemented
        return np.array_equal(self.pages, other.pages)

    @cached_property
    def as_set(self) -> frozenset[Gpa]:
        return frozenset(self.pages.tolist())


class SecondLevelTable:
    """GPA -> HPA table with tracking, remapping and an integrity option."""

    def __init__(self, memory: PhysicalMemory, guest_pages: int,
                 integrity_mode: bool = False, nonce: bytes = b"\0" * 16):
        self.memory = memory
        self.guest_pages = guest_pages
        self.integrity_mode = integrity_mode
        self.nonce = nonce
        self.tracking_active = False
        self._hpa = np.full(guest_pages, -1, dtype=np.int64)
        self._snapshot = np.full(guest_pages, -1, dtype=np.int64)
        self._present = np.ones(guest_pages, dtype=bool)
        self._recorded = np.zeros(guest_pages, dtype=bool)
        self._bound: list[bytes | None] = [None] * guest_pages
        # integrity verification cache: valid while (hpa, frame version) match
        self._verified_hpa = np.full(guest_pages, -1, dtype=np.int64)
        self._verified_version = np.full(guest_pages, -1, dtype=np.int64)
        self._buffer: list[np.ndarray] = []

    # -- construction / inspection ------------------------------------------

    def _require_mapped(self, gpa: Gpa) -> None:
        if not 0 <= gpa < self.guest_pages or self._hpa[gpa] < 0:
            raise UnmappedGpaError(f"gpa {gpa} is not mapped")

    def _binding(self, gpa: Gpa, frame: FrameId) -> bytes:
        h = hashlib.blake2b(digest_size=32)
        h.update(self.memory.read(frame))
        h.update(int(gpa).to_bytes(8, "little"))
        h.update(self.nonce)
        return h.digest()

    def map(self, gpa: Gpa, hpa: FrameId) -> None:
        if not 0 <= gpa < self.guest_pages:
            raise UnmappedGpaError(f"gpa {gpa} outside guest range")
        if self._snapshot[gpa] >= 0:
            raise DuplicateMappingError(f"gpa {gpa} already mapped")
        self.memory._check(hpa)
        self._hpa[gpa] = hpa
        self._snapshot[gpa] = hpa
        self._present[gpa] = not self.tracking_active
        self._recorded[gpa] = False
        if self.integrity_mode:
            self._bind(gpa)

    def _bind(self, gpa: Gpa) -> None:
        frame = int(self._hpa[gpa])
        self._bound[gpa] = self._binding(gpa, frame)
        self._verified_hpa[gpa] = frame
        self._verified_version[gpa] = self.memory.versions[frame]

    def translate(self, gpa: Gpa) -> FrameId:
        self._require_mapped(gpa)
        return int(self._hpa[gpa])

    def snapshot(self, gpa: Gpa) -> FrameId:
        self._require_mapped(gpa)
        return int(self._snapshot[gpa])

    def mapped_gpas(self) -> np.ndarray:
        return np.flatnonzero(self._snapshot >= 0)

    def entry(self, gpa: Gpa) -> SltEntry:
        self._require_mapped(gpa)
        return SltEntry(int(self._hpa[gpa]), bool(self._present[gpa]),
                        bool(self._recorded[gpa]), self._bound[gpa])

    # -- hypervisor operations ---------------------------------------------

    def remap(self, gpa: Gpa, new_hpa: FrameId) -> None:
        """Point ``gpa`` at ``new_hpa``; visible on the very next access."""
        self._require_mapped(gpa)
        self.memory._check(new_hpa)
        self._hpa[gpa] = new_hpa

    def restore_mappings(self) -> None:
        mapped = self._snapshot >= 0
        self._hpa[mapped] = self._snapshot[mapped]
        self.tracking_active = False
        self._present[:] = True
        self._buffer.clear()

    def host_write(self, frame: FrameId, data: bytes, offset: int = 0) -> None:
        """Hypervisor-side write to a host frame (never re-binds guest pages)."""
        self.memory.write(frame, offset, data)

    def begin_tracking(self) -> None:
        self._present[:] = False
        self._recorded[:] = False
        self._buffer.clear()
        self.tracking_active = True

    def end_tracking(self) -> AccessRecording:
        if not self.tracking_active:
            raise TrackingError("end_tracking without begin_tracking")
        pages = (np.concatenate(self._buffer) if self._buffer
                 else np.empty(0, dtype=np.int64))
        self._buffer.clear()
        self.tracking_active = False
        self._present[:] = True
        return AccessRecording(pages)

    # -- guest accesses -----------------------------------------------------

    def _verify(self, gpa: Gpa) -> bool:
        frame = int(self._hpa[gpa])
        version = self.memory.versions[frame]
        if self._verified_hpa[gpa] == frame and self._verified_version[gpa] == version:
            return True
        if self._binding(gpa, frame) != self._bound[gpa]:
            return False
        self._verified_hpa[gpa] = frame
        self._verified_version[gpa] = version
        return True

    def on_access(self, gpa: Gpa, is_write: bool = False) -> AccessOutcome:
        self._require_mapped(gpa)
        outcome = AccessOutcome.OK
        if self.tracking_active and not self._present[gpa]:
            self._present[gpa] = True
            self._recorded[gpa] = True
            self._buffer.append(np.array([gpa], dtype=np.int64))
            outcome = AccessOutcome.TRACKED_FAULT
        if self.integrity_mode and not self._verify(gpa):
            return AccessOutcome.INTEGRITY_FAULT
        return outcome

    def access_many(self, gpas: np.ndarray) -> np.ndarray:
        """Apply ``on_access`` to a whole access stream.

        Returns the sorted unique gpas whose integrity check failed (always
        empty outside integrity mode).
        """
        gpas = np.asarray(gpas, dtype=np.int64)
        if gpas.size == 0:
            return gpas
        if gpas.min() < 0 or gpas.max() >= self.guest_pages or (self._hpa[gpas] < 0).any():
            bad = gpas[(gpas < 0) | (gpas >= self.guest_pages)]
            if bad.size == 0:
                bad = gpas[self._hpa[gpas] < 0]
            raise UnmappedGpaError(f"gpa {int(bad[0])} is not mapped")
        if self.tracking_active:
            new = _accel.first_touch(self._present, gpas)
            if new.size:
                self._recorded[new] = True
                self._buffer.append(new)
        if not self.integrity_mode:
            return np.empty(0, dtype=np.int64)
        frames = self._hpa[gpas]
        cached = (self._verified_hpa[gpas] == frames) & (
            self._verified_version[gpas] == self.memory.versions[frames])
        if cached.all():
            return np.empty(0, dtype=np.int64)
        suspects = np.unique(gpas[~cached])
        return np.array([g for g in suspects.tolist() if not self._verify(g)], dtype=np.int64)

    def read_through(self, gpa: Gpa, offset: int = 0, length: int | None = None) -> bytes:
        if length is None:
            length = self.memory.page_size - offset
        if offset < 0 or length < 0 or offset + length > self.memory.page_size:
            raise ValueError(f"read [{offset}, {offset + length}) outside page")
        if self.on_access(gpa) is AccessOutcome.INTEGRITY_FAULT:
            raise IntegrityFault(gpa)
        return self.memory.read(int(self._hpa[gpa]), offset, length)

    def write_through(self, gpa: Gpa, data: bytes, offset: int = 0) -> None:
        """Guest write; the hardware re-binds the page to its new content."""
        if self.on_access(gpa, is_write=True) is AccessOutcome.INTEGRITY_FAULT:
            raise IntegrityFault(gpa)
        self.memory.write(int(self._hpa[gpa]), offset, data)
        if self.integrity_mode:
            self._bind(gpa)
