"""Scenario description: guest layout, service profiles, resources, noise.

Scenario files are YAML.  Every page-set field accepts either a size (pages
are then placed by a seeded shuffle of the free guest range) or an explicit
list of guest page numbers.  Overlapping sets are rejected with the file
and line of the offending entry.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from importlib import resources as importlib_resources
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .errors import ScenarioError


@dataclass
class Resource:
    """A remotely servable blob occupying ``gpas`` in order.

    ``meta_gpas`` are bookkeeping pages (inode, cache descriptors) touched on
    every request for this resource, before its content.
    """

    name: str
    service: str
    gpas: list[int]
    size_bytes: int
    content: bytes
    sticky: bool = True
    relocation_rate: float = 0.0
    meta_gpas: list[int] = field(default_factory=list)
    evicted: bool = False

    def validate(self, page_size: int) -> None:
        if len(self.content) != self.size_bytes:
            raise ScenarioError(f"resource {self.name}: content length != size_bytes")
        if not self.evicted and math.ceil(self.size_bytes / page_size) != len(self.gpas):
            raise ScenarioError(
                f"resource {self.name}: {len(self.gpas)} pages cannot hold {self.size_bytes} bytes")
        if (self.relocation_rate == 0) != self.sticky:
            raise ScenarioError(f"resource {self.name}: sticky iff relocation_rate == 0")
        if self.relocation_rate < 0:
            raise ScenarioError(f"resource {self.name}: negative relocation_rate")


@dataclass
class ServiceProfile:
    """Page-access behaviour of one remotely reachable service.

    Each request touches the kernel and service common pages, a random
    subset of ``volatile_pool`` (each page independently with probability
    ``volatile_draw``, so the draw count is binomial), the requested
    resource's meta pages and finally its content pages.  With
    ``meta_spill`` > 0 a request also touches each meta page of the
    service's *other* resources with that probability.
    """

    name: str
    kernel_common: np.ndarray
    service_common: np.ndarray
    volatile_pool: np.ndarray
    volatile_draw: float
    pre_resource_fraction: float
    resources: list[str]
    meta_spill: float = 0.0
    window_seconds: float = 0.37
    target: str | None = None
    other: str | None = None


@dataclass
class NoiseModel:
    """Poisson client traffic: ``level`` requests per simulated second."""

    level: float
    window_seconds: float
    pairs: list[tuple[str, str]]
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.level < 0 or self.window_seconds <= 0:
            raise ScenarioError("noise level must be >= 0 and window_seconds > 0")
        if len(self.pairs) != len(self.weights):
            raise ScenarioError("noise distribution: pairs and weights differ in length")
        total = self.weights.sum()
        if self.pairs and (total <= 0 or (self.weights < 0).any()):
            raise ScenarioError("noise distribution weights must be non-negative, not all zero")
        if self.pairs:
            self.weights = self.weights / total

    @property
    def expected_requests(self) -> float:
        return self.level * self.window_seconds

    def share(self, pair: tuple[str, str]) -> float:
        return float(sum(w for p, w in zip(self.pairs, self.weights) if p == pair))

    def service_share(self, service: str) -> float:
        return float(sum(w for p, w in zip(self.pairs, self.weights) if p[0] == service))


@dataclass
class VmScenario:
    guest_pages: int
    page_size: int
    kernel_common: np.ndarray
    services: dict[str, ServiceProfile]
    resources: dict[str, Resource]
    noise: NoiseModel
    rng_seed: int = 0
    service_weights: dict[str, float] = field(default_factory=dict)

    def copy(self) -> VmScenario:
        return copy.deepcopy(self)

    def used_pages(self) -> np.ndarray:
        parts = [self.kernel_common]
        for s in self.services.values():
            parts += [s.service_common, s.volatile_pool]
        for r in self.resources.values():
            parts += [np.asarray(r.gpas, dtype=np.int64), np.asarray(r.meta_gpas, dtype=np.int64)]
        return np.concatenate([np.asarray(p, dtype=np.int64) for p in parts])

    def free_pages(self) -> np.ndarray:
        used = np.zeros(self.guest_pages, dtype=bool)
        used[self.used_pages()] = True
        return np.flatnonzero(~used)

    def validate(self) -> None:
        """Check ranges, resource invariants and pairwise disjointness."""
        owner: dict[int, str] = {}

        def claim(pages, label):
            for g in np.asarray(pages, dtype=np.int64).tolist():
                if not 0 <= g < self.guest_pages:
                    raise ScenarioError(f"{label}: page {g} outside guest range")
                if g in owner:
                    raise ScenarioError(f"{label} overlaps {owner[g]} at page {g}")
                owner[g] = label

        claim(self.kernel_common, "kernel_common")
        for s in self.services.values():
            claim(s.service_common, f"{s.name}.service_common")
            claim(s.volatile_pool, f"{s.name}.volatile_pool")
            if not 0 <= s.volatile_draw <= 1 or not 0 <= s.meta_spill <= 1:
                raise ScenarioError(f"{s.name}: probabilities must lie in [0, 1]")
            if not 0 <= s.pre_resource_fraction <= 1:
                raise ScenarioError(f"{s.name}: pre_resource_fraction must lie in [0, 1]")
            for name in s.resources:
                if self.resources.get(name) is None or self.resources[name].service != s.name:
                    raise ScenarioError(f"{s.name}: unknown resource {name}")
        for r in self.resources.values():
            r.validate(self.page_size)
            claim(r.gpas, f"resource {r.name}")
            claim(r.meta_gpas, f"resource {r.name}.meta")
        for svc, res in self.noise.pairs:
            if svc not in self.services or res not in self.services[svc].resources:
                raise ScenarioError(f"noise distribution names unknown pair ({svc}, {res})")

    def with_noise(self, level: float | None = None, window_seconds: float | None = None,
                   pairs=None, weights=None) -> VmScenario:
        out = self.copy()
        out.noise = NoiseModel(
            self.noise.level if level is None else level,
            self.noise.window_seconds if window_seconds is None else window_seconds,
            list(self.noise.pairs if pairs is None else pairs),
            self.noise.weights if weights is None else weights,
        )
        return out


def base_distribution(scenario: VmScenario, exclude: tuple[str, str] | None = None):
    """Service weights spread uniformly over each service's resources."""
    pairs, weights = [], []
    for svc, w in scenario.service_weights.items():
        names = [r for r in scenario.services[svc].resources if (svc, r) != exclude]
        for r in names:
            pairs.append((svc, r))
            weights.append(w / len(names))
    return pairs, np.asarray(weights, dtype=float)


# -- YAML loading ---------------------------------------------------------------


def _line_index(node, path=(), out=None) -> dict[tuple, int]:
    """Map key paths of a composed YAML tree to 1-based line numbers."""
    if out is None:
        out = {}
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            _line_index(v, path + (k.value,), out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_index(v, path + (i,), out)
    return out


class _Allocator:
    def __init__(self, guest_pages: int, rng: np.random.Generator):
        self.guest_pages = guest_pages
        self.order = rng.permutation(guest_pages).astype(np.int64)
        self.taken = np.zeros(guest_pages, dtype=bool)
        self.cursor = 0

    def reserve(self, pages) -> None:
        self.taken[np.asarray(pages, dtype=np.int64)] = True

    def take(self, n: int) -> np.ndarray:
        out = []
        while len(out) < n:
            if self.cursor >= self.guest_pages:
                raise ScenarioError(f"guest too small: cannot place {n} more pages")
            g = self.order[self.cursor]
            self.cursor += 1
            if not self.taken[g]:
                self.taken[g] = True
                out.append(g)
        return np.asarray(out, dtype=np.int64)


def from_dict(raw: dict[str, Any], path: str | None = None, lines: dict | None = None) -> VmScenario:
    """Build a scenario from parsed YAML.  Explicit page lists are placed first."""
    lines = lines or {}

    def fail(msg, *key):
        raise ScenarioError(msg, path, lines.get(tuple(key)))

    def need(d, key, *where):
        if key not in d:
            fail(f"missing field '{key}'", *where)
        return d[key]

    try:
        guest_pages = int(need(raw, "guest_pages"))
        page_size = int(raw.get("page_size", 4096))
        seed = int(raw.get("rng_seed", 0))
    except (TypeError, ValueError) as exc:
        fail(str(exc))
    if page_size < 256 or page_size & (page_size - 1):
        fail("page_size must be a power of two >= 256", "page_size")
    rng = np.random.default_rng(seed)
    alloc = _Allocator(guest_pages, rng)

    # explicit lists are reserved up front so sized sets avoid them
    owner: dict[int, tuple] = {}

    def reserve_explicit(value, key):
        if isinstance(value, list):
            for g in value:
                if not isinstance(g, int) or not 0 <= g < guest_pages:
                    fail(f"page {g!r} outside guest range [0, {guest_pages})", *key)
                if g in owner:
                    fail(f"page {g} listed in both {'.'.join(map(str, owner[g]))} "
                         f"and {'.'.join(map(str, key))}", *key)
                owner[g] = key
            alloc.reserve(value)

    services_raw = need(raw, "services")
    if not isinstance(services_raw, list) or not services_raw:
        fail("services must be a non-empty list", "services")
    reserve_explicit(raw.get("kernel_common", 0), ("kernel_common",))
    for i, s in enumerate(services_raw):
        for key in ("service_common", "volatile_pool"):
            reserve_explicit(s.get(key, 0), ("services", i, key))
        for j, r in enumerate(s.get("resources", [])):
            reserve_explicit(r.get("gpas"), ("services", i, "resources", j, "gpas"))
            reserve_explicit(r.get("meta_pages", 0), ("services", i, "resources", j, "meta_pages"))

    def pages(value, key):
        if isinstance(value, list):
            return np.asarray(value, dtype=np.int64)
        if not isinstance(value, int) or value < 0:
            fail(f"expected a page count or a page list, got {value!r}", *key)
        return alloc.take(value)

    kernel = pages(raw.get("kernel_common", 0), ("kernel_common",))
    services: dict[str, ServiceProfile] = {}
    resources: dict[str, Resource] = {}
    for i, s in enumerate(services_raw):
        name = str(need(s, "name", "services", i))
        if name in services:
            fail(f"duplicate service {name}", "services", i, "name")
        res_names = []
        for j, r in enumerate(need(s, "resources", "services", i)):
            where = ("services", i, "resources", j)
            rname = str(need(r, "name", *where))
            if rname in resources:
                fail(f"duplicate resource {rname}", *where, "name")
            size = int(need(r, "size_bytes", *where))
            if size <= 0:
                fail("size_bytes must be positive", *where, "size_bytes")
            n_pages = math.ceil(size / page_size)
            if r.get("gpas") is not None:
                gpas = np.asarray(r["gpas"], dtype=np.int64)
                if len(gpas) != n_pages:
                    fail(f"{len(gpas)} gpas cannot hold {size} bytes", *where, "gpas")
            else:
                gpas = alloc.take(n_pages)
            meta = pages(r.get("meta_pages", 0), where + ("meta_pages",))
            rate = float(r.get("relocation_rate", 0.0))
            sticky = bool(r.get("sticky", rate == 0))
            if sticky != (rate == 0):
                fail("sticky must hold exactly when relocation_rate == 0", *where)
            content = np.random.default_rng([seed, 1, i, j]).bytes(size)
            resources[rname] = Resource(rname, name, gpas.tolist(), size, content,
                                        sticky, rate, meta.tolist())
            res_names.append(rname)
        services[name] = ServiceProfile(
            name=name,
            kernel_common=kernel,
            service_common=pages(s.get("service_common", 0), ("services", i, "service_common")),
            volatile_pool=pages(s.get("volatile_pool", 0), ("services", i, "volatile_pool")),
            volatile_draw=float(s.get("volatile_draw", 0.0)),
            pre_resource_fraction=float(s.get("pre_resource_fraction", 1.0)),
            resources=res_names,
            meta_spill=float(s.get("meta_spill", 0.0)),
            window_seconds=float(s.get("window_seconds", 0.37)),
            target=s.get("target"),
            other=s.get("other"),
        )
        for key in ("target", "other"):
            if s.get(key) is not None and s[key] not in res_names:
                fail(f"{key} names unknown resource {s[key]}", "services", i, key)

    noise_raw = raw.get("noise", {}) or {}
    weights_raw = noise_raw.get("service_weights") or {n: 1.0 for n in services}
    for n in weights_raw:
        if n not in services:
            fail(f"service_weights names unknown service {n}", "noise", "service_weights")
    scenario = VmScenario(guest_pages, page_size, kernel, services, resources,
                          NoiseModel(0.0, 1.0, [], []), seed,
                          {k: float(v) for k, v in weights_raw.items()})
    if noise_raw.get("client_resource_distribution"):
        pairs, weights = [], []
        for k, entry in enumerate(noise_raw["client_resource_distribution"]):
            pairs.append((entry["service"], entry["resource"]))
            weights.append(float(entry.get("weight", 1.0)))
    else:
        pairs, weights = base_distribution(scenario)
    try:
        scenario.noise = NoiseModel(float(noise_raw.get("level", 0.0)),
                                    float(noise_raw.get("window_seconds", 0.37)), pairs, weights)
        scenario.validate()
    except ScenarioError as exc:
        if exc.path is None:
            raise ScenarioError(str(exc), path) from None
        raise
    return scenario


def load_scenario(source: str | Path) -> VmScenario:
    """Load a scenario file; bare names resolve to the bundled scenarios."""
    p = Path(source)
    if not p.exists():
        bundled = importlib_resources.files("remapsim") / "data" / f"{source}.yaml"
        if not bundled.is_file():
            raise ScenarioError("no such scenario file", str(source))
        text, label = bundled.read_text(), f"<bundled>/{source}.yaml"
    else:
        text, label = p.read_text(), str(p)
    try:
        node = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ScenarioError(f"YAML error: {getattr(exc, 'problem', exc)}", label,
                            mark.line + 1 if mark else None) from None
    if not isinstance(raw, dict):
        raise ScenarioError("top level must be a mapping", label, 1)
    return from_dict(raw, label, _line_index(node))
