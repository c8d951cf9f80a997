"""Hot kernels with a numba path and a pure-numpy fallback.

The compiled path is used when numba imports cleanly and the environment
variable ``REMAPSIM_DISABLE_NUMBA`` is unset (or ``0``).  Both paths are
always importable as ``*_numba`` / ``*_numpy`` so tests and the benchmark
can compare them directly.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("REMAPSIM_DISABLE_NUMBA", "0") in ("", "0")


def _njit(func):
    if not HAS_NUMBA:
        return func
    return numba.njit(cache=True, nogil=True)(func)


# -- first-touch tracking ----------------------------------------------------


def _first_touch_loop(present, gpas, out):
    n = 0
    for k in range(gpas.shape[0]):
        g = gpas[k]
        if not present[g]:
            present[g] = True
            out[n] = g
            n += 1
    return n


_first_touch_compiled = _njit(_first_touch_loop)


def first_touch_numba(present: np.ndarray, gpas: np.ndarray) -> np.ndarray:
    """Mark ``gpas`` present in order; return the ones that faulted, in order."""
    out = np.empty(gpas.shape[0], dtype=np.int64)
    n = _first_touch_compiled(present, gpas, out)
    return out[:n].copy()


def first_touch_numpy(present: np.ndarray, gpas: np.ndarray) -> np.ndarray:
    missing = gpas[~present[gpas]]
    if missing.size == 0:
        return np.empty(0, dtype=np.int64)
    _, first = np.unique(missing, return_index=True)
    new = missing[np.sort(first)].astype(np.int64, copy=False)
    present[new] = True
    return new


# -- identification update -----------------------------------------------------


def _identify_update_loop(refined, counts, last_touch, r_pages, x_pages, first, scratch):
    n = refined.shape[0]
    for g in range(n):
        scratch[g] = 0
    for k in range(r_pages.shape[0]):
        g = r_pages[k]
        scratch[g] = 1
        if k > last_touch[g]:
            last_touch[g] = k
    for k in range(x_pages.shape[0]):
        g = x_pages[k]
        if scratch[g] == 1:
            scratch[g] = 2
    for g in range(n):
        s = scratch[g]
        if first:
            refined[g] = s > 0
        else:
            refined[g] = refined[g] and s > 0
        if refined[g]:
            if s == 1:
                counts[g] += 1
        else:
            counts[g] = 0


_identify_update_compiled = _njit(_identify_update_loop)


def identify_update_numba(refined, counts, last_touch, r_pages, x_pages, first):
    """In-place R^i / C^i / last-touch update for one iteration."""
    scratch = np.empty(refined.shape[0], dtype=np.int8)
    _identify_update_compiled(refined, counts, last_touch, r_pages, x_pages, first, scratch)


def identify_update_numpy(refined, counts, last_touch, r_pages, x_pages, first):
    in_r = np.zeros(refined.shape[0], dtype=bool)
    in_r[r_pages] = True
    np.maximum.at(last_touch, r_pages, np.arange(r_pages.shape[0], dtype=np.int64))
    if first:
        refined[:] = in_r
    else:
        refined &= in_r
    in_x = np.zeros(refined.shape[0], dtype=bool)
    in_x[x_pages] = True
    candidate = refined & ~in_x
    counts += candidate
    counts[~refined] = 0


# -- top-set evaluation -----------------------------------------------------


def _top_set_size_loop(refined, counts, tp):
    ref = counts[tp]
    n = 0
    for g in range(refined.shape[0]):
        if refined[g] and counts[g] >= ref:
            n += 1
    return n


_top_set_size_compiled = _njit(_top_set_size_loop)


def top_set_size_numba(refined, counts, tp):
    return int(_top_set_size_compiled(refined, counts, tp))


def top_set_size_numpy(refined, counts, tp):
    return int(np.count_nonzero(refined & (counts >= counts[tp])))


# -- request interleaving ---------------------------------------------------------


def interleave_numpy(streams: list[np.ndarray], rng: np.random.Generator) -> np.ndarray:
    """Uniformly random interleaving that keeps each stream's internal order."""
    if not streams:
        return np.empty(0, dtype=np.int64)
    if len(streams) == 1:
        return streams[0]
    lengths = np.fromiter((s.shape[0] for s in streams), dtype=np.int64, count=len(streams))
    labels = rng.permutation(np.repeat(np.arange(len(streams)), lengths))
    slots = np.argsort(labels, kind="stable")
    out = np.empty(int(lengths.sum()), dtype=np.int64)
    out[slots] = np.concatenate(streams)
    return out


if USE_NUMBA:
    first_touch = first_touch_numba
    identify_update = identify_update_numba
    top_set_size = top_set_size_numba
else:
    first_touch = first_touch_numpy
    identify_update = identify_update_numpy
    top_set_size = top_set_size_numpy

interleave = interleave_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
