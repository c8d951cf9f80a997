"""Compare the numba kernels with their numpy fallbacks.

Run with ``python benchmarks/bench_kernels.py``.  Also times one
identification campaign cell end to end under each backend, by rerunning
itself with ``REMAPSIM_DISABLE_NUMBA=1``.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from remapsim import _accel


def _inputs(guest_pages: int, rec: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    r_pages = rng.choice(guest_pages, size=rec, replace=False).astype(np.int64)
    x_pages = rng.choice(guest_pages, size=rec, replace=False).astype(np.int64)
    stream = rng.integers(0, guest_pages, size=4 * rec, dtype=np.int64)
    streams = [rng.integers(0, guest_pages, size=rec // 8, dtype=np.int64) for _ in range(8)]
    return r_pages, x_pages, stream, streams


def bench_kernels(guest_pages: int, rec: int, repeat: int) -> list[tuple[str, float, float]]:
    if not _accel.HAS_NUMBA:
        print("numba not installed; only numpy timings are meaningful")
    r_pages, x_pages, stream, streams = _inputs(guest_pages, rec)

    def ft(fn):
        return lambda: fn(np.zeros(guest_pages, dtype=bool), stream)

    def upd(fn):
        def run():
            refined = np.zeros(guest_pages, dtype=bool)
            counts = np.zeros(guest_pages, dtype=np.int64)
            last = np.full(guest_pages, -1, dtype=np.int64)
            fn(refined, counts, last, r_pages, x_pages, True)
            fn(refined, counts, last, r_pages, x_pages, False)
        return run

    refined = np.zeros(guest_pages, dtype=bool)
    refined[r_pages] = True
    counts = np.zeros(guest_pages, dtype=np.int64)
    counts[r_pages[: rec // 2]] = 3
    tp = int(r_pages[0])

    cases = [
        ("first_touch", ft(_accel.first_touch_numba), ft(_accel.first_touch_numpy)),
        ("identify_update", upd(_accel.identify_update_numba), upd(_accel.identify_update_numpy)),
        ("top_set_size", lambda: _accel.top_set_size_numba(refined, counts, tp),
         lambda: _accel.top_set_size_numpy(refined, counts, tp)),
    ]
    out = []
    for name, jit_fn, np_fn in cases:
        jit_fn()  # compile outside the timing
        t_jit = min(timeit.repeat(jit_fn, number=10, repeat=repeat)) / 10
        t_np = min(timeit.repeat(np_fn, number=10, repeat=repeat)) / 10
        out.append((name, t_jit, t_np))
    return out


def bench_cell() -> float:
    from remapsim.harness import Campaign, run_campaign

    t = timeit.default_timer()
    run_campaign(Campaign(service="apache-like", noise_levels=[20], runs=2, max_iterations=50))
    return timeit.default_timer() - t


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--guest-pages", type=int, default=32768)
    ap.add_argument("--recording", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--cell-only", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.cell_only:
        print(f"{bench_cell():.3f}")
        return

    print(f"kernels, guest {args.guest_pages} pages, recordings of {args.recording} pages")
    print(f"{'kernel':<18}{'numba [us]':>12}{'numpy [us]':>12}{'speedup':>10}")
    for name, t_jit, t_np in bench_kernels(args.guest_pages, args.recording, args.repeat):
        print(f"{name:<18}{t_jit * 1e6:>12.1f}{t_np * 1e6:>12.1f}{t_np / t_jit:>10.2f}")

    times = {}
    for backend, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, REMAPSIM_DISABLE_NUMBA=flag)
        res = subprocess.run([sys.executable, __file__, "--cell-only"], env=env,
                             capture_output=True, text=True, check=True)
        times[backend] = float(res.stdout.strip().splitlines()[-1])
    print(f"campaign cell (2 runs x 50 iterations): numba {times['numba']:.2f}s, "
          f"numpy {times['numpy']:.2f}s")


if __name__ == "__main__":
    main()
