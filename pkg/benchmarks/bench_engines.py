"""Compare the compiled slot kernel with the pure-Python engine.

    python benchmarks/bench_engines.py --slots 200000
"""

import argparse
import time

from lorarelay import sim
from lorarelay.core import Protocol, ScenarioConfig, validate_config
from lorarelay.draws import draw
from lorarelay.engine import run_world


def timed(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--slots", type=int, default=200_000)
    ap.add_argument("--sensors", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    if not sim.HAVE_COMPILED:
        raise SystemExit("compiled kernel not built; run `pip install -e . --no-build-isolation` first")

    print(f"{'protocol':<22}{'draw s':>9}{'compiled s':>12}{'python s':>10}{'speedup':>9}")
    for protocol in Protocol:
        cfg = validate_config(ScenarioConfig(n_sensors=args.sensors, protocol=protocol))
        t_draw = timed(lambda: draw(cfg, 1, args.slots), args.repeat)
        d = draw(cfg, 1, args.slots)
        t_c = timed(lambda: sim._run_compiled(cfg, d), args.repeat)
        t_p = timed(lambda: run_world(cfg, d), 1)
        print(f"{protocol.value:<22}{t_draw:>9.3f}{t_c:>12.4f}{t_p:>10.2f}{t_p / t_c:>8.0f}x")


if __name__ == "__main__":
    main()
