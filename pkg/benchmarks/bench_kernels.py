"""Compare the numba and pure-numpy E-step kernels on a synthetic corpus.

Usage::

    python3 benchmarks/bench_kernels.py --districts 2000 --weeks 40 --repeat 5

Both backends run on the same stacked batch; the script also reports the
largest disagreement between them so a speedup never hides a wrong answer.
"""

import argparse
import time

import numpy as np

from modality_hmm import _kernels
from modality_hmm.hmm import log_emission_table, stack_grids
from modality_hmm.params import published_parameters
from modality_hmm.synthetic import GeneratorConfig, generate


def best_of(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--districts", type=int, default=2000)
    ap.add_argument("--weeks", type=int, default=40)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    params = published_parameters()
    corpus = generate(GeneratorConfig(params, args.districts, args.weeks, seed=args.seed))
    obs, lengths = stack_grids(corpus.sequences)
    le = log_emission_table(params, obs)
    call = (params.log_initial, params.log_transition, le, obs, lengths, 3)
    cells = args.districts * args.weeks
    print(f"corpus: {args.districts} districts x {args.weeks} weeks ({cells:,} district-weeks)")

    results = {}
    for name in ("numpy", "numba"):
        if name == "numba" and not _kernels.HAVE_NUMBA:
            print("numba: not installed, skipped")
            continue
        _, estep, _ = _kernels.get_backend(name)
        estep(*call)  # warm-up, includes JIT compile for numba
        secs, out = best_of(lambda estep=estep: estep(*call), args.repeat)
        results[name] = out
        print(f"{name:6s} E-step: {secs * 1e3:8.2f} ms  ({cells / secs / 1e6:6.2f} M district-weeks/s)")

    if len(results) == 2:
        a, b = results["numpy"], results["numba"]
        diff = max(float(np.abs(x - y).max()) for x, y in zip(a, b))
        print(f"max |numpy - numba| over all statistics: {diff:.2e}")


if __name__ == "__main__":
    main()
