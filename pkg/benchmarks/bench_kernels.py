"""Compare the compiled and numpy backends on the variation recursions.

Usage: python3 benchmarks/bench_kernels.py [--paths P] [--repeat R]
"""

import argparse
import timeit

from pdsde import kernels
from pdsde.euler import integrate, linearize
from pdsde.models import DelayModel, MarkovianModel
from pdsde.wiener_grid import make_grid, sample_increment_block

MODELS = {
    "markovian": MarkovianModel({"const": 1.0, "sin_x": 0.25}, {"cos_x": 0.25}),
    "delay": DelayModel(0.25, {"const": 1.0, "sin_u": 0.25}, {"cos_v": 0.25}),
}


def inputs(model, n, paths, order):
    grid = make_grid(1.0, n)
    dW = sample_increment_block(0, range(paths), grid)
    lin = linearize(model, integrate(model, grid, dW, 0.0), order)
    return lin


def bench(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--paths", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    names = ["python"] + (["cython"] if kernels.COMPILED is not None else [])
    if len(names) == 1:
        print("compiled kernels not built; timing the python backend only")
    print(f"{'kernel':<18}{'model':<11}{'n':>5}" + "".join(f"{k:>12}" for k in names) + f"{'speedup':>10}")

    for model_name, model in MODELS.items():
        for n in (16, 64, 256):
            lin = inputs(model, n, args.paths, 1)
            times = [bench(lambda b=kernels.backend(k): b.propagate_first(lin.A, lin.idx, lin.src), args.repeat) for k in names]
            report("propagate_first", model_name, n, times)
        for n in (8, 16, 32):
            lin = inputs(model, n, args.paths, 2)
            J = kernels.backend("python").propagate_first(lin.A, lin.idx, lin.src)
            times = [
                bench(lambda b=kernels.backend(k): b.propagate_second(lin.A, lin.idx, lin.B, lin.C, J), args.repeat)
                for k in names
            ]
            report("propagate_second", model_name, n, times)


def report(kernel, model, n, times):
    cells = "".join(f"{t * 1e3:>10.2f}ms" for t in times)
    speedup = f"{times[0] / times[1]:>9.1f}x" if len(times) > 1 else ""
    print(f"{kernel:<18}{model:<11}{n:>5}{cells}{speedup}")


if __name__ == "__main__":
    main()
