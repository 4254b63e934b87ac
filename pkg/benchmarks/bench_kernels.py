"""Timing of the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--h 0.01] [--repeat 5]

Prints one line per kernel with the best wall time of each backend and the
speed-up.  Both backends are imported directly, so no environment variable
is needed.
"""
import argparse
import timeit

import numpy as np

from shapeopt import _kernels_py
from shapeopt.geometry import regular_polygon
from shapeopt.meshing import triangulate

try:
    from shapeopt import _kernels
except ImportError:  # pragma: no cover
    _kernels = None


def patches(mesh):
    owner = mesh.triangles.ravel()
    elem = np.repeat(np.arange(len(mesh.triangles)), 3)
    order = np.argsort(owner, kind="stable")
    ptr = np.concatenate([[0], np.cumsum(np.bincount(owner, minlength=mesh.n_nodes))])
    return ptr, elem[order]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--h", type=float, default=0.01)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    mesh = triangulate(regular_polygon(256), args.h)
    rng = np.random.default_rng(0)
    cen = mesh.nodes[mesh.triangles].mean(axis=1)
    vals = rng.normal(size=(len(cen), 2))
    u = rng.normal(size=mesh.n_nodes)
    ptr, idx = patches(mesh)
    cases = {
        "assemble_p1": lambda k: k.assemble_p1(mesh.nodes, mesh.triangles),
        "patch_fit": lambda k: k.patch_fit(mesh.nodes, cen, vals, ptr, idx),
        "contour_segments": lambda k: k.contour_segments(mesh.nodes, mesh.triangles, u, 0.1),
    }
    print(f"mesh: {mesh.n_nodes} nodes, {len(mesh.triangles)} triangles (h={args.h})")
    print(f"{'kernel':18s} {'python [ms]':>12s} {'cython [ms]':>12s} {'speed-up':>9s}")
    for name, fn in cases.items():
        tp = min(timeit.repeat(lambda: fn(_kernels_py), number=1, repeat=args.repeat))
        if _kernels is None:
            print(f"{name:18s} {1e3 * tp:12.2f} {'n/a':>12s} {'n/a':>9s}")
            continue
        tc = min(timeit.repeat(lambda: fn(_kernels), number=1, repeat=args.repeat))
        print(f"{name:18s} {1e3 * tp:12.2f} {1e3 * tc:12.2f} {tp / tc:9.2f}")


if __name__ == "__main__":
    main()
