"""Shared constructions for the test suite."""
import numpy as np

from shapeopt.geometry import make_domain, vertex_arclength
from shapeopt.shape_calculus import BoundaryPerturbation

J01 = 2.404825557695773


def rounded_square(half=0.5, r=0.2, n_arc=16):
    """Square [-half, half]^2 with corners rounded to radius r (polygonal arcs)."""
    pts = []
    for cx, cy, a0 in ((half - r, half - r, 0.0), (-half + r, half - r, np.pi / 2), (-half + r, -half + r, np.pi), (half - r, -half + r, 1.5 * np.pi)):
        t = a0 + np.linspace(0.0, np.pi / 2, n_arc + 1)
        pts.append(np.stack([cx + r * np.cos(t), cy + r * np.sin(t)], axis=1))
    return make_domain(np.concatenate(pts))


def hat_on_edge(dom, k, a=0.2, b=0.8, z=None):
    """Hat perturbation supported inside edge k (fractions a..b), direction z (default: outward normal)."""
    sv = vertex_arclength(dom)
    L = dom.edge_lengths[k]
    s = sv[k] + np.array([a, 0.5 * (a + b), b]) * L
    zz = dom.normals[k] if z is None else np.asarray(z, dtype=float)
    return BoundaryPerturbation(dom, s, np.array([0.0, 1.0, 0.0]), zz)


def boundary_oracle_scale(state, value):
    """max(|value|, tiny) helper for relative comparisons."""
    return max(abs(value), 1e-300)


# acceptance results, one line per criterion, printed in the terminal summary
ACCEPTANCE = {}


def record(k, ok, detail):
    line = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[k] = line
    print(line)
    return ok
