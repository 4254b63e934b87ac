"""Serialization helpers: JSON dumps, CSV tables and dependency-free SVG plots."""
from __future__ import annotations

import hashlib
import json
import math
import os
from xml.sax.saxutils import escape

import numpy as np

from .geometry import make_domain


def to_plain(o):
    """Recursively convert numpy containers and scalars to JSON-ready objects."""
    if isinstance(o, dict):
        return {str(k): to_plain(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [to_plain(v) for v in o]
    if isinstance(o, np.ndarray):
        return to_plain(o.tolist())
    if isinstance(o, (np.floating, float)):
        v = float(o)
        return v if math.isfinite(v) else str(v)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.bool_):
        return bool(o)
    if hasattr(o, "to_dict"):
        return to_plain(o.to_dict())
    return o


def dumps(obj, **kw):
    """Deterministic JSON (sorted keys, fixed float formatting by the json module)."""
    kw.setdefault("indent", 2)
    return json.dumps(to_plain(obj), sort_keys=True, **kw)


def write_json(path, obj):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(dumps(obj))
        fh.write("\n")
    return path


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def config_hash(config):
    """SHA-256 of the canonical JSON form of a configuration dict."""
    text = json.dumps(to_plain(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def write_csv(path, header, rows):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(f"{float(v):.17g}" for v in r) + "\n")
    return path


def read_csv(path):
    """Header and float array of a CSV written by :func:`write_csv`."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data


def domain_to_dict(dom):
    return {"vertices": dom.vertices.tolist()}


def domain_from_dict(d):
    return make_domain(np.asarray(d["vertices"], dtype=float))


# ---------------------------------------------------------------------------
# SVG
# ---------------------------------------------------------------------------

_COLORS = {"D1": "#1f77b4", "Omega": "#d62728", "D2": "#2ca02c"}


def _viewbox(polys, pad=0.05):
    P = np.concatenate([np.asarray(p, dtype=float) for p in polys])
    lo, hi = P.min(axis=0), P.max(axis=0)
    span = float(max(hi - lo)) or 1.0
    lo = lo - pad * span
    hi = hi + pad * span
    return lo, hi


def _poly_path(P, lo, hi, size):
    # y axis flipped so that the picture has the usual orientation
    s = size / float(max(hi - lo))
    pts = [f"{(x - lo[0]) * s:.3f},{(hi[1] - y) * s:.3f}" for x, y in P]
    return " ".join(pts)


def shape_svg(dom, pair=None, size=480, title=None):
    """Overlay of D1, the domain and D2 as an SVG document."""
    layers = []
    if pair is not None and pair.D2 is not None:
        layers.append(("D2", pair.D2.vertices))
    if pair is not None and pair.D1 is not None:
        layers.append(("D1", pair.D1.vertices))
    if dom is not None:
        layers.append(("Omega", dom.vertices))
    if not layers:
        raise ValueError("nothing to draw")
    lo, hi = _viewbox([P for _, P in layers])
    w = size
    hgt = int(round(size * (hi[1] - lo[1]) / max(hi - lo)))
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{hgt}" viewBox="0 0 {w} {hgt}">',
    ]
    if title:
        out.append(f"<title>{escape(title)}</title>")
    for name, P in layers:
        fill = "none" if name != "Omega" else "#d6272822"
        out.append(
            f'<polygon id="{name}" points="{_poly_path(P, lo, hi, size)}" '
            f'fill="{fill}" stroke="{_COLORS[name]}" stroke-width="1.5"/>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def curve_svg(x, ys, labels=None, size=(520, 320), title=None, xlabel="s", ylabel=""):
    """Line plot of one or more curves y(x) as an SVG document."""
    x = np.asarray(x, dtype=float)
    ys = [np.asarray(y, dtype=float) for y in (ys if isinstance(ys, (list, tuple)) else [ys])]
    if len(x) < 2:
        raise ValueError("need at least two abscissas")
    W, H = size
    m = 40
    ymin = min(float(np.nanmin(y)) for y in ys)
    ymax = max(float(np.nanmax(y)) for y in ys)
    if ymax == ymin:
        ymax = ymin + 1.0
    xmin, xmax = float(x.min()), float(x.max())

    def X(v):
        return m + (v - xmin) / (xmax - xmin) * (W - 2 * m)

    def Y(v):
        return H - m - (v - ymin) / (ymax - ymin) * (H - 2 * m)

    palette = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e"]
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
    ]
    if title:
        out.append(f"<title>{escape(title)}</title>")
    out.append(f'<rect x="{m}" y="{m}" width="{W - 2 * m}" height="{H - 2 * m}" fill="none" stroke="#888"/>')
    for k, y in enumerate(ys):
        pts = " ".join(f"{X(a):.2f},{Y(b):.2f}" for a, b in zip(x, y) if np.isfinite(b))
        lab = escape(labels[k]) if labels and k < len(labels) else f"curve{k}"
        out.append(f'<polyline id="{lab}" points="{pts}" fill="none" stroke="{palette[k % len(palette)]}" stroke-width="1.2"/>')
    out.append(f'<text x="{W / 2:.0f}" y="{H - 8}" font-size="12" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="12" y="{H / 2:.0f}" font-size="12" transform="rotate(-90 12 {H / 2:.0f})">{escape(ylabel)}</text>')
    out.append(f'<text x="{m}" y="{m - 6}" font-size="10">{ymax:.4g}</text>')
    out.append(f'<text x="{m}" y="{H - m + 12}" font-size="10">{ymin:.4g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_text(path, text):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)
    return path
