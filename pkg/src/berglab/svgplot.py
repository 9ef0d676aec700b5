"""Minimal hand-rolled SVG emission: wireframes, polylines, xy-profiles.

No plotting dependency: everything here is a line drawing.
"""

from __future__ import annotations

import numpy as np

_HEADER = ('<?xml version="1.0" encoding="UTF-8"?>\n'
           '<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
           'viewBox="0 0 {w} {h}">\n')


class SvgCanvas:
    """Maps data coordinates to a fixed-size SVG viewport (y flipped)."""

    def __init__(self, xlim, ylim, width=640, margin=20):
        self.x0, self.x1 = float(xlim[0]), float(xlim[1])
        self.y0, self.y1 = float(ylim[0]), float(ylim[1])
        span_x = max(self.x1 - self.x0, 1e-300)
        span_y = max(self.y1 - self.y0, 1e-300)
        self.scale = (width - 2 * margin) / span_x
        self.width = width
        self.height = int(2 * margin + span_y * self.scale)
        self.margin = margin
        self.parts = []

    def to_px(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        px = self.margin + (pts[:, 0] - self.x0) * self.scale
        py = self.height - self.margin - (pts[:, 1] - self.y0) * self.scale
        return np.column_stack([px, py])

    def polyline(self, pts, color="black", width=1.0):
        px = self.to_px(pts)
        coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in px)
        self.parts.append(f'<polyline points="{coords}" fill="none" '
                          f'stroke="{color}" stroke-width="{width}"/>')

    def segments(self, starts, ends, color="black", width=0.5):
        p0 = self.to_px(starts)
        p1 = self.to_px(ends)
        for (x0, y0), (x1, y1) in zip(p0, p1):
            self.parts.append(f'<line x1="{x0:.2f}" y1="{y0:.2f}" x2="{x1:.2f}" '
                              f'y2="{y1:.2f}" stroke="{color}" stroke-width="{width}"/>')

    def write(self, path):
        with open(path, "w") as f:
            f.write(_HEADER.format(w=self.width, h=self.height))
            for p in self.parts:
                f.write(p + "\n")
            f.write("</svg>\n")


def mesh_wireframe_svg(mesh, path, color="#445", max_edges=200000):
    tris = mesh.triangles
    e = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    e.sort(axis=1)
    e = np.unique(e, axis=0)
    if len(e) > max_edges:
        e = e[:: len(e) // max_edges + 1]
    d = mesh.domain
    canvas = SvgCanvas((-d.outer_half_width, d.outer_half_width),
                       (-d.outer_half_height, d.outer_half_height))
    canvas.segments(mesh.nodes[e[:, 0]], mesh.nodes[e[:, 1]], color=color, width=0.4)
    canvas.write(path)


def outline_with_polylines_svg(domain, polylines, path, color="#b22", outline="#888"):
    """Domain outline plus overlaid polylines (e.g. level-set components)."""
    canvas = SvgCanvas((-domain.outer_half_width, domain.outer_half_width),
                       (-domain.outer_half_height, domain.outer_half_height))
    X, Y = domain.half_width, domain.half_height
    XX, YY = domain.outer_half_width, domain.outer_half_height
    for w, h in ((X, Y), (XX, YY)):
        canvas.polyline([(-w, -h), (w, -h), (w, h), (-w, h), (-w, -h)],
                        color=outline, width=1.2)
    for poly in polylines:
        canvas.polyline(poly, color=color, width=1.5)
    canvas.write(path)


def profile_svg(s, values, path, color="#226", width=640, height=360):
    """Simple xy line plot of a trace profile."""
    s = np.asarray(s, dtype=float)
    values = np.asarray(values, dtype=float)
    vmin, vmax = float(values.min()), float(values.max())
    if vmax - vmin < 1e-300:
        vmax = vmin + 1.0
    margin = 30
    sx = (width - 2 * margin) / max(s.max() - s.min(), 1e-300)
    sy = (height - 2 * margin) / (vmax - vmin)
    pts = [(margin + (si - s.min()) * sx, height - margin - (vi - vmin) * sy)
           for si, vi in zip(s, values)]
    coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
    with open(path, "w") as f:
        f.write(_HEADER.format(w=width, h=height))
        if vmin < 0 < vmax:
            y0 = height - margin + vmin * sy
            f.write(f'<line x1="{margin}" y1="{y0:.2f}" x2="{width - margin}" '
                    f'y2="{y0:.2f}" stroke="#aaa" stroke-width="0.8"/>\n')
        f.write(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                f'stroke-width="1.2"/>\n')
        f.write("</svg>\n")
