"""Deterministic, doubly mirror-symmetric triangulation of the annulus.

The frame region decomposes into 8 axis-aligned blocks (4 corner blocks,
4 edge blocks).  All blocks share global per-axis breakpoints, so the mesh
is a tensor grid with a rectangular hole: conforming by construction.  Node
spacing shrinks geometrically toward the four inner-corner lines; quads are
split into right triangles whose diagonals respect both mirror symmetries.

Grading is expressed as a geometric ramp of ``bands`` intervals appended at
the corner end of each span, shrinking by ``grading_ratio`` per step from
the uniform interior spacing.  With ``enforce_min_angle`` (the default) the
band count is capped so the worst tensor-cell aspect keeps every triangle
angle at or above 15 degrees; passing ``enforce_min_angle=False`` allows
arbitrarily deep grading (needed to resolve tiny corner features), trading
away the angle bound while keeping the right-angle maximum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    BoundaryLabel,
    DomainSpec,
    classify_boundary_point,
    corner_frame,
)

MIN_ANGLE_DEG = 15.0
_MAX_ASPECT = 1.0 / math.tan(math.radians(MIN_ANGLE_DEG))  # = 2 + sqrt(3)


class MeshError(ValueError):
    """Invalid meshing parameters."""


class EmptyRingError(MeshError):
    """No mesh nodes fall inside the requested corner ring."""


@dataclass
class Mesh:
    """Triangulation of a rectangular annulus.

    Treated as immutable after construction; `refine` returns a new mesh.
    """

    domain: DomainSpec
    nodes: np.ndarray           # (N, 2)
    triangles: np.ndarray       # (T, 3) int, counterclockwise
    node_labels: dict           # node id -> BoundaryLabel (boundary nodes only)
    edge_labels: dict           # (i, j), i<j -> BoundaryLabel (boundary edges)
    mirror_x: np.ndarray        # (N,) node involution under x -> -x
    mirror_y: np.ndarray        # (N,)
    h_max: float
    grading: float
    corner_nodes: np.ndarray    # node ids of S_1..S_4
    level: int = 0              # uniform refinements applied
    _locator: object = field(default=None, repr=False, compare=False)
    _mass: object = field(default=None, repr=False, compare=False)

    @property
    def num_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def num_triangles(self) -> int:
        return self.triangles.shape[0]

    def triangle_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        return 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                      - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))

    def min_angle_deg(self) -> float:
        p = self.nodes[self.triangles]
        angles = []
        for k in range(3):
            a = p[:, (k + 1) % 3] - p[:, k]
            b = p[:, (k + 2) % 3] - p[:, k]
            na = np.hypot(a[:, 0], a[:, 1])
            nb = np.hypot(b[:, 0], b[:, 1])
            cosang = np.clip((a * b).sum(axis=1) / (na * nb), -1.0, 1.0)
            angles.append(np.degrees(np.arccos(cosang)))
        return float(np.min(angles))

    def facet_node_ids(self, label: BoundaryLabel, include_corners: bool = True) -> np.ndarray:
        """Node ids on a facet, sorted by the facet's running coordinate."""
        ids = [n for n, lab in self.node_labels.items() if lab == label]
        if include_corners and label.is_inner_facet:
            c0, c1 = self.domain.adjacent_corners(label.index)
            ids.extend(int(self.corner_nodes[c - 1]) for c in (c0, c1))
        ids = np.array(sorted(set(ids)), dtype=int)
        axis = 0 if label.index in (1, 3) else 1
        order = np.argsort(self.nodes[ids, axis], kind="stable")
        return ids[order]

    def corner_spacing(self, i: int) -> float:
        """Distance from corner S_i to its nearest mesh node."""
        c = self.nodes[self.corner_nodes[i - 1]]
        d = np.hypot(self.nodes[:, 0] - c[0], self.nodes[:, 1] - c[1])
        d[self.corner_nodes[i - 1]] = np.inf
        return float(d.min())


def _geometric_ramp(h_uniform: float, q: float, bands: int) -> list:
    """Interval sizes from the corner outward: h*q**-bands, ..., h*q**-1."""
    return [h_uniform * q ** (-(bands - j)) for j in range(bands)]


def _span_steps(length: float, n_uniform: int, q: float, bands: int) -> np.ndarray:
    """Divide [0, length] with a geometric ramp at the 0 end.

    Returns interval sizes ordered from the 0 end (corner side) outward.
    """
    if n_uniform < 1:
        raise MeshError("need at least one uniform interval per span")
    if bands == 0 or q == 1.0:
        total = n_uniform + bands
        return np.full(total, length / total)
    ramp_weight = (1.0 - q ** (-bands)) / (q - 1.0)
    h_u = length / (n_uniform + ramp_weight)
    return np.array(_geometric_ramp(h_u, q, bands) + [h_u] * n_uniform)


def bands_for_target(length: float, n_uniform: int, q: float, target_h: float) -> int:
    """Band count making the corner-adjacent spacing at most target_h."""
    if q <= 1.0:
        raise MeshError("grading_ratio must exceed 1 to target a corner spacing")
    bands = 1
    for _ in range(64):
        h_c = _span_steps(length, n_uniform, q, bands)[0]
        if h_c <= target_h:
            return bands
        bands += max(1, int(math.log(h_c / target_h) / math.log(q)))
    return bands


def _half_counts(domain: DomainSpec, n_base: int) -> tuple[int, int, int, int]:
    """Uniform interval counts (inner half-x, inner half-y, margin-x, margin-y),
    proportional to span lengths so spacings are near-isotropic."""
    X, Y = domain.half_width, domain.half_height
    unit = min(X, Y)
    lam = domain.lambda0
    n_hx = max(2, round(n_base * X / unit))
    n_hy = max(2, round(n_base * Y / unit))
    n_mx = max(2, round(n_base * (lam - 1.0) * X / unit))
    n_my = max(2, round(n_base * (lam - 1.0) * Y / unit))
    return n_hx, n_hy, n_mx, n_my


def expected_node_count(domain: DomainSpec, n_base: int, grading_ratio: float = 1.0,
                        bands: int = 0, levels: int = 0) -> int:
    """Combinatorial node count of the 8-block tensor layout."""
    n_hx, n_hy, n_mx, n_my = _half_counts(domain, n_base)
    scale = 2 ** levels
    nx_half = (n_hx + bands) * scale
    ny_half = (n_hy + bands) * scale
    nx_marg = (n_mx + bands) * scale
    ny_marg = (n_my + bands) * scale
    nx_tot = 2 * (nx_half + nx_marg)
    ny_tot = 2 * (ny_half + ny_marg)
    hole_x = 2 * nx_half
    hole_y = 2 * ny_half
    return (nx_tot + 1) * (ny_tot + 1) - (hole_x - 1) * (hole_y - 1)


def _axis_breaks(half_inner: float, outer: float, n_uniform_inner: int,
                 n_uniform_margin: int, q: float, bands: int) -> tuple[np.ndarray, int]:
    """Symmetric breakpoints on [-outer, outer]; returns (breaks, index of +inner)."""
    inner_steps = _span_steps(half_inner, n_uniform_inner, q, bands)
    margin_steps = _span_steps(outer - half_inner, n_uniform_margin, q, bands)
    # inner half [0, half_inner]: graded end at half_inner -> reverse the ramp
    pos = [0.0]
    acc = 0.0
    for h in inner_steps[::-1]:
        acc += h
        pos.append(acc)
    pos[-1] = half_inner  # exact junction
    acc = half_inner
    for h in margin_steps:
        acc += h
        pos.append(acc)
    pos[-1] = outer
    pos = np.array(pos)
    breaks = np.concatenate([-pos[:0:-1], pos])
    idx_inner = len(pos) - 1 + len(inner_steps)  # position of +half_inner
    return breaks, idx_inner


def build_mesh(domain: DomainSpec, n_base: int, grading_ratio: float = 1.2,
               levels: int = 0, bands: int = 8, enforce_min_angle: bool = True,
               target_corner_h: float = None) -> Mesh:
    """Triangulate the annulus.

    Parameters
    ----------
    domain : DomainSpec
    n_base : int
        Uniform intervals per inner half-span of the short axis (>= 2); other
        spans scale with their lengths.
    grading_ratio : float
        Geometric shrink factor per band toward each inner corner (>= 1).
    levels : int
        Uniform refinements applied after construction (>= 0).
    bands : int
        Requested geometric bands per corner; capped when ``enforce_min_angle``.
    enforce_min_angle : bool
        Cap the grading depth so every triangle angle stays >= 15 degrees.
    target_corner_h : float, optional
        Overrides ``bands``: grade until the corner-adjacent spacing is at
        most this value (implies ``enforce_min_angle=False`` when deeper than
        the angle cap allows).
    """
    if n_base < 2:
        raise MeshError(f"n_base must be >= 2, got {n_base}")
    if grading_ratio < 1.0:
        raise MeshError(f"grading_ratio must be >= 1, got {grading_ratio}")
    if levels < 0 or bands < 0:
        raise MeshError("levels and bands must be nonnegative")

    q = float(grading_ratio)
    n_hx, n_hy, n_mx, n_my = _half_counts(domain, n_base)
    X, Y = domain.half_width, domain.half_height
    XX, YY = domain.outer_half_width, domain.outer_half_height

    if q == 1.0:
        bands_eff = 0
    elif target_corner_h is not None:
        span = min(X, Y)
        bands_eff = bands_for_target(span, min(n_hx, n_hy), q, target_corner_h)
        enforce_min_angle = False
    else:
        bands_eff = bands
        if enforce_min_angle:
            # worst aspect = uniform-spacing anisotropy times the ramp depth
            h_us = [X / n_hx, Y / n_hy, (XX - X) / n_mx, (YY - Y) / n_my]
            aniso = max(h_us) / min(h_us)
            cap = int(math.floor(math.log(_MAX_ASPECT / aniso) / math.log(q))) if aniso < _MAX_ASPECT else 0
            bands_eff = min(bands_eff, max(cap, 0))

    xb, ix_in = _axis_breaks(X, XX, n_hx, n_mx, q, bands_eff)
    yb, iy_in = _axis_breaks(Y, YY, n_hy, n_my, q, bands_eff)
    mesh = _mesh_from_breaks(domain, xb, yb, ix_in, iy_in, q)
    for _ in range(levels):
        mesh = refine(mesh)
    return mesh


def _mesh_from_breaks(domain: DomainSpec, xb: np.ndarray, yb: np.ndarray,
                      ix_in: int, iy_in: int, q: float) -> Mesh:
    nx, ny = len(xb) - 1, len(yb) - 1
    ix_lo, ix_hi = nx - ix_in, ix_in   # indices of -X and +X (symmetric)
    iy_lo, iy_hi = ny - iy_in, iy_in

    # node admission: drop grid points strictly inside the hole
    IX, IY = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), indexing="ij")
    in_hole = (IX > ix_lo) & (IX < ix_hi) & (IY > iy_lo) & (IY < iy_hi)
    keep = ~in_hole
    node_id = -np.ones((nx + 1, ny + 1), dtype=np.int64)
    node_id[keep] = np.arange(keep.sum())
    nodes = np.column_stack([xb[IX[keep]], yb[IY[keep]]])

    # cells: drop those inside the hole
    CX, CY = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    cell_in_hole = (CX >= ix_lo) & (CX < ix_hi) & (CY >= iy_lo) & (CY < iy_hi)
    cx, cy = CX[~cell_in_hole], CY[~cell_in_hole]

    v00 = node_id[cx, cy]
    v10 = node_id[cx + 1, cy]
    v01 = node_id[cx, cy + 1]
    v11 = node_id[cx + 1, cy + 1]
    # diagonal orientation by quadrant of the cell center: mirror-symmetric
    xc = 0.5 * (xb[cx] + xb[cx + 1])
    yc = 0.5 * (yb[cy] + yb[cy + 1])
    use_pm = (np.sign(xc) * np.sign(yc)) > 0
    tris = np.empty((2 * len(cx), 3), dtype=np.int64)
    # pm diagonal: (v01 -- v10)
    tris[0::2][use_pm] = np.column_stack([v00[use_pm], v10[use_pm], v01[use_pm]])
    tris[1::2][use_pm] = np.column_stack([v10[use_pm], v11[use_pm], v01[use_pm]])
    # pp diagonal: (v00 -- v11)
    pp = ~use_pm
    tris[0::2][pp] = np.column_stack([v00[pp], v10[pp], v11[pp]])
    tris[1::2][pp] = np.column_stack([v00[pp], v11[pp], v01[pp]])

    # mirror involutions from index arithmetic (breaks are exactly symmetric)
    mirror_x = node_id[nx - IX[keep], IY[keep]]
    mirror_y = node_id[IX[keep], ny - IY[keep]]

    corner_ids = np.array([
        node_id[ix_hi, iy_hi],  # S_1 top-right
        node_id[ix_lo, iy_hi],  # S_2 top-left
        node_id[ix_lo, iy_lo],  # S_3 bottom-left
        node_id[ix_hi, iy_lo],  # S_4 bottom-right
    ])

    node_labels, edge_labels = _boundary_tags(domain, nodes, tris)
    h_max = _max_edge_length(nodes, tris)
    return Mesh(domain=domain, nodes=nodes, triangles=tris,
                node_labels=node_labels, edge_labels=edge_labels,
                mirror_x=mirror_x, mirror_y=mirror_y, h_max=h_max,
                grading=q, corner_nodes=corner_ids, level=0)


def _boundary_edges(triangles: np.ndarray) -> np.ndarray:
    """Edges belonging to exactly one triangle, as sorted (i, j) pairs."""
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    e.sort(axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    return uniq[counts == 1]

def _boundary_tags(domain: DomainSpec, nodes: np.ndarray, triangles: np.ndarray):
    tol = 1e-9 * max(domain.outer_half_width, domain.outer_half_height)
    bedges = _boundary_edges(triangles)
    edge_labels = {}
    node_labels = {}
    for i, j in bedges:
        mid = 0.5 * (nodes[i] + nodes[j])
        edge_labels[(int(i), int(j))] = classify_boundary_point(domain, mid, tol)
    for n in sorted({int(k) for ij in bedges for k in ij}):
        node_labels[n] = classify_boundary_point(domain, nodes[n], tol)
    return node_labels, edge_labels


def _max_edge_length(nodes: np.ndarray, triangles: np.ndarray) -> float:
    p = nodes[triangles]
    lengths = [np.hypot(*(p[:, (k + 1) % 3] - p[:, k]).T) for k in range(3)]
    return float(np.max(lengths))


def refine(mesh: Mesh) -> Mesh:
    """Split every triangle into 4 via edge midpoints; invariants preserved."""
    tris = mesh.triangles
    e = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    e.sort(axis=1)
    edges, inverse = np.unique(e, axis=0, return_inverse=True)
    mid_ids = mesh.num_nodes + np.arange(len(edges))
    midpoints = 0.5 * (mesh.nodes[edges[:, 0]] + mesh.nodes[edges[:, 1]])
    nodes = np.vstack([mesh.nodes, midpoints])

    nt = len(tris)
    m01 = mid_ids[inverse[:nt]]
    m12 = mid_ids[inverse[nt:2 * nt]]
    m20 = mid_ids[inverse[2 * nt:]]
    v0, v1, v2 = tris[:, 0], tris[:, 1], tris[:, 2]
    new_tris = np.empty((4 * nt, 3), dtype=tris.dtype)
    new_tris[0::4] = np.column_stack([v0, m01, m20])
    new_tris[1::4] = np.column_stack([v1, m12, m01])
    new_tris[2::4] = np.column_stack([v2, m20, m12])
    new_tris[3::4] = np.column_stack([m01, m12, m20])

    # mirror maps: old part by composition; midpoints matched by coordinates
    coord_key = {(float(x), float(y)): i for i, (x, y) in enumerate(midpoints)}
    mid_mx = np.array([coord_key[(float(-x + 0.0), float(y))] for x, y in midpoints])
    mid_my = np.array([coord_key[(float(x), float(-y + 0.0))] for x, y in midpoints])
    mirror_x = np.concatenate([mesh.mirror_x, mesh.num_nodes + mid_mx])
    mirror_y = np.concatenate([mesh.mirror_y, mesh.num_nodes + mid_my])

    node_labels = dict(mesh.node_labels)
    edge_labels = {}
    for (i, j), lab in mesh.edge_labels.items():
        pos = _edge_index(edges, i, j)
        m = int(mid_ids[pos])
        node_labels[m] = lab
        edge_labels[(min(i, m), max(i, m))] = lab
        edge_labels[(min(j, m), max(j, m))] = lab

    return Mesh(domain=mesh.domain, nodes=nodes, triangles=new_tris,
                node_labels=node_labels, edge_labels=edge_labels,
                mirror_x=mirror_x, mirror_y=mirror_y, h_max=0.5 * mesh.h_max,
                grading=mesh.grading, corner_nodes=mesh.corner_nodes.copy(),
                level=mesh.level + 1)


def _edge_index(sorted_edges: np.ndarray, i: int, j: int) -> int:
    lo, hi = (i, j) if i < j else (j, i)
    pos = np.searchsorted(sorted_edges[:, 0], lo)
    while sorted_edges[pos, 0] == lo:
        if sorted_edges[pos, 1] == hi:
            return int(pos)
        pos += 1
    raise KeyError((i, j))


def corner_ring_nodes(mesh: Mesh, i: int, rho_min: float, rho_max: float) -> np.ndarray:
    """Node ids with distance to corner S_i in [rho_min, rho_max]."""
    d = mesh.domain
    wedge_radius = min(d.half_width, d.half_height, d.gap_width)
    if not (0 < rho_min < rho_max):
        raise MeshError(f"need 0 < rho_min < rho_max, got [{rho_min}, {rho_max}]")
    if rho_max >= wedge_radius:
        raise MeshError(f"rho_max={rho_max} exceeds the corner wedge radius {wedge_radius}")
    fr = corner_frame(d, i)
    rho, _ = fr.polar(mesh.nodes)
    ids = np.nonzero((rho >= rho_min) & (rho <= rho_max))[0]
    if len(ids) == 0:
        raise EmptyRingError(f"no nodes with rho in [{rho_min}, {rho_max}] at corner {i}")
    return ids


def dump_text(mesh: Mesh, path) -> None:
    """Plain-text mesh listing: one record per line."""
    with open(path, "w") as f:
        f.write(f"nodes {mesh.num_nodes}\n")
        for i, (x, y) in enumerate(mesh.nodes):
            f.write(f"n {i} {x!r} {y!r}\n")
        f.write(f"triangles {mesh.num_triangles}\n")
        for i, (a, b, c) in enumerate(mesh.triangles):
            f.write(f"t {i} {a} {b} {c}\n")
        f.write(f"tags {len(mesh.node_labels)}\n")
        for n in sorted(mesh.node_labels):
            lab = mesh.node_labels[n]
            f.write(f"b {n} {lab.side.value} {lab.index}\n")


def dump_svg(mesh: Mesh, path) -> None:
    from .svgplot import mesh_wireframe_svg
    mesh_wireframe_svg(mesh, path)
