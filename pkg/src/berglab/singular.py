"""Corner wedge modes, the dual singular solution, and coefficient extraction.

At each inner corner the annulus forms a 3*pi/2 wedge with zero-flux sides,
so harmonic fields expand there in the Neumann modes rho**(2k/3)*cos(2k*theta/3).
The k=1 primal mode is H^1 but not H^2; its amplitude c in a solved field is
the object of interest: c = 0 characterizes C^1 regularity of the continuum
solution and hence facet monotonicity.

The dual singular solution s* is built by symmetric singular-function
subtraction: a cutoff copy of the decaying mode rho**(-2/3)*cos(2*theta/3)
at every corner plus an H^1 finite element correction, normalized to unit
L^2 norm with the sign pinned negative at the midpoint of the top inner
facet.  Facet integrals of s* split off the singular part and integrate it
in closed form; the remainder uses the exact trace of the P1 correction.

Two independent extraction routes for c:

* dual pairing -- Green's identity on the annulus minus corner balls gives
  c = (sum_facets u_n * int_facet s*) / (4*pi*kappa), with kappa the dual-mode
  amplitude of the normalized s*;
* local fitting -- least squares of ring samples of the solved field against
  {1, dx, dy, rho**(2/3)cos(2theta/3), rho**(4/3)cos(4theta/3)}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import CornerFrame, DomainSpec, THREE_HALF_PI, corner_frame, inner_facet
from .fem import FemField, assemble, eval_field, mass_matrix, solve, trace_integral
from .meshgen import Mesh

TWO_THIRDS = 2.0 / 3.0

# 32-point Gauss-Legendre for the smooth 1D cutoff integrals
_GL_X, _GL_W = np.polynomial.legendre.leggauss(32)

# degree-5 triangle quadrature (7 points, barycentric, weights sum to 1)
_TRI7_BARY = np.array([
    [1 / 3, 1 / 3, 1 / 3],
    [0.0597158717897698, 0.4701420641051151, 0.4701420641051151],
    [0.4701420641051151, 0.0597158717897698, 0.4701420641051151],
    [0.4701420641051151, 0.4701420641051151, 0.0597158717897698],
    [0.7974269853530873, 0.1012865073234563, 0.1012865073234563],
    [0.1012865073234563, 0.7974269853530873, 0.1012865073234563],
    [0.1012865073234563, 0.1012865073234563, 0.7974269853530873],
])
_TRI7_W = np.array([0.225,
                    0.1323941527885062, 0.1323941527885062, 0.1323941527885062,
                    0.1259391805448271, 0.1259391805448271, 0.1259391805448271])


class SingularError(RuntimeError):
    pass


class SingularPointError(SingularError):
    """Dual mode evaluated at its corner."""


class IllConditionedFitError(SingularError):
    pass


class DegenerateDualError(SingularError):
    pass


# ---------------------------------------------------------------------------
# wedge modes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CornerMode:
    """Neumann wedge mode at a corner: rho**exponent * cos(2k*theta/3).

    ``k >= 1`` with ``dual=False`` gives the growing modes (exponent 2k/3);
    ``dual=True`` fixes k=1 with exponent -2/3.
    """

    corner_index: int
    k: int = 1
    dual: bool = False

    @property
    def exponent(self) -> float:
        return -TWO_THIRDS if self.dual else TWO_THIRDS * self.k

    def angular(self, theta):
        return np.cos(TWO_THIRDS * self.k * np.asarray(theta))


def eval_mode(mode: CornerMode, frame: CornerFrame, p):
    """Evaluate a wedge mode at physical points (scalar or (n, 2))."""
    rho, theta = frame.polar(p)
    rho_arr = np.atleast_1d(rho)
    if mode.dual and np.any(rho_arr == 0.0):
        raise SingularPointError("dual mode is singular at the corner")
    val = rho_arr ** mode.exponent * mode.angular(np.atleast_1d(theta))
    return float(val[0]) if np.isscalar(rho) or np.ndim(p) == 1 else val


# ---------------------------------------------------------------------------
# cutoff
# ---------------------------------------------------------------------------

def cutoff(rho, delta_c: float):
    """C^2 radial bump: 1 on [0, delta_c/2], 0 on [delta_c, inf),
    quintic-smoothstep transition."""
    if delta_c <= 0:
        raise SingularError("cutoff radius must be positive")
    rho = np.asarray(rho, dtype=float)
    t = np.clip((rho - 0.5 * delta_c) / (0.5 * delta_c), 0.0, 1.0)
    s = t**3 * (10.0 - 15.0 * t + 6.0 * t**2)
    out = 1.0 - s
    return float(out) if out.ndim == 0 else out


def _cutoff_derivs(rho: np.ndarray, delta_c: float):
    """(eta', eta'') on the transition annulus (zero outside it)."""
    half = 0.5 * delta_c
    t = (rho - half) / half
    inside = (t > 0.0) & (t < 1.0)
    sp = np.zeros_like(rho)
    spp = np.zeros_like(rho)
    ti = t[inside]
    sp[inside] = (30.0 * ti**2 - 60.0 * ti**3 + 30.0 * ti**4) / half
    spp[inside] = (60.0 * ti - 180.0 * ti**2 + 120.0 * ti**3) / half**2
    return -sp, -spp


def default_cutoff_radius(domain: DomainSpec) -> float:
    return 0.4 * min(domain.half_width, domain.half_height,
                     (domain.lambda0 - 1.0) * min(domain.r1, domain.r2))


# ---------------------------------------------------------------------------
# dual singular solution
# ---------------------------------------------------------------------------

@dataclass
class DualSingularSolution:
    """Normalized dual singular solution s* = kappa-scaled modes + correction.

    ``s*(p) = scale * (sum_i eta(rho_i) rho_i**(-2/3) cos(2 theta_i / 3) + w(p))``
    with ``scale`` fixing unit L^2 norm and the sign convention
    ``s* < 0`` at the midpoint of the top inner facet.  ``kappa = scale`` is
    the dual-mode amplitude at every corner (equal by the double symmetry).
    """

    domain: DomainSpec
    mesh: Mesh
    cutoff_radius: float
    correction: FemField
    normalization: float   # L^2 norm of the pre-scaled composite
    scale: float           # sign / normalization

    @property
    def kappa(self) -> float:
        return self.scale

    def ansatz(self, points) -> np.ndarray:
        """Un-normalized singular part at (n, 2) points."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.zeros(len(pts))
        for i in (1, 2, 3, 4):
            fr = corner_frame(self.domain, i)
            rho, theta = fr.polar(pts)
            m = (rho < self.cutoff_radius) & (rho > 0.0)
            out[m] += (cutoff(rho[m], self.cutoff_radius)
                       * rho[m] ** (-TWO_THIRDS)
                       * np.cos(TWO_THIRDS * theta[m]))
        return out

    def eval(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        w = np.array([eval_field(self.correction, p) for p in pts])
        vals = self.scale * (self.ansatz(pts) + w)
        return float(vals[0]) if np.ndim(points) == 1 else vals

    def nodal_values(self) -> np.ndarray:
        """s* at mesh nodes; NaN at the four corner nodes."""
        vals = self.scale * (self.ansatz(self.mesh.nodes) + self.correction.values)
        vals[self.mesh.corner_nodes] = np.nan
        return vals

    def l2_norm_composite(self) -> float:
        """Recompute ||s*||_L2 from the composite representation."""
        w = self.correction.values
        norm_sq = (_ansatz_l2_squared(self.cutoff_radius)
                   + 2.0 * _inner_ansatz_field(self.domain, self.cutoff_radius, self.mesh, w)
                   + float(w @ (mass_matrix(self.mesh) @ w)))
        return abs(self.scale) * math.sqrt(norm_sq)


def _ansatz_source(domain: DomainSpec, delta_c: float):
    """Laplacian of the singular ansatz (supported on transition annuli)."""
    frames = [corner_frame(domain, i) for i in (1, 2, 3, 4)]

    def source(pts):
        pts = np.atleast_2d(pts)
        out = np.zeros(len(pts))
        for fr in frames:
            rho, theta = fr.polar(pts)
            m = (rho > 0.5 * delta_c) & (rho < delta_c)
            if not m.any():
                continue
            r = rho[m]
            etap, etapp = _cutoff_derivs(r, delta_c)
            radial = (-2.0 * TWO_THIRDS * etap * r ** (-5.0 / 3.0)
                      + (etapp + etap / r) * r ** (-TWO_THIRDS))
            out[m] += radial * np.cos(TWO_THIRDS * theta[m])
        return out

    return source


def _cutoff_moment(delta_c: float, power: float, squared: bool) -> float:
    """Closed-form + Gauss integral of eta(rho)^(1 or 2) * rho**power on [0, delta_c].

    The [0, delta_c/2] part (eta = 1) integrates analytically; the transition
    is smooth and handled by 32-point Gauss-Legendre.
    """
    half = 0.5 * delta_c
    exact = half ** (power + 1.0) / (power + 1.0)
    x = 0.5 * (half + delta_c) + 0.5 * (delta_c - half) * _GL_X
    w = 0.5 * (delta_c - half) * _GL_W
    eta = cutoff(x, delta_c)
    if squared:
        eta = eta * eta
    return float(exact + (w * eta * x**power).sum())


def singular_trace_integral(delta_c: float) -> float:
    """int_0^delta eta(rho) rho**(-2/3) drho (one corner, angular factor +1)."""
    return _cutoff_moment(delta_c, -TWO_THIRDS, squared=False)


def _ansatz_l2_squared(delta_c: float) -> float:
    """Exact L^2 norm squared of the four-corner singular ansatz."""
    # per corner: int eta^2 rho^{-4/3} rho drho * int_0^{3pi/2} cos^2(2theta/3)
    angular = 0.75 * math.pi
    return 4.0 * angular * _cutoff_moment(delta_c, 1.0 - 4.0 / 3.0, squared=True)


def _inner_ansatz_field(dual_domain, delta_c, mesh, field_values) -> float:
    """Quadrature of ansatz * w over the cutoff-supported triangles."""
    frames = [corner_frame(dual_domain, i) for i in (1, 2, 3, 4)]
    corners = np.array([dual_domain.corner(i) for i in (1, 2, 3, 4)])
    tris = mesh.triangles
    p = mesh.nodes[tris]
    centroid = p.mean(axis=1)
    dmin = np.min([np.hypot(centroid[:, 0] - c[0], centroid[:, 1] - c[1])
                   for c in corners], axis=0)
    radius = np.max([np.hypot(*(p[:, k].T - centroid.T)) for k in range(3)], axis=0)
    sel = dmin <= delta_c + radius
    if not sel.any():
        return 0.0
    psel = p[sel]
    vsel = field_values[tris[sel]]
    areas = 0.5 * ((psel[:, 1, 0] - psel[:, 0, 0]) * (psel[:, 2, 1] - psel[:, 0, 1])
                   - (psel[:, 2, 0] - psel[:, 0, 0]) * (psel[:, 1, 1] - psel[:, 0, 1]))
    total = 0.0
    for bary, wq in zip(_TRI7_BARY, _TRI7_W):
        pts = np.einsum("k,tkd->td", bary, psel)
        wvals = vsel @ bary
        ansatz = np.zeros(len(pts))
        for fr in frames:
            rho, theta = fr.polar(pts)
            m = (rho < delta_c) & (rho > 0.0)
            ansatz[m] += (cutoff(rho[m], delta_c) * rho[m] ** (-TWO_THIRDS)
                          * np.cos(TWO_THIRDS * theta[m]))
        total += float((wq * areas * ansatz * wvals).sum())
    return total


def build_dual_solution(domain: DomainSpec, mesh: Mesh, cutoff_radius: float = None,
                        tol: float = 1e-10, method: str = "cg") -> DualSingularSolution:
    """Construct the normalized dual singular solution on a mesh.

    The correction w solves -lap(w) = lap(ansatz) with zero flux on the inner
    boundary and zero trace on the outer one, making the composite harmonic;
    the composite is then L^2-normalized and sign-fixed.
    """
    delta_c = default_cutoff_radius(domain) if cutoff_radius is None else float(cutoff_radius)
    limit = min(domain.half_width, domain.half_height, domain.gap_width)
    if not 0 < delta_c < limit:
        raise SingularError(f"cutoff radius {delta_c} must lie in (0, {limit})")

    system = assemble(mesh, neumann=(0.0, 0.0), volume_source=_ansatz_source(domain, delta_c))
    w = solve(system, tol_rel=tol, method=method)

    norm_sq = (_ansatz_l2_squared(delta_c)
               + 2.0 * _inner_ansatz_field(domain, delta_c, mesh, w.values)
               + float(w.values @ (mass_matrix(mesh) @ w.values)))
    if norm_sq <= 0:
        raise DegenerateDualError("nonpositive norm in dual construction")
    norm = math.sqrt(norm_sq)

    mid = domain.facet_midpoint(inner_facet(1))
    mid_val = eval_field(w, mid)  # ansatz vanishes at the facet midpoint
    if mid_val == 0.0:
        raise DegenerateDualError("sign convention undecidable: s* vanishes at the facet midpoint")
    sign = -1.0 if mid_val > 0 else 1.0
    return DualSingularSolution(domain=domain, mesh=mesh, cutoff_radius=delta_c,
                                correction=w, normalization=norm, scale=sign / norm)


def facet_integral_of_dual(dual: DualSingularSolution, facet_index: int) -> float:
    """Integral of s* along an inner facet, singularity split off analytically.

    Near each adjacent corner the singular part contributes
    ``+-kappa * int eta rho**(-2/3)`` with the angular factor +1 on vertical
    facets (theta = 0) and -1 on horizontal ones (theta = 3*pi/2); the P1
    correction integrates exactly edge by edge.
    """
    sing = singular_trace_integral(dual.cutoff_radius)
    angular = 1.0 if facet_index in (2, 4) else -1.0
    # both adjacent corners contribute the same sign by symmetry of the frames
    total_sing = 2.0 * angular * sing
    w_part = trace_integral(dual.correction, inner_facet(facet_index))
    return dual.scale * (total_sing + w_part)


def extract_coefficient_dual(dual: DualSingularSolution, a: float, b: float) -> float:
    """Singular coefficient of the solved field with data (a, b) by dual pairing.

    Green's identity on the annulus minus vanishing corner balls gives
    ``sum_facets int u_n s* = 4*pi*kappa*c`` for the normalized s*; the two
    horizontal facets carry ``a`` and the vertical ones ``b``.
    """
    pairing = 0.0
    for i in (1, 2, 3, 4):
        g = a if i in (1, 3) else b
        pairing += g * facet_integral_of_dual(dual, i)
    return pairing / (4.0 * math.pi * dual.kappa)


# ---------------------------------------------------------------------------
# coefficient by local fitting
# ---------------------------------------------------------------------------

@dataclass
class SingularCoefficientReport:
    c_dual: float
    c_fit: float
    fit_residual: float
    mesh_level: int


def coefficient_report(field: FemField, dual: DualSingularSolution,
                       a: float, b: float) -> SingularCoefficientReport:
    """Both extraction routes for one solved field, averaged over corners."""
    c_dual = extract_coefficient_dual(dual, a, b)
    fits, resids = [], []
    for i in (1, 2, 3, 4):
        c, r = extract_coefficient_fit(field, i)
        fits.append(c)
        resids.append(r)
    return SingularCoefficientReport(c_dual=c_dual, c_fit=float(np.mean(fits)),
                                     fit_residual=float(np.max(resids)),
                                     mesh_level=field.mesh.level)


def extract_coefficient_fit(field: FemField, corner_index: int,
                            rho_min: float = None, rho_max: float = None,
                            min_nodes: int = 30):
    """Least-squares amplitude of the 2/3 wedge mode from ring samples.

    Returns ``(c_fit, relative_residual)``.  The basis is
    {1, dx, dy, rho**(2/3)cos(2theta/3), rho**(4/3)cos(4theta/3)}: the linear
    part absorbs the regular gradient, the 4/3 mode the next regular term.
    """
    mesh = field.mesh
    domain = mesh.domain
    if rho_max is None:
        rho_max = 0.5 * default_cutoff_radius(domain)
    if rho_min is None:
        rho_min = 4.0 * mesh.corner_spacing(corner_index)
    if not 0 < rho_min < rho_max:
        raise SingularError(f"bad fit ring [{rho_min}, {rho_max}]")
    fr = corner_frame(domain, corner_index)
    rho, theta = fr.polar(mesh.nodes)
    sel = (rho >= rho_min) & (rho <= rho_max) & (theta <= THREE_HALF_PI + 1e-12)
    ids = np.nonzero(sel)[0]
    if len(ids) < min_nodes:
        raise SingularError(f"fit ring holds {len(ids)} nodes, need >= {min_nodes}")

    r, t = rho[ids], theta[ids]
    dx = mesh.nodes[ids, 0] - fr.origin[0]
    dy = mesh.nodes[ids, 1] - fr.origin[1]
    basis = np.column_stack([
        np.ones(len(ids)), dx, dy,
        r ** TWO_THIRDS * np.cos(TWO_THIRDS * t),
        r ** (2 * TWO_THIRDS) * np.cos(2 * TWO_THIRDS * t),
    ])
    col_scale = np.abs(basis).max(axis=0)
    col_scale[col_scale == 0] = 1.0
    rhs = field.values[ids]
    coef, _, rank, sv = np.linalg.lstsq(basis / col_scale, rhs, rcond=None)
    if rank < basis.shape[1] or sv[0] / sv[-1] > 1e10:
        raise IllConditionedFitError(f"normal equations condition ~ {sv[0] / sv[-1]:.2e}")
    resid = np.linalg.norm((basis / col_scale) @ coef - rhs)
    rhs_norm = np.linalg.norm(rhs)
    rel_resid = float(resid / rhs_norm) if rhs_norm > 0 else 0.0
    c_fit = float(coef[3] / col_scale[3])
    return c_fit, rel_resid


# ---------------------------------------------------------------------------
# zero level set
# ---------------------------------------------------------------------------

@dataclass
class LevelSetComponent:
    points: np.ndarray          # (m, 2) polyline
    closed: bool
    end_corner_dist: tuple      # min distance of (first, last) point to inner corners
    end_outer_dist: tuple       # distance of (first, last) point to the outer rectangle


@dataclass
class LevelSetResult:
    components: list
    classification: str         # 'A1' | 'A2' | 'A3'


def _outer_rect_distance(domain: DomainSpec, pts: np.ndarray) -> np.ndarray:
    dx = domain.outer_half_width - np.abs(pts[:, 0])
    dy = domain.outer_half_height - np.abs(pts[:, 1])
    return np.minimum(dx, dy)


def level_set(dual: DualSingularSolution) -> LevelSetResult:
    """Zero contour of s* inside the open annulus, plus the sign class.

    Marching triangles on the nodal composite, excluding triangles that touch
    a corner node (the value is unbounded there) or lie on the outer boundary
    (where s* vanishes identically); components are chained deterministically.
    The class comes from the sign pattern of s* on an offset rectangle just
    inside the outer boundary: positive everywhere A1, negative everywhere A2,
    mixed A3.
    """
    mesh = dual.mesh
    vals = dual.nodal_values()
    is_outer = np.zeros(mesh.num_nodes, dtype=bool)
    for n, lab in mesh.node_labels.items():
        if lab.side.value.startswith("outer"):
            is_outer[n] = True
    skip_nodes = is_outer.copy()
    skip_nodes[mesh.corner_nodes] = True

    tris = mesh.triangles
    touches = skip_nodes[tris].any(axis=1)
    segs = []  # (edge_key_a, point_a, edge_key_b, point_b)
    for t in np.nonzero(~touches)[0]:
        tri = tris[t]
        v = vals[tri]
        pos = v > 0.0
        if pos.all() or (~pos).all():
            continue
        crossings = []
        for k in range(3):
            i, j = tri[k], tri[(k + 1) % 3]
            vi, vj = vals[i], vals[j]
            if (vi > 0.0) != (vj > 0.0):
                s = vi / (vi - vj)
                pt = mesh.nodes[i] + s * (mesh.nodes[j] - mesh.nodes[i])
                crossings.append(((min(i, j), max(i, j)), pt))
        if len(crossings) == 2:
            segs.append((crossings[0][0], crossings[0][1],
                         crossings[1][0], crossings[1][1]))

    components = _chain_segments(segs)
    comps = []
    corners = np.array([dual.domain.corner(i) for i in (1, 2, 3, 4)])
    for pts, closed in components:
        ends = pts[[0, -1]]
        cdist = np.min([np.hypot(ends[:, 0] - c[0], ends[:, 1] - c[1]) for c in corners], axis=0)
        odist = _outer_rect_distance(dual.domain, ends)
        comps.append(LevelSetComponent(points=pts, closed=closed,
                                       end_corner_dist=(float(cdist[0]), float(cdist[1])),
                                       end_outer_dist=(float(odist[0]), float(odist[1]))))
    comps.sort(key=lambda c: (round(c.points[0, 0], 9), round(c.points[0, 1], 9)))
    return LevelSetResult(components=comps, classification=_classify(dual))


def _chain_segments(segs):
    """Join marching-triangle segments sharing edge crossings into polylines."""
    by_edge = {}
    for idx, (ea, _, eb, _) in enumerate(segs):
        by_edge.setdefault(ea, []).append(idx)
        by_edge.setdefault(eb, []).append(idx)
    visited = np.zeros(len(segs), dtype=bool)
    out = []
    # open chains start at edges used once; iterate deterministically
    order = sorted(by_edge.items(), key=lambda kv: kv[0])
    for edge, users in order:
        if len(users) != 1 or visited[users[0]]:
            continue
        out.append(_walk(segs, by_edge, visited, users[0], edge))
    for idx in range(len(segs)):  # remaining loops
        if not visited[idx]:
            out.append(_walk(segs, by_edge, visited, idx, segs[idx][0], closed=True))
    return out


def _walk(segs, by_edge, visited, start_idx, start_edge, closed=False):
    idx, edge = start_idx, start_edge
    ea, pa, eb, pb = segs[idx]
    pts = [pa, pb] if edge == ea else [pb, pa]
    edge = eb if edge == ea else ea
    visited[idx] = True
    while True:
        nxt = [u for u in by_edge[edge] if not visited[u]]
        if not nxt:
            break
        idx = nxt[0]
        visited[idx] = True
        ea, pa, eb, pb = segs[idx]
        if edge == ea:
            pts.append(pb)
            edge = eb
        else:
            pts.append(pa)
            edge = ea
    return np.array(pts), closed


def _classify(dual: DualSingularSolution, n_per_side: int = 160) -> str:
    d = dual.domain
    inset = min(0.1 * (d.lambda0 - 1.0) * min(d.r1, d.r2), 0.5 * (d.lambda0 - 1.0))
    offset = d.lambda0 - inset
    w, h = offset * d.half_width, offset * d.half_height
    ts = np.linspace(-1.0, 1.0, n_per_side)
    pts = np.concatenate([
        np.column_stack([ts * w, np.full_like(ts, h)]),
        np.column_stack([ts * w, np.full_like(ts, -h)]),
        np.column_stack([np.full_like(ts, w), ts * h]),
        np.column_stack([np.full_like(ts, -w), ts * h]),
    ])
    vals = dual.eval(pts)
    tol = 1e-12 * np.abs(vals).max()
    if (vals > tol).all():
        return "A1"
    if (vals < -tol).all():
        return "A2"
    return "A3"
