"""Linear (P1) finite elements for the mixed Neumann/Dirichlet Laplace problem.

Solves -lap(u) = f with piecewise-constant flux data on the inner boundary
and homogeneous Dirichlet data on the outer boundary (or, for manufactured
solutions, prescribed Dirichlet values on the whole boundary).  Stiffness
entries use the exact P1 formulas; Neumann loads use exact edge quadrature;
volume sources use the 3-point (edge midpoint) triangle rule, which is exact
to degree 2.  Dirichlet rows are eliminated, keeping the system symmetric
positive definite, and solved by conjugate gradients with diagonal
preconditioning in a fixed iteration order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import BoundarySide, inner_facet, neumann_datum
from .meshgen import Mesh


class FemError(RuntimeError):
    pass


class SolverError(FemError):
    """Iteration limit reached; carries the final relative residual."""

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


class PointOutsideMeshError(FemError):
    pass


# ---------------------------------------------------------------------------
# element geometry
# ---------------------------------------------------------------------------

def _element_geometry(mesh: Mesh):
    """Per-triangle areas and P1 shape-gradient coefficients.

    With vertices p0, p1, p2 (ccw), grad(phi_i) = (b_i, c_i) / (2A) where
    b_i = y_j - y_k and c_i = x_k - x_j (cyclic).
    """
    p = mesh.nodes[mesh.triangles]
    x, y = p[..., 0], p[..., 1]
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    area = 0.5 * (b[:, 0] * c[:, 1] - b[:, 1] * c[:, 0])
    return area, b, c


def stiffness_matrix(mesh: Mesh) -> sp.csr_matrix:
    """Full (unconstrained) P1 stiffness matrix."""
    area, b, c = _element_geometry(mesh)
    n = mesh.num_nodes
    rows, cols, vals = [], [], []
    for i in range(3):
        for j in range(3):
            rows.append(mesh.triangles[:, i])
            cols.append(mesh.triangles[:, j])
            vals.append((b[:, i] * b[:, j] + c[:, i] * c[:, j]) / (4.0 * area))
    K = sp.coo_matrix((np.concatenate(vals),
                       (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n))
    return K.tocsr()


def mass_matrix(mesh: Mesh) -> sp.csr_matrix:
    """Consistent P1 mass matrix (cached on the mesh)."""
    if mesh._mass is not None:
        return mesh._mass
    area, _, _ = _element_geometry(mesh)
    n = mesh.num_nodes
    rows, cols, vals = [], [], []
    for i in range(3):
        for j in range(3):
            rows.append(mesh.triangles[:, i])
            cols.append(mesh.triangles[:, j])
            vals.append(area * ((2.0 if i == j else 1.0) / 12.0))
    M = sp.coo_matrix((np.concatenate(vals),
                       (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n)).tocsr()
    mesh._mass = M
    return M


def _volume_load(mesh: Mesh, f) -> np.ndarray:
    """Load vector for a source callable, 3-point edge-midpoint rule."""
    area, _, _ = _element_geometry(mesh)
    tris = mesh.triangles
    p = mesh.nodes[tris]
    load = np.zeros(mesh.num_nodes)
    mids = [0.5 * (p[:, (k + 1) % 3] + p[:, (k + 2) % 3]) for k in range(3)]
    fvals = [np.asarray(f(m), dtype=float) for m in mids]  # f takes (T,2) arrays
    for i in range(3):
        # phi_i = 1/2 at the two midpoints not opposite vertex i
        contrib = (area / 3.0) * 0.5 * (fvals[(i + 1) % 3] + fvals[(i + 2) % 3])
        np.add.at(load, tris[:, i], contrib)
    return load


def _neumann_load(mesh: Mesh, a: float, b: float) -> np.ndarray:
    load = np.zeros(mesh.num_nodes)
    for (i, j), lab in mesh.edge_labels.items():
        if lab.is_inner_facet:
            g = neumann_datum(mesh.domain, lab, a, b)
            if g != 0.0:
                length = float(np.hypot(*(mesh.nodes[j] - mesh.nodes[i])))
                load[i] += 0.5 * g * length
                load[j] += 0.5 * g * length
    return load


# ---------------------------------------------------------------------------
# system assembly
# ---------------------------------------------------------------------------

@dataclass
class SparseSystem:
    """SPD system over the free (non-Dirichlet) nodes."""

    mesh: Mesh
    matrix: sp.csr_matrix     # free x free
    rhs: np.ndarray           # per free node
    free: np.ndarray          # free node ids
    fixed_values: np.ndarray  # full-length vector, Dirichlet entries preset


def assemble(mesh: Mesh, neumann=None, volume_source=None, dirichlet=None) -> SparseSystem:
    """Assemble the weak form.

    Parameters
    ----------
    mesh : Mesh
    neumann : (a, b) or None
        Flux data on the inner facets: ``a`` on horizontal, ``b`` on vertical.
        The outer boundary is homogeneous Dirichlet.
    volume_source : callable, optional
        Right-hand side f of -lap(u) = f, evaluated on (n, 2) point arrays.
    dirichlet : callable, optional
        Manufactured-solution mode: pins *all* boundary nodes to
        ``dirichlet(points)`` and ignores ``neumann``.
    """
    K = stiffness_matrix(mesh)
    load = np.zeros(mesh.num_nodes)
    if volume_source is not None:
        load += _volume_load(mesh, volume_source)

    fixed_values = np.zeros(mesh.num_nodes)
    if dirichlet is not None:
        fixed_ids = np.array(sorted(mesh.node_labels), dtype=int)
        pts = mesh.nodes[fixed_ids]
        fixed_values[fixed_ids] = np.asarray(dirichlet(pts), dtype=float)
    else:
        a, b = neumann if neumann is not None else (0.0, 0.0)
        if not (math.isfinite(a) and math.isfinite(b)):
            raise FemError(f"Neumann data must be finite, got ({a}, {b})")
        load += _neumann_load(mesh, a, b)
        fixed_ids = np.array(sorted(
            n for n, lab in mesh.node_labels.items()
            if lab.side in (BoundarySide.OUTER_FACET, BoundarySide.OUTER_CORNER)),
            dtype=int)

    free_mask = np.ones(mesh.num_nodes, dtype=bool)
    free_mask[fixed_ids] = False
    free = np.nonzero(free_mask)[0]
    A = K[free][:, free].tocsr()
    rhs = load[free] - K[free][:, fixed_ids] @ fixed_values[fixed_ids]
    return SparseSystem(mesh=mesh, matrix=A, rhs=rhs, free=free,
                        fixed_values=fixed_values)


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------

@dataclass
class FemField:
    """Scalar P1 field: one value per mesh node."""

    mesh: Mesh
    values: np.ndarray

    def eval(self, p) -> float:
        return eval_field(self, p)

    def eval_grad(self, p) -> np.ndarray:
        return eval_grad(self, p)

    def eval_many(self, points) -> np.ndarray:
        return np.array([eval_field(self, p) for p in np.atleast_2d(points)])


def solve(system: SparseSystem, tol_rel: float = 1e-10, max_iter: int = None,
          method: str = "cg", x0: np.ndarray = None) -> FemField:
    """Solve the assembled system.

    ``method='cg'`` runs diagonally preconditioned conjugate gradients with a
    fixed iteration order (reproducible); terminates when the relative
    residual drops below ``tol_rel`` and raises :class:`SolverError` after
    ``max_iter`` iterations otherwise.  ``method='direct'`` uses a sparse LU
    factorization (for strongly graded meshes whose conditioning puts
    ``tol_rel`` out of CG's reach); the residual contract is checked either way.
    """
    A, b = system.matrix, system.rhs
    norm_b = float(np.linalg.norm(b))
    values = system.fixed_values.copy()
    if norm_b == 0.0:
        values[system.free] = 0.0
        return FemField(mesh=system.mesh, values=values)

    if method == "direct":
        lu = spla.splu(A.tocsc())
        x = lu.solve(b)
        x += lu.solve(b - A @ x)  # one refinement step for graded conditioning
        res = float(np.linalg.norm(b - A @ x)) / norm_b
        if not np.isfinite(res) or res > max(10 * tol_rel, 1e-8):
            raise SolverError(f"direct solve residual {res:.3e} exceeds contract", res)
    elif method == "cg":
        x, res = _pcg(A, b, tol_rel, max_iter, x0)
    else:
        raise FemError(f"unknown solver method {method!r}")

    values[system.free] = x
    return FemField(mesh=system.mesh, values=values)


def _pcg(A: sp.csr_matrix, b: np.ndarray, tol_rel: float, max_iter, x0):
    n = len(b)
    if max_iter is None:
        max_iter = max(400 * int(math.isqrt(n)), 20000)
    inv_diag = 1.0 / A.diagonal()
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    r = b - A @ x if x0 is not None else b.copy()
    norm_b = float(np.linalg.norm(b))
    z = inv_diag * r
    p = z.copy()
    rz = float(r @ z)
    for _ in range(max_iter):
        if np.linalg.norm(r) <= tol_rel * norm_b:
            return x, float(np.linalg.norm(r)) / norm_b
        Ap = A @ p
        alpha = rz / float(p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        z = inv_diag * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    res = float(np.linalg.norm(r)) / norm_b
    raise SolverError(f"CG did not reach {tol_rel:.1e} in {max_iter} iterations "
                      f"(relative residual {res:.3e})", res)


def solve_laplace(mesh: Mesh, a: float, b: float, tol_rel: float = 1e-10,
                  method: str = "cg") -> FemField:
    """Assemble and solve the homogeneous problem with data (a, b)."""
    return solve(assemble(mesh, neumann=(a, b)), tol_rel=tol_rel, method=method)


# ---------------------------------------------------------------------------
# point evaluation
# ---------------------------------------------------------------------------

class _Locator:
    """Uniform-bin point location; ties resolved by lowest triangle index."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        p = mesh.nodes[mesh.triangles]
        self.xmin = p[..., 0].min(axis=1)
        self.xmax = p[..., 0].max(axis=1)
        self.ymin = p[..., 1].min(axis=1)
        self.ymax = p[..., 1].max(axis=1)
        nbins = max(8, int(math.sqrt(mesh.num_triangles / 4)))
        self.bx0 = float(mesh.nodes[:, 0].min())
        self.by0 = float(mesh.nodes[:, 1].min())
        self.wx = (float(mesh.nodes[:, 0].max()) - self.bx0) / nbins or 1.0
        self.wy = (float(mesh.nodes[:, 1].max()) - self.by0) / nbins or 1.0
        self.nbins = nbins
        self.bins = {}
        ix0 = np.clip(((self.xmin - self.bx0) / self.wx).astype(int), 0, nbins - 1)
        ix1 = np.clip(((self.xmax - self.bx0) / self.wx).astype(int), 0, nbins - 1)
        iy0 = np.clip(((self.ymin - self.by0) / self.wy).astype(int), 0, nbins - 1)
        iy1 = np.clip(((self.ymax - self.by0) / self.wy).astype(int), 0, nbins - 1)
        for t in range(mesh.num_triangles):
            for i in range(ix0[t], ix1[t] + 1):
                for j in range(iy0[t], iy1[t] + 1):
                    self.bins.setdefault((i, j), []).append(t)
        area, bcoef, ccoef = _element_geometry(mesh)
        self.area, self.bcoef, self.ccoef = area, bcoef, ccoef
        self.tol = 1e-12 * max(mesh.domain.outer_half_width,
                               mesh.domain.outer_half_height)

    def barycentric(self, t: int, p) -> np.ndarray:
        tri = self.mesh.triangles[t]
        q = self.mesh.nodes[tri]
        lam = np.empty(3)
        a2 = 2.0 * self.area[t]
        for i in range(3):
            j, k = (i + 1) % 3, (i + 2) % 3
            # signed area of (p, q_j, q_k) over total
            lam[i] = ((q[j, 0] - p[0]) * (q[k, 1] - p[1])
                      - (q[k, 0] - p[0]) * (q[j, 1] - p[1])) / a2
        return lam

    def find(self, p) -> tuple[int, np.ndarray]:
        i = int(np.clip((p[0] - self.bx0) / self.wx, 0, self.nbins - 1))
        j = int(np.clip((p[1] - self.by0) / self.wy, 0, self.nbins - 1))
        best = None
        for t in self.bins.get((i, j), ()):
            if (self.xmin[t] - self.tol <= p[0] <= self.xmax[t] + self.tol
                    and self.ymin[t] - self.tol <= p[1] <= self.ymax[t] + self.tol):
                lam = self.barycentric(t, p)
                if lam.min() >= -1e-10:
                    best = (t, lam)
                    break  # bins store triangles in index order
        if best is None:
            raise PointOutsideMeshError(f"point {tuple(p)} outside mesh")
        return best


def _locator(mesh: Mesh) -> _Locator:
    if mesh._locator is None:
        mesh._locator = _Locator(mesh)
    return mesh._locator


def eval_field(field: FemField, p) -> float:
    """Barycentric interpolation at p; deterministic on edges."""
    t, lam = _locator(field.mesh).find(np.asarray(p, dtype=float))
    return float(lam @ field.values[field.mesh.triangles[t]])


def eval_grad(field: FemField, p) -> np.ndarray:
    """Per-triangle constant gradient at p's containing triangle."""
    loc = _locator(field.mesh)
    t, _ = loc.find(np.asarray(p, dtype=float))
    tri = field.mesh.triangles[t]
    v = field.values[tri]
    gx = float(v @ loc.bcoef[t]) / (2.0 * loc.area[t])
    gy = float(v @ loc.ccoef[t]) / (2.0 * loc.area[t])
    return np.array([gx, gy])


def triangle_gradients(field: FemField) -> np.ndarray:
    """(T, 2) array of the piecewise-constant gradient."""
    area, b, c = _element_geometry(field.mesh)
    v = field.values[field.mesh.triangles]
    gx = (v * b).sum(axis=1) / (2.0 * area)
    gy = (v * c).sum(axis=1) / (2.0 * area)
    return np.column_stack([gx, gy])


# ---------------------------------------------------------------------------
# traces and line post-processing
# ---------------------------------------------------------------------------

def facet_trace(field: FemField, label, n_samples: int):
    """Uniform samples of the field along a facet.

    Returns ``(s, values)`` where ``s`` is arclength from the facet start
    (endpoints excluded by half a spacing).
    """
    if n_samples < 3:
        raise FemError("need at least 3 trace samples")
    p0, p1 = field.mesh.domain.facet_endpoints(label)
    length = float(np.hypot(*(p1 - p0)))
    s = (np.arange(n_samples) + 0.5) * length / n_samples
    tangent = (p1 - p0) / length
    pts = p0[None, :] + s[:, None] * tangent[None, :]
    vals = np.array([eval_field(field, q) for q in pts])
    return s, vals


def nodal_facet_trace(field: FemField, label):
    """Facet trace at mesh nodes: (arclength, values, node ids)."""
    ids = field.mesh.facet_node_ids(label)
    p0, _ = field.mesh.domain.facet_endpoints(label)
    d = field.mesh.nodes[ids] - p0
    s = np.hypot(d[:, 0], d[:, 1])
    return s, field.values[ids], ids


def trace_integral(field: FemField, label) -> float:
    """Exact integral of the P1 trace along a facet (per-edge trapezoid)."""
    total = 0.0
    for (i, j), lab in field.mesh.edge_labels.items():
        if lab == label:
            length = float(np.hypot(*(field.mesh.nodes[j] - field.mesh.nodes[i])))
            total += 0.5 * length * (field.values[i] + field.values[j])
    return total


def second_derivative_on_symmetry_line(field: FemField, y_range, n: int):
    """u_xx(0, y) on the vertical symmetry line via the harmonic identity
    u_xx = -u_yy, with u_yy from central second differences of the trace.

    Returns ``(y_interior, u_xx)`` with the two endpoint samples dropped.
    """
    if n < 5:
        raise FemError("need n >= 5 samples for interior second differences")
    y0, y1 = float(y_range[0]), float(y_range[1])
    ys = np.linspace(y0, y1, n)
    dy = ys[1] - ys[0]
    u = np.array([eval_field(field, (0.0, y)) for y in ys])
    u_yy = (u[2:] - 2.0 * u[1:-1] + u[:-2]) / dy**2
    return ys[1:-1], -u_yy


# ---------------------------------------------------------------------------
# norms and energies
# ---------------------------------------------------------------------------

def l2_norm(field: FemField) -> float:
    M = mass_matrix(field.mesh)
    return float(math.sqrt(max(field.values @ (M @ field.values), 0.0)))


def l2_inner(field: FemField, g) -> float:
    """Inner product with another field (mass matrix) or a callable
    (3-point quadrature of f_h * g per triangle)."""
    if isinstance(g, FemField):
        if g.mesh is not field.mesh:
            raise FemError("fields must share a mesh")
        return float(field.values @ (mass_matrix(field.mesh) @ g.values))
    mesh = field.mesh
    area, _, _ = _element_geometry(mesh)
    p = mesh.nodes[mesh.triangles]
    v = field.values[mesh.triangles]
    total = 0.0
    for k in range(3):
        mid = 0.5 * (p[:, (k + 1) % 3] + p[:, (k + 2) % 3])
        fh = 0.5 * (v[:, (k + 1) % 3] + v[:, (k + 2) % 3])
        total += float(((area / 3.0) * fh * np.asarray(g(mid), dtype=float)).sum())
    return total


def field_energy(field: FemField) -> float:
    """Dirichlet energy integral of |grad u_h|^2."""
    area, _, _ = _element_geometry(field.mesh)
    g = triangle_gradients(field)
    return float((area * (g**2).sum(axis=1)).sum())


def neumann_work(field: FemField, a: float, b: float) -> float:
    """Boundary work integral of the flux data against the trace."""
    total = 0.0
    for lab_index in (1, 2, 3, 4):
        g = neumann_datum(field.mesh.domain, inner_facet(lab_index), a, b)
        total += g * trace_integral(field, inner_facet(lab_index))
    return total


def h1_seminorm_error(field: FemField, grad_exact) -> float:
    """Energy-norm distance to an exact gradient, 3-point rule per triangle."""
    mesh = field.mesh
    area, _, _ = _element_geometry(mesh)
    p = mesh.nodes[mesh.triangles]
    gh = triangle_gradients(field)
    total = 0.0
    for k in range(3):
        mid = 0.5 * (p[:, (k + 1) % 3] + p[:, (k + 2) % 3])
        diff = gh - np.asarray(grad_exact(mid), dtype=float)
        total += float(((area / 3.0) * (diff**2).sum(axis=1)).sum())
    return math.sqrt(total)


def system_residual(system: SparseSystem, field: FemField) -> float:
    """Relative residual of the constrained system at a solution."""
    x = field.values[system.free]
    r = system.rhs - system.matrix @ x
    nb = float(np.linalg.norm(system.rhs))
    return float(np.linalg.norm(r)) / (nb if nb > 0 else 1.0)
