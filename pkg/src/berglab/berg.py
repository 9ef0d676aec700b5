"""Facet monotonicity diagnostics for a solved field.

The strong test checks the defining inequalities ``x * u_x <= 0`` on the top
inner facet and ``y * u_y <= 0`` on the right inner facet.  Tangential
derivatives come from central differencing of the nodal boundary trace
(traces are smoother and exactly symmetric on symmetric meshes, unlike
per-triangle gradients).  Samples closer to a corner than an exclusion
radius are skipped: the discrete trace cannot resolve the inverse-cube-root
derivative blowup below the local mesh scale, so sub-scale sign structure
is invisible by construction.

The weak test checks the qualitative profile: the trace peaks at the facet
center and is smallest at the outermost retained samples.  (For this field,
whose flux is directed into the inner rectangle, monotone decay away from
the facet center is the monotonicity statement; a concentration field would
be its negative.)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import DomainSpec, inner_facet
from .fem import FemField, nodal_facet_trace


@dataclass
class Violation:
    facet_index: int
    arclength: float        # along the facet, from its start
    position: float         # signed coordinate (x on top facet, y on right)
    value: float            # x*u_x or y*u_y there


@dataclass
class BergReport:
    holds: bool
    margin: float                 # tol*scale - max(tested quantity); > 0 iff clean
    violations: list
    excluded_radius: float        # largest corner exclusion actually applied
    weak_berg_holds: bool
    facet_profiles: dict = field(default_factory=dict, repr=False)
    # facet_index -> (arclength, signed coordinate, x*u_x samples, kept mask)


def _tangential_derivative(s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Three-point derivative at interior samples of a nonuniform trace."""
    hl = s[1:-1] - s[:-2]
    hr = s[2:] - s[1:-1]
    return (v[2:] * hl**2 - v[:-2] * hr**2 + v[1:-1] * (hr**2 - hl**2)) \
        / (hl * hr * (hl + hr))


def _facet_samples(field_: FemField, facet_index: int, r_excl: float):
    """Interior nodal samples of the monotonicity quantity on one facet.

    Returns arclength, signed coordinate, x*u_x (or y*u_y), keep mask, and the
    largest exclusion radius applied.
    """
    s, v, ids = nodal_facet_trace(field_, inner_facet(facet_index))
    coord_axis = 0 if facet_index in (1, 3) else 1
    coord = field_.mesh.nodes[ids, coord_axis]
    deriv = _tangential_derivative(s, v)
    quantity = coord[1:-1] * deriv
    dist = np.minimum(s[1:-1], s[-1] - s[1:-1])
    gaps = np.diff(s)
    local_h = np.minimum(gaps[:-1], gaps[1:])
    cut = np.maximum(r_excl, 3.0 * local_h)
    keep = dist >= cut
    return s[1:-1], coord[1:-1], quantity, keep, float(cut.max(initial=0.0))


def check_berg(field_: FemField, domain: DomainSpec = None, tol_sign: float = 1e-3,
               r_excl: float = 0.0, a: float = None, b: float = None) -> BergReport:
    """Strong facet-monotonicity check on the top and right inner facets.

    A sample violates when ``x*u_x`` (top) or ``y*u_y`` (right) exceeds
    ``tol_sign * scale`` with ``scale = max(|a|, |b|)`` when the data are
    given, else the field's maximum trace derivative scale 1.
    """
    mesh = field_.mesh
    if domain is None:
        domain = mesh.domain
    if tol_sign < 0:
        raise ValueError("tol_sign must be nonnegative")
    scale = max(abs(a), abs(b)) if a is not None and b is not None else 1.0
    if scale == 0.0:
        scale = 1.0
    threshold = tol_sign * scale

    violations = []
    worst = -np.inf
    excluded = 0.0
    profiles = {}
    for facet_index in (1, 4):
        s, coord, quantity, keep, cut = _facet_samples(field_, facet_index, r_excl)
        profiles[facet_index] = (s, coord, quantity, keep)
        excluded = max(excluded, cut)
        kept_q = quantity[keep]
        if kept_q.size:
            worst = max(worst, float(kept_q.max()))
        for k in np.nonzero(keep & (quantity > threshold))[0]:
            violations.append(Violation(facet_index=facet_index,
                                        arclength=float(s[k]),
                                        position=float(coord[k]),
                                        value=float(quantity[k])))
    margin = threshold - (worst if np.isfinite(worst) else 0.0)
    weak = check_weak_berg(field_, domain, r_excl=r_excl)
    return BergReport(holds=not violations, margin=float(margin),
                      violations=violations, excluded_radius=excluded,
                      weak_berg_holds=weak, facet_profiles=profiles)


def check_weak_berg(field_: FemField, domain: DomainSpec = None,
                    r_excl: float = 0.0, tie_tol: float = 1e-9) -> bool:
    """Weak monotonicity: on each tested facet the trace attains its maximum
    at the facet-center sample and its minimum at the outermost retained
    samples (ties resolved as non-violations)."""
    mesh = field_.mesh
    if domain is None:
        domain = mesh.domain
    for facet_index in (1, 4):
        s, v, ids = nodal_facet_trace(field_, inner_facet(facet_index))
        coord_axis = 0 if facet_index in (1, 3) else 1
        coord = mesh.nodes[ids, coord_axis]
        dist = np.minimum(s, s[-1] - s)
        gaps = np.diff(s)
        local_h = np.concatenate([[gaps[0]], np.minimum(gaps[:-1], gaps[1:]), [gaps[-1]]])
        keep = dist >= np.maximum(r_excl, 3.0 * local_h)
        if keep.sum() < 3:
            return False
        vk, ck = v[keep], coord[keep]
        eps = tie_tol * max(np.abs(vk).max(), 1e-300)
        center = vk[np.argmin(np.abs(ck))]
        outer = min(vk[0], vk[-1])
        if center < vk.max() - eps:
            return False
        if outer > vk.min() + eps:
            return False
    return True
