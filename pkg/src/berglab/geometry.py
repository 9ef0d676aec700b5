"""Rectangular annulus geometry: facet labeling, corner frames, boundary data.

The domain is the open region between two concentric, axis-aligned similar
rectangles.  The inner rectangle has half-width ``r1 + eps`` and half-height
``r2``; the outer rectangle is the inner one scaled by ``lambda0 > 1``.

Labeling convention (fixed once, used everywhere):

* inner facets  ``Gamma_1`` top, ``Gamma_2`` left, ``Gamma_3`` bottom,
  ``Gamma_4`` right; outer facets analogous (``GammaTilde_i``);
* inner corners ``S_1`` top-right, then counterclockwise:
  ``S_2`` top-left, ``S_3`` bottom-left, ``S_4`` bottom-right.

Each inner corner carries a local polar frame ``(rho, theta)`` with
``theta = 0`` along the *vertical* facet adjoining the corner and
``theta = 3*pi/2`` along the *horizontal* facet, sweeping through the
annulus (interior wedge angle ``3*pi/2``).  With this orientation the
wedge mode ``rho**(2/3) * cos(2*theta/3)`` restricted to the top facet
near the top-right corner equals ``-(x_corner - x)**(2/3)``, so its
tangential derivative blows up to ``+inf`` toward the corner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

THREE_HALF_PI = 1.5 * math.pi

# corner index -> outward sign pattern (sx, sy); S_1 top-right, CCW
_CORNER_SIGNS = {1: (1.0, 1.0), 2: (-1.0, 1.0), 3: (-1.0, -1.0), 4: (1.0, -1.0)}

# facet index -> (axis, level sign): Gamma_1 top, Gamma_2 left, ...
_FACET_AXIS = {1: ("y", 1.0), 2: ("x", -1.0), 3: ("y", -1.0), 4: ("x", 1.0)}


class GeometryError(ValueError):
    """Invalid domain parameters or point queries."""


class NotOnBoundaryError(GeometryError):
    """Raised when a point claimed to lie on the boundary does not."""


class BoundarySide(Enum):
    INNER_FACET = "inner_facet"
    OUTER_FACET = "outer_facet"
    INNER_CORNER = "inner_corner"
    OUTER_CORNER = "outer_corner"


@dataclass(frozen=True)
class BoundaryLabel:
    """A boundary entity: facet or corner, inner or outer, index 1..4."""

    side: BoundarySide
    index: int

    def __post_init__(self):
        if self.index not in (1, 2, 3, 4):
            raise GeometryError(f"boundary index must be 1..4, got {self.index}")

    @property
    def is_inner_facet(self) -> bool:
        return self.side is BoundarySide.INNER_FACET

    @property
    def is_outer_facet(self) -> bool:
        return self.side is BoundarySide.OUTER_FACET

    @property
    def is_corner(self) -> bool:
        return self.side in (BoundarySide.INNER_CORNER, BoundarySide.OUTER_CORNER)

    def mirror_x(self) -> "BoundaryLabel":
        """Label of the image under reflection x -> -x."""
        if self.side in (BoundarySide.INNER_FACET, BoundarySide.OUTER_FACET):
            swap = {1: 1, 2: 4, 3: 3, 4: 2}
        else:
            swap = {1: 2, 2: 1, 3: 4, 4: 3}
        return BoundaryLabel(self.side, swap[self.index])

    def mirror_y(self) -> "BoundaryLabel":
        """Label of the image under reflection y -> -y."""
        if self.side in (BoundarySide.INNER_FACET, BoundarySide.OUTER_FACET):
            swap = {1: 3, 2: 2, 3: 1, 4: 4}
        else:
            swap = {1: 4, 2: 3, 3: 2, 4: 1}
        return BoundaryLabel(self.side, swap[self.index])


def inner_facet(i: int) -> BoundaryLabel:
    return BoundaryLabel(BoundarySide.INNER_FACET, i)


def outer_facet(i: int) -> BoundaryLabel:
    return BoundaryLabel(BoundarySide.OUTER_FACET, i)


def inner_corner(i: int) -> BoundaryLabel:
    return BoundaryLabel(BoundarySide.INNER_CORNER, i)


def outer_corner(i: int) -> BoundaryLabel:
    return BoundaryLabel(BoundarySide.OUTER_CORNER, i)


@dataclass(frozen=True)
class DomainSpec:
    """Rectangular annulus with an optional widening of the inner rectangle.

    The inner rectangle is ``(-r1-eps, r1+eps) x (-r2-eps_y, r2+eps_y)`` and
    the outer rectangle is ``lambda0`` times it.  ``eps`` widens the x-extent
    only; ``eps_y`` exists for two-directional perturbations and defaults to 0.
    """

    r1: float
    r2: float
    lambda0: float = 2.0
    eps: float = 0.0
    eps_y: float = 0.0

    def __post_init__(self):
        if not (self.r1 > 0 and self.r2 > 0):
            raise GeometryError(f"rectangle half-sizes must be positive, got r1={self.r1}, r2={self.r2}")
        if not self.lambda0 > 1:
            raise GeometryError(f"outer scale lambda0 must exceed 1, got {self.lambda0}")
        if self.eps < 0 or self.eps_y < 0:
            raise GeometryError(f"perturbations must be nonnegative, got eps={self.eps}, eps_y={self.eps_y}")
        for name in ("r1", "r2", "lambda0", "eps", "eps_y"):
            if not math.isfinite(getattr(self, name)):
                raise GeometryError(f"{name} must be finite")

    # -- inner/outer rectangle half-extents ---------------------------------
    @property
    def half_width(self) -> float:
        return self.r1 + self.eps

    @property
    def half_height(self) -> float:
        return self.r2 + self.eps_y

    @property
    def outer_half_width(self) -> float:
        return self.lambda0 * self.half_width

    @property
    def outer_half_height(self) -> float:
        return self.lambda0 * self.half_height

    @property
    def area(self) -> float:
        return 4.0 * (self.lambda0**2 - 1.0) * self.half_width * self.half_height

    @property
    def gap_width(self) -> float:
        """Shortest distance from the inner to the outer rectangle."""
        return (self.lambda0 - 1.0) * min(self.half_width, self.half_height)

    # -- corners and facets --------------------------------------------------
    def corner(self, i: int, outer: bool = False) -> np.ndarray:
        sx, sy = _CORNER_SIGNS[i]
        w = self.outer_half_width if outer else self.half_width
        h = self.outer_half_height if outer else self.half_height
        return np.array([sx * w, sy * h])

    def facet_endpoints(self, label: BoundaryLabel) -> tuple[np.ndarray, np.ndarray]:
        """Endpoints of a facet, parametrized by increasing coordinate."""
        if label.is_corner:
            raise GeometryError("corners have no facet endpoints")
        outer = label.is_outer_facet
        w = self.outer_half_width if outer else self.half_width
        h = self.outer_half_height if outer else self.half_height
        axis, sign = _FACET_AXIS[label.index]
        if axis == "y":  # horizontal facet at y = sign*h
            return np.array([-w, sign * h]), np.array([w, sign * h])
        return np.array([sign * w, -h]), np.array([sign * w, h])

    def facet_length(self, label: BoundaryLabel) -> float:
        p0, p1 = self.facet_endpoints(label)
        return float(np.hypot(*(p1 - p0)))

    def facet_midpoint(self, label: BoundaryLabel) -> np.ndarray:
        p0, p1 = self.facet_endpoints(label)
        return 0.5 * (p0 + p1)

    def adjacent_corners(self, facet_index: int) -> tuple[int, int]:
        """Inner corner indices adjoining inner facet i."""
        return {1: (2, 1), 2: (3, 2), 3: (3, 4), 4: (4, 1)}[facet_index]

    def contains(self, p, tol: float = 0.0) -> bool:
        """Whether p lies in the closed annulus (within tol)."""
        x, y = float(p[0]), float(p[1])
        if abs(x) > self.outer_half_width + tol or abs(y) > self.outer_half_height + tol:
            return False
        return abs(x) >= self.half_width - tol or abs(y) >= self.half_height - tol


@dataclass(frozen=True)
class CornerFrame:
    """Local polar coordinates at an inner corner.

    ``theta = 0`` points along the adjoining vertical facet, ``theta = 3*pi/2``
    along the adjoining horizontal facet; the annulus wedge is ``0 <= theta <=
    3*pi/2``.  Frames at the four corners are mirror images of each other, so
    the associated wedge modes are even under both reflections.
    """

    index: int
    origin: tuple[float, float]
    signs: tuple[float, float]

    def polar(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Map physical points to (rho, theta); accepts (2,) or (n, 2)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        xi = self.signs[0] * (pts[:, 0] - self.origin[0])
        eta = self.signs[1] * (pts[:, 1] - self.origin[1])
        rho = np.hypot(xi, eta)
        theta = np.mod(np.arctan2(eta, xi) + 0.5 * math.pi, 2.0 * math.pi)
        if np.ndim(points) == 1:
            return rho[0], theta[0]
        return rho, theta

    def point_at(self, rho: float, theta: float) -> np.ndarray:
        """Inverse map: physical point at local polar coordinates."""
        phi = theta - 0.5 * math.pi
        xi, eta = rho * math.cos(phi), rho * math.sin(phi)
        return np.array([self.origin[0] + self.signs[0] * xi,
                         self.origin[1] + self.signs[1] * eta])

    def in_wedge(self, points, rho_max: float) -> np.ndarray:
        rho, theta = self.polar(np.atleast_2d(points))
        return (rho <= rho_max) & (theta <= THREE_HALF_PI)


def make_domain(r1: float, r2: float, lambda0: float = 2.0, eps: float = 0.0,
                eps_y: float = 0.0) -> DomainSpec:
    """Validate parameters and build the annulus description.

    Parameters
    ----------
    r1, r2 : float
        Half-width and half-height of the unperturbed inner rectangle (> 0).
    lambda0 : float
        Similarity ratio of the outer rectangle (> 1).
    eps : float
        Widening of the inner rectangle in x (>= 0).
    eps_y : float
        Optional widening in y (>= 0), default 0.
    """
    return DomainSpec(float(r1), float(r2), float(lambda0), float(eps), float(eps_y))


def corner_frame(domain: DomainSpec, i: int) -> CornerFrame:
    """Local polar frame at inner corner ``S_i``."""
    if i not in (1, 2, 3, 4):
        raise GeometryError(f"corner index must be 1..4, got {i}")
    c = domain.corner(i)
    return CornerFrame(index=i, origin=(float(c[0]), float(c[1])), signs=_CORNER_SIGNS[i])


def classify_boundary_point(domain: DomainSpec, p, tol: float = 1e-12) -> BoundaryLabel:
    """Identify the boundary entity containing p.

    Corner labels take precedence within ``tol`` of a vertex.  Raises
    :class:`NotOnBoundaryError` if p is farther than ``tol`` from the boundary.
    """
    x, y = float(p[0]), float(p[1])
    for outer, w, h in ((False, domain.half_width, domain.half_height),
                        (True, domain.outer_half_width, domain.outer_half_height)):
        side = BoundarySide.OUTER_CORNER if outer else BoundarySide.INNER_CORNER
        for i, (sx, sy) in _CORNER_SIGNS.items():
            if abs(x - sx * w) <= tol and abs(y - sy * h) <= tol:
                return BoundaryLabel(side, i)
    for outer, w, h in ((False, domain.half_width, domain.half_height),
                        (True, domain.outer_half_width, domain.outer_half_height)):
        side = BoundarySide.OUTER_FACET if outer else BoundarySide.INNER_FACET
        if abs(y - h) <= tol and -w - tol <= x <= w + tol:
            return BoundaryLabel(side, 1)
        if abs(y + h) <= tol and -w - tol <= x <= w + tol:
            return BoundaryLabel(side, 3)
        if abs(x + w) <= tol and -h - tol <= y <= h + tol:
            return BoundaryLabel(side, 2)
        if abs(x - w) <= tol and -h - tol <= y <= h + tol:
            return BoundaryLabel(side, 4)
    raise NotOnBoundaryError(f"point ({x}, {y}) is not on the boundary (tol={tol})")


def neumann_datum(domain: DomainSpec, label: BoundaryLabel, a: float, b: float) -> float:
    """Piecewise-constant flux datum: ``a`` on horizontal inner facets
    (indices 1, 3), ``b`` on vertical ones (2, 4)."""
    if not label.is_inner_facet:
        raise GeometryError(f"Neumann data live on inner facets only, got {label}")
    return float(a) if label.index in (1, 3) else float(b)
