import numpy as np
import pytest

from berglab.berg import check_berg, check_weak_berg
from berglab.fem import FemField, solve_laplace
from berglab.geometry import make_domain
from berglab.meshgen import build_mesh

UNIT = make_domain(1, 1, 2, 0)


@pytest.fixture(scope="module")
def default_mesh():
    return build_mesh(UNIT, n_base=8, grading_ratio=1.2, levels=1)


@pytest.fixture(scope="module")
def deep_mesh():
    # resolves the corner violation zone of ~20-50% detunings
    return build_mesh(UNIT, n_base=8, grading_ratio=1.2, levels=1,
                      target_corner_h=2e-4)


def test_symmetric_case_holds(default_mesh):
    u = solve_laplace(default_mesh, 1.0, 1.0)
    report = check_berg(u, a=1.0, b=1.0)
    assert report.holds
    assert report.margin > 0
    assert report.violations == []
    assert report.weak_berg_holds


def test_zero_data_trivially_clean(default_mesh):
    zero = FemField(mesh=default_mesh, values=np.zeros(default_mesh.num_nodes))
    report = check_berg(zero, a=0.0, b=0.0)
    assert report.holds
    assert report.weak_berg_holds


def test_detuned_above_breaks_top_facet(deep_mesh):
    # b > b*: mode amplitude positive, x*u_x > 0 near the top-facet corners
    u = solve_laplace(deep_mesh, 1.0, 1.5, method="direct")
    report = check_berg(u, a=1.0, b=1.5)
    assert not report.holds
    assert report.margin < 0  # margin consistent with recorded violations
    facets = {v.facet_index for v in report.violations}
    assert facets == {1}
    # concentrated near the corners, mirror-symmetric
    xs = np.array([v.position for v in report.violations])
    assert (np.abs(xs) > 0.9).all()
    assert (xs > 0).sum() == (xs < 0).sum()


def test_detuned_below_breaks_right_facet(deep_mesh):
    u = solve_laplace(deep_mesh, 1.0, 0.5, method="direct")
    report = check_berg(u, a=1.0, b=0.5)
    assert not report.holds
    facets = {v.facet_index for v in report.violations}
    assert facets == {4}
    ys = np.array([v.position for v in report.violations])
    assert (np.abs(ys) > 0.8).all()


def test_scaling_invariance(default_mesh):
    u = solve_laplace(default_mesh, 1.0, 1.0)
    scaled = FemField(mesh=default_mesh, values=7.0 * u.values)
    r1 = check_berg(u, a=1.0, b=1.0)
    r2 = check_berg(scaled, a=7.0, b=7.0)
    assert r1.holds == r2.holds
    assert len(r1.violations) == len(r2.violations)
    assert r2.margin == pytest.approx(7.0 * r1.margin, rel=1e-9)


def test_strong_detuning_breaks_weak_berg(deep_mesh):
    u = solve_laplace(deep_mesh, 1.0, 3.0, method="direct")
    assert not check_weak_berg(u)
    report = check_berg(u, a=1.0, b=3.0)
    assert not report.holds and not report.weak_berg_holds


def test_symmetric_report_mirror_consistent(default_mesh):
    # x*u_x samples on the top facet are even in x for symmetric data
    u = solve_laplace(default_mesh, 1.0, 1.0)
    report = check_berg(u, a=1.0, b=1.0)
    s, coord, q, keep = report.facet_profiles[1]
    order = np.argsort(coord)
    sym = q[order] - q[order][::-1]
    assert np.abs(sym).max() < 1e-9


def test_rejects_negative_tolerance(default_mesh):
    u = solve_laplace(default_mesh, 1.0, 1.0)
    with pytest.raises(ValueError):
        check_berg(u, tol_sign=-1.0)
