import math

import numpy as np
import pytest

from onepflow.errors import DomainError, NonSPD, SizeOverflow
from onepflow.grid import (VectorField, assemble_frozen_operator, build_mesh, element_gradient,
                           integrate, read_checkpoint, write_checkpoint, write_csv)
from onepflow.model import Parameters, make_model


def test_1d_counts():
    m = build_mesh(((0, 1),), 2)
    assert m.n_nodes == 3 and m.n_elements == 2
    np.testing.assert_allclose(m.volumes, [0.5, 0.5])
    np.testing.assert_array_equal(m.boundary, [0, 2])


def test_2d_counts():
    m = build_mesh(((0, 1), (0, 1)), 2)
    assert m.n_nodes == 9 and m.n_elements == 8
    assert m.volumes.sum() == pytest.approx(1.0, abs=1e-15)
    assert set(m.boundary) == set(range(9)) - {4}


def test_degenerate_and_overflow():
    with pytest.raises(DomainError):
        build_mesh(((0, 0), (0, 1)), 4)
    with pytest.raises(DomainError):
        build_mesh(((0, 1),), 1)
    with pytest.raises(SizeOverflow):
        build_mesh(((0, 1), (0, 1)), 100, max_nodes=1000)


@pytest.mark.parametrize("res", [(3, 5), 7])
def test_mesh_invariants(res):
    m = build_mesh(((-1, 2), (0, 0.5)), res)
    assert np.all(m.volumes > 0)
    assert m.volumes.sum() == pytest.approx(1.5, rel=1e-14)
    assert m.lumped_mass.sum() == pytest.approx(1.5, rel=1e-14)
    on_edge = ((np.isclose(m.nodes[:, 0], -1)) | np.isclose(m.nodes[:, 0], 2)
               | np.isclose(m.nodes[:, 1], 0) | np.isclose(m.nodes[:, 1], 0.5))
    np.testing.assert_array_equal(np.flatnonzero(on_edge), m.boundary)


def test_gradients_exact_on_linear():
    m = build_mesh(((0, 1), (0, 2)), 5)
    a = np.array([[1.5, -0.25], [0.0, 3.0]])
    u = VectorField(m, m.nodes @ a.T + 7.0)
    g = element_gradient(u).values
    np.testing.assert_allclose(g, np.broadcast_to(a, g.shape), atol=1e-12)
    c = element_gradient(VectorField(m, np.full((m.n_nodes, 1), 2.0))).values
    assert np.all(c == 0)


def test_gradient_of_quadratic():
    errs = []
    for res in (8, 16, 32):
        m = build_mesh(((0, 1), (0, 1)), res)
        g = element_gradient(VectorField(m, m.nodes[:, 0] ** 2)).values[:, 0, 0]
        errs.append(np.max(np.abs(g - 2 * m.centroids[:, 0])))
    assert errs[2] <= 2.0 / 32
    assert errs[1] / errs[2] > 1.8


def test_vector_field_validation():
    m = build_mesh(((0, 1),), 4)
    with pytest.raises(DomainError):
        VectorField(m, np.zeros(3))
    with pytest.raises(DomainError):
        VectorField(m, np.full(5, np.nan))


def test_stiffness_row():
    m = build_mesh(((0, 1),), 2)
    model = make_model(n=1, p=2.0, a1=0.0)
    K = assemble_frozen_operator(m, model, Parameters(n=1), np.ones(2), 0.0)
    np.testing.assert_array_equal(K.toarray()[1], [-2.0, 4.0, -2.0])


def test_operator_symmetry_and_quadratic_form():
    m = build_mesh(((0, 1), (0, 1)), 6)
    model = make_model(n=2, p=2.0, gamma="diag-gamma(2, 0.5)")
    rng = np.random.default_rng(0)
    mu = rng.uniform(0.5, 2.0, m.n_elements)
    K = assemble_frozen_operator(m, model, Parameters(), mu, 0.0)
    assert abs(K - K.T).max() == 0
    a = np.array([0.3, -1.1])
    u = m.nodes @ a
    G = np.diag([2.0, 0.5])
    assert u @ K @ u == pytest.approx(float(np.sum(m.volumes * mu) * a @ G @ a), rel=1e-12)


def test_nonspd_probe():
    m = build_mesh(((0, 1), (0, 1)), 3)
    model = make_model(n=2, p=2.0)
    with pytest.raises(NonSPD):
        assemble_frozen_operator(m, model, Parameters(), np.full(m.n_elements, 1e-30), 0.0)
    with pytest.raises(NonSPD):
        assemble_frozen_operator(m, model, Parameters(), np.zeros(m.n_elements), 0.0)


def test_integrate():
    m = build_mesh(((0, 1), (0, 1)), 4)
    assert integrate(np.ones(m.n_elements), m, 1) == pytest.approx(1.0)
    assert integrate(np.full(m.n_elements, -3.0), m, math.inf) == 3.0
    errs = []
    for res in (4, 8, 16):
        m1 = build_mesh(((0, 1),), res)
        errs.append(abs(integrate(np.abs(m1.centroids[:, 0]), m1, 1) - 0.5))
    assert max(errs) < 1e-12  # midpoint rule is exact for linear integrands


def test_checkpoint_round_trip(tmp_path):
    m = build_mesh(((0, 1), (-1, 1)), (3, 4))
    rng = np.random.default_rng(1)
    u = VectorField(m, rng.normal(size=(m.n_nodes, 2)), 0.75)
    write_checkpoint(tmp_path / "u.ckpt", u)
    v = read_checkpoint(tmp_path / "u.ckpt")
    np.testing.assert_array_equal(u.values, v.values)
    assert v.time == 0.75 and v.mesh.same_discretization(m)
    raw = (tmp_path / "u.ckpt").read_bytes()
    assert raw[:8] == b"ONEPCKPT"
    np.testing.assert_array_equal(np.frombuffer(raw[-u.values.nbytes:], "<f8"), u.values.ravel())
    with pytest.raises(DomainError):
        read_checkpoint(tmp_path / "u.ckpt", build_mesh(((0, 1), (-1, 1)), 3))


def test_csv_export(tmp_path):
    m = build_mesh(((0, 1),), 2)
    write_csv(tmp_path / "u.csv", VectorField(m, np.array([[1.0], [2.0], [3.0]])))
    lines = (tmp_path / "u.csv").read_text().splitlines()
    assert lines[0] == "node,x,u0"
    assert lines[2] == "1,0.5,2.0"
