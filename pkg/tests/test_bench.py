import numpy as np
import pytest

from onepflow.bench import (coons_fill, exact_radial, scenario_bingham_pipe, scenario_constant,
                            scenario_radial_steady, step_forcing)
from onepflow.errors import DomainError
from onepflow.solver import SolverConfig, run


class TestExactRadial:
    def test_examples(self):
        v, g = exact_radial(2.0, 2, np.array([0.5, 0.0]))
        assert v == 0 and np.all(g == 0)
        v, g = exact_radial(2.0, 2, np.array([2.0, 0.0]))
        assert v == 0.5 and np.allclose(g, [1.0, 0.0])
        v, g = exact_radial(2.0, 2, np.zeros(2))
        assert v == 0 and np.all(g == 0)

    def test_domain(self):
        with pytest.raises(DomainError):
            exact_radial(1.0, 2, np.zeros(2))

    @pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
    def test_c1_matching(self, p):
        r = 1.0 + np.array([-1e-6, 1e-6])
        v, g = exact_radial(p, 2, np.stack([r, 0 * r], axis=1))
        assert np.all(np.abs(v) < 1e-8) and np.all(np.abs(g) < 1e-2)

    @pytest.mark.parametrize("p", [2.0, 3.0])
    def test_equation_outside_facet(self, p):
        # div(Du/|Du| + |Du|^{p-2} Du) = n, so du/dt - div(...) = -n at steady state
        h = 1e-4

        def flux(x):
            g = exact_radial(p, 2, x)[1]
            m = np.linalg.norm(g)
            return g / m + m ** (p - 2) * g

        x = np.array([1.3, 0.9])
        div = sum((flux(x + h * e)[i] - flux(x - h * e)[i]) / (2 * h)
                  for i, e in enumerate(np.eye(2)))
        assert div == pytest.approx(2.0, rel=1e-6)


def test_coons_fill_reproduces_bilinear():
    def bc(X, t):
        return (1 + X[:, 0] - 2 * X[:, 1] + 3 * X[:, 0] * X[:, 1])[:, None]
    rule = coons_fill(bc, ((0.0, 1.0), (0.0, 2.0)))
    X = np.random.default_rng(0).random((20, 2)) * [1, 2]
    np.testing.assert_allclose(rule(X), bc(X, 0), rtol=1e-13)


def test_radial_scenario_hash_is_pure():
    a = scenario_radial_steady(resolution=16)
    b = scenario_radial_steady(resolution=16)
    assert a.hash == b.hash
    assert a.hash != scenario_radial_steady(resolution=8).hash
    assert np.all(a.forcing(a.mesh.centroids, 0.0) == -2.0)


def test_constant_scenario_stays_constant():
    sc = scenario_constant(1.5, p=1.5, tau=0.1, t_end=0.3)
    traj = run(sc, SolverConfig())
    assert np.max(np.abs(traj.final.values - 1.5)) <= 1e-12


def test_bingham_unforced_stays_at_rest():
    sc = scenario_bingham_pipe(0.0, resolution=8, tau=0.1, t_end=0.2)
    traj = run(sc, SolverConfig())
    assert np.all(traj.final.values == 0)
    assert sc.autonomous


def test_step_forcing():
    f = step_forcing(1.0, 4.0, 0.5)
    assert f(0.4) == 1.0 and f(0.5) == 4.0
    sc = scenario_bingham_pipe(f, resolution=8)
    assert not sc.autonomous
    assert sc.descriptor["preset"] == "bingham-pipe"
