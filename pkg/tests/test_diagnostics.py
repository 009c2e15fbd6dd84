import math

import numpy as np
import pytest

from onepflow.bench import box_scenario, scenario_constant
from onepflow.diagnostics import (Cylinder, DiagnosticsReport, delta_sweep, eps_convergence_study,
                                  facet_measure, gradient_distance, holder_seminorm,
                                  max_principle_check, stability_check, stationary, sup_v_eps,
                                  superlevel_measure)
from onepflow.errors import (CylinderOutOfDomain, DomainError, MismatchedDiscretization,
                             TruncationOrder)
from onepflow.model import Parameters, constant_forcing, make_model
from onepflow.solver import SolverConfig, run


def linear(a=(0.3, -0.4), res=8, eps=1e-3, delta=0.05, p=2.0, a1=1.0, tau=0.1, t_end=0.3, c=0.0):
    prm = Parameters(p=p, eps=eps, delta=delta, resolution=res, tau=tau, t_end=t_end)
    a = np.asarray(a, float)

    def bc(X, t):
        return (X @ a + c)[:, None]
    return box_scenario(prm, make_model(n=2, p=p, a1=a1), constant_forcing(0.0), bc,
                        ((0, 1), (0, 1)), u0=lambda X: bc(X, 0))


def still(sc):
    return stationary(sc, sc.initial_field())


class TestPointwise:
    def test_sup_v_eps_constant(self):
        sc = scenario_constant(2.0, eps=1e-3)
        assert sup_v_eps(still(sc)) == pytest.approx(1e-3, rel=1e-12)

    def test_sup_v_eps_linear(self):
        sc = linear((0.3, -0.4))
        assert sup_v_eps(still(sc)) == pytest.approx(math.sqrt(1e-6 + 0.25), rel=1e-12)

    def test_facet_constant_and_steep(self):
        sc = scenario_constant(2.0)
        assert facet_measure(sc, sc.initial_field(), 0.05) == pytest.approx(1.0)
        sc = linear((0.3, -0.4))
        assert facet_measure(sc, sc.initial_field(), 0.05) == 0.0

    def test_facet_order(self):
        sc = scenario_constant(2.0, eps=1e-3)
        with pytest.raises(TruncationOrder):
            facet_measure(sc, sc.initial_field(), 1e-3)

    def test_holder_constant_is_zero(self):
        sc = scenario_constant(2.0, resolution=16)
        cyl = Cylinder((0.5, 0.5), 0.0, 0.4)
        assert holder_seminorm(still(sc), 0.05, cyl, 0.5, 2000) == 0.0

    def test_holder_deterministic_and_alpha(self):
        prm = Parameters(eps=1e-3, delta=0.05, resolution=16)

        def bc(X, t):
            return (X[:, 0] ** 2 + 0.5 * X[:, 1] ** 3)[:, None]
        sc = box_scenario(prm, make_model(n=2, p=2.0), constant_forcing(0.0), bc,
                          ((0, 1), (0, 1)), u0=lambda X: bc(X, 0))
        traj, cyl = still(sc), Cylinder((0.5, 0.5), 0.0, 0.45)
        a = holder_seminorm(traj, 0.05, cyl, 0.5, 3000, seed=1)
        assert a > 0
        assert a == holder_seminorm(traj, 0.05, cyl, 0.5, 3000, seed=1)
        # all pair distances are below one, so a larger alpha gives larger quotients
        assert holder_seminorm(traj, 0.05, cyl, 0.8, 3000, seed=1) >= a

    def test_holder_order(self):
        sc = linear(eps=0.02, delta=0.05, res=16)
        with pytest.raises(TruncationOrder):
            holder_seminorm(still(sc), 0.05, Cylinder((0.5, 0.5), 0.0, 0.4))

    def test_superlevel_ratio(self):
        sc = linear((0.3, -0.4), res=16)
        cyl = Cylinder((0.5, 0.5), 0.0, 0.4)
        m, ratio, above = superlevel_measure(still(sc), cyl, 1.0, 0.5, 0.05)
        assert ratio == 0.0 and m == 0.0 and above
        m, ratio, above = superlevel_measure(still(sc), cyl, 0.1, 0.5, 0.05)
        assert ratio == pytest.approx(1.0) and above

    def test_cylinder_checks(self):
        traj = still(linear(res=8))
        with pytest.raises(CylinderOutOfDomain):
            sup_v_eps(traj, Cylinder((0.5, 0.5), 0.0, 0.1))
        with pytest.raises(CylinderOutOfDomain):
            sup_v_eps(traj, Cylinder((0.8, 0.5), 0.0, 0.4))
        sc = linear(res=8)
        timed = run(sc, SolverConfig())
        with pytest.raises(CylinderOutOfDomain):
            sup_v_eps(timed, Cylinder((0.5, 0.5), 0.3, 0.6))
        assert sup_v_eps(timed, Cylinder((0.5, 0.5), 0.3, 0.5)) == pytest.approx(
            math.sqrt(1e-6 + 0.25), rel=1e-8)


class TestReport:
    def test_round_trip(self):
        rep = DiagnosticsReport(provenance={"seed": 0})
        rep.add("a", np.float64(1.5), threshold=2.0, passed=True)
        rep.add("b", float("inf"))
        back = DiagnosticsReport.from_json(rep.to_json())
        assert back.entries == rep.entries and back.passed
        assert back["b"]["value"] is None

    def test_verdict_needs_threshold(self):
        with pytest.raises(DomainError):
            DiagnosticsReport().add("x", 1.0, passed=True)

    def test_failure_propagates(self):
        rep = DiagnosticsReport().add("x", 3.0, threshold=2.0, passed=False)
        assert not rep.passed


class TestMaxPrinciple:
    def test_constant_data(self):
        sc = scenario_constant(1.5, p=1.5, tau=0.1, t_end=0.3)
        traj = run(sc, SolverConfig())
        entries = max_principle_check(traj)
        assert all(e["pass"] for e in entries)

    def test_forced_is_report_only(self):
        sc = linear()
        sc = sc.__class__(**{**sc.__dict__, "forcing": constant_forcing(1.0), "_mesh": {}})
        entries = max_principle_check(still(sc))
        assert entries[0]["pass"] is None


class TestStudies:
    def test_eps_study_heat_is_exact(self):
        sc = linear(a1=0.0, res=6, t_end=0.2)
        table = eps_convergence_study(sc, SolverConfig(), [0.1, 0.05, 0.025])
        assert [r["grad_diff"] for r in table["rows"]] == [0.0, 0.0]
        assert table["cauchy"]

    def test_eps_study_needs_three(self):
        with pytest.raises(DomainError):
            eps_convergence_study(linear(), SolverConfig(), [0.1])
        with pytest.raises(DomainError):
            eps_convergence_study(linear(), SolverConfig(), [0.1, 0.2, 0.05])

    def test_stability_identical(self):
        out = stability_check((linear(), linear()), SolverConfig())
        assert out["trivial_pass"]

    def test_stability_shift(self):
        out = stability_check((linear(p=2.0, a1=0.0), linear(p=2.0, a1=0.0, c=0.25)),
                              SolverConfig(inner_tol=1e-13))
        assert out["grad_lp"] <= 1e-10
        assert out["boundary_sup"] == pytest.approx(0.25)
        assert out["sup_l2"] == pytest.approx(0.25, rel=1e-9)

    def test_mismatched(self):
        with pytest.raises(MismatchedDiscretization):
            stability_check((linear(res=8), linear(res=6)), SolverConfig())
        a, b = run(linear(res=8), SolverConfig()), run(linear(res=6), SolverConfig())
        with pytest.raises(MismatchedDiscretization):
            gradient_distance(a, b, 2.0)

    def test_delta_sweep(self):
        traj = still(linear((0.3, -0.4), eps=1e-3))
        with pytest.raises(DomainError):
            delta_sweep(traj, [])
        rows = delta_sweep(traj, [0.1, 0.05])
        for r in rows:
            assert r["pass"]
            assert r["dist_limit"] == pytest.approx(2 * r["delta"], rel=1e-12)
