import numpy as np
import pytest

from onepflow.bench import box_scenario, scenario_constant, scenario_radial_steady
from onepflow.errors import ConvergenceFailure, DomainError, StagnationFailure
from onepflow.model import Parameters, constant_forcing, make_model
from onepflow.solver import (SolverConfig, discrete_energy, implicit_step, run, solve_step,
                             solve_steady, steady_state)


def zero(X, t):
    return np.zeros((len(X), 1))


def bump_1d():
    prm = Parameters(p=2.0, n=1, resolution=2, tau=0.25, eps=1e-3)
    model = make_model(n=1, p=2.0, a1=0.0)
    u0 = lambda X: (np.abs(X[:, 0] - 0.5) < 1e-12).astype(float)[:, None]
    return box_scenario(prm, model, constant_forcing(0.0), zero, ((0, 1),), u0=u0)


def heat_1d(res=8, f=1.0):
    prm = Parameters(p=2.0, n=1, resolution=res, tau=1e3, eps=1e-3)
    return box_scenario(prm, make_model(n=1, p=2.0, a1=0.0), constant_forcing(f), zero, ((0, 1),))


def scalar_2d(p=1.5, res=12, a1=1.0, tau=0.05, t_end=0.5, gamma="identity-gamma"):
    prm = Parameters(p=p, n=2, resolution=res, tau=tau, t_end=t_end, eps=1e-2)
    model = make_model(n=2, p=p, a1=a1, gamma=gamma)

    def bc(X, t):
        return X[:, :1].copy()
    u0 = lambda X: (X[:, 0] + 1.4 * np.sin(np.pi * X[:, 0]) * np.sin(np.pi * X[:, 1]))[:, None]
    return box_scenario(prm, model, constant_forcing(0.0), bc, ((0, 1), (0, 1)), u0=u0)


def test_config_validation():
    with pytest.raises(DomainError):
        SolverConfig(damping=0.0)
    with pytest.raises(DomainError):
        SolverConfig(mode="newton")
    with pytest.raises(DomainError):
        SolverConfig(inner_tol=0.0)


def test_one_step_value():
    info = solve_step(bump_1d().initial_field(), bump_1d(), SolverConfig())
    assert info.field.values[1, 0] == pytest.approx(1 / 3, abs=1e-14)
    assert info.iterations == 1
    assert info.field.time == 0.25


def test_linear_problem_single_iteration():
    sc = scalar_2d(p=2.0, a1=0.0)
    assert solve_step(sc.initial_field(), sc, SolverConfig()).iterations == 1


def test_constant_preserved():
    sc = scenario_constant(2.5, p=1.5)
    u = implicit_step(sc.initial_field(), sc, SolverConfig())
    assert np.all(u.values == 2.5)


def test_heat_steady_profile():
    sc = heat_1d()
    u = steady_state(sc, SolverConfig(steady_tol=1e-9))
    x = sc.mesh.nodes[:, 0]
    np.testing.assert_allclose(u.values[:, 0], x * (1 - x) / 2, atol=1e-10)


def test_zero_steps():
    sc = scenario_constant(1.0, t_end=0.0)
    traj = run(sc, SolverConfig())
    assert len(traj.states) == 1 and traj.records == []


def test_constant_run_checkpoints(tmp_path):
    sc = scenario_constant(1.0, p=3.0)
    traj = run(sc, SolverConfig(), checkpoint_dir=tmp_path)
    assert len(traj.states) == 11
    assert all(np.array_equal(s.values, traj.states[0].values) for s in traj.states)
    blobs = {p.read_bytes()[-8 * sc.mesh.n_nodes:] for p in tmp_path.glob("*.ckpt")}
    assert len(blobs) == 1
    traj.write_log(tmp_path / "log.csv")
    head = (tmp_path / "log.csv").read_text().splitlines()[0]
    assert head == "step,t,inner_iters,residual,energy,sup_v_eps"


def test_partial_final_step_and_stride():
    sc = scenario_constant(1.0, tau=0.1, t_end=0.25)
    traj = run(sc, SolverConfig(checkpoint_stride=2))
    np.testing.assert_allclose([r.t for r in traj.records], [0.1, 0.2, 0.25])
    assert traj.steps == [0, 2, 3]


@pytest.mark.parametrize("p", [1.5, 3.0])
def test_descent_and_residual(p):
    sc = scalar_2d(p=p)
    info = solve_step(sc.initial_field(), sc, SolverConfig())
    J = np.array(info.functional)
    assert np.all(np.diff(J) <= 1e-10 * np.abs(J[:-1]))
    assert info.residual <= 1e-8


def test_energy_dissipation():
    sc = scalar_2d(p=1.5)
    traj = run(sc, SolverConfig())
    E = [discrete_energy(sc, s) for s in traj.states]
    assert all(b <= a * (1 + 1e-10) for a, b in zip(E[:-1], E[1:]))


def test_discrete_max_principle():
    sc = scalar_2d(p=1.5, gamma="diag-gamma(2, 0.5)")
    traj = run(sc, SolverConfig())
    hi = max(1.0, traj.states[0].values.max())
    for s in traj.states[1:]:
        assert s.values.min() >= -1e-8 and s.values.max() <= hi + 1e-8


def test_deterministic():
    a = run(scalar_2d(p=1.5), SolverConfig())
    b = run(scalar_2d(p=1.5), SolverConfig())
    for x, y in zip(a.states, b.states):
        assert np.array_equal(x.values, y.values)


def test_modes_and_linear_solvers_agree():
    sc = scalar_2d(p=3.0, t_end=0.1)
    ref = run(sc, SolverConfig(inner_tol=1e-11)).final.values
    for cfg in (SolverConfig(inner_tol=1e-11, mode="newton-after-kacanov"),
                SolverConfig(inner_tol=1e-11, linear_solver="cg", linear_tol=1e-13)):
        np.testing.assert_allclose(run(sc, cfg).final.values, ref, atol=1e-8)


def test_system_newton():
    prm = Parameters(p=1.5, n=2, N=2, resolution=8, tau=0.1, t_end=0.2, eps=1e-2)
    model = make_model(n=2, p=1.5)

    def bc(X, t):
        return np.stack([X[:, 0], X[:, 1] ** 2], axis=1)
    sc = box_scenario(prm, model, constant_forcing([1.0, -1.0], 2), bc, ((0, 1), (0, 1)))
    a = run(sc, SolverConfig(inner_tol=1e-10)).final.values
    b = run(sc, SolverConfig(inner_tol=1e-10, mode="newton-after-kacanov")).final.values
    np.testing.assert_allclose(a, b, atol=1e-7)


def test_failures():
    sc = scalar_2d(p=1.5)
    with pytest.raises(ConvergenceFailure) as exc:
        run(sc, SolverConfig(max_inner=1))
    assert exc.value.trajectory.complete is False
    with pytest.raises(StagnationFailure):
        solve_steady(scenario_radial_steady(resolution=8), SolverConfig(max_steps=1))


def test_scenario_contracts():
    prm = Parameters(n=1, resolution=4)
    with pytest.raises(DomainError):
        box_scenario(prm, make_model(n=1), constant_forcing(0.0), zero, ((0, 1),),
                     u0=lambda X: np.ones((len(X), 1)))
    a = scenario_radial_steady(resolution=8)
    b = scenario_radial_steady(resolution=8)
    assert a.hash == b.hash
    assert a.hash != scenario_radial_steady(resolution=16).hash


def test_radial_steady_coarse():
    sc = scenario_radial_steady(resolution=16)
    res = solve_steady(sc, SolverConfig(mode="newton-after-kacanov"))
    assert res.increment <= 1e-7
    assert res.steps < 50
