import math

import numpy as np
import pytest

from hporacle import driver
from hporacle.dataset import NONE
from hporacle.mesh import Kind, Refinement, audit, create_initial_mesh, refine_element, uniform_refine
from hporacle.assemble import Solution

from manufactured import affine_problem, affine_seminorm


def mesh_state(mesh):
    return [(K.id, K.bounds, K.orders) for K in mesh.active_elements()]


def test_immediate_stop(problem):
    r = driver.self_adaptive_loop(driver.AdaptConfig(accuracy=1e9), problem)
    assert len(r.convergence) == 1 and r.dataset == [] and r.decisions == [{}]
    assert len(r.mesh) == 3 and r.convergence[0].iteration == 1


def test_twenty_iterations_grow(adaptive_run):
    conv = adaptive_run["result"].convergence
    assert [c.iteration for c in conv] == list(range(1, 21))
    n = [c.ndof_coarse for c in conv]
    assert all(a < b for a, b in zip(n, n[1:]))
    assert all(c.ndof_fine > c.ndof_coarse for c in conv)
    # the first adaptive step lowers the estimated error
    assert 0 < conv[1].max_rel_error < conv[0].max_rel_error


def test_dataset_covers_every_active_element(adaptive_run):
    r = adaptive_run["result"]
    assert len(r.dataset) == sum(len(d) for d in r.decisions) + sum(
        1 for rec in r.dataset if rec.href == NONE and rec.sons[0] == rec.orders)
    assert {rec.href for rec in r.dataset} >= {0, 1, 2}


def test_energy_identities(problem):
    mesh = create_initial_mesh(2)
    refine_element(mesh, 1, Refinement.isotropic((3, 2)))
    d = driver.solve_problem(mesh, problem)
    e = driver.energy(d.solution, d.system)
    load = float(d.system.load @ d.solution.x)
    assert e == pytest.approx(math.sqrt(load), rel=1e-8)
    # Galerkin orthogonality: a(u_h, u_h) = l(u_h) on the free block too
    x = d.solution.free
    assert float(x @ (d.system.matrix @ x)) == pytest.approx(float(d.system.rhs @ x), rel=1e-10)
    zero = Solution(mesh, d.dofmap, np.zeros(d.ndof))
    assert driver.energy(zero, d.system) == 0.0


def test_h1_seminorm_and_exact_error(problem):
    assert problem.h1_seminorm == pytest.approx(driver.lshape_h1_seminorm(12, 4), rel=1e-13)
    mesh = create_initial_mesh(2)
    d = driver.solve_problem(mesh, problem)
    zero = Solution(mesh, d.dofmap, np.zeros(d.ndof))
    assert driver.exact_h1_error(zero, problem) == pytest.approx(100.0, rel=1e-6)
    assert 0 < driver.exact_h1_error(d.solution, problem) < 100


def test_affine_solution_is_exact_everywhere():
    problem = affine_problem(-0.5, 2.0, 1.0)
    mesh = create_initial_mesh(2)
    refine_element(mesh, 1, Refinement(Kind.H_Y, ((2, 2), (3, 2))))
    fm, sons = uniform_refine(mesh)
    c, f = driver.solve_problem(mesh, problem), driver.solve_problem(fm, problem)
    assert driver.max_rel_error(c.solution, f.solution, sons) <= 1e-10
    assert driver.exact_h1_error(c.solution, problem, norm=affine_seminorm(2.0, 1.0)) <= 1e-8


def test_max_rel_error_is_homogeneous(problem):
    mesh = create_initial_mesh(2)
    fm, sons = uniform_refine(mesh)
    c, f = driver.solve_problem(mesh, problem), driver.solve_problem(fm, problem)
    a = driver.max_rel_error(c.solution, f.solution, sons)
    b = driver.max_rel_error(c.solution.scaled(3.0), f.solution.scaled(3.0), sons)
    assert a > 0 and b == pytest.approx(a, rel=1e-12)
    with pytest.raises(driver.AdaptError):
        driver.max_rel_error(c.solution.scaled(0.0), f.solution.scaled(0.0), sons)


def test_replay_reproduces_adaptive_meshes(problem):
    snaps = []
    config = driver.AdaptConfig(max_iterations=6, accuracy=0.0)
    r = driver.self_adaptive_loop(config, problem, on_iteration=lambda k, m, _: snaps.append(mesh_state(m)))
    replayed = []
    d = driver.dnn_driven_loop(config, problem, driver.replay_oracle(r.decisions),
                               on_iteration=lambda k, m, _: replayed.append(mesh_state(m)))
    assert replayed == snaps
    for a, b in zip(r.convergence, d.convergence):
        assert (a.iteration, a.ndof_coarse) == (b.iteration, b.ndof_coarse)
        assert a.energy_coarse == b.energy_coarse and a.exact_error == b.exact_error
        assert (b.ndof_fine, b.energy_fine, b.max_rel_error) == (0, 0.0, 0.0)


def test_none_oracle_and_zero_iterations(problem):
    mesh = create_initial_mesh(3)
    refine_element(mesh, 1, Refinement.isotropic((3, 3)))
    before = mesh_state(mesh)
    never = lambda actives, m: [None] * len(actives)  # noqa: E731
    r = driver.dnn_driven_loop(driver.AdaptConfig(max_iterations=4), problem, never, mesh=mesh)
    assert mesh_state(r.mesh) == before and len(r.convergence) == 4
    assert len({c.exact_error for c in r.convergence}) == 1
    r = driver.dnn_driven_loop(driver.AdaptConfig(max_iterations=0), problem, never, mesh=mesh)
    assert r.convergence == [] and mesh_state(r.mesh) == before


def test_solver_free_dnn_loop(problem):
    pref = lambda actives, m: [Refinement(Kind.P_REF, ((K.orders[0] + 1, K.orders[1]),)) for K in actives]  # noqa: E731
    r = driver.dnn_driven_loop(driver.AdaptConfig(max_iterations=2), problem, pref, solve_each=False)
    solved = driver.dnn_driven_loop(driver.AdaptConfig(max_iterations=2), problem, pref)
    assert [(c.energy_coarse, c.exact_error) for c in r.convergence] == [(0.0, 0.0)] * 2
    assert [c.ndof_coarse for c in r.convergence] == [c.ndof_coarse for c in solved.convergence] == [16, 23]
    assert {K.orders for K in r.mesh.active_elements()} == {(4, 2)}


def test_decision_on_element_split_by_closure():
    mesh = create_initial_mesh(2)
    refine_element(mesh, 1, Refinement.isotropic((2, 2)))
    corner = [K.id for K in mesh.active_elements() if K.bounds[:2] == (0.0, 0.0)][0]
    # refining the corner son splits element 0 first; its own decision then lands on its leaves
    decisions = {corner: Refinement.isotropic((2, 2)), 0: Refinement(Kind.H_X, ((3, 2), (2, 4)))}
    driver.apply_refinements(mesh, decisions)
    assert audit(mesh) == []
    leaves = [K for K in mesh.active_elements() if K.bounds[2] <= 0.0]
    assert all(K.orders == ((3, 2) if K.center[0] < -0.5 else (2, 4)) for K in leaves)


def test_convergence_fit():
    n = np.arange(1, 8) ** 3 * 10
    e = np.exp(-2 * np.cbrt(n))
    slope, _, r2 = driver.convergence_fit(n, e)
    assert r2 == pytest.approx(1.0, abs=1e-12) and slope == pytest.approx(-2 / math.log(10))
    assert driver.convergence_fit([10, 20], [1.0, 0.5]) is None
    assert driver.convergence_fit([10, 10, 10], [1.0, 0.5, 0.2]) is None
    assert driver.convergence_fit([10, 20, 30, 40], [1.0, 0.0, 0.5, 0.0]) is None


def test_convergence_file_round_trip(tmp_path, adaptive_run):
    conv = adaptive_run["result"].convergence
    path = tmp_path / "c.csv"
    driver.write_convergence(conv, path)
    assert driver.read_convergence(path) == conv
    path.write_text(",".join(driver.CONVERGENCE_HEADER) + "\n1,2,3\n")
    with pytest.raises(ValueError, match=r"c\.csv:2"):
        driver.read_convergence(path)


@pytest.mark.parametrize("kw", [dict(max_iterations=-1), dict(accuracy=-1), dict(threshold=1.5),
                                dict(initial_order=9), dict(initial_order=0), dict(max_order=9)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        driver.AdaptConfig(**kw)
