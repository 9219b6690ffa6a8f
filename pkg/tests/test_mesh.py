import numpy as np
import pytest

from hporacle.mesh import (LSHAPE, MAX_ORDER, UNIT_SQUARE, Kind, Mesh, MeshError, Refinement, audit,
                           create_initial_mesh, read_snapshot, refine_element, uniform_refine, write_snapshot)


def random_refinement(rng, K):
    kind = Kind(int(rng.integers(4)))
    n = {Kind.P_REF: 1, Kind.H_X: 2, Kind.H_Y: 2, Kind.H_XY: 4}[kind]
    orders = tuple((min(K.orders[0] + int(rng.integers(2)), MAX_ORDER),
                    min(K.orders[1] + int(rng.integers(2)), MAX_ORDER)) for _ in range(n))
    return Refinement(kind, orders)


def random_mesh(seed, n_refinements, p0=2, max_elements=None):
    rng = np.random.default_rng(seed)
    mesh = create_initial_mesh(p0)
    for _ in range(n_refinements):
        acts = mesh.active_elements()
        K = acts[int(rng.integers(len(acts)))]
        refine_element(mesh, K.id, random_refinement(rng, K))
        if max_elements and len(mesh) >= max_elements:
            break
    return mesh


def test_initial_mesh_examples():
    mesh = create_initial_mesh(2)
    assert len(mesh) == 3
    assert sum(K.area for K in mesh.active_elements()) == 3.0
    topo = mesh.topology()
    assert set(topo.order.values()) == {2}
    assert audit(mesh) == []
    with pytest.raises(ValueError):
        create_initial_mesh(10)


def test_refine_examples():
    mesh = create_initial_mesh(2)
    refine_element(mesh, 0, Refinement.isotropic((2, 2)))
    assert len(mesh) == 6
    mesh = create_initial_mesh(2)
    refine_element(mesh, 1, Refinement(Kind.P_REF, ((3, 3),)))
    assert len(mesh) == 3 and mesh.elements[1].orders == (3, 3)


def test_closure_refines_coarser_neighbour():
    mesh = create_initial_mesh(2)
    refine_element(mesh, 1, Refinement.isotropic((2, 2)))
    sw = [K for K in mesh.active_elements() if K.bounds[:2] == (0.0, 0.0)][0]
    before = set(mesh.active_ids())
    refine_element(mesh, sw.id, Refinement.isotropic((2, 2)))
    # both level-0 neighbours of the corner son had to be split first
    assert not mesh.elements[0].active and not mesh.elements[2].active
    assert set(mesh.active_ids()) - before
    assert audit(mesh) == []


def test_refine_errors():
    mesh = create_initial_mesh(3)
    with pytest.raises(MeshError):
        refine_element(mesh, 99, Refinement(Kind.P_REF, ((3, 3),)))
    with pytest.raises(ValueError):
        refine_element(mesh, 0, Refinement(Kind.P_REF, ((2, 3),)))
    refine_element(mesh, 0, Refinement.isotropic((3, 3)))
    with pytest.raises(MeshError):
        refine_element(mesh, 0, Refinement(Kind.P_REF, ((4, 4),)))
    with pytest.raises(ValueError):
        Refinement(Kind.H_X, ((2, 2),))
    with pytest.raises(ValueError):
        Refinement(Kind.P_REF, ((10, 2),))


def test_uniform_refine_examples():
    fine, sons = uniform_refine(create_initial_mesh(2))
    assert len(fine) == 12
    assert {K.orders for K in fine.active_elements()} == {(3, 3)}
    assert all(len(s) == 4 for s in sons.values())
    mesh = create_initial_mesh(2)
    refine_element(mesh, 0, Refinement(Kind.P_REF, ((9, 2),)))
    with pytest.raises(ValueError):
        uniform_refine(mesh)


def test_uniform_refine_keeps_random_mesh_regular():
    mesh = random_mesh(3, 40, p0=1)
    fine, _ = uniform_refine(mesh)
    assert audit(fine) == []
    assert len(fine) == 4 * len(mesh)


def test_audit_names_two_irregular_edge():
    mesh = Mesh(UNIT_SQUARE)
    mesh.add_element((0, 0, 0.5, 1), (2, 2))
    for k in range(4):
        mesh.add_element((0.5, k / 4, 1, (k + 1) / 4), (2, 2))
    report = audit(mesh)
    assert len(report) == 1
    assert "v 0.5 [0, 1]" in report[0] and "more than once" in report[0]


def test_audit_detects_overlap_and_gap():
    mesh = Mesh(UNIT_SQUARE)
    mesh.add_element((0, 0, 1, 1), (2, 2))
    mesh.add_element((0, 0, 0.5, 0.5), (2, 2))
    assert any("overlap" in v for v in audit(mesh))
    mesh = Mesh(UNIT_SQUARE)
    mesh.add_element((0, 0, 0.5, 1), (2, 2))
    assert any("area" in v for v in audit(mesh))


def test_thousand_random_refinements_stay_regular():
    rng = np.random.default_rng(2024)
    mesh = create_initial_mesh(1)
    for step in range(1000):
        acts = mesh.active_elements()
        # bias towards coarse elements so the tree stays a desk-sized mesh
        if rng.random() < 0.5:
            low = min(K.level for K in acts)
            acts = [K for K in acts if K.level == low]
        K = acts[int(rng.integers(len(acts)))]
        kind_p = rng.random() < 0.5
        r = Refinement(Kind.P_REF, ((min(K.orders[0] + 1, 9), min(K.orders[1] + 1, 9)),)) if kind_p \
            else random_refinement(rng, K)
        refine_element(mesh, K.id, r)
        if step % 100 == 99:
            assert audit(mesh) == []
    assert audit(mesh) == []


def test_neighbor_relations():
    mesh = create_initial_mesh(2)
    refine_element(mesh, 1, Refinement.isotropic((2, 2)))
    # element 0 sees the two west sons of element 1 across its east side
    east = mesh.neighbors(0, 1)
    assert [r for _, r in east] == ["smaller", "smaller"]
    son = east[0][0]
    assert mesh.neighbors(son, 3) == [(0, "larger")]


def test_snapshot_round_trip(tmp_path):
    mesh = random_mesh(5, 30)
    path = tmp_path / "mesh.txt"
    write_snapshot(mesh, path)
    back = read_snapshot(path, LSHAPE)
    assert [(K.id, K.bounds, K.orders, K.level) for K in back.active_elements()] == \
        [(K.id, K.bounds, K.orders, K.level) for K in mesh.active_elements()]
    assert audit(back) == []
    write_snapshot(back, tmp_path / "again.txt")
    assert (tmp_path / "again.txt").read_bytes() == path.read_bytes()
    (tmp_path / "bad.txt").write_text("1 2 3\n")
    with pytest.raises(MeshError, match="bad.txt:1"):
        read_snapshot(tmp_path / "bad.txt")


def test_copy_is_independent():
    mesh = create_initial_mesh(2)
    other = mesh.copy()
    refine_element(other, 0, Refinement.isotropic((2, 2)))
    assert len(mesh) == 3 and len(other) == 6
