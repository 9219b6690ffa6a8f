"""Global DOF numbering with hanging-node constraints and stiffness assembly.

Global "entities" carry the DOFs:

* ``("v", x, y)``      a vertex,
* ``("e", seg, k)``    mode ``k >= 2`` of a master edge segment,
* ``("s", seg, k)``    mode ``k`` of a constrained half-edge (never a DOF),
* ``("i", eid, i, j)`` an interior function.

A vertex sitting at the midpoint of a master edge is hanging: its value and
the modes of both half-edges are re-expanded exactly from the master trace.
Free DOFs are numbered ``0..N-1``; Dirichlet DOFs follow as ``N..N+ND-1`` so
element maps can refer to both with one index space.
"""
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .mesh import EAST, NORTH, SOUTH, WEST, MeshError, segment_endpoints, segment_midpoint, side_key
from .shape import gauss_rule, mass_1d, restriction_1d, shape_values, stiffness_1d

NORMALS = {SOUTH: (0.0, -1.0), EAST: (1.0, 0.0), NORTH: (0.0, 1.0), WEST: (-1.0, 0.0)}


@dataclass
class Problem:
    """Laplace problem data.

    ``dirichlet(x, y)`` tells whether a boundary point belongs to the Dirichlet
    part; every other boundary point is Neumann with flux
    ``flux(x, y, nx, ny)``.
    """

    dirichlet: Callable
    flux: Optional[Callable] = None
    dirichlet_value: Optional[Callable] = None
    exact: Optional[Callable] = None
    exact_grad: Optional[Callable] = None


def no_boundary_conditions():
    return Problem(dirichlet=lambda x, y: False)


def side_points(bounds, side, t):
    x1, y1, x2, y2 = bounds
    if side == SOUTH:
        return x1 + t * (x2 - x1), np.full_like(t, y1)
    if side == NORTH:
        return x1 + t * (x2 - x1), np.full_like(t, y2)
    if side == WEST:
        return np.full_like(t, x1), y1 + t * (y2 - y1)
    return np.full_like(t, x2), y1 + t * (y2 - y1)


def side_functions(orders, side):
    """Flat local indices of the tensor functions whose trace lives on ``side``."""
    px, py = orders
    if side == SOUTH:
        return [i * (py + 1) for i in range(px + 1)]
    if side == NORTH:
        return [i * (py + 1) + 1 for i in range(px + 1)]
    if side == WEST:
        return list(range(py + 1))
    return [(py + 1) + j for j in range(py + 1)]


@dataclass
class LocalMap:
    flat: np.ndarray  # local tensor indices present in the element space
    cols: np.ndarray  # global (free or Dirichlet) indices touched
    C: np.ndarray  # (len(flat), len(cols)) expansion coefficients


class DofMap:
    def __init__(self, mesh, problem):
        self.mesh = mesh
        self.topology = topo = mesh.topology()
        self.problem = problem
        actives = mesh.active_elements()

        self.dirichlet_groups = set()
        for K in actives:
            for s, info in enumerate(topo.sides[K.id]):
                if info.relation == "boundary":
                    mx, my = segment_midpoint(info.group)
                    if problem.dirichlet(mx, my):
                        self.dirichlet_groups.add(info.group)
        self.dirichlet_vertices = {pt for g in self.dirichlet_groups for pt in segment_endpoints(g)}

        entities = {}
        for K in actives:
            px, py = K.orders
            flat, ents = [], []
            for i in range(px + 1):
                for j in range(py + 1):
                    ent = self._entity(K, i, j)
                    if ent is not None:
                        flat.append(i * (py + 1) + j)
                        ents.append(ent)
            entities[K.id] = (np.array(flat, dtype=int), ents)

        free, dirichlet = {}, {}
        for K in actives:
            for ent in entities[K.id][1]:
                if self._constrained(ent) or ent in free or ent in dirichlet:
                    continue
                if self._is_dirichlet(ent):
                    dirichlet[ent] = len(dirichlet)
                else:
                    free[ent] = len(free)
        self.n_free = n = len(free)
        self.n_dirichlet = len(dirichlet)
        self.index = dict(free)
        self.index.update({e: n + d for e, d in dirichlet.items()})
        self.dirichlet_values = self._dirichlet_values(dirichlet)

        self.constraints = {}
        self._memo = {}
        self.local = {}
        for K in actives:
            flat, ents = entities[K.id]
            rows = [self.expand(e) for e in ents]
            cols = sorted({g for r in rows for g in r})
            pos = {g: c for c, g in enumerate(cols)}
            C = np.zeros((len(flat), len(cols)))
            for r, row in enumerate(rows):
                for g, v in row.items():
                    C[r, pos[g]] = v
            self.local[K.id] = LocalMap(flat, np.array(cols, dtype=int), C)

    @property
    def n_total(self):
        return self.n_free + self.n_dirichlet

    # -- entity classification --------------------------------------------

    def _entity(self, K, i, j):
        topo = self.topology
        x1, y1, x2, y2 = K.bounds
        if i < 2 and j < 2:
            return ("v", x1 if i == 0 else x2, y1 if j == 0 else y2)
        if i >= 2 and j >= 2:
            return ("i", K.id, i, j)
        if j < 2:
            side, k = (SOUTH if j == 0 else NORTH), i
        else:
            side, k = (WEST if i == 0 else EAST), j
        if k > topo.side_order(K.id, side):
            return None
        info = topo.sides[K.id][side]
        if info.relation == "slave":
            return ("s", side_key(K.bounds, side), k, info.group, info.half)
        return ("e", info.group, k)

    def _constrained(self, ent):
        return ent[0] == "s" or (ent[0] == "v" and (ent[1], ent[2]) in self.topology.hanging)

    def _is_dirichlet(self, ent):
        if ent[0] == "v":
            return (ent[1], ent[2]) in self.dirichlet_vertices
        return ent[0] == "e" and ent[1] in self.dirichlet_groups

    def _masters(self, group):
        q = self.topology.order[group]
        lo, hi = segment_endpoints(group)
        return q, [("v",) + lo, ("v",) + hi] + [("e", group, k) for k in range(2, q + 1)]

    def expand(self, ent):
        """Entity as a combination ``{global index: coefficient}`` of DOFs."""
        if ent in self.index:
            return {self.index[ent]: 1.0}
        if ent in self._memo:
            return self._memo[ent]
        if ent[0] == "v":
            group = self.topology.hanging[(ent[1], ent[2])]
            q, masters = self._masters(group)
            coef = restriction_1d(q, q, 0)[1]
        elif ent[0] == "s":
            _, _, k, group, half = ent
            q, masters = self._masters(group)
            coef = restriction_1d(q, q, half)[k]
        else:
            raise KeyError(f"entity {ent} carries no DOF")
        out = {}
        for c, m in zip(coef, masters):
            if c == 0.0:
                continue
            for g, v in self.expand(m).items():
                out[g] = out.get(g, 0.0) + c * v
        self._memo[ent] = out
        key = ent if ent[0] == "v" else ent[:3]
        self.constraints[key] = sorted(out.items())
        return out

    def vertex_constraint(self, x, y):
        """Constraint list of a hanging vertex (None for a regular vertex)."""
        ent = ("v", x, y)
        if not self._constrained(ent):
            return None
        self.expand(ent)
        return self.constraints[ent]

    def _dirichlet_values(self, dirichlet):
        vals = np.zeros(len(dirichlet))
        g = self.problem.dirichlet_value
        if g is None:
            return vals
        for ent, d in dirichlet.items():
            if ent[0] == "v":
                vals[d] = g(ent[1], ent[2])
        for group in self.dirichlet_groups:
            q = self.topology.order[group]
            if q < 2:
                continue
            r = gauss_rule(min(q + 4, 16))
            (ax, ay), (bx, by) = segment_endpoints(group)
            xs, ys = ax + r.nodes * (bx - ax), ay + r.nodes * (by - ay)
            gv = np.array([g(x, y) for x, y in zip(xs, ys)])
            resid = gv - (g(ax, ay) * (1 - r.nodes) + g(bx, by) * r.nodes)
            v, _ = shape_values(q, r.nodes)
            B = v[2:].T * np.sqrt(r.weights)[:, None]
            c, *_ = np.linalg.lstsq(B, resid * np.sqrt(r.weights), rcond=None)
            for k in range(2, q + 1):
                vals[dirichlet[("e", group, k)]] = c[k - 2]
        return vals


def build_dof_map(mesh, problem):
    return DofMap(mesh, problem)


# -- assembly -----------------------------------------------------------------

def element_stiffness(bounds, orders):
    """Tensor stiffness ``int grad phi_a . grad phi_b`` over a rectangle."""
    a, b = bounds[2] - bounds[0], bounds[3] - bounds[1]
    if not (a > 0 and b > 0):
        raise MeshError(f"singular element geometry {bounds}")
    px, py = orders
    return (b / a) * np.kron(stiffness_1d(px), mass_1d(py)) + (a / b) * np.kron(mass_1d(px), stiffness_1d(py))


def element_mass(bounds, orders):
    a, b = bounds[2] - bounds[0], bounds[3] - bounds[1]
    return a * b * np.kron(mass_1d(orders[0]), mass_1d(orders[1]))


@dataclass
class SparseSystem:
    matrix: sp.csr_matrix  # free-free block
    rhs: np.ndarray
    full: sp.csr_matrix = field(repr=False, default=None)  # before Dirichlet elimination
    load: np.ndarray = field(repr=False, default=None)

    @property
    def n(self):
        return self.matrix.shape[0]


def _neumann_load(K, problem, topo, dofmap):
    px, py = K.orders
    f = np.zeros((px + 1) * (py + 1))
    if problem.flux is None:
        return f
    for s, info in enumerate(topo.sides[K.id]):
        if info.relation != "boundary" or info.group in dofmap.dirichlet_groups:
            continue
        p = K.side_order(s)
        r = gauss_rule(min(p + 4, 16))
        xs, ys = side_points(K.bounds, s, r.nodes)
        nx, ny = NORMALS[s]
        g = np.array([problem.flux(x, y, nx, ny) for x, y in zip(xs, ys)])
        L = K.dx if s in (SOUTH, NORTH) else K.dy
        v, _ = shape_values(p, r.nodes)
        f[side_functions(K.orders, s)] += L * (v @ (r.weights * g))
    return f


def assemble_system(mesh, dofmap, problem):
    topo = dofmap.topology
    rows, cols, vals = [], [], []
    load = np.zeros(dofmap.n_total)
    for K in mesh.active_elements():
        lm = dofmap.local[K.id]
        Ke = element_stiffness(K.bounds, K.orders)[np.ix_(lm.flat, lm.flat)]
        Kg = lm.C.T @ Ke @ lm.C
        fe = _neumann_load(K, problem, topo, dofmap)[lm.flat]
        load[lm.cols] += lm.C.T @ fe
        r, c = np.meshgrid(lm.cols, lm.cols, indexing="ij")
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(Kg.ravel())
    n, nt = dofmap.n_free, dofmap.n_total
    A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nt, nt)).tocsr()
    A = 0.5 * (A + A.T)
    A_ff = A[:n, :n].tocsr()
    rhs = load[:n] - A[:n, n:] @ dofmap.dirichlet_values
    return SparseSystem(A_ff, rhs, full=A, load=load)


# -- solutions ------------------------------------------------------------------

class Solution:
    """Discrete field: free coefficients plus Dirichlet values."""

    def __init__(self, mesh, dofmap, free):
        self.mesh = mesh
        self.dofmap = dofmap
        free = np.asarray(free, dtype=float)
        if free.shape != (dofmap.n_free,):
            raise ValueError(f"expected {dofmap.n_free} coefficients, got {free.shape}")
        self.free = free
        self.x = np.concatenate([free, dofmap.dirichlet_values])

    def scaled(self, c):
        out = Solution(self.mesh, self.dofmap, c * self.free)
        out.x = c * self.x
        return out

    def local(self, eid):
        """Element coefficient matrix of shape ``(px + 1, py + 1)``."""
        K = self.mesh.elements[eid]
        lm = self.dofmap.local[eid]
        u = np.zeros((K.orders[0] + 1) * (K.orders[1] + 1))
        u[lm.flat] = lm.C @ self.x[lm.cols]
        return u.reshape(K.orders[0] + 1, K.orders[1] + 1)

    def evaluate(self, x, y, element=None):
        K = element if element is not None else self.mesh.locate(x, y)
        if not self.mesh.domain.contains(x, y):
            raise MeshError(f"point ({x}, {y}) is outside the domain")
        x1, y1, x2, y2 = K.bounds
        xi, eta = (x - x1) / (x2 - x1), (y - y1) / (y2 - y1)
        U = self.local(K.id)
        vx, dx = shape_values(K.orders[0], [xi])
        vy, dy = shape_values(K.orders[1], [eta])
        value = float(vx[:, 0] @ U @ vy[:, 0])
        gx = float(dx[:, 0] @ U @ vy[:, 0]) / (x2 - x1)
        gy = float(vx[:, 0] @ U @ dy[:, 0]) / (y2 - y1)
        return value, np.array([gx, gy])


def evaluate_solution(mesh, dofmap, coefficients, point):
    return Solution(mesh, dofmap, coefficients).evaluate(*point)
