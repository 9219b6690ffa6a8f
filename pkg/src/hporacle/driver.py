"""L-shape benchmark, convergence metrics, and the two adaptive loops.

Iteration ``k`` of either loop works on the mesh left by iteration ``k - 1``:
it (optionally) solves, picks refinements, and applies them.  The convergence
record of iteration ``k`` therefore describes the mesh *before* its own
refinements.
"""
import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .assemble import Problem, Solution, assemble_system, build_dof_map
from .dataset import make_record
from .estimate import LocalProjector, evaluate_candidates, pick_best
from .mesh import Kind, MAX_ORDER, create_initial_mesh, refine_element, uniform_refine
from .shape import gauss_rule, shape_values
from .solve import factorize

CONVERGENCE_HEADER = ["iter", "ndof_coarse", "ndof_fine", "energy_coarse", "energy_fine",
                      "max_rel_err_pct", "exact_h1_err_pct"]


class AdaptError(RuntimeError):
    pass


# -- the L-shape problem ----------------------------------------------------

def _polar(x, y):
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    r = np.hypot(x, y)
    theta = np.arctan2(y, x)
    theta = np.where(theta < -np.pi / 2, theta + 2 * np.pi, theta)
    return r, theta


def lshape_exact(x, y):
    r, t = _polar(x, y)
    return r ** (2 / 3) * np.sin(2 * t / 3 + np.pi / 3)


def lshape_gradient(x, y):
    r, t = _polar(x, y)
    with np.errstate(divide="ignore"):
        s = (2 / 3) * r ** (-1 / 3)
    return np.stack([s * np.sin(np.pi / 3 - t / 3), s * np.cos(np.pi / 3 - t / 3)], axis=-1)


def on_dirichlet(x, y):
    """The two edges meeting at the re-entrant corner."""
    return (x == 0 and -1 <= y <= 0) or (y == 0 and -1 <= x <= 0)


def lshape_flux(x, y, nx, ny):
    g = lshape_gradient(x, y)
    return float(g[..., 0] * nx + g[..., 1] * ny)


# Neumann edges of the L-shape as (start, end, outward normal)
_NEUMANN_EDGES = (
    ((0.0, -1.0), (1.0, -1.0), (0.0, -1.0)),
    ((1.0, -1.0), (1.0, 1.0), (1.0, 0.0)),
    ((1.0, 1.0), (-1.0, 1.0), (0.0, 1.0)),
    ((-1.0, 1.0), (-1.0, 0.0), (-1.0, 0.0)),
)


def lshape_h1_seminorm(points=16, pieces=8):
    """``|u_ex|_{H1}`` from Green's identity as a boundary integral of ``u g``.

    ``u`` vanishes on the Dirichlet part and the Neumann part stays away from
    the singularity, so composite Gauss quadrature converges fast.
    """
    r = gauss_rule(points)
    total = 0.0
    for (ax, ay), (bx, by), (nx, ny) in _NEUMANN_EDGES:
        length = math.hypot(bx - ax, by - ay)
        for k in range(pieces):
            t = (k + r.nodes) / pieces
            x, y = ax + t * (bx - ax), ay + t * (by - ay)
            g = lshape_gradient(x, y)
            total += length / pieces * np.sum(r.weights * lshape_exact(x, y) * (g[:, 0] * nx + g[:, 1] * ny))
    return math.sqrt(total)


@dataclass
class LShapedProblem(Problem):
    h1_seminorm: float = 0.0


def lshape_problem():
    return LShapedProblem(dirichlet=on_dirichlet, flux=lshape_flux, exact=lshape_exact,
                          exact_grad=lshape_gradient, h1_seminorm=lshape_h1_seminorm())


# -- discrete solves ---------------------------------------------------------

@dataclass
class Discrete:
    mesh: object
    dofmap: object
    system: object
    solution: Solution

    @property
    def ndof(self):
        return self.dofmap.n_free


def solve_problem(mesh, problem):
    dofmap = build_dof_map(mesh, problem)
    system = assemble_system(mesh, dofmap, problem)
    x = factorize(system).solve(system.rhs)
    return Discrete(mesh, dofmap, system, Solution(mesh, dofmap, x))


def energy(solution, system):
    """``sqrt(x^T A x)`` with the matrix before Dirichlet elimination."""
    x = solution.x
    return math.sqrt(max(float(x @ (system.full @ x)), 0.0))


def _graded_boxes(corner, levels=40):
    """Reference sub-boxes ``(s0, s1, t0, t1)`` of [0, 1]^2 shrinking towards a corner.

    Each level peels an L-shaped ring off the box at the corner; the last box
    has relative area ``4 ** -levels``.
    """
    out = []
    for k in range(levels):
        s, h = 2.0 ** -k, 2.0 ** -(k + 1)
        out += [(h, s, 0.0, h), (0.0, h, h, s), (h, s, h, s)]
    out.append((0.0, 2.0 ** -levels, 0.0, 2.0 ** -levels))
    cx, cy = corner
    flip = lambda a, b, c: (1 - b, 1 - a) if c else (a, b)  # noqa: E731
    return [flip(s0, s1, cx) + flip(t0, t1, cy) for s0, s1, t0, t1 in out]


def exact_h1_error(solution, problem, mesh=None, norm=None):
    """Relative H1-seminorm error against the exact solution, in percent.

    Elements with a vertex at the origin, where the exact gradient is
    singular, use doubled Gauss order on a geometrically graded partition.
    """
    mesh = mesh if mesh is not None else solution.mesh
    total = 0.0
    for K in mesh.active_elements():
        x1, y1, x2, y2 = K.bounds
        n = max(K.orders) + 3
        boxes = [(0.0, 1.0, 0.0, 1.0)]
        if 0.0 in (x1, x2) and 0.0 in (y1, y2):
            n = min(2 * n, 16)
            boxes = _graded_boxes((int(x2 == 0.0), int(y2 == 0.0)))
        r = gauss_rule(n)
        U = solution.local(K.id)
        for s0, s1, t0, t1 in boxes:
            xi, eta = s0 + r.nodes * (s1 - s0), t0 + r.nodes * (t1 - t0)
            vx, dx = shape_values(K.orders[0], xi)
            vy, dy = shape_values(K.orders[1], eta)
            gx = dx.T @ U @ vy / (x2 - x1)
            gy = vx.T @ U @ dy / (y2 - y1)
            X, Y = np.meshgrid(x1 + xi * (x2 - x1), y1 + eta * (y2 - y1), indexing="ij")
            g = problem.exact_grad(X, Y)
            w = np.outer(r.weights, r.weights) * (K.area * (s1 - s0) * (t1 - t0))
            total += float(np.sum(w * ((g[..., 0] - gx) ** 2 + (g[..., 1] - gy) ** 2)))
    if norm is None:
        norm = getattr(problem, "h1_seminorm", 0.0) or lshape_h1_seminorm()
    return 100.0 * math.sqrt(total) / norm


def element_projectors(coarse, fine, sons):
    return {K.id: LocalProjector(K, [fine.local(s) for s in sons[K.id]]) for K in coarse.mesh.active_elements()}


def local_errors(coarse, projectors):
    """Per element: (seminorm error, full H1 error, full H1 norm of u_fine)."""
    out = {}
    for eid, proj in projectors.items():
        e = proj.difference(coarse.local(eid))
        semi, l2 = proj.seminorm(e), proj.l2norm(e)
        out[eid] = (semi, math.hypot(semi, l2), math.hypot(proj.norm_u, proj.l2norm(proj.u)))
    return out


def max_rel_error(coarse, fine, sons, errors=None):
    """``100 max_K ||u_fine - u_hp||_{H1(K)} / ||u_fine||_{H1(Omega)}``."""
    if errors is None:
        errors = local_errors(coarse, element_projectors(coarse, fine, sons))
    norm = math.sqrt(sum(v[2] ** 2 for v in errors.values()))
    if norm == 0:
        raise AdaptError("fine solution vanishes; relative error undefined")
    return 100.0 * max(v[1] for v in errors.values()) / norm


# -- configuration and records ------------------------------------------------

@dataclass
class AdaptConfig:
    max_iterations: int = 20
    accuracy: float = 0.01  # percent
    threshold: float = 0.33
    initial_order: int = 2
    dataset_path: Optional[str] = None
    max_order: int = MAX_ORDER - 1  # keeps the (p + 1) reference mesh representable

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be non-negative")
        if not self.accuracy >= 0:
            raise ValueError("accuracy must be non-negative")
        if not 0 <= self.threshold <= 1:
            raise ValueError("threshold must lie in [0, 1]")
        if not 1 <= self.initial_order <= MAX_ORDER - 1:
            raise ValueError(f"initial order must lie in 1..{MAX_ORDER - 1}")
        if not 1 <= self.max_order <= MAX_ORDER - 1:
            raise ValueError(f"max_order must lie in 1..{MAX_ORDER - 1}")


@dataclass
class ConvergenceRecord:
    iteration: int
    ndof_coarse: int
    ndof_fine: int
    energy_coarse: float
    energy_fine: float
    max_rel_error: float
    exact_error: float

    def row(self):
        return [str(self.iteration), str(self.ndof_coarse), str(self.ndof_fine)] + [
            f"{v:.17g}" for v in (self.energy_coarse, self.energy_fine, self.max_rel_error, self.exact_error)]


def write_convergence(records, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CONVERGENCE_HEADER)
        for r in records:
            w.writerow(r.row())


def read_convergence(path):
    out = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        if next(reader, None) != CONVERGENCE_HEADER:
            raise ValueError(f"{path}:1: not a convergence file")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            try:
                if len(row) != len(CONVERGENCE_HEADER):
                    raise ValueError(f"expected {len(CONVERGENCE_HEADER)} fields")
                out.append(ConvergenceRecord(int(row[0]), int(row[1]), int(row[2]), *map(float, row[3:])))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out


@dataclass
class AdaptResult:
    mesh: object
    convergence: list
    dataset: list = field(default_factory=list)
    decisions: list = field(default_factory=list)  # per iteration {eid: Refinement}


def convergence_fit(ndof, error):
    """Least-squares line of ``log10(error)`` against ``ndof ** (1/3)``.

    Returns ``(slope, intercept, r2)``, or None with fewer than three usable
    points or a single distinct DOF count (non-positive errors are skipped).
    """
    ndof, error = np.asarray(ndof, dtype=float), np.asarray(error, dtype=float)
    keep = (error > 0) & (ndof > 0)
    if keep.sum() < 3 or np.unique(ndof[keep]).size < 2:
        return None
    x, y = np.cbrt(ndof[keep]), np.log10(error[keep])
    slope, intercept = np.polyfit(x, y, 1)
    res = y - (slope * x + intercept)
    tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(res @ res) / tot if tot > 0 else float("nan")
    return float(slope), float(intercept), r2


# -- applying decisions -------------------------------------------------------

def _leaves(mesh, eid):
    K = mesh.elements[eid]
    if K.active:
        return [K]
    return [L for c in K.children for L in _leaves(mesh, c)]


def _region_son(refinement, parent, leaf):
    x1, y1, x2, y2 = parent.bounds
    cx, cy = leaf.center
    hx, hy = int(cx > 0.5 * (x1 + x2)), int(cy > 0.5 * (y1 + y2))
    return {Kind.P_REF: 0, Kind.H_X: hx, Kind.H_Y: hy, Kind.H_XY: 2 * hy + hx}[refinement.kind]


def apply_refinements(mesh, decisions):
    """Apply ``{eid: Refinement}`` in id order.

    An element may already have been split by a neighbour's 1-irregularity
    closure; its decision then raises the orders of the leaves covering each
    intended son region.
    """
    for eid in sorted(decisions):
        r = decisions[eid]
        K = mesh.elements[eid]
        if K.active:
            refine_element(mesh, eid, r)
            continue
        for L in _leaves(mesh, eid):
            want = r.orders[_region_son(r, K, L)]
            o = (max(L.orders[0], want[0]), max(L.orders[1], want[1]))
            if o != L.orders:
                mesh._set_orders(L, o)
    return mesh


# -- loops -------------------------------------------------------------------

def self_adaptive_loop(config, problem, mesh=None, on_iteration=None):
    """Two-grid hp-adaptivity; returns an ``AdaptResult`` with the decision dataset."""
    mesh = mesh if mesh is not None else create_initial_mesh(config.initial_order)
    result = AdaptResult(mesh, [], [], [])
    norm = getattr(problem, "h1_seminorm", 0.0) or None
    for it in range(1, config.max_iterations + 1):
        try:
            fine_mesh, sons = uniform_refine(mesh)
        except ValueError as exc:
            raise AdaptError(f"iteration {it}: {exc}") from None
        coarse = solve_problem(mesh, problem)
        fine = solve_problem(fine_mesh, problem)
        projectors = element_projectors(coarse.solution, fine.solution, sons)
        errors = local_errors(coarse.solution, projectors)
        rel = max_rel_error(coarse.solution, fine.solution, sons, errors)
        exact = exact_h1_error(coarse.solution, problem, mesh, norm) if problem.exact_grad else 0.0
        rec = ConvergenceRecord(it, coarse.ndof, fine.ndof, energy(coarse.solution, coarse.system),
                                energy(fine.solution, fine.system), rel, exact)
        result.convergence.append(rec)
        decisions = {}
        if rel >= config.accuracy:
            top = max(v[0] for v in errors.values())
            for K in mesh.active_elements():
                best = None
                # elements under the threshold are a "none" decision, the DNN has to learn those too
                if errors[K.id][0] >= config.threshold * top:
                    evals, scale = evaluate_candidates(K, coarse.solution.local(K.id), None,
                                                       config.max_order, projector=projectors[K.id])
                    best = pick_best(evals, scale)
                result.dataset.append(make_record(K, best))
                if best is not None:
                    decisions[K.id] = best.refinement
            apply_refinements(mesh, decisions)
        result.decisions.append(decisions)
        if on_iteration is not None:
            on_iteration(it, mesh, rec)
        if rel < config.accuracy:
            break
    return result


def dnn_driven_loop(config, problem, oracle, mesh=None, start_iteration=1, solve_each=True, on_iteration=None):
    """Refinement driven by ``oracle``: a model, or a callable mapping
    ``(active elements, mesh)`` to one ``Refinement | None`` per element.

    No reference mesh is built; with ``solve_each`` off no linear system is
    solved either and the energy and error columns are 0.
    """
    from .dnn import Model, predict_refinements

    mesh = mesh if mesh is not None else create_initial_mesh(config.initial_order)
    if isinstance(oracle, Model):
        model = oracle

        def oracle(actives, _mesh):
            return predict_refinements(model, actives)

    norm = getattr(problem, "h1_seminorm", 0.0) or None
    result = AdaptResult(mesh, [], [], [])
    for it in range(start_iteration, start_iteration + config.max_iterations):
        if solve_each:
            coarse = solve_problem(mesh, problem)
            e = energy(coarse.solution, coarse.system)
            exact = exact_h1_error(coarse.solution, problem, mesh, norm) if problem.exact_grad else 0.0
            ndof = coarse.ndof
        else:
            e = exact = 0.0
            ndof = build_dof_map(mesh, problem).n_free
        rec = ConvergenceRecord(it, ndof, 0, e, 0.0, 0.0, exact)
        result.convergence.append(rec)
        actives = mesh.active_elements()
        decisions = {K.id: r for K, r in zip(actives, oracle(actives, mesh)) if r is not None}
        apply_refinements(mesh, decisions)
        result.decisions.append(decisions)
        if on_iteration is not None:
            on_iteration(it, mesh, rec)
    return result


def replay_oracle(decisions):
    """Oracle replaying the per-iteration decision maps recorded by a loop."""
    queue = iter(decisions)

    def oracle(actives, mesh):
        current = next(queue, {})
        return [current.get(K.id) for K in actives]

    return oracle
