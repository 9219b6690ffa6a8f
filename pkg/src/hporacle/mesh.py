"""Rectangular hp-mesh with hanging nodes over the L-shaped domain.

Elements are axis-aligned rectangles kept in a binary/quad refinement tree.
All coordinates are dyadic rationals, so floats represent them exactly and
element sides can be hashed directly.  Neighbour lookup goes through a
registry of side segments: across any side of a 1-irregular mesh there is
either one element with the same segment, two elements owning its halves, or
one element owning its dyadic parent segment.
"""
import copy
import enum
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

MIN_ORDER = 1
MAX_ORDER = 9

SOUTH, EAST, NORTH, WEST = range(4)
SIDE_NAMES = ("south", "east", "north", "west")


class MeshError(Exception):
    pass


class Kind(enum.IntEnum):
    P_REF = 0
    H_X = 1
    H_Y = 2
    H_XY = 3


SON_COUNT = {Kind.P_REF: 1, Kind.H_X: 2, Kind.H_Y: 2, Kind.H_XY: 4}


def _check_order(o):
    px, py = o
    if not (MIN_ORDER <= px <= MAX_ORDER and MIN_ORDER <= py <= MAX_ORDER):
        raise ValueError(f"orders {o} outside {MIN_ORDER}..{MAX_ORDER}")


@dataclass(frozen=True)
class Refinement:
    """A refinement kind with its son orders.

    Son order convention: H_X (west, east), H_Y (south, north),
    H_XY (SW, SE, NW, NE).
    """

    kind: Kind
    orders: tuple

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        orders = tuple(tuple(int(v) for v in o) for o in self.orders)
        object.__setattr__(self, "orders", orders)
        if len(orders) != SON_COUNT[self.kind]:
            raise ValueError(f"{self.kind.name} needs {SON_COUNT[self.kind]} son orders, got {len(orders)}")
        for o in orders:
            _check_order(o)

    @classmethod
    def isotropic(cls, order):
        return cls(Kind.H_XY, (tuple(order),) * 4)


@dataclass
class Element:
    id: int
    bounds: tuple
    orders: tuple
    level: int = 0
    parent: int = None
    children: tuple = ()

    @property
    def active(self):
        return not self.children

    @property
    def dx(self):
        return self.bounds[2] - self.bounds[0]

    @property
    def dy(self):
        return self.bounds[3] - self.bounds[1]

    @property
    def area(self):
        return self.dx * self.dy

    @property
    def center(self):
        x1, y1, x2, y2 = self.bounds
        return 0.5 * (x1 + x2), 0.5 * (y1 + y2)

    def side_order(self, side):
        return self.orders[0] if side in (SOUTH, NORTH) else self.orders[1]


def side_key(bounds, side):
    x1, y1, x2, y2 = bounds
    if side == SOUTH:
        return ("h", y1, x1, x2)
    if side == NORTH:
        return ("h", y2, x1, x2)
    if side == WEST:
        return ("v", x1, y1, y2)
    return ("v", x2, y1, y2)


def segment_endpoints(key):
    o, c, lo, hi = key
    if o == "h":
        return (lo, c), (hi, c)
    return (c, lo), (c, hi)


def segment_midpoint(key):
    o, c, lo, hi = key
    m = 0.5 * (lo + hi)
    return (m, c) if o == "h" else (c, m)


def _halves(key):
    o, c, lo, hi = key
    m = 0.5 * (lo + hi)
    return (o, c, lo, m), (o, c, m, hi)


def _parent_segment(key):
    o, c, lo, hi = key
    L2 = 2.0 * (hi - lo)
    plo = math.floor(lo / L2) * L2
    return (o, c, plo, plo + L2), (0 if lo == plo else 1)


def _son_bounds(bounds, kind):
    x1, y1, x2, y2 = bounds
    xm, ym = 0.5 * (x1 + x2), 0.5 * (y1 + y2)
    if kind == Kind.H_X:
        return [(x1, y1, xm, y2), (xm, y1, x2, y2)]
    if kind == Kind.H_Y:
        return [(x1, y1, x2, ym), (x1, ym, x2, y2)]
    return [(x1, y1, xm, ym), (xm, y1, x2, ym), (x1, ym, xm, y2), (xm, ym, x2, y2)]


@dataclass
class Domain:
    """Union of closed axis-aligned boxes; also the root cells of a mesh."""

    boxes: tuple
    name: str = "custom"

    @property
    def area(self):
        return sum((b[2] - b[0]) * (b[3] - b[1]) for b in self.boxes)

    def contains(self, x, y, tol=0.0):
        return any(b[0] - tol <= x <= b[2] + tol and b[1] - tol <= y <= b[3] + tol for b in self.boxes)

    def contains_box(self, bounds):
        x1, y1, x2, y2 = bounds
        return any(b[0] <= x1 and x2 <= b[2] and b[1] <= y1 and y2 <= b[3] for b in self.boxes)


LSHAPE = Domain(((-1.0, 0.0, 0.0, 1.0), (0.0, 0.0, 1.0, 1.0), (0.0, -1.0, 1.0, 0.0)), name="lshape")
UNIT_SQUARE = Domain(((0.0, 0.0, 1.0, 1.0),), name="unit-square")


@dataclass
class Edge:
    """A side segment of the mesh skeleton.

    Master edges carry global edge DOFs; constrained (hanging) edges are the
    halves of a master edge seen from the two smaller elements.
    """

    segment: tuple
    elements: tuple
    order: int
    constrained: bool = False
    master: tuple = None


@dataclass
class SideInfo:
    relation: str  # boundary | conforming | master | slave
    group: tuple  # master segment key
    half: int = None  # which half of the master segment (slave sides only)


class Topology:
    """Derived skeleton: side classification, edge groups, minimum-rule orders."""

    def __init__(self, mesh):
        self.sides = {}
        members = defaultdict(list)
        for K in mesh.active_elements():
            info = []
            for s in range(4):
                key = side_key(K.bounds, s)
                rel = mesh._relation(K, s)
                if rel == "slave":
                    group, half = _parent_segment(key)
                    info.append(SideInfo(rel, group, half))
                else:
                    info.append(SideInfo(rel, key))
                members[info[-1].group].append((K.id, s))
            self.sides[K.id] = info
        self.members = dict(members)
        self.order = {
            g: min(mesh.elements[e].side_order(s) for e, s in m) for g, m in self.members.items()
        }
        self.hanging = {}
        for g, m in self.members.items():
            if any(self.sides[e][s].relation == "slave" for e, s in m):
                self.hanging[segment_midpoint(g)] = g

    def side_order(self, eid, side):
        return self.order[self.sides[eid][side].group]

    def edges(self):
        out = []
        for g in sorted(self.members):
            m = self.members[g]
            out.append(Edge(g, tuple(sorted({e for e, _ in m})), self.order[g]))
            for e, s in m:
                if self.sides[e][s].relation == "slave":
                    sub = _halves(g)[self.sides[e][s].half]
                    out.append(Edge(sub, (e,), self.order[g], constrained=True, master=g))
        return out


class Mesh:
    def __init__(self, domain=LSHAPE):
        self.domain = domain
        self.elements = {}
        self._next_id = 0
        self._sides = defaultdict(set)
        self._version = 0
        self._topology = None

    # -- construction -----------------------------------------------------

    def add_element(self, bounds, orders, level=0, eid=None):
        _check_order(orders)
        x1, y1, x2, y2 = bounds
        if not (x1 < x2 and y1 < y2):
            raise MeshError(f"degenerate element bounds {bounds}")
        if eid is None:
            eid = self._next_id
        if eid in self.elements:
            raise MeshError(f"duplicate element id {eid}")
        self._next_id = max(self._next_id, eid + 1)
        K = Element(eid, tuple(float(v) for v in bounds), tuple(orders), level)
        self.elements[eid] = K
        self._register(K)
        return K

    def copy(self):
        new = copy.copy(self)
        new.elements = {k: copy.copy(v) for k, v in self.elements.items()}
        new._sides = defaultdict(set, {k: set(v) for k, v in self._sides.items()})
        new._topology = None
        return new

    # -- queries ----------------------------------------------------------

    def active_elements(self):
        return [K for _, K in sorted(self.elements.items()) if K.active]

    def active_ids(self):
        return [K.id for K in self.active_elements()]

    def __len__(self):
        return sum(1 for K in self.elements.values() if K.active)

    def topology(self):
        if self._topology is None or self._topology[0] != self._version:
            self._topology = (self._version, Topology(self))
        return self._topology[1]

    def edges(self):
        return self.topology().edges()

    def neighbors(self, eid, side):
        """Active elements across one side, tagged 'equal', 'smaller' or 'larger'."""
        K = self.elements[eid]
        key = side_key(K.bounds, side)
        out = [(n, "equal") for n in self._sides.get(key, ()) if n != eid]
        for h in _halves(key):
            out += [(n, "smaller") for n in self._sides.get(h, ())]
        out += [(n, "larger") for n in self._sides.get(_parent_segment(key)[0], ())]
        return sorted(out)

    def _relation(self, K, side):
        rels = {r for _, r in self.neighbors(K.id, side)}
        if not rels:
            return "boundary"
        if rels == {"equal"}:
            return "conforming"
        if rels == {"smaller"}:
            return "master"
        if rels == {"larger"}:
            return "slave"
        raise MeshError(f"inconsistent neighbourhood on {SIDE_NAMES[side]} side of element {K.id}")

    def locate(self, x, y):
        """An active element whose closed box contains the point."""
        for K in self.active_elements():
            x1, y1, x2, y2 = K.bounds
            if x1 <= x <= x2 and y1 <= y <= y2:
                return K
        raise MeshError(f"point ({x}, {y}) is outside the domain")

    # -- mutation ---------------------------------------------------------

    def _register(self, K):
        for s in range(4):
            self._sides[side_key(K.bounds, s)].add(K.id)
        self._version += 1

    def _unregister(self, K):
        for s in range(4):
            key = side_key(K.bounds, s)
            owners = self._sides[key]
            owners.discard(K.id)
            if not owners:
                del self._sides[key]
        self._version += 1

    def _set_orders(self, K, orders):
        _check_order(orders)
        K.orders = tuple(orders)
        self._version += 1

    def _split(self, K, kind, son_orders):
        self._unregister(K)
        sons = []
        for b, o in zip(_son_bounds(K.bounds, kind), son_orders):
            S = self.add_element(b, o, level=K.level + 1)
            S.parent = K.id
            sons.append(S.id)
        K.children = tuple(sons)
        return sons

    def _close(self, K, kind):
        """Refine coarser neighbours so splitting K keeps the mesh 1-irregular."""
        sides = []
        if kind in (Kind.H_X, Kind.H_XY):
            sides += [SOUTH, NORTH]
        if kind in (Kind.H_Y, Kind.H_XY):
            sides += [WEST, EAST]
        while True:
            coarse = sorted({n for s in sides for n, r in self.neighbors(K.id, s) if r == "larger"})
            if not coarse:
                return
            for n in coarse:
                N = self.elements[n]
                if N.active:
                    refine_element(self, n, Refinement.isotropic(N.orders))


# -- operations -------------------------------------------------------------

def create_initial_mesh(initial_order=2, domain=LSHAPE):
    """One element per domain box, uniform orders."""
    if not MIN_ORDER <= initial_order <= MAX_ORDER:
        raise ValueError(f"initial order {initial_order} outside {MIN_ORDER}..{MAX_ORDER}")
    mesh = Mesh(domain)
    for b in domain.boxes:
        mesh.add_element(b, (initial_order, initial_order))
    return mesh


def refine_element(mesh, eid, refinement):
    """Apply one refinement in place (returns the mesh).

    h-refinements first refine too-coarse neighbours isotropically with
    inherited orders so the result stays 1-irregular.
    """
    if eid not in mesh.elements:
        raise MeshError(f"unknown element id {eid}")
    K = mesh.elements[eid]
    if not K.active:
        raise MeshError(f"element {eid} is not active")
    for o in refinement.orders:
        if o[0] < K.orders[0] or o[1] < K.orders[1]:
            raise ValueError(f"refinement {refinement} lowers the orders {K.orders} of element {eid}")
    if refinement.kind == Kind.P_REF:
        mesh._set_orders(K, refinement.orders[0])
        return mesh
    mesh._close(K, refinement.kind)
    mesh._split(K, refinement.kind, refinement.orders)
    return mesh


def uniform_refine(mesh):
    """The (h/2, p+1) reference mesh.

    Returns ``(fine_mesh, sons)`` where ``sons[eid]`` lists the four fine
    elements (SW, SE, NW, NE) covering coarse element ``eid``.
    """
    actives = mesh.active_elements()
    for K in actives:
        if max(K.orders) >= MAX_ORDER:
            raise ValueError(f"element {K.id} has orders {K.orders}; p+1 would exceed {MAX_ORDER}")
    fine = mesh.copy()
    sons = {}
    for K in actives:
        o = (K.orders[0] + 1, K.orders[1] + 1)
        sons[K.id] = tuple(fine._split(fine.elements[K.id], Kind.H_XY, (o,) * 4))
    return fine, sons


# -- audit ------------------------------------------------------------------

def _contacts(B, axis):
    """Pairs (a, b) of boxes where a's max face along ``axis`` touches b's min face."""
    hi, lo = (2, 0) if axis == 0 else (3, 1)
    t0, t1 = (1, 3) if axis == 0 else (0, 2)
    n = len(B)
    pairs = []
    for start in range(0, n, 512):
        blk = B[start:start + 512]
        touch = blk[:, hi][:, None] == B[:, lo][None, :]
        ov = np.minimum(blk[:, t1][:, None], B[:, t1][None, :]) - np.maximum(blk[:, t0][:, None], B[:, t0][None, :])
        a, b = np.nonzero(touch & (ov > 0))
        pairs += list(zip((a + start).tolist(), b.tolist()))
    return pairs


def audit(mesh):
    """Structural checks; returns a list of human-readable violations."""
    out = []
    acts = mesh.active_elements()
    if not acts:
        return ["mesh has no active elements"]
    ids = [K.id for K in acts]
    B = np.array([K.bounds for K in acts])
    for K in acts:
        if not (MIN_ORDER <= K.orders[0] <= MAX_ORDER and MIN_ORDER <= K.orders[1] <= MAX_ORDER):
            out.append(f"element {K.id}: orders {K.orders} out of range")
        if not mesh.domain.contains_box(K.bounds):
            out.append(f"element {K.id}: bounds {K.bounds} leave the domain")
    area = float(np.sum((B[:, 2] - B[:, 0]) * (B[:, 3] - B[:, 1])))
    if abs(area - mesh.domain.area) > 1e-12:
        out.append(f"active area {area!r} differs from domain area {mesh.domain.area!r}")
    for start in range(0, len(B), 512):
        blk = B[start:start + 512]
        ox = np.minimum(blk[:, 2][:, None], B[:, 2][None, :]) - np.maximum(blk[:, 0][:, None], B[:, 0][None, :])
        oy = np.minimum(blk[:, 3][:, None], B[:, 3][None, :]) - np.maximum(blk[:, 1][:, None], B[:, 1][None, :])
        a, b = np.nonzero((ox > 0) & (oy > 0))
        for i, j in zip(a + start, b):
            if i < j:
                out.append(f"elements {ids[i]} and {ids[j]} overlap")

    # 1-irregularity: touching sides differ in length by at most a factor 2
    # and the shorter one lies on a half of the longer one.
    reported = set()
    for axis in (0, 1):
        t0, t1 = (1, 3) if axis == 0 else (0, 2)
        for i, j in _contacts(B, axis):
            la, lb = B[i, t1] - B[i, t0], B[j, t1] - B[j, t0]
            big, small = (i, j) if la >= lb else (j, i)
            Lb, Ls = max(la, lb), min(la, lb)
            ok = Lb == Ls and B[i, t0] == B[j, t0]
            if Lb == 2 * Ls:
                lo = B[big, t0]
                ok = B[small, t0] in (lo, lo + Ls)
            if not ok:
                side = (EAST if big == i else WEST) if axis == 0 else (NORTH if big == i else SOUTH)
                tag = (ids[big], side)
                if tag not in reported:
                    reported.add(tag)
                    seg = side_key(tuple(B[big]), side)
                    out.append(
                        f"edge {seg[0]} {seg[1]:g} [{seg[2]:g}, {seg[3]:g}] ({SIDE_NAMES[side]} side of "
                        f"element {ids[big]}) is subdivided more than once (neighbour {ids[small]}, "
                        f"length ratio {Lb / Ls:g})"
                    )
    if reported:
        return out

    topo = mesh.topology()
    for g, members in topo.members.items():
        want = min(mesh.elements[e].side_order(s) for e, s in members)
        if topo.order[g] != want:
            out.append(f"edge {g}: order {topo.order[g]} violates the minimum rule ({want})")

    for K in mesh.elements.values():
        if K.active:
            continue
        kids = [mesh.elements[c] for c in K.children]
        if len(kids) not in (2, 4):
            out.append(f"element {K.id}: {len(kids)} children")
        kb = np.array([c.bounds for c in kids])
        inside = np.all((kb[:, 0] >= K.bounds[0]) & (kb[:, 2] <= K.bounds[2]) & (kb[:, 1] >= K.bounds[1]) & (kb[:, 3] <= K.bounds[3]))
        carea = float(np.sum((kb[:, 2] - kb[:, 0]) * (kb[:, 3] - kb[:, 1])))
        if not inside or carea != K.area:
            out.append(f"element {K.id}: children do not partition the parent")
    return out


# -- snapshot file ----------------------------------------------------------

def write_snapshot(mesh, path):
    """``id level x1 y1 x2 y2 px py`` per active element, 17 significant digits."""
    with open(path, "w", newline="\n") as f:
        for K in mesh.active_elements():
            x1, y1, x2, y2 = K.bounds
            f.write(f"{K.id} {K.level} {x1:.17g} {y1:.17g} {x2:.17g} {y2:.17g} {K.orders[0]} {K.orders[1]}\n")


def read_snapshot(path, domain=LSHAPE):
    """Rebuild a mesh whose elements are the snapshot's active elements."""
    mesh = Mesh(domain)
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 8:
                raise MeshError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                eid, level = int(parts[0]), int(parts[1])
                bounds = tuple(float(v) for v in parts[2:6])
                orders = (int(parts[6]), int(parts[7]))
            except ValueError as exc:
                raise MeshError(f"{path}:{lineno}: {exc}") from None
            mesh.add_element(bounds, orders, level=level, eid=eid)
    return mesh
