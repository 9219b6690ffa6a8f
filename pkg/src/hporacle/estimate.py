"""Refinement candidates, local projections and per-element optimal selection.

Everything local to a coarse element ``K`` is expressed in the *broken*
coordinates of its four fine sons: the concatenated tensor coefficients of
SW, SE, NW, NE at orders ``(px + 1, py + 1)``.  The fine solution lives there
directly; a candidate space is described by a matrix ``T`` whose columns are
its conforming basis functions written in those coordinates.  The H1
seminorm Gram matrix is block diagonal with four identical blocks, so every
integral is exact.

Candidate geometry uses half-units of ``K``: coordinates 0, 1, 2 along each
axis.
"""
import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg as sla

from .mesh import MAX_ORDER, Kind, Refinement
from .shape import embedding_1d, mass_1d, restriction_1d, stiffness_1d

FINE_SONS = ((0, 0), (1, 0), (0, 1), (1, 1))  # SW, SE, NW, NE as (x half, y half)
REGIONS = {
    Kind.P_REF: ((0, 2, 0, 2),),
    Kind.H_X: ((0, 1, 0, 2), (1, 2, 0, 2)),
    Kind.H_Y: ((0, 2, 0, 1), (0, 2, 1, 2)),
    Kind.H_XY: ((0, 1, 0, 1), (1, 2, 0, 1), (0, 1, 1, 2), (1, 2, 1, 2)),
}
CORNERS = (("v", 0, 0), ("v", 2, 0), ("v", 0, 2), ("v", 2, 2))
TIE_RTOL = 1e-9
GAIN_RTOL = 1e-12


class ProjectionError(Exception):
    pass


@dataclass(frozen=True)
class Candidate:
    refinement: Refinement
    dnrdof: int
    index: int = 0  # position in the enumeration, last tie-breaker

    @property
    def kind(self):
        return self.refinement.kind


@dataclass
class CandidateEvaluation:
    candidate: Candidate
    projection_error: float
    baseline_error: float
    rate: float

    @property
    def refinement(self):
        return self.candidate.refinement


# -- candidate spaces -------------------------------------------------------

def _son_sides(region):
    x0, x1, y0, y1 = region
    # (segment key, direction index of the order that governs it)
    return (("h", y0, x0, x1), 0), (("v", x1, y0, y1), 1), (("h", y1, x0, x1), 0), (("v", x0, y0, y1), 1)


def _side_orders(kind, orders):
    """Per son, per side: the edge order after the minimum rule inside K."""
    segs = {}
    for region, o in zip(REGIONS[kind], orders):
        for key, d in _son_sides(region):
            segs[key] = min(segs.get(key, MAX_ORDER + 1), o[d])
    return [[segs[key] for key, _ in _son_sides(region)] for region in REGIONS[kind]], segs


def local_dimension(refinement):
    """Dimension of the conforming candidate space on K."""
    kind, orders = refinement.kind, refinement.orders
    _, segs = _side_orders(kind, orders)
    verts = set()
    for x0, x1, y0, y1 in REGIONS[kind]:
        verts |= {(x0, y0), (x1, y0), (x0, y1), (x1, y1)}
    return len(verts) + sum(q - 1 for q in segs.values()) + sum((a - 1) * (b - 1) for a, b in orders)


def _son_entity(si, region, side_q, i, j):
    x0, x1, y0, y1 = region
    if i < 2 and j < 2:
        return ("v", x0 if i == 0 else x1, y0 if j == 0 else y1)
    if i >= 2 and j >= 2:
        return ("i", si, i, j)
    if j < 2:
        side, k = (0 if j == 0 else 2), i
    else:
        side, k = (3 if i == 0 else 1), j
    if k > side_q[side]:
        return None
    return ("e", _son_sides(region)[side][0], k)


def _axis_map(lo, hi, half, q, P):
    if hi - lo == 2:
        return restriction_1d(q, P, half)
    if lo == half:
        return embedding_1d(q, P)
    return None


@lru_cache(maxsize=4096)
def candidate_basis(orders, refinement):
    """Conforming basis of a candidate in broken fine-son coordinates.

    Returns ``(ncols, blocks, corner_cols)`` where ``blocks[f]`` is a tuple
    ``(cols, rows, M)``: either ``rows`` (pure selection of fine coefficients)
    or a dense ``M`` of shape ``(nf, len(cols))``.
    """
    px, py = orders
    P, Q = px + 1, py + 1
    kind = refinement.kind
    side_q, _ = _side_orders(kind, refinement.orders)
    colmap = {}
    per_f = [dict() for _ in FINE_SONS]  # f -> {col: vector}
    for si, (region, (a, b)) in enumerate(zip(REGIONS[kind], refinement.orders)):
        incl, keys = [], []
        for i in range(a + 1):
            for j in range(b + 1):
                ent = _son_entity(si, region, side_q[si], i, j)
                if ent is not None:
                    incl.append(i * (b + 1) + j)
                    keys.append(ent)
        cols = [colmap.setdefault(k, len(colmap)) for k in keys]
        for f, (hx, hy) in enumerate(FINE_SONS):
            Ax = _axis_map(region[0], region[1], hx, a, P)
            Ay = _axis_map(region[2], region[3], hy, b, Q)
            if Ax is None or Ay is None:
                continue
            E = np.kron(Ax, Ay)[:, incl]
            for c, col in enumerate(cols):
                per_f[f][col] = E[:, c]
    blocks = []
    for f in range(4):
        cols = np.array(sorted(per_f[f]), dtype=int)
        M = np.stack([per_f[f][c] for c in cols], axis=1)
        nz = M != 0
        if np.all(nz.sum(axis=0) == 1) and np.all(M[nz] == 1.0):
            blocks.append((cols, np.argmax(nz, axis=0), None))
        else:
            blocks.append((cols, None, M))
    corner_cols = np.array([colmap[c] for c in CORNERS], dtype=int)
    return len(colmap), tuple(blocks), corner_cols


# -- enumeration ------------------------------------------------------------

def enumerate_candidates(element, max_order=MAX_ORDER):
    """All candidates with son orders in ``{p, p+1}`` per direction.

    Son orders above ``max_order`` are skipped (the adaptive loop uses
    ``MAX_ORDER - 1`` so the reference mesh stays representable).
    """
    px, py = element.orders
    if max(px, py) > MAX_ORDER - 1:
        raise ValueError(f"element {element.id}: orders {element.orders} leave no room for p+1")
    opts = [(a, b) for a in (px, px + 1) for b in (py, py + 1) if a <= max_order and b <= max_order]
    base = (px + 1) * (py + 1)
    out = []

    def add(kind, orders):
        r = Refinement(kind, orders)
        out.append(Candidate(r, local_dimension(r) - base, len(out)))

    for d in ((0, 1), (1, 0), (1, 1)):
        o = (px + d[0], py + d[1])
        if o in opts:
            add(Kind.P_REF, (o,))
    for kind in (Kind.H_X, Kind.H_Y):
        for sons in itertools.product(opts, repeat=2):
            add(kind, sons)
    for sons in itertools.product(opts, repeat=4):
        add(Kind.H_XY, sons)
    return out


# -- projections ------------------------------------------------------------

class LocalProjector:
    """H1(K) machinery on the four fine sons of one coarse element."""

    def __init__(self, element, fine):
        self.element = element
        px, py = element.orders
        self.fine_orders = (px + 1, py + 1)
        fine = [np.asarray(u, dtype=float) for u in fine]
        if len(fine) != 4 or any(u.shape != (px + 2, py + 2) for u in fine):
            raise ValueError(f"need four fine son coefficient arrays of shape {(px + 2, py + 2)}")
        self.u = [u.ravel() for u in fine]
        a, b = element.dx, element.dy
        P, Q = self.fine_orders
        self.G = (b / a) * np.kron(stiffness_1d(P), mass_1d(Q)) + (a / b) * np.kron(mass_1d(P), stiffness_1d(Q))
        self.M = 0.25 * a * b * np.kron(mass_1d(P), mass_1d(Q))
        self.Gu = [self.G @ u for u in self.u]
        self.corner_values = np.array([fine[0][0, 0], fine[1][1, 0], fine[2][0, 1], fine[3][1, 1]])
        self.norm_u = self.seminorm(self.u)

    def seminorm(self, e):
        return float(np.sqrt(max(sum(v @ self.G @ v for v in e), 0.0)))

    def l2norm(self, e):
        return float(np.sqrt(max(sum(v @ self.M @ v for v in e), 0.0)))

    def embed(self, U):
        """Broken coordinates of a coefficient matrix living on the whole of K."""
        U = np.asarray(U, dtype=float)
        qx, qy = U.shape[0] - 1, U.shape[1] - 1
        P, Q = self.fine_orders
        return [(restriction_1d(qx, P, hx) @ U @ restriction_1d(qy, Q, hy).T).ravel() for hx, hy in FINE_SONS]

    def difference(self, U):
        return [u - w for u, w in zip(self.u, self.embed(U))]

    def project(self, refinement):
        """Corner-constrained H1-seminorm projection of the fine solution.

        Returns ``(c, w, error)``: candidate coefficients, the interpolant in
        broken coordinates, and ``|u_fine - w|_{H1(K)}``.
        """
        n, blocks, corners = candidate_basis(self.element.orders, refinement)
        A = np.zeros((n, n))
        rhs = np.zeros(n)
        for (cols, rows, M), Gu in zip(blocks, self.Gu):
            if M is None:
                A[np.ix_(cols, cols)] += self.G[np.ix_(rows, rows)]
                rhs[cols] += Gu[rows]
            else:
                A[np.ix_(cols, cols)] += M.T @ self.G @ M
                rhs[cols] += M.T @ Gu
        c = np.zeros(n)
        c[corners] = self.corner_values
        free = np.setdiff1d(np.arange(n), corners)
        if free.size:
            b = rhs[free] - A[np.ix_(free, corners)] @ self.corner_values
            try:
                c[free] = sla.cho_solve(sla.cho_factor(A[np.ix_(free, free)]), b)
            except np.linalg.LinAlgError:
                raise ProjectionError(f"singular projection system for {refinement}") from None
        w = []
        for (cols, rows, M), u in zip(blocks, self.u):
            if M is None:
                wf = np.zeros_like(u)
                wf[rows] = c[cols]
            else:
                wf = M @ c[cols]
            w.append(wf)
        err = self.seminorm([u - wf for u, wf in zip(self.u, w)])
        return c, w, err


def project_local(element, fine, candidate):
    """``(w coefficients, |u_fine - w|_{H1(K)})`` for one candidate."""
    r = candidate.refinement if isinstance(candidate, Candidate) else candidate
    c, _, err = LocalProjector(element, fine).project(r)
    return c, err


def element_h1_error(fine, other, element):
    """``|u_fine - other|_{H1(K)}``; ``other`` is a coefficient matrix on K."""
    proj = LocalProjector(element, fine)
    return proj.seminorm(proj.difference(other))


def pick_best(evals, scale):
    """Maximal rate with tolerance ties broken by (dnrdof, kind, enumeration)."""
    # gains at roundoff level relative to |u_fine|_K count as zero
    positive = [e for e in evals if e.baseline_error - e.projection_error > GAIN_RTOL * scale]
    if not positive:
        return None
    best = max(e.rate for e in positive)
    ties = [e for e in positive if e.rate >= best - TIE_RTOL * best]
    return min(ties, key=lambda e: (e.candidate.dnrdof, int(e.candidate.kind), e.candidate.index))


def evaluate_candidates(element, coarse, fine, max_order=MAX_ORDER, projector=None):
    """All candidate evaluations and ``|u_fine|_K`` (the scale for zero gains)."""
    proj = projector if projector is not None else LocalProjector(element, fine)
    baseline = proj.seminorm(proj.difference(coarse))
    out = []
    for cand in enumerate_candidates(element, max_order):
        _, _, err = proj.project(cand.refinement)
        out.append(CandidateEvaluation(cand, err, baseline, (baseline - err) / cand.dnrdof))
    return out, proj.norm_u


def select_optimal_refinement(element, coarse, fine, max_order=MAX_ORDER):
    """Best candidate by error decrease rate, or None if nothing gains.

    ``coarse`` is the element's coefficient matrix, ``fine`` the four fine
    son coefficient matrices (SW, SE, NW, NE).
    """
    evals, scale = evaluate_candidates(element, coarse, fine, max_order)
    return pick_best(evals, scale)
