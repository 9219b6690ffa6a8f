"""Hierarchical 1D shape functions, tensor-product element bases, Gauss rules.

Local function numbering is 0-based throughout the package: index 0 is the
left vertex function ``1 - xi``, index 1 the right vertex function ``xi`` and
index ``k >= 2`` the bubble ``xi (1 - xi) P_{k-2}(2 xi - 1)``.  A 2D element of
orders ``(px, py)`` owns the tensor functions ``(i, j)`` flattened row-major as
``i * (py + 1) + j``.
"""
from functools import lru_cache

import numpy as np

MAX_GAUSS_POINTS = 16


def _legendre(n, t):
    """Legendre values and derivatives P_0..P_n at ``t`` (arrays (n+1, len(t)))."""
    t = np.asarray(t, dtype=float)
    P = np.zeros((n + 1,) + t.shape)
    dP = np.zeros_like(P)
    P[0] = 1.0
    if n >= 1:
        P[1] = t
        dP[1] = 1.0
    for k in range(1, n):
        P[k + 1] = ((2 * k + 1) * t * P[k] - k * P[k - 1]) / (k + 1)
        dP[k + 1] = dP[k - 1] + (2 * k + 1) * P[k]
    return P, dP


def shape_values(p, xi):
    """All ``p + 1`` functions and their derivatives at the points ``xi``.

    Returns two arrays of shape ``(p + 1, len(xi))``.
    """
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    vals = np.empty((p + 1, xi.size))
    ders = np.empty_like(vals)
    vals[0], ders[0] = 1.0 - xi, -1.0
    vals[1], ders[1] = xi, 1.0
    if p >= 2:
        P, dP = _legendre(p - 2, 2.0 * xi - 1.0)
        bub = xi * (1.0 - xi)
        dbub = 1.0 - 2.0 * xi
        vals[2:] = bub * P
        ders[2:] = dbub * P + 2.0 * bub * dP
    return vals, ders


def shape_1d(k, p, xi):
    """Value and derivative of the 1-based function ``chi_k`` of an order-p set."""
    if not 1 <= k <= p + 1:
        raise ValueError(f"shape index {k} out of range for order {p}")
    if not 0.0 <= xi <= 1.0:
        raise ValueError(f"reference coordinate {xi} outside [0, 1]")
    vals, ders = shape_values(p, [xi])
    return float(vals[k - 1, 0]), float(ders[k - 1, 0])


class QuadratureRule:
    """Gauss-Legendre rule on [0, 1]."""

    def __init__(self, nodes, weights):
        self.nodes = nodes
        self.weights = weights

    @property
    def n(self):
        return self.nodes.size

    def __repr__(self):
        return f"QuadratureRule(n={self.n})"


@lru_cache(maxsize=None)
def _gauss(n):
    x, w = np.polynomial.legendre.leggauss(n)
    nodes = 0.5 * (x + 1.0)
    weights = 0.5 * w
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def gauss_rule(n):
    if not 1 <= n <= MAX_GAUSS_POINTS:
        raise ValueError(f"Gauss rule size {n} outside 1..{MAX_GAUSS_POINTS}")
    return QuadratureRule(*_gauss(n))


def element_basis_eval(orders, xi, eta):
    """Values and reference gradients of all tensor functions at ``(xi, eta)``.

    Returns ``(values, grads)`` with shapes ``(n,)`` and ``(n, 2)`` where
    ``n = (px + 1) * (py + 1)``.
    """
    px, py = orders
    vx, dx = shape_values(px, [xi])
    vy, dy = shape_values(py, [eta])
    vx, dx, vy, dy = vx[:, 0], dx[:, 0], vy[:, 0], dy[:, 0]
    values = np.outer(vx, vy).ravel()
    grads = np.stack([np.outer(dx, vy).ravel(), np.outer(vx, dy).ravel()], axis=1)
    return values, grads


# -- exact 1D integrals, cached per order ---------------------------------

def _frozen(a):
    a.setflags(write=False)
    return a


@lru_cache(maxsize=None)
def mass_1d(p):
    """``M[a, b] = int_0^1 chi_a chi_b`` for an order-p set."""
    r = gauss_rule(p + 2)
    v, _ = shape_values(p, r.nodes)
    return _frozen((v * r.weights) @ v.T)


@lru_cache(maxsize=None)
def stiffness_1d(p):
    """``S[a, b] = int_0^1 chi_a' chi_b'`` for an order-p set."""
    r = gauss_rule(p + 2)
    _, d = shape_values(p, r.nodes)
    return _frozen((d * r.weights) @ d.T)


@lru_cache(maxsize=None)
def restriction_1d(q, p, half):
    """Re-expansion of order-q functions restricted to one half of [0, 1].

    Column ``m`` holds the coefficients, in the order-p basis of the half
    interval (``p >= q``), of ``chi_m((s + half) / 2)``.  The expansion is
    exact since the restricted function is a polynomial of degree ``q``.
    """
    if p < q:
        raise ValueError("son order must not be lower than the parent order")
    s = gauss_rule(p + 2).nodes
    vp, _ = shape_values(q, 0.5 * (s + half))
    vs, _ = shape_values(p, s)
    coef, *_ = np.linalg.lstsq(vs.T, vp.T, rcond=None)
    # vertex coefficients are exact point values; clean the roundoff there
    coef[0] = shape_values(q, [0.5 * half])[0][:, 0]
    coef[1] = shape_values(q, [0.5 * (1 + half)])[0][:, 0]
    coef[np.abs(coef) < 1e-14] = 0.0
    return _frozen(coef)


@lru_cache(maxsize=None)
def embedding_1d(q, p):
    """Identity embedding of an order-q set into an order-p set (p >= q)."""
    E = np.zeros((p + 1, q + 1))
    E[: q + 1, : q + 1] = np.eye(q + 1)
    return _frozen(E)
