"""Training rows built from refinement decisions, and their CSV file.

A row holds the raw element data ``x1 y1 x2 y2 dx dy px py`` and the labels:
an h-class (NONE, HX, HY, HXY) plus four son order pairs.  NONE covers both
"leave the element alone" (son 1 = current orders) and p-refinement (son 1 =
new orders); inactive sons are ``(0, 0)``.
"""
import csv
import math
from dataclasses import dataclass

import numpy as np

from .mesh import MAX_ORDER, Kind, Refinement

NONE, HX, HY, HXY = range(4)
H_CLASSES = ("NONE", "HX", "HY", "HXY")
ACTIVE_SONS = {NONE: 1, HX: 2, HY: 2, HXY: 4}
_KIND_TO_H = {Kind.P_REF: NONE, Kind.H_X: HX, Kind.H_Y: HY, Kind.H_XY: HXY}
_H_TO_KIND = {HX: Kind.H_X, HY: Kind.H_Y, HXY: Kind.H_XY}

HEADER = ["x1", "y1", "x2", "y2", "dx", "dy", "px", "py", "href",
          "p1x", "p1y", "p2x", "p2y", "p3x", "p3y", "p4x", "p4y"]


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DecisionRecord:
    features: tuple  # (x1, y1, x2, y2, dx, dy, px, py)
    href: int
    sons: tuple  # four (px, py) pairs

    def __post_init__(self):
        x1, y1, x2, y2, dx, dy, px, py = self.features
        if dx != x2 - x1 or dy != y2 - y1:
            raise DatasetError(f"dimensions {dx, dy} inconsistent with bounds")
        if self.href not in ACTIVE_SONS:
            raise DatasetError(f"h-class {self.href} outside 0..3")
        if len(self.sons) != 4:
            raise DatasetError("need four son order pairs")
        n = ACTIVE_SONS[self.href]
        for i, (a, b) in enumerate(self.sons):
            if i < n and not (1 <= a <= MAX_ORDER and 1 <= b <= MAX_ORDER):
                raise DatasetError(f"active son {i + 1} has orders {(a, b)} outside 1..{MAX_ORDER}")
            if i >= n and (a, b) != (0, 0):
                raise DatasetError(f"inactive son {i + 1} must be (0, 0), got {(a, b)}")

    @property
    def orders(self):
        return int(self.features[6]), int(self.features[7])


def element_features(element):
    x1, y1, x2, y2 = element.bounds
    return (x1, y1, x2, y2, x2 - x1, y2 - y1, element.orders[0], element.orders[1])


def normalize(features):
    """Raw feature rows -> model inputs (coordinates, log2 sizes, orders / 9)."""
    F = np.asarray(features, dtype=float)
    if F.ndim == 1:
        F = F[None, :]
    out = F.copy()
    if np.any(F[:, 4:6] <= 0):
        raise DatasetError("degenerate element dimensions")
    out[:, 4:6] = np.log2(F[:, 4:6])
    out[:, 6:8] = F[:, 6:8] / MAX_ORDER
    return out


def encode_input(element):
    if not element.active:
        raise DatasetError(f"element {element.id} is not active")
    return normalize(element_features(element))[0]


def encode_output(decision, element):
    """``(href, sons)`` for a decision (CandidateEvaluation, Refinement or None)."""
    r = getattr(decision, "refinement", decision)
    if r is None:
        return NONE, (tuple(element.orders), (0, 0), (0, 0), (0, 0))
    sons = [tuple(o) for o in r.orders] + [(0, 0)] * (4 - len(r.orders))
    for a, b in sons:
        if not (0 <= a <= MAX_ORDER and 0 <= b <= MAX_ORDER):
            raise DatasetError(f"son order {(a, b)} outside 0..{MAX_ORDER}")
    return _KIND_TO_H[r.kind], tuple(sons)


def decode_output(href, sons, orders):
    """Inverse of ``encode_output`` given the element's current orders."""
    if href == NONE:
        if tuple(sons[0]) == tuple(orders):
            return None
        return Refinement(Kind.P_REF, (sons[0],))
    return Refinement(_H_TO_KIND[href], tuple(sons[: ACTIVE_SONS[href]]))


def make_record(element, decision):
    href, sons = encode_output(decision, element)
    return DecisionRecord(element_features(element), href, sons)


def record_refinement(record):
    return decode_output(record.href, record.sons, record.orders)


def write_dataset(records, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(HEADER)
        for r in records:
            x1, y1, x2, y2, dx, dy, px, py = r.features
            row = [f"{v:.17g}" for v in (x1, y1, x2, y2, dx, dy)] + [int(px), int(py), r.href]
            row += [v for son in r.sons for v in son]
            w.writerow(row)


def read_dataset(path):
    records = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != HEADER:
            raise DatasetError(f"{path}:1: unexpected header {header}")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(HEADER):
                raise DatasetError(f"{path}:{lineno}: expected {len(HEADER)} fields, got {len(row)}")
            try:
                geo = [float(v) for v in row[:6]]
                ints = [int(v) for v in row[6:]]
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in geo):
                raise DatasetError(f"{path}:{lineno}: non-finite value")
            sons = tuple((ints[3 + 2 * i], ints[4 + 2 * i]) for i in range(4))
            try:
                records.append(DecisionRecord(tuple(geo) + (ints[0], ints[1]), ints[2], sons))
            except DatasetError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
    return records


def as_arrays(records):
    """Model inputs ``X`` (n, 8), h labels (n,), son labels (n, 4, 2)."""
    if not records:
        return np.zeros((0, 8)), np.zeros(0, dtype=int), np.zeros((0, 4, 2), dtype=int)
    X = normalize([r.features for r in records])
    h = np.array([r.href for r in records], dtype=int)
    sons = np.array([r.sons for r in records], dtype=int)
    return X, h, sons
