import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hporacle.dataset import (ACTIVE_SONS, HEADER, HX, HXY, NONE, DatasetError, DecisionRecord, as_arrays,
                              decode_output, encode_input, encode_output, make_record, read_dataset,
                              record_refinement, write_dataset)
from hporacle.mesh import Element, Kind, Refinement


def test_encode_input_examples():
    np.testing.assert_allclose(encode_input(Element(0, (0.0, 0.0, 1.0, 1.0), (2, 2))),
                               [0, 0, 1, 1, 0, 0, 2 / 9, 2 / 9])
    f = encode_input(Element(0, (0.0, 0.0, 2.0 ** -6, 2.0 ** -6), (3, 1)))
    np.testing.assert_allclose(f[4:6], [-6, -6])
    K = Element(0, (0.0, 0.0, 1.0, 1.0), (2, 2), children=(1, 2))
    with pytest.raises(DatasetError):
        encode_input(K)


def test_encode_output_examples():
    K = Element(0, (0.0, 0.0, 0.5, 0.5), (3, 3))
    assert encode_output(None, K) == (NONE, ((3, 3), (0, 0), (0, 0), (0, 0)))
    assert encode_output(Refinement(Kind.H_X, ((2, 3), (3, 3))), K) == (HX, ((2, 3), (3, 3), (0, 0), (0, 0)))
    assert encode_output(Refinement(Kind.P_REF, ((4, 3),)), K) == (NONE, ((4, 3), (0, 0), (0, 0), (0, 0)))


def test_decode_inverts_encode():
    K = Element(0, (0.0, 0.0, 0.5, 0.5), (2, 2))
    for r in (None, Refinement(Kind.P_REF, ((3, 2),)), Refinement(Kind.H_Y, ((2, 2), (3, 3))),
              Refinement.isotropic((2, 3))):
        assert decode_output(*encode_output(r, K), K.orders) == r
        assert record_refinement(make_record(K, r)) == r


def test_record_invariants():
    geo = (0.0, 0.0, 0.5, 0.25, 0.5, 0.25, 2, 2)
    with pytest.raises(DatasetError):
        DecisionRecord(geo, 4, ((2, 2), (0, 0), (0, 0), (0, 0)))
    with pytest.raises(DatasetError):
        DecisionRecord(geo, HX, ((2, 2), (0, 0), (0, 0), (0, 0)))
    with pytest.raises(DatasetError):
        DecisionRecord(geo, NONE, ((2, 2), (2, 2), (0, 0), (0, 0)))
    with pytest.raises(DatasetError):
        DecisionRecord((0.0, 0.0, 0.5, 0.25, 0.5, 0.5, 2, 2), NONE, ((2, 2), (0, 0), (0, 0), (0, 0)))


def test_empty_file_is_header_only(tmp_path):
    path = tmp_path / "d.csv"
    write_dataset([], path)
    assert path.read_text() == ",".join(HEADER) + "\n"
    assert read_dataset(path) == []
    X, h, sons = as_arrays([])
    assert X.shape == (0, 8) and sons.shape == (0, 4, 2)


@st.composite
def records(draw):
    level = draw(st.integers(0, 12)), draw(st.integers(0, 12))
    dx, dy = 2.0 ** -level[0], 2.0 ** -level[1]
    x1 = draw(st.integers(-(2 ** level[0]), 2 ** level[0] - 1)) * dx
    y1 = draw(st.integers(-(2 ** level[1]), 2 ** level[1] - 1)) * dy
    px, py = draw(st.integers(1, 9)), draw(st.integers(1, 9))
    href = draw(st.integers(0, 3))
    order = st.tuples(st.integers(1, 9), st.integers(1, 9))
    n = ACTIVE_SONS[href]
    sons = tuple(draw(order) for _ in range(n)) + ((0, 0),) * (4 - n)
    return DecisionRecord((x1, y1, x1 + dx, y1 + dy, dx, dy, px, py), href, sons)


@settings(max_examples=5, deadline=None)
@given(st.lists(records(), min_size=200, max_size=200))
def test_round_trip(tmp_path_factory, recs):
    path = tmp_path_factory.mktemp("rt") / "d.csv"
    write_dataset(recs, path)
    assert read_dataset(path) == recs


def test_thousand_seeded_round_trip(tmp_path):
    rng = np.random.default_rng(1000)
    recs = []
    for _ in range(1000):
        dx, dy = 2.0 ** -rng.integers(0, 20), 2.0 ** -rng.integers(0, 20)
        x1, y1 = rng.integers(-4, 4) * dx, rng.integers(-4, 4) * dy
        href = int(rng.integers(4))
        n = ACTIVE_SONS[href]
        sons = tuple((int(a), int(b)) for a, b in rng.integers(1, 10, size=(n, 2))) + ((0, 0),) * (4 - n)
        recs.append(DecisionRecord((x1, y1, x1 + dx, y1 + dy, dx, dy, int(rng.integers(1, 10)),
                                    int(rng.integers(1, 10))), href, sons))
    path = tmp_path / "d.csv"
    write_dataset(recs, path)
    assert read_dataset(path) == recs
    X, h, sons = as_arrays(recs)
    assert X.shape == (1000, 8) and h.shape == (1000,) and sons.shape == (1000, 4, 2)


def test_bad_rows_name_the_line(tmp_path):
    path = tmp_path / "d.csv"
    good = "0,0,1,1,1,1,2,2,0,2,2,0,0,0,0,0,0"
    path.write_text(",".join(HEADER) + "\n" + good + "\n" + "0,0,1,1,1,1,2,2,4,2,2,0,0,0,0,0,0\n")
    with pytest.raises(DatasetError, match=r"d\.csv:3"):
        read_dataset(path)
    path.write_text(",".join(HEADER) + "\n" + good + ",7\n")
    with pytest.raises(DatasetError, match=r"d\.csv:2"):
        read_dataset(path)
    path.write_text("a,b\n")
    with pytest.raises(DatasetError, match=r"d\.csv:1"):
        read_dataset(path)


def test_hxy_record_arrays():
    K = Element(0, (0.0, 0.0, 0.25, 0.25), (2, 3))
    rec = make_record(K, Refinement(Kind.H_XY, ((2, 3), (3, 3), (2, 4), (3, 4))))
    assert rec.href == HXY
    X, h, sons = as_arrays([rec])
    np.testing.assert_array_equal(sons[0], [[2, 3], [3, 3], [2, 4], [3, 4]])
    np.testing.assert_allclose(X[0, 4:], [-2, -2, 2 / 9, 3 / 9])
