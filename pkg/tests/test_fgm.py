import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cliqueformer.fgm import CliqueLayout, clique_indices, knot_multiplicity, make_chain


@st.composite
def layouts(draw):
    d_clique = draw(st.integers(1, 12))
    n_clique = draw(st.integers(1, 40))
    top = d_clique - 1 if n_clique <= 2 else d_clique // 2
    d_knot = draw(st.integers(0, top))
    return n_clique, d_clique, d_knot


@settings(max_examples=1000, deadline=None)
@given(layouts())
def test_chain_layout_properties(triple):
    n, c, k = triple
    layout = make_chain(n, c, k)
    assert layout.d_z == k + n * (c - k)
    covered = set()
    for i in range(1, n + 1):
        idx = clique_indices(layout, i)
        assert len(idx) == c and idx == sorted(idx)
        assert 0 <= idx[0] and idx[-1] < layout.d_z
        covered.update(idx)
        if i < n:
            assert len(set(idx) & set(clique_indices(layout, i + 1))) == k
        if i + 1 < n:
            # non-neighbours share nothing
            assert not set(idx) & set(clique_indices(layout, i + 2))
    assert covered == set(range(layout.d_z))
    mult = knot_multiplicity(layout)
    assert mult.sum() == n * c
    assert (mult >= 1).all() and (mult <= 2).all()
    assert (mult == 2).sum() == (n - 1) * k


def test_examples():
    assert make_chain(2, 3, 1).d_z == 5
    assert clique_indices(make_chain(2, 3, 1), 2) == [2, 3, 4]
    assert make_chain(10, 3, 1).d_z == 21
    assert make_chain(4, 2, 0).d_z == 8
    assert make_chain(2, 3, 2).d_z == 4  # two cliques may overlap by more than half
    np.testing.assert_array_equal(knot_multiplicity(make_chain(3, 3, 1)), [1, 1, 2, 1, 2, 1, 1])
    assert list(np.flatnonzero(knot_multiplicity(make_chain(2, 4, 2)) == 2)) == [2, 3]
    np.testing.assert_array_equal(make_chain(3, 3, 1).index_matrix(), [[0, 1, 2], [2, 3, 4], [4, 5, 6]])


@pytest.mark.parametrize("triple", [(0, 3, 1), (2, 0, 0), (2, 3, 3), (2, 3, 4), (2, 3, -1), (3, 3, 2)])
def test_invalid_layouts(triple):
    with pytest.raises(ValueError):
        make_chain(*triple)


def test_clique_index_range():
    layout = make_chain(3, 3, 1)
    with pytest.raises(IndexError):
        clique_indices(layout, 0)
    with pytest.raises(IndexError):
        layout.clique_indices(4)


def test_layout_is_frozen():
    layout = CliqueLayout(2, 3, 1)
    with pytest.raises(Exception):
        layout.n_clique = 3
    assert layout.to_tuple() == (2, 3, 1)
