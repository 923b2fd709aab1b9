import pytest
from hypothesis import given, settings, strategies as st

from molgen.graph import (
    BondOrder,
    DuplicateBondError,
    Element,
    MolGraph,
    ValencyTable,
    ValencyViolationError,
    can_add_bond,
    check_validity,
    connected_components,
    cycle_rank,
    implicit_hydrogens,
    ring_atom_flags,
    valence_used,
)

C, N, O = Element.C, Element.N, Element.O
S1, S2, S3 = BondOrder.SINGLE, BondOrder.DOUBLE, BondOrder.TRIPLE


def benzene():
    bonds = [(i, (i + 1) % 6, S2 if i % 2 == 0 else S1) for i in range(6)]
    return MolGraph([C] * 6, bonds)


class TestValenceUsed:
    def test_bare_carbon(self):
        g = MolGraph([C], [])
        assert valence_used(g, 0) == 0

    def test_ethene(self):
        g = MolGraph([C, C], [(0, 1, S2)])
        assert valence_used(g, 0) == 2

    def test_branched_center(self):
        # C-C(-C)=C: center carbon carries 1+1+2
        g = MolGraph([C, C, C, C], [(0, 1, S1), (1, 2, S1), (1, 3, S2)])
        assert valence_used(g, 1) == 4

    def test_out_of_range(self):
        g = MolGraph([C], [])
        with pytest.raises(IndexError):
            valence_used(g, 1)


class TestCanAddBond:
    def test_saturated_carbon(self):
        g = MolGraph([C, C, C, C, C], [(0, i, S1) for i in range(1, 5)])
        assert not can_add_bond(g.with_atom(C), 0, 5, S1)

    def test_fresh_carbons_triple(self):
        g = MolGraph([C, C], [])
        assert can_add_bond(g, 0, 1, S3)

    def test_oxygen_over_valence(self):
        # O already double bonded: 2 + 1 > 2
        g = MolGraph([O, C, C], [(0, 1, S2)])
        assert not can_add_bond(g, 0, 2, S1)

    def test_existing_bond_raises(self):
        g = MolGraph([C, C], [(0, 1, S1)])
        with pytest.raises(DuplicateBondError):
            can_add_bond(g, 0, 1, S1)

    def test_insertion_preserves_constraints(self):
        g = MolGraph([C, N, O], [(0, 1, S1)])
        assert can_add_bond(g, 1, 2, S1)
        g2 = g.with_bond(1, 2, S1)
        assert not check_validity(g2).violations


class TestImplicitHydrogens:
    def test_bare_carbon(self):
        assert implicit_hydrogens(MolGraph([C], [])) == [4]

    def test_carbonyl(self):
        assert implicit_hydrogens(MolGraph([C, O], [(0, 1, S2)])) == [2, 0]

    def test_benzene(self):
        assert implicit_hydrogens(benzene()) == [1, 1, 1, 1, 1, 1]

    def test_over_valence_raises_with_atoms(self):
        g = MolGraph([C] + [C] * 5, [(0, i, S1) for i in range(1, 6)])
        with pytest.raises(ValencyViolationError) as exc:
            implicit_hydrogens(g)
        assert exc.value.atoms == (0,)

    def test_custom_table(self):
        vt = ValencyTable({**{e: 4 for e in Element}, Element.S: 2})
        g = MolGraph([Element.S], [])
        assert implicit_hydrogens(g, vt) == [2]


class TestCheckValidity:
    def test_five_bonded_carbon(self):
        g = MolGraph([C] + [C] * 5, [(0, i, S1) for i in range(1, 6)])
        report = check_validity(g)
        assert not report.valid
        assert report.violations == (0,)

    def test_disconnected(self):
        report = check_validity(MolGraph([C, C], []))
        assert not report.valid
        assert not report.connected
        assert report.violations == ()

    def test_benzene_valid(self):
        assert check_validity(benzene()).valid

    def test_empty_graph_invalid(self):
        assert not check_validity(MolGraph([], [])).valid


class TestGraphBasics:
    def test_rejects_self_loop(self):
        with pytest.raises(Exception):
            MolGraph([C, C], [(0, 0, S1)])

    def test_rejects_duplicate_bond(self):
        with pytest.raises(DuplicateBondError):
            MolGraph([C, C], [(0, 1, S1), (1, 0, S2)])

    def test_rejects_out_of_range(self):
        with pytest.raises(Exception):
            MolGraph([C], [(0, 1, S1)])

    def test_immutable(self):
        g = MolGraph([C], [])
        with pytest.raises(AttributeError):
            g.atoms = ()

    def test_components_and_cycle_rank(self):
        g = benzene()
        assert connected_components(g) == [[0, 1, 2, 3, 4, 5]]
        assert cycle_rank(g) == 1
        assert all(ring_atom_flags(g))

    def test_chain_has_no_ring_atoms(self):
        g = MolGraph([C, C, C], [(0, 1, S1), (1, 2, S1)])
        assert ring_atom_flags(g) == [False, False, False]


@st.composite
def small_valid_graphs(draw):
    """Connected valency-respecting graphs grown atom by atom."""
    n = draw(st.integers(min_value=1, max_value=9))
    elements = [draw(st.sampled_from([C, N, O, Element.S]))]
    bonds = []
    used = [0]
    from molgen.graph import DEFAULT_VALENCY

    for i in range(1, n):
        elem = draw(st.sampled_from([C, N, O, Element.S]))
        limit_new = DEFAULT_VALENCY[elem]
        anchors = [a for a in range(i) if used[a] < DEFAULT_VALENCY[elements[a]]]
        if not anchors:
            break
        a = draw(st.sampled_from(anchors))
        max_k = min(3, limit_new, DEFAULT_VALENCY[elements[a]] - used[a])
        k = draw(st.integers(min_value=1, max_value=max_k))
        elements.append(elem)
        used.append(k)
        used[a] += k
        bonds.append((a, i, BondOrder(k)))
    return MolGraph(elements, bonds)


@settings(max_examples=200, deadline=None)
@given(small_valid_graphs())
def test_hydrogens_nonnegative_iff_no_violation(g):
    report = check_validity(g)
    if not report.violations:
        assert all(h >= 0 for h in implicit_hydrogens(g))


@settings(max_examples=200, deadline=None)
@given(small_valid_graphs(), st.data())
def test_can_add_bond_then_insert_stays_valid(g, data):
    if g.n_atoms < 2:
        return
    i = data.draw(st.integers(0, g.n_atoms - 1))
    j = data.draw(st.integers(0, g.n_atoms - 1))
    if i == j or g.bond_order(i, j) is not None:
        return
    k = BondOrder(data.draw(st.integers(1, 3)))
    if can_add_bond(g, i, j, k):
        g2 = g.with_bond(i, j, k)
        report = check_validity(g2)
        assert i not in report.violations and j not in report.violations
