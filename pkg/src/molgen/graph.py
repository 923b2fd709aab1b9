"""Molecular graphs: typed atoms, integer-order bonds, valency accounting.

A MolGraph is an immutable undirected graph over heavy atoms only.
Hydrogens are never stored; they are derived from the valency table
(`implicit_hydrogens`). Disconnected graphs are representable (they occur
mid-decode) but never count as valid molecules.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence


class Element(enum.Enum):
    """The nine supported heavy elements. Order fixes vocabulary indices."""

    C = "C"
    N = "N"
    O = "O"
    F = "F"
    P = "P"
    S = "S"
    Cl = "Cl"
    Br = "Br"
    I = "I"

    @property
    def index(self) -> int:
        return _ELEMENT_INDEX[self]

    @classmethod
    def from_index(cls, idx: int) -> "Element":
        return _ELEMENT_ORDER[idx]

    @classmethod
    def from_symbol(cls, symbol: str) -> "Element":
        try:
            return cls(symbol)
        except ValueError:
            raise UnsupportedElementError(symbol) from None


_ELEMENT_ORDER = tuple(Element)
_ELEMENT_INDEX = {e: i for i, e in enumerate(_ELEMENT_ORDER)}

N_ELEMENTS = len(_ELEMENT_ORDER)


class BondOrder(enum.IntEnum):
    """Bond multiplicity. Category 0 is reserved for "no bond" in sequence
    space and never appears on a stored edge."""

    SINGLE = 1
    DOUBLE = 2
    TRIPLE = 3


N_EDGE_CATEGORIES = 4  # {none, single, double, triple}


class MolGraphError(ValueError):
    pass


class UnsupportedElementError(MolGraphError):
    def __init__(self, symbol: str):
        super().__init__(f"unsupported element: {symbol!r}")
        self.symbol = symbol


class DuplicateBondError(MolGraphError):
    pass


class ValencyViolationError(MolGraphError):
    def __init__(self, atoms: Sequence[int]):
        super().__init__(f"valency exceeded at atoms {sorted(atoms)}")
        self.atoms = tuple(sorted(atoms))


DEFAULT_MAX_VALENCE = {
    Element.C: 4,
    Element.N: 3,
    Element.O: 2,
    Element.F: 1,
    Element.P: 5,
    Element.S: 6,
    Element.Cl: 1,
    Element.Br: 1,
    Element.I: 1,
}


@dataclass(frozen=True)
class ValencyTable:
    """Maximum total bond order per element.

    The defaults are the maximal common organic valences; the table is a
    config-level choice, overridable wherever a ValencyTable is accepted.
    """

    limits: dict[Element, int] = field(default_factory=lambda: dict(DEFAULT_MAX_VALENCE))

    def __post_init__(self):
        for elem in Element:
            if elem not in self.limits:
                raise MolGraphError(f"valency table missing entry for {elem.value}")
            if self.limits[elem] < 1:
                raise MolGraphError(f"valency limit for {elem.value} must be >= 1")

    def __getitem__(self, elem: Element) -> int:
        return self.limits[elem]

    def as_index_array(self) -> list[int]:
        """Limits in vocabulary order, for vectorised lookups."""
        return [self.limits[e] for e in _ELEMENT_ORDER]


DEFAULT_VALENCY = ValencyTable()


@dataclass(frozen=True)
class ValidityReport:
    valid: bool
    violations: tuple[int, ...]  # atom indices exceeding their valence
    connected: bool


class MolGraph:
    """Immutable undirected multigraph-free molecular graph.

    Atoms are Element values addressed by index; bonds are (i, j, order)
    with i < j, at most one bond per pair, no self-loops.
    """

    __slots__ = ("_atoms", "_bonds", "_adj", "_hash")

    def __init__(self, atoms: Iterable[Element], bonds: Iterable[tuple[int, int, BondOrder]]):
        atom_tuple = tuple(atoms)
        if not all(isinstance(a, Element) for a in atom_tuple):
            raise MolGraphError("atoms must be Element values")
        n = len(atom_tuple)
        norm = []
        seen = set()
        for i, j, k in bonds:
            if i == j:
                raise MolGraphError(f"self-loop at atom {i}")
            if not (0 <= i < n and 0 <= j < n):
                raise MolGraphError(f"bond ({i},{j}) out of range for {n} atoms")
            if i > j:
                i, j = j, i
            if (i, j) in seen:
                raise DuplicateBondError(f"duplicate bond ({i},{j})")
            seen.add((i, j))
            norm.append((i, j, BondOrder(k)))
        norm.sort()
        adj: list[list[tuple[int, BondOrder]]] = [[] for _ in range(n)]
        for i, j, k in norm:
            adj[i].append((j, k))
            adj[j].append((i, k))
        object.__setattr__(self, "_atoms", atom_tuple)
        object.__setattr__(self, "_bonds", tuple(norm))
        object.__setattr__(self, "_adj", tuple(tuple(sorted(nb)) for nb in adj))
        object.__setattr__(self, "_hash", None)

    def __setattr__(self, name, value):
        raise AttributeError("MolGraph is immutable")

    @property
    def atoms(self) -> tuple[Element, ...]:
        return self._atoms

    @property
    def bonds(self) -> tuple[tuple[int, int, BondOrder], ...]:
        return self._bonds

    @property
    def n_atoms(self) -> int:
        return len(self._atoms)

    def element(self, i: int) -> Element:
        return self._atoms[i]

    def neighbors(self, i: int) -> tuple[tuple[int, BondOrder], ...]:
        return self._adj[i]

    def degree(self, i: int) -> int:
        return len(self._adj[i])

    def bond_order(self, i: int, j: int) -> BondOrder | None:
        for nb, k in self._adj[i]:
            if nb == j:
                return k
        return None

    def with_bond(self, i: int, j: int, k: BondOrder) -> "MolGraph":
        return MolGraph(self._atoms, list(self._bonds) + [(i, j, k)])

    def with_atom(self, elem: Element) -> "MolGraph":
        return MolGraph(list(self._atoms) + [elem], self._bonds)

    def permuted(self, perm: Sequence[int]) -> "MolGraph":
        """Relabel atoms: new index of old atom i is perm[i]."""
        n = self.n_atoms
        if sorted(perm) != list(range(n)):
            raise MolGraphError("perm is not a permutation")
        new_atoms: list[Element | None] = [None] * n
        for old, new in enumerate(perm):
            new_atoms[new] = self._atoms[old]
        new_bonds = [(perm[i], perm[j], k) for i, j, k in self._bonds]
        return MolGraph(new_atoms, new_bonds)  # type: ignore[arg-type]

    def __eq__(self, other) -> bool:
        if not isinstance(other, MolGraph):
            return NotImplemented
        return self._atoms == other._atoms and self._bonds == other._bonds

    def __hash__(self) -> int:
        if self._hash is None:
            object.__setattr__(self, "_hash", hash((self._atoms, self._bonds)))
        return self._hash

    def __repr__(self) -> str:
        return f"MolGraph({len(self._atoms)} atoms, {len(self._bonds)} bonds)"


def valence_used(g: MolGraph, atom: int) -> int:
    """Total bond order currently incident to `atom`."""
    if not (0 <= atom < g.n_atoms):
        raise IndexError(f"atom index {atom} out of range")
    return sum(int(k) for _, k in g.neighbors(atom))


def can_add_bond(g: MolGraph, i: int, j: int, k: BondOrder, vt: ValencyTable = DEFAULT_VALENCY) -> bool:
    """True iff a bond of order k between i and j would respect both
    endpoints' valence limits."""
    if i == j:
        raise MolGraphError("cannot bond an atom to itself")
    if not (0 <= i < g.n_atoms and 0 <= j < g.n_atoms):
        raise IndexError(f"bond ({i},{j}) out of range")
    if g.bond_order(i, j) is not None:
        raise DuplicateBondError(f"bond ({i},{j}) already present")
    k = int(k)
    return (valence_used(g, i) + k <= vt[g.element(i)]
            and valence_used(g, j) + k <= vt[g.element(j)])


def implicit_hydrogens(g: MolGraph, vt: ValencyTable = DEFAULT_VALENCY) -> list[int]:
    """Hydrogen count completing each atom to its table valence.

    Raises ValencyViolationError (listing the offending atoms) if any atom
    already exceeds its limit.
    """
    counts = []
    bad = []
    for i in range(g.n_atoms):
        h = vt[g.element(i)] - valence_used(g, i)
        if h < 0:
            bad.append(i)
        counts.append(h)
    if bad:
        raise ValencyViolationError(bad)
    return counts


def connected_components(g: MolGraph) -> list[list[int]]:
    n = g.n_atoms
    seen = [False] * n
    comps = []
    for start in range(n):
        if seen[start]:
            continue
        stack = [start]
        seen[start] = True
        comp = []
        while stack:
            v = stack.pop()
            comp.append(v)
            for nb, _ in g.neighbors(v):
                if not seen[nb]:
                    seen[nb] = True
                    stack.append(nb)
        comps.append(sorted(comp))
    return comps


def is_connected(g: MolGraph) -> bool:
    return g.n_atoms > 0 and len(connected_components(g)) == 1


def check_validity(g: MolGraph, vt: ValencyTable = DEFAULT_VALENCY) -> ValidityReport:
    """Report validity: connected, nonempty, all atoms within valence.

    Never raises; the per-atom violation list feeds the structural penalty.
    """
    violations = tuple(i for i in range(g.n_atoms)
                       if valence_used(g, i) > vt[g.element(i)])
    connected = is_connected(g)
    return ValidityReport(valid=connected and not violations and g.n_atoms > 0,
                          violations=violations,
                          connected=connected)


def ring_bond_flags(g: MolGraph) -> dict[tuple[int, int], bool]:
    """Map each bond (i, j) with i < j to True iff it lies on a cycle.

    Bridges are found with a DFS lowpoint pass; every non-bridge edge is a
    ring bond.
    """
    n = g.n_atoms
    disc = [-1] * n
    low = [0] * n
    bridges: set[tuple[int, int]] = set()
    timer = 0
    for root in range(n):
        if disc[root] != -1:
            continue
        # iterative DFS: (vertex, parent, neighbor iterator index)
        stack = [(root, -1, 0)]
        disc[root] = low[root] = timer
        timer += 1
        while stack:
            v, parent, idx = stack.pop()
            nbrs = g.neighbors(v)
            advanced = False
            while idx < len(nbrs):
                w, _ = nbrs[idx]
                idx += 1
                if disc[w] == -1:
                    stack.append((v, parent, idx))
                    disc[w] = low[w] = timer
                    timer += 1
                    stack.append((w, v, 0))
                    advanced = True
                    break
                elif w != parent:
                    low[v] = min(low[v], disc[w])
            if not advanced and parent != -1:
                low[parent] = min(low[parent], low[v])
                if low[v] > disc[parent]:
                    bridges.add((min(v, parent), max(v, parent)))
    return {(i, j): (i, j) not in bridges for i, j, _ in g.bonds}


def ring_atom_flags(g: MolGraph) -> list[bool]:
    """True per atom iff the atom lies on a cycle."""
    flags = [False] * g.n_atoms
    for (i, j), in_ring in ring_bond_flags(g).items():
        if in_ring:
            flags[i] = True
            flags[j] = True
    return flags


def cycle_rank(g: MolGraph) -> int:
    """Number of independent cycles: |E| - |V| + #components."""
    return len(g.bonds) - g.n_atoms + len(connected_components(g))


def fundamental_cycles(g: MolGraph) -> list[list[int]]:
    """Cycles induced by non-tree edges of a BFS forest, as vertex lists."""
    n = g.n_atoms
    parent = [-1] * n
    depth = [-1] * n
    cycles = []
    tree_edges: set[tuple[int, int]] = set()
    for root in range(n):
        if depth[root] != -1:
            continue
        depth[root] = 0
        queue = [root]
        while queue:
            next_queue = []
            for v in queue:
                for w, _ in g.neighbors(v):
                    if depth[w] == -1:
                        depth[w] = depth[v] + 1
                        parent[w] = v
                        tree_edges.add((min(v, w), max(v, w)))
                        next_queue.append(w)
            queue = next_queue
    for i, j, _ in g.bonds:
        if (i, j) in tree_edges:
            continue
        # walk both endpoints up to their lowest common ancestor
        path_i, path_j = [i], [j]
        a, b = i, j
        while depth[a] > depth[b]:
            a = parent[a]
            path_i.append(a)
        while depth[b] > depth[a]:
            b = parent[b]
            path_j.append(b)
        while a != b:
            a = parent[a]
            b = parent[b]
            path_i.append(a)
            path_j.append(b)
        cycles.append(path_i + path_j[-2::-1])
    return cycles
