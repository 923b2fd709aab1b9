"""Deterministic synthetic molecule generation.

Grows connected, valence-respecting graphs with drug-like flavor: mostly
carbon, scattered heteroatoms, aromatic-style six-rings in kekulized form,
and occasional small aliphatic rings. Used for the bundled sample corpus,
critic training sets, and smoke data in tests.
"""

from __future__ import annotations

import numpy as np

from .graph import BondOrder, DEFAULT_VALENCY, Element, MolGraph, check_validity

# sampling weights for new heavy atoms
ELEMENT_WEIGHTS = [
    (Element.C, 0.70), (Element.N, 0.12), (Element.O, 0.12),
    (Element.S, 0.02), (Element.F, 0.02), (Element.Cl, 0.015),
    (Element.Br, 0.004), (Element.P, 0.001),
]

BOND_WEIGHTS = {BondOrder.SINGLE: 0.86, BondOrder.DOUBLE: 0.12, BondOrder.TRIPLE: 0.02}


class _Growth:
    def __init__(self):
        self.elements: list[Element] = [Element.C]
        self.bonds: list[tuple[int, int, BondOrder]] = []
        self.free: list[int] = [DEFAULT_VALENCY[Element.C]]

    def add_atom(self, elem: Element, anchor: int, order: BondOrder) -> int:
        idx = len(self.elements)
        self.elements.append(elem)
        self.free.append(DEFAULT_VALENCY[elem] - int(order))
        self.free[anchor] -= int(order)
        self.bonds.append((anchor, idx, order))
        return idx

    def add_bond(self, i: int, j: int, order: BondOrder) -> None:
        self.bonds.append((min(i, j), max(i, j), order))
        self.free[i] -= int(order)
        self.free[j] -= int(order)

    def bonded(self, i: int, j: int) -> bool:
        a, b = min(i, j), max(i, j)
        return any(x == a and y == b for x, y, _ in self.bonds)

    def distances_from(self, start: int) -> list[int]:
        adj: list[list[int]] = [[] for _ in self.elements]
        for i, j, _ in self.bonds:
            adj[i].append(j)
            adj[j].append(i)
        dist = [-1] * len(self.elements)
        dist[start] = 0
        queue = [start]
        while queue:
            nxt = []
            for v in queue:
                for w in adj[v]:
                    if dist[w] == -1:
                        dist[w] = dist[v] + 1
                        nxt.append(w)
            queue = nxt
        return dist


def _pick(rng: np.random.Generator, options, weights) -> object:
    w = np.asarray(weights, dtype=np.float64)
    return options[rng.choice(len(options), p=w / w.sum())]


def _attach_aromatic_ring(growth: _Growth, anchor: int) -> None:
    """Fused-on kekulized benzene: six carbons, alternating orders."""
    base = len(growth.elements)
    first = growth.add_atom(Element.C, anchor, BondOrder.SINGLE)
    prev = first
    for k in range(5):
        order = BondOrder.DOUBLE if k % 2 == 0 else BondOrder.SINGLE
        prev = growth.add_atom(Element.C, prev, order)
    growth.add_bond(first, prev, BondOrder.SINGLE)
    del base


def random_molecule(rng: np.random.Generator, min_atoms: int = 10, max_atoms: int = 50,
                    aromatic_rate: float = 0.25, ring_rate: float = 0.06,
                    branch_boost: float = 0.0, size_drift: float = 0.0) -> MolGraph:
    """One connected valence-respecting molecule with n in [min, max].

    `aromatic_rate` and `ring_rate` are per-growth-step probabilities of
    attaching a benzene-style ring or closing a small aliphatic ring;
    `branch_boost` biases anchor choice toward already-substituted atoms.
    `size_drift` makes bigger molecules proportionally more aromatic (the
    usual drug-corpus trend): the effective aromatic rate is
    aromatic_rate * (1 + size_drift * (target - min)/(max - min)).
    """
    target = int(rng.integers(min_atoms, max_atoms + 1))
    if size_drift and max_atoms > min_atoms:
        scale = 1.0 + size_drift * (target - min_atoms) / (max_atoms - min_atoms)
        aromatic_rate = min(aromatic_rate * scale, 0.9)
    growth = _Growth()
    guard = 0
    while len(growth.elements) < target and guard < 10 * target:
        guard += 1
        anchors = [i for i in range(len(growth.elements)) if growth.free[i] >= 1]
        if not anchors:
            break
        if rng.random() < aromatic_rate and len(growth.elements) + 6 <= target:
            _attach_aromatic_ring(growth, anchors[int(rng.integers(len(anchors)))])
            continue
        degree = [sum(1 for a, b, _ in growth.bonds if a == i or b == i) for i in anchors]
        weights = [1.0 + branch_boost * d for d in degree]
        anchor = _pick(rng, anchors, weights)
        elem = _pick(rng, [e for e, _ in ELEMENT_WEIGHTS], [w for _, w in ELEMENT_WEIGHTS])
        max_order = min(3, growth.free[anchor], DEFAULT_VALENCY[elem])
        orders = [o for o in BOND_WEIGHTS if int(o) <= max_order]
        order = _pick(rng, orders, [BOND_WEIGHTS[o] for o in orders])
        growth.add_atom(elem, anchor, order)
        # occasional small aliphatic ring closure
        if rng.random() < ring_rate and len(growth.elements) >= 5:
            closer = len(growth.elements) - 1
            if growth.free[closer] >= 1:
                dist = growth.distances_from(closer)
                candidates = [v for v in range(len(dist))
                              if dist[v] in (3, 4, 5) and growth.free[v] >= 1
                              and not growth.bonded(closer, v)]
                if candidates:
                    growth.add_bond(closer, candidates[int(rng.integers(len(candidates)))],
                                    BondOrder.SINGLE)
    return MolGraph(growth.elements, growth.bonds)


def generate_molecules(count: int, seed: int, min_atoms: int = 10, max_atoms: int = 50,
                       accept=None, **kw) -> list[MolGraph]:
    """Deterministic batch generation with an optional acceptance predicate."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    out: list[MolGraph] = []
    attempts = 0
    while len(out) < count:
        attempts += 1
        if attempts > 100 * count:
            raise RuntimeError("molecule generation is rejecting too often")
        g = random_molecule(rng, min_atoms=min_atoms, max_atoms=max_atoms, **kw)
        if g.n_atoms < min_atoms or not check_validity(g).valid:
            continue
        if accept is not None and not accept(g):
            continue
        out.append(g)
    return out
