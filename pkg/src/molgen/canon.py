"""Canonical keys for molecular graphs.

Equal keys iff two graphs are isomorphic respecting element labels and bond
orders. The key is the lexicographically smallest serialization of the graph
over all labelings reachable by iterative neighborhood refinement with
individualization on tied cells, so it is exact (no hashing step that could
collide).
"""

from __future__ import annotations

import struct
from typing import Sequence

from .graph import MolGraph, MolGraphError


def _refine(g: MolGraph, colors: list[int]) -> list[int]:
    """Equitable refinement: split color classes by the multiset of
    (bond order, neighbor color) until stable. New color ids are ranks of
    sorted signatures, so they are isomorphism-invariant."""
    n = g.n_atoms
    while True:
        sigs = []
        for v in range(n):
            nbr = sorted((int(k), colors[w]) for w, k in g.neighbors(v))
            sigs.append((colors[v], tuple(nbr)))
        order = {sig: rank for rank, sig in enumerate(sorted(set(sigs)))}
        new_colors = [order[s] for s in sigs]
        if new_colors == colors:
            return colors
        colors = new_colors


def _serialize(g: MolGraph, position: Sequence[int]) -> bytes:
    """Byte form of g relabeled so old atom v sits at position[v]."""
    n = g.n_atoms
    inv = [0] * n
    for old, pos in enumerate(position):
        inv[pos] = old
    out = [struct.pack(">H", n)]
    out.append(bytes(g.element(inv[p]).index for p in range(n)))
    edges = sorted((min(position[i], position[j]), max(position[i], position[j]), int(k))
                   for i, j, k in g.bonds)
    for i, j, k in edges:
        out.append(struct.pack(">HHB", i, j, k))
    return b"".join(out)


def _search(g: MolGraph, colors: list[int], best: list[tuple[bytes, tuple[int, ...]] | None]) -> None:
    colors = _refine(g, colors)
    n = g.n_atoms
    # first (lowest color id) non-singleton cell, if any
    counts: dict[int, int] = {}
    for c in colors:
        counts[c] = counts.get(c, 0) + 1
    target = None
    for c in sorted(counts):
        if counts[c] > 1:
            target = c
            break
    if target is None:
        position = tuple(colors)  # discrete: color id == canonical position
        key = _serialize(g, position)
        if best[0] is None or key < best[0][0]:
            best[0] = (key, position)
        return
    for v in range(n):
        if colors[v] != target:
            continue
        # individualize v: pull it ahead of its cell without touching others
        branched = [2 * c for c in colors]
        branched[v] = 2 * target - 1
        ranks = {c: r for r, c in enumerate(sorted(set(branched)))}
        _search(g, [ranks[c] for c in branched], best)


def canonical_order(g: MolGraph) -> tuple[int, ...]:
    """Permutation placing each atom at its canonical position."""
    if g.n_atoms == 0:
        raise MolGraphError("canonical key of an empty graph")
    init = [g.element(v).index for v in range(g.n_atoms)]
    ranks = {c: r for r, c in enumerate(sorted(set(init)))}
    best: list[tuple[bytes, tuple[int, ...]] | None] = [None]
    _search(g, [ranks[c] for c in init], best)
    assert best[0] is not None
    return best[0][1]


def canonical_key(g: MolGraph) -> bytes:
    """Order-invariant identifier: equal keys iff label/order isomorphic."""
    if g.n_atoms == 0:
        raise MolGraphError("canonical key of an empty graph")
    init = [g.element(v).index for v in range(g.n_atoms)]
    ranks = {c: r for r, c in enumerate(sorted(set(init)))}
    best: list[tuple[bytes, tuple[int, ...]] | None] = [None]
    _search(g, [ranks[c] for c in init], best)
    assert best[0] is not None
    return best[0][0]
