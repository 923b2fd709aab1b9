"""SMILES ingestion and output for the supported kekulizable subset.

Supported: the nine-element vocabulary, organic-subset atoms plus bracket
atoms without charge/isotope/stereo, branches, ring closures (including
%nn), aromatic lowercase atoms (kekulized on parse). Rejected with a
positioned diagnostic: charges, isotopes, stereo markers, dots, explicit
hydrogens, anything outside the element set.

Output is always kekulized: uppercase atoms, explicit '=' and '#'.
"""

from __future__ import annotations

import enum
import sys
from dataclasses import dataclass

from .graph import (
    DEFAULT_VALENCY,
    BondOrder,
    Element,
    MolGraph,
    ValencyTable,
    check_validity,
    ring_bond_flags,
    valence_used,
)

_ORGANIC = {"C", "N", "O", "F", "P", "S", "Cl", "Br", "I"}
_AROMATIC = {"c", "n", "o", "p", "s"}


class ParseError(ValueError):
    """Lexical or structural SMILES error with the character offset."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.message = message
        self.position = position


class UnkekulizableError(ParseError):
    pass


class InvalidMoleculeError(ValueError):
    pass


class TokenKind(enum.Enum):
    ATOM = "atom"
    AROMATIC_ATOM = "aromatic_atom"
    BOND = "bond"
    RING = "ring"
    BRANCH_OPEN = "branch_open"
    BRANCH_CLOSE = "branch_close"
    DOT = "dot"


@dataclass(frozen=True)
class SmilesToken:
    kind: TokenKind
    text: str
    position: int


_BOND_CHARS = {"-": 1, "=": 2, "#": 3, ":": 0}  # 0 marks "aromatic"


def tokenize(smiles: str) -> list[SmilesToken]:
    tokens = []
    i = 0
    n = len(smiles)
    while i < n:
        ch = smiles[i]
        if ch == "[":
            end = smiles.find("]", i)
            if end == -1:
                raise ParseError("unterminated bracket atom", i)
            body = smiles[i + 1:end]
            kind = TokenKind.AROMATIC_ATOM if body[:1].islower() else TokenKind.ATOM
            tokens.append(SmilesToken(kind, smiles[i:end + 1], i))
            i = end + 1
        elif smiles[i:i + 2] in ("Cl", "Br"):
            tokens.append(SmilesToken(TokenKind.ATOM, smiles[i:i + 2], i))
            i += 2
        elif ch in "CNOFPSI":
            tokens.append(SmilesToken(TokenKind.ATOM, ch, i))
            i += 1
        elif ch in _AROMATIC:
            tokens.append(SmilesToken(TokenKind.AROMATIC_ATOM, ch, i))
            i += 1
        elif ch in _BOND_CHARS:
            tokens.append(SmilesToken(TokenKind.BOND, ch, i))
            i += 1
        elif ch == "(":
            tokens.append(SmilesToken(TokenKind.BRANCH_OPEN, ch, i))
            i += 1
        elif ch == ")":
            tokens.append(SmilesToken(TokenKind.BRANCH_CLOSE, ch, i))
            i += 1
        elif ch.isdigit():
            tokens.append(SmilesToken(TokenKind.RING, ch, i))
            i += 1
        elif ch == "%":
            if i + 2 >= n or not smiles[i + 1:i + 3].isdigit():
                raise ParseError("'%' must be followed by two digits", i)
            tokens.append(SmilesToken(TokenKind.RING, smiles[i:i + 3], i))
            i += 3
        elif ch == ".":
            tokens.append(SmilesToken(TokenKind.DOT, ch, i))
            i += 1
        elif ch in "/\\@":
            raise ParseError("stereochemistry markers are not supported", i)
        elif ch in "+-" or ch == "*":
            raise ParseError(f"unsupported SMILES construct {ch!r}", i)
        elif ch.isspace():
            raise ParseError("whitespace inside SMILES", i)
        elif ch.isalpha():
            symbol = smiles[i:i + 2] if smiles[i + 1:i + 2].islower() else ch
            raise ParseError(f"unsupported element {symbol!r}", i)
        else:
            raise ParseError(f"unexpected character {ch!r}", i)
    return tokens


@dataclass
class RawAtom:
    element: Element
    aromatic: bool
    hcount: int | None  # bracket-declared hydrogen count, if any
    position: int


@dataclass
class RawBond:
    i: int
    j: int
    token: str | None  # None = implicit; '-', '=', '#', ':' otherwise
    position: int


@dataclass
class RawMol:
    """Parsed molecule before aromatic bonds are resolved to fixed orders."""

    atoms: list[RawAtom]
    bonds: list[RawBond]


def _parse_bracket(body: str, position: int) -> tuple[Element, bool, int]:
    """Return (element, aromatic, hcount) for the inside of [...]."""
    rest = body
    if not rest:
        raise ParseError("empty bracket atom", position)
    if rest[0].isdigit():
        raise ParseError("isotope labels are not supported", position)
    symbol = None
    for cand in ("Cl", "Br"):
        if rest.startswith(cand):
            symbol = cand
            rest = rest[len(cand):]
            break
    if symbol is None:
        head = rest[0]
        if head == "H":
            raise ParseError("explicit hydrogen atoms are not supported", position)
        if len(rest) >= 2 and head.isupper() and rest[1].islower():
            raise ParseError(f"unsupported element {rest[:2]!r}", position)
        if head in "CNOFPSI" or head in _AROMATIC:
            symbol = head
            rest = rest[1:]
        else:
            raise ParseError(f"unsupported element {head!r}", position)
    aromatic = symbol.islower()
    if "@" in rest:
        raise ParseError("stereochemistry markers are not supported", position)
    hcount = 0
    if rest.startswith("H"):
        rest = rest[1:]
        digits = ""
        while rest and rest[0].isdigit():
            digits += rest[0]
            rest = rest[1:]
        hcount = int(digits) if digits else 1
    if rest and rest[0] in "+-":
        raise ParseError("charged atoms are not supported", position)
    if rest.startswith(":"):
        raise ParseError("atom class labels are not supported", position)
    if rest:
        raise ParseError(f"unsupported bracket content {rest!r}", position)
    return Element.from_symbol(symbol.capitalize() if len(symbol) == 1 else symbol), aromatic, hcount


def parse_raw(smiles: str) -> RawMol:
    """Token stream -> RawMol with aromatic flags still unresolved."""
    if not smiles:
        raise ParseError("empty SMILES", 0)
    atoms: list[RawAtom] = []
    bonds: list[RawBond] = []
    anchor: int | None = None
    pending: tuple[str, int] | None = None  # (bond token, position)
    branch_stack: list[int] = []
    open_rings: dict[str, tuple[int, str | None, int]] = {}

    def add_atom(element, aromatic, hcount, position):
        nonlocal anchor, pending
        idx = len(atoms)
        atoms.append(RawAtom(element, aromatic, hcount, position))
        if anchor is not None:
            token = pending[0] if pending else None
            bonds.append(RawBond(anchor, idx, token, position))
        elif pending is not None:
            raise ParseError("bond symbol with no preceding atom", pending[1])
        pending = None
        anchor = idx

    for tok in tokenize(smiles):
        if tok.kind is TokenKind.ATOM or tok.kind is TokenKind.AROMATIC_ATOM:
            if tok.text.startswith("["):
                element, aromatic, hcount = _parse_bracket(tok.text[1:-1], tok.position)
            else:
                aromatic = tok.kind is TokenKind.AROMATIC_ATOM
                symbol = tok.text.capitalize() if aromatic else tok.text
                element = Element.from_symbol(symbol)
                hcount = None
            add_atom(element, aromatic, hcount, tok.position)
        elif tok.kind is TokenKind.BOND:
            if pending is not None:
                raise ParseError("two bond symbols in a row", tok.position)
            if anchor is None:
                raise ParseError("bond symbol before any atom", tok.position)
            pending = (tok.text, tok.position)
        elif tok.kind is TokenKind.BRANCH_OPEN:
            if anchor is None:
                raise ParseError("branch before any atom", tok.position)
            if pending is not None:
                raise ParseError("bond symbol before branch open", pending[1])
            branch_stack.append(anchor)
        elif tok.kind is TokenKind.BRANCH_CLOSE:
            if not branch_stack:
                raise ParseError("unbalanced ')'", tok.position)
            if pending is not None:
                raise ParseError("dangling bond symbol before ')'", pending[1])
            anchor = branch_stack.pop()
        elif tok.kind is TokenKind.RING:
            if anchor is None:
                raise ParseError("ring closure before any atom", tok.position)
            label = tok.text
            token = pending[0] if pending else None
            pending = None
            if label in open_rings:
                other, other_token, other_pos = open_rings.pop(label)
                if other == anchor:
                    raise ParseError("ring closure bonds an atom to itself", tok.position)
                if token is not None and other_token is not None and token != other_token:
                    raise ParseError(f"conflicting bond orders on ring closure {label}", tok.position)
                bonds.append(RawBond(other, anchor, token or other_token, tok.position))
            else:
                open_rings[label] = (anchor, token, tok.position)
        elif tok.kind is TokenKind.DOT:
            raise ParseError("multi-component input ('.') is not supported", tok.position)
    if pending is not None:
        raise ParseError("dangling bond symbol", pending[1])
    if branch_stack:
        raise ParseError("unbalanced '('", len(smiles) - 1)
    if open_rings:
        label, (_, _, pos) = sorted(open_rings.items())[0]
        raise ParseError(f"unclosed ring label {label}", pos)
    seen = set()
    for b in bonds:
        pair = (min(b.i, b.j), max(b.i, b.j))
        if pair in seen:
            raise ParseError("duplicate bond between the same atoms", b.position)
        seen.add(pair)
    return RawMol(atoms, bonds)


def _needs_pi_bond(raw: RawMol, idx: int, degree: int) -> bool:
    """Whether an aromatic atom must take exactly one double bond."""
    atom = raw.atoms[idx]
    if atom.element is Element.C:
        return True
    if atom.element in (Element.N, Element.P):
        # pyrrole-type nitrogen (explicit H or three neighbors) donates its
        # lone pair instead of forming a double bond
        if atom.hcount:
            return False
        return degree <= 2
    return False  # O, S contribute lone pairs


def kekulize(raw: RawMol, vt: ValencyTable = DEFAULT_VALENCY) -> MolGraph:
    """Resolve aromatic bonds to alternating single/double via a backtracking
    perfect matching over the atoms requiring a pi bond, then build a
    valence-checked MolGraph."""
    n = len(raw.atoms)
    degree = [0] * n
    for b in raw.bonds:
        degree[b.i] += 1
        degree[b.j] += 1

    provisional = MolGraph([a.element for a in raw.atoms],
                           [(b.i, b.j, BondOrder.SINGLE) for b in raw.bonds])
    in_ring = ring_bond_flags(provisional)

    aromatic_bond = []
    fixed_orders = {}
    for b in raw.bonds:
        pair = (min(b.i, b.j), max(b.i, b.j))
        both_aromatic = raw.atoms[b.i].aromatic and raw.atoms[b.j].aromatic
        if b.token == ":":
            if not both_aromatic:
                raise ParseError("':' bond between non-aromatic atoms", b.position)
            if not in_ring[pair]:
                raise ParseError("aromatic bond outside any ring", b.position)
            aromatic_bond.append(pair)
        elif b.token is None and both_aromatic and in_ring[pair]:
            aromatic_bond.append(pair)
        elif b.token in ("-", None):
            fixed_orders[pair] = BondOrder.SINGLE
        elif b.token == "=":
            fixed_orders[pair] = BondOrder.DOUBLE
        else:
            fixed_orders[pair] = BondOrder.TRIPLE

    ring_atoms = set()
    for (i, j), flag in in_ring.items():
        if flag:
            ring_atoms.add(i)
            ring_atoms.add(j)
    for idx, atom in enumerate(raw.atoms):
        if atom.aromatic and idx not in ring_atoms:
            raise ParseError("aromatic atom outside any ring", atom.position)

    required = {idx for idx in range(n)
                if raw.atoms[idx].aromatic and _needs_pi_bond(raw, idx, degree[idx])}
    partners: dict[int, list[int]] = {idx: [] for idx in required}
    for i, j in aromatic_bond:
        if i in required and j in required:
            partners[i].append(j)
            partners[j].append(i)
    for idx in partners:
        partners[idx].sort()

    matched: dict[int, int] = {}

    def assign() -> bool:
        free = [idx for idx in required if idx not in matched]
        if not free:
            return True
        # most constrained atom first, index tie-break
        free.sort(key=lambda idx: (sum(1 for p in partners[idx] if p not in matched), idx))
        v = free[0]
        for p in partners[v]:
            if p in matched:
                continue
            matched[v] = p
            matched[p] = v
            if assign():
                return True
            del matched[v]
            del matched[p]
        return False

    if not assign():
        bad = min(idx for idx in required if idx not in matched)
        raise UnkekulizableError("no alternating bond assignment exists for the aromatic system",
                                 raw.atoms[bad].position)

    bonds = []
    for i, j in aromatic_bond:
        double = matched.get(i) == j
        bonds.append((i, j, BondOrder.DOUBLE if double else BondOrder.SINGLE))
    for (i, j), order in fixed_orders.items():
        bonds.append((i, j, order))
    g = MolGraph([a.element for a in raw.atoms], bonds)

    for idx, atom in enumerate(raw.atoms):
        spare = vt[atom.element] - valence_used(g, idx)
        if spare < 0:
            raise ParseError(f"valence of {atom.element.value} exceeded", atom.position)
        if atom.hcount is not None and atom.hcount != spare:
            raise ParseError(
                f"declared H{atom.hcount} inconsistent with valence model (expected H{spare})",
                atom.position)
    return g


def parse(smiles: str, vt: ValencyTable = DEFAULT_VALENCY) -> MolGraph:
    """Single-molecule SMILES -> kekulized MolGraph."""
    return kekulize(parse_raw(smiles), vt)


_BOND_TEXT = {BondOrder.SINGLE: "", BondOrder.DOUBLE: "=", BondOrder.TRIPLE: "#"}


def write(g: MolGraph, vt: ValencyTable = DEFAULT_VALENCY) -> str:
    """Kekulized SMILES for a valid molecule; parse(write(g)) is key-equal."""
    report = check_validity(g, vt)
    if not report.valid:
        raise InvalidMoleculeError(
            f"cannot write an invalid molecule (connected={report.connected}, "
            f"violations={list(report.violations)})")

    n = g.n_atoms
    visited = [False] * n
    # DFS spanning tree; non-tree edges become ring closures
    ring_bonds: list[tuple[int, int]] = []
    tree_children: list[list[int]] = [[] for _ in range(n)]
    parent = [-1] * n
    stack = [0]
    visited[0] = True
    order = []
    while stack:
        v = stack.pop()
        order.append(v)
        for w, _ in reversed(g.neighbors(v)):
            if not visited[w]:
                visited[w] = True
                parent[w] = v
                tree_children[v].append(w)
                stack.append(w)
            elif w != parent[v] and v < w:
                ring_bonds.append((v, w))
    # DFS pushed children in reverse, popped ascending; re-sort for stability
    for v in range(n):
        tree_children[v].sort()
    ring_bonds.sort()

    opens: dict[int, list[tuple[int, int]]] = {}
    closes: dict[int, list[tuple[int, int]]] = {}
    discovery = {v: rank for rank, v in enumerate(order)}
    for num, (i, j) in enumerate(ring_bonds):
        first, second = (i, j) if discovery[i] < discovery[j] else (j, i)
        opens.setdefault(first, []).append((num, second))
        closes.setdefault(second, []).append((num, first))

    def digit(num: int) -> str:
        label = num + 1
        return str(label) if label <= 9 else f"%{label:02d}"

    out: list[str] = []

    def emit(v: int, incoming: BondOrder | None):
        if incoming is not None:
            out.append(_BOND_TEXT[incoming])
        out.append(g.element(v).value)
        for num, other in sorted(opens.get(v, [])):
            out.append(_BOND_TEXT[g.bond_order(v, other)])
            out.append(digit(num))
        for num, _ in sorted(closes.get(v, [])):
            out.append(digit(num))
        children = tree_children[v]
        for idx, child in enumerate(children):
            k = g.bond_order(v, child)
            if idx < len(children) - 1:
                out.append("(")
                emit(child, k)
                out.append(")")
            else:
                emit(child, k)

    old_limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old_limit, 4 * n + 100))
    try:
        emit(0, None)
    finally:
        sys.setrecursionlimit(old_limit)
    return "".join(out)
