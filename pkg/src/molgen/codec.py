"""Sequence codec: molecular graph <-> BFS-ordered typed adjacency rows.

A molecule with n atoms becomes an atom-type sequence plus n-1 fixed-width
edge rows; row t (for the node at BFS position t+1) holds the bond category
to each of the M immediately preceding nodes, nearest first, padded with the
"no bond" category 0. An all-zero row never occurs inside a stored encoding;
during generation it is the termination signal.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import hashlib
import struct

from .canon import canonical_order
from .graph import (
    DEFAULT_VALENCY,
    BondOrder,
    Element,
    MolGraph,
    MolGraphError,
    N_ELEMENTS,
    ValencyTable,
    is_connected,
)


class CodecError(ValueError):
    pass


class BandwidthError(CodecError):
    def __init__(self, i: int, j: int, distance: int, window: int):
        super().__init__(
            f"edge ({i},{j}) spans BFS distance {distance} > window {window}")
        self.edge = (i, j)
        self.distance = distance


class RootError(CodecError):
    pass


class DecodeValencyError(CodecError):
    def __init__(self, atoms: tuple[int, int]):
        super().__init__(f"bond between atoms {atoms} exceeds a valence limit")
        self.atoms = atoms


@dataclass(frozen=True)
class CodecConfig:
    window: int = 12      # edge-row width M
    min_atoms: int = 10
    max_atoms: int = 50
    randomize_root: bool = False  # per-epoch random carbon root (augmentation)

    def __post_init__(self):
        if not (1 <= self.window < self.max_atoms):
            raise CodecError("window must satisfy 1 <= M < max_atoms")
        if not (1 <= self.min_atoms <= self.max_atoms):
            raise CodecError("need 1 <= min_atoms <= max_atoms")


@dataclass(frozen=True)
class BfsSequence:
    """Atom categories plus fixed-width edge rows; atom 0 is always carbon."""

    atom_types: tuple[int, ...]
    edge_rows: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if not self.atom_types:
            raise CodecError("empty sequence")
        if self.atom_types[0] != Element.C.index:
            raise CodecError("first atom must be carbon")
        if any(not 0 <= t < N_ELEMENTS for t in self.atom_types):
            raise CodecError("atom category out of range")
        widths = {len(r) for r in self.edge_rows}
        if len(widths) > 1:
            raise CodecError("edge rows must share one width")
        for row in self.edge_rows:
            if any(not 0 <= e <= 3 for e in row):
                raise CodecError("edge category out of range")

    @property
    def n_atoms(self) -> int:
        return len(self.atom_types)

    @property
    def window(self) -> int:
        return len(self.edge_rows[0]) if self.edge_rows else 0


def bfs_order(g: MolGraph, root: int) -> tuple[int, ...]:
    """Breadth-first ordering from root; neighbors taken in ascending
    original index (deterministic tie-break)."""
    if not (0 <= root < g.n_atoms):
        raise IndexError(f"root {root} out of range")
    if not is_connected(g):
        raise CodecError("graph is not connected")
    seen = [False] * g.n_atoms
    seen[root] = True
    order = [root]
    head = 0
    while head < len(order):
        v = order[head]
        head += 1
        for w, _ in g.neighbors(v):  # adjacency is stored sorted
            if not seen[w]:
                seen[w] = True
                order.append(w)
    return tuple(order)


def bandwidth(g: MolGraph, order: Sequence[int]) -> int:
    """Maximum positional distance spanned by any edge under `order`."""
    if sorted(order) != list(range(g.n_atoms)):
        raise CodecError("order is not a permutation of the atoms")
    pos = {v: p for p, v in enumerate(order)}
    return max((abs(pos[i] - pos[j]) for i, j, _ in g.bonds), default=0)


def training_root(g: MolGraph) -> int:
    """Deterministic root: the carbon of lowest canonical rank."""
    order = canonical_order(g)
    carbons = [v for v in range(g.n_atoms) if g.element(v) is Element.C]
    if not carbons:
        raise RootError("molecule contains no carbon atom")
    return min(carbons, key=lambda v: order[v])


def encode(g: MolGraph, cfg: CodecConfig, root: int) -> BfsSequence:
    """Graph -> sequence under the BFS ordering from a carbon root."""
    if g.element(root) is not Element.C:
        raise RootError(f"root atom {root} is {g.element(root).value}, not carbon")
    order = bfs_order(g, root)
    pos = {v: p for p, v in enumerate(order)}
    m = cfg.window
    atom_types = tuple(g.element(v).index for v in order)
    rows = []
    for p in range(1, g.n_atoms):
        row = [0] * m
        v = order[p]
        for w, k in g.neighbors(v):
            d = p - pos[w]
            if d <= 0:
                continue
            if d > m:
                raise BandwidthError(v, w, d, m)
            row[d - 1] = int(k)
        rows.append(tuple(row))
    return BfsSequence(atom_types, tuple(rows))


def decode(seq: BfsSequence, vt: ValencyTable = DEFAULT_VALENCY) -> MolGraph:
    """Sequence -> graph; stops at the first all-zero row or at the end.

    Valency is enforced bond by bond; a violating entry raises
    DecodeValencyError carrying both endpoint atom indices.
    """
    limits = vt.as_index_array()
    atoms = [seq.atom_types[0]]
    used = [0]
    bonds: list[tuple[int, int, BondOrder]] = []
    for t, row in enumerate(seq.edge_rows):
        if not any(row):
            break
        new = t + 1
        if new >= len(seq.atom_types):
            raise CodecError("edge row without a matching atom type")
        atoms.append(seq.atom_types[new])
        used.append(0)
        for d, cat in enumerate(row, start=1):
            if cat == 0:
                continue
            prev = new - d
            if prev < 0:
                raise CodecError(f"row {t} bonds past the first atom")
            if used[new] + cat > limits[atoms[new]] or used[prev] + cat > limits[atoms[prev]]:
                raise DecodeValencyError((prev, new))
            used[new] += cat
            used[prev] += cat
            bonds.append((prev, new, BondOrder(cat)))
    return MolGraph([Element.from_index(t) for t in atoms], bonds)


def encodable_roots(g: MolGraph, cfg: CodecConfig) -> list[int]:
    """Carbon roots whose BFS ordering fits in the window."""
    roots = []
    for v in range(g.n_atoms):
        if g.element(v) is not Element.C:
            continue
        if bandwidth(g, bfs_order(g, v)) <= cfg.window:
            roots.append(v)
    return roots


# --- binary dataset cache ---------------------------------------------------
#
# Layout (big-endian):
#   magic   4s   = b"MGC1"
#   version u16  = 1
#   window  u16
#   nelem   u8, then nelem comma-joined symbols with a u16 length prefix
#   config  u32 length + UTF-8 text (provenance: flat run config)
#   count   u32
#   records count times:
#       n u16, atom categories n bytes,
#       edge rows as 2-bit categories, row-major, zero-padded to a byte
#   digest  8 bytes blake2b of all preceding bytes

CACHE_MAGIC = b"MGC1"
CACHE_VERSION = 1


class CacheFormatError(ValueError):
    pass


def _pack_rows(rows: Sequence[Sequence[int]]) -> bytes:
    flat = [e for row in rows for e in row]
    out = bytearray((len(flat) + 3) // 4)
    for idx, e in enumerate(flat):
        out[idx >> 2] |= e << ((idx & 3) * 2)
    return bytes(out)


def _unpack_rows(data: bytes, n_rows: int, window: int) -> tuple[tuple[int, ...], ...]:
    flat = []
    for idx in range(n_rows * window):
        flat.append(data[idx >> 2] >> ((idx & 3) * 2) & 3)
    return tuple(tuple(flat[r * window:(r + 1) * window]) for r in range(n_rows))


def write_cache(path: str, sequences: Iterable[BfsSequence], window: int,
                config_text: str = "") -> int:
    body = bytearray()
    body += CACHE_MAGIC
    body += struct.pack(">HH", CACHE_VERSION, window)
    symbols = ",".join(e.value for e in Element).encode()
    body += struct.pack(">BH", N_ELEMENTS, len(symbols)) + symbols
    cfg_bytes = config_text.encode()
    body += struct.pack(">I", len(cfg_bytes)) + cfg_bytes
    seqs = list(sequences)
    body += struct.pack(">I", len(seqs))
    for seq in seqs:
        if seq.edge_rows and seq.window != window:
            raise CacheFormatError("sequence window differs from cache window")
        body += struct.pack(">H", seq.n_atoms)
        body += bytes(seq.atom_types)
        body += _pack_rows(seq.edge_rows)
    body += hashlib.blake2b(bytes(body), digest_size=8).digest()
    with open(path, "wb") as fh:
        fh.write(bytes(body))
    return len(seqs)


def read_cache(path: str) -> tuple[list[BfsSequence], int, str]:
    """Returns (sequences, window, embedded config text)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or hashlib.blake2b(blob[:-8], digest_size=8).digest() != blob[-8:]:
        raise CacheFormatError("cache checksum mismatch (truncated or corrupt file)")
    view = memoryview(blob[:-8])
    if bytes(view[:4]) != CACHE_MAGIC:
        raise CacheFormatError("not a dataset cache")
    version, window = struct.unpack(">HH", view[4:8])
    if version != CACHE_VERSION:
        raise CacheFormatError(f"unsupported cache version {version}")
    nelem, symlen = struct.unpack(">BH", view[8:11])
    offset = 11
    symbols = bytes(view[offset:offset + symlen]).decode()
    offset += symlen
    expected = ",".join(e.value for e in Element)
    if nelem != N_ELEMENTS or symbols != expected:
        raise CacheFormatError("element vocabulary mismatch")
    (cfg_len,) = struct.unpack(">I", view[offset:offset + 4])
    offset += 4
    config_text = bytes(view[offset:offset + cfg_len]).decode()
    offset += cfg_len
    (count,) = struct.unpack(">I", view[offset:offset + 4])
    offset += 4
    sequences = []
    for _ in range(count):
        (n,) = struct.unpack(">H", view[offset:offset + 2])
        offset += 2
        atom_types = tuple(view[offset:offset + n])
        offset += n
        row_bytes = ((n - 1) * window + 3) // 4
        rows = _unpack_rows(bytes(view[offset:offset + row_bytes]), n - 1, window)
        offset += row_bytes
        sequences.append(BfsSequence(atom_types, rows))
    if offset != len(view):
        raise CacheFormatError("trailing bytes after the last record")
    return sequences, window, config_text
