"""Molecule scorers used as RL rewards: structural descriptors, a documented
logP approximation with the penalized composition, a graph-convolution
regressor trained on labeled molecules, and a line-protocol client for
external scorers.

The built-in logP is an explicit per-atom contribution table (element x
ring membership), not a fragment model; its value is a desk-scale stand-in
whose orderings, not absolute scale, are the contract.
"""

from __future__ import annotations

import logging
import math
import select
import socket
import subprocess
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .canon import canonical_key
from .diffcore import tensor as T
from .graph import (
    DEFAULT_VALENCY,
    Element,
    MolGraph,
    ValencyTable,
    check_validity,
    cycle_rank,
    fundamental_cycles,
    ring_atom_flags,
    valence_used,
)
from .serialize import BlobError, pack_blob, unpack_blob

log = logging.getLogger(__name__)


class CriticError(ValueError):
    pass


@dataclass(frozen=True)
class Critic:
    name: str
    score: Callable[[MolGraph], float]

    def __call__(self, g: MolGraph) -> float:
        return float(self.score(g))


def _require_valid(g: MolGraph) -> None:
    report = check_validity(g)
    if not report.valid:
        raise CriticError("critic input is not a valid molecule")


# -- structural descriptors ----------------------------------------------------

def heavy_atom_count(g: MolGraph) -> float:
    return float(g.n_atoms)


def ring_count(g: MolGraph) -> float:
    """Cycle rank |E| - |V| + 1 of a connected molecule."""
    return float(cycle_rank(g))


def nitrogen_count(g: MolGraph) -> float:
    return float(sum(1 for a in g.atoms if a is Element.N))


def heteroatom_fraction(g: MolGraph) -> float:
    """Fraction of heavy atoms that are not carbon."""
    return sum(1 for a in g.atoms if a is not Element.C) / g.n_atoms


def longest_carbon_chain(g: MolGraph) -> float:
    """Length (atom count) of the longest simple path through carbons only."""
    carbons = [v for v in range(g.n_atoms) if g.element(v) is Element.C]
    if not carbons:
        return 0.0
    carbon = set(carbons)
    best = 1

    def extend(v: int, visited: set[int], length: int):
        nonlocal best
        best = max(best, length)
        for w, _ in g.neighbors(v):
            if w in carbon and w not in visited:
                visited.add(w)
                extend(w, visited, length + 1)
                visited.remove(w)

    for start in carbons:
        extend(start, {start}, 1)
    return float(best)


def descriptor_critics() -> dict[str, Critic]:
    """Built-in descriptor scorers, each total on valid molecules."""
    return {
        "heavy_atoms": Critic("heavy_atoms", heavy_atom_count),
        "ring_count": Critic("ring_count", ring_count),
        "nitrogen_count": Critic("nitrogen_count", nitrogen_count),
        "heteroatom_fraction": Critic("heteroatom_fraction", heteroatom_fraction),
        "longest_carbon_chain": Critic("longest_carbon_chain", longest_carbon_chain),
    }


# -- logP approximation ----------------------------------------------------------
#
# Per-atom additive contributions keyed by (element, in a ring). Signs follow
# the usual hydrophobicity ordering: carbons and halogens up, N/O down.
LOGP_CONTRIBUTIONS: dict[tuple[Element, bool], float] = {
    (Element.C, False): 0.36, (Element.C, True): 0.29,
    (Element.N, False): -0.60, (Element.N, True): -0.42,
    (Element.O, False): -0.64, (Element.O, True): -0.46,
    (Element.F, False): 0.14, (Element.F, True): 0.14,
    (Element.P, False): -0.20, (Element.P, True): -0.20,
    (Element.S, False): 0.25, (Element.S, True): 0.20,
    (Element.Cl, False): 0.65, (Element.Cl, True): 0.65,
    (Element.Br, False): 0.86, (Element.Br, True): 0.86,
    (Element.I, False): 1.12, (Element.I, True): 1.12,
}

COMPLEXITY_BRANCH_WEIGHT = 1.0   # atoms with 3+ heavy neighbors
COMPLEXITY_FUSION_WEIGHT = 2.0   # atoms on 3+ ring bonds (fusion/spiro)
COMPLEXITY_SCALE = 3.0
LONG_CYCLE_LIMIT = 6


def logp_proxy(g: MolGraph) -> float:
    """Sum of the documented per-atom contributions."""
    _require_valid(g)
    in_ring = ring_atom_flags(g)
    return sum(LOGP_CONTRIBUTIONS[(g.element(v), in_ring[v])] for v in range(g.n_atoms))


def complexity_penalty(g: MolGraph) -> float:
    """Synthetic-complexity stand-in: branching plus ring fusion per atom."""
    ring_bonds = [0] * g.n_atoms
    from .graph import ring_bond_flags
    for (i, j), flag in ring_bond_flags(g).items():
        if flag:
            ring_bonds[i] += 1
            ring_bonds[j] += 1
    branch = sum(1 for v in range(g.n_atoms) if g.degree(v) >= 3)
    fusion = sum(1 for v in range(g.n_atoms) if ring_bonds[v] >= 3)
    score = (COMPLEXITY_BRANCH_WEIGHT * branch + COMPLEXITY_FUSION_WEIGHT * fusion)
    return COMPLEXITY_SCALE * score / g.n_atoms


def long_cycle_penalty(g: MolGraph) -> float:
    """Number of fundamental cycles longer than six atoms."""
    return float(sum(1 for cyc in fundamental_cycles(g) if len(cyc) > LONG_CYCLE_LIMIT))


def penalized_logp(g: MolGraph) -> float:
    """logP proxy minus complexity and long-cycle penalties."""
    return logp_proxy(g) - complexity_penalty(g) - long_cycle_penalty(g)


def penalized_logp_reward() -> Critic:
    """The scaled fine-tuning preset: 5 x penalized logP."""
    return Critic("penalized_logp_x5", lambda g: 5.0 * penalized_logp(g))


# -- graph-convolution regressor --------------------------------------------------

N_FEATURES = 9 + 4 + 1  # one-hot element, degree one-hot 1..4, valence used


@dataclass(frozen=True)
class GcnConfig:
    layers: int = 4
    hidden: int = 128
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    lr_decay: float = 0.8      # multiplicative, per epoch
    test_fraction: float = 0.2
    seed: int = 0
    dtype: str = "float32"

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class LabeledSet:
    molecules: list[MolGraph]
    labels: list[float]
    unit: str = ""

    def __post_init__(self):
        if len(self.molecules) != len(self.labels):
            raise CriticError("molecule and label counts differ")
        if any(not math.isfinite(x) for x in self.labels):
            raise CriticError("labels must be finite")


def molecule_features(g: MolGraph) -> np.ndarray:
    feats = np.zeros((g.n_atoms, N_FEATURES))
    for v in range(g.n_atoms):
        feats[v, g.element(v).index] = 1.0
        deg = g.degree(v)
        if 1 <= deg <= 4:
            feats[v, 9 + deg - 1] = 1.0
        feats[v, 13] = valence_used(g, v)
    return feats


def normalized_adjacency(g: MolGraph) -> np.ndarray:
    """Symmetric-normalized adjacency with self loops."""
    n = g.n_atoms
    a = np.eye(n)
    for i, j, _ in g.bonds:
        a[i, j] = 1.0
        a[j, i] = 1.0
    d = a.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(d)
    return a * inv_sqrt[:, None] * inv_sqrt[None, :]


class GcnRegressor:
    """Stack of mean-field graph convolutions with ReLU, mean pooling, and an
    affine readout; predicts a z-scored label."""

    FILE_MAGIC = b"MGGCN001"

    def __init__(self, config: GcnConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        dt = config.np_dtype
        dims = [N_FEATURES] + [config.hidden] * config.layers
        self.convs = [dc.Affine(rng, dims[i], dims[i + 1], dt) for i in range(config.layers)]
        self.readout = dc.Affine(rng, config.hidden, 1, dt)
        self.label_mean = 0.0
        self.label_std = 1.0
        self.unit = ""

    def named_parameters(self) -> dict[str, T.Tensor]:
        out = {}
        for i, conv in enumerate(self.convs):
            for name, p in conv.named_parameters().items():
                out[f"conv.{i}.{name}"] = p
        for name, p in self.readout.named_parameters().items():
            out[f"readout.{name}"] = p
        return out

    def forward(self, g: MolGraph) -> T.Tensor:
        """Normalized-scale prediction as a scalar tape node."""
        dt = self.config.np_dtype
        h = T.Tensor(molecule_features(g).astype(dt))
        adj = T.Tensor(normalized_adjacency(g).astype(dt))
        for conv in self.convs:
            h = T.relu(conv(T.matmul(adj, h)))
        pooled = T.mul(T.matmul(T.Tensor(np.full((1, g.n_atoms), 1.0 / g.n_atoms, dtype=dt)), h), 1.0)
        return self.readout(pooled)

    def predict_normalized(self, g: MolGraph) -> float:
        with dc.no_grad():
            return float(self.forward(g).data[0, 0])

    def predict(self, g: MolGraph) -> float:
        """Prediction in label units."""
        return self.predict_normalized(g) * self.label_std + self.label_mean

    def save(self) -> bytes:
        meta = {
            "config": {k: getattr(self.config, k) for k in self.config.__dataclass_fields__},
            "label_mean": self.label_mean,
            "label_std": self.label_std,
            "unit": self.unit,
        }
        arrays = {name: p.data for name, p in self.named_parameters().items()}
        return pack_blob(self.FILE_MAGIC, meta, arrays)

    @classmethod
    def load(cls, blob: bytes) -> "GcnRegressor":
        try:
            meta, arrays = unpack_blob(blob, cls.FILE_MAGIC)
        except BlobError as exc:
            raise CriticError(str(exc)) from None
        model = cls(GcnConfig(**meta["config"]), seed=0)
        for name, p in model.named_parameters().items():
            if name not in arrays or arrays[name].shape != p.data.shape:
                raise CriticError(f"regressor file missing or misshaped {name}")
            p.data = arrays[name]
        model.label_mean = meta["label_mean"]
        model.label_std = meta["label_std"]
        model.unit = meta["unit"]
        return model


def split_by_key_hash(data: LabeledSet, test_fraction: float) -> tuple[list[int], list[int]]:
    """Deterministic train/test split hashing each molecule's canonical key,
    so duplicate structures always land on the same side."""
    import hashlib

    train, test = [], []
    threshold = int(round(test_fraction * 1000))
    for idx, mol in enumerate(data.molecules):
        digest = hashlib.blake2b(canonical_key(mol), digest_size=4).digest()
        bucket = int.from_bytes(digest, "big") % 1000
        (test if bucket < threshold else train).append(idx)
    return train, test


def gcn_train(data: LabeledSet, config: GcnConfig = GcnConfig()) -> tuple[GcnRegressor, float]:
    """Train on z-scored labels with per-epoch learning-rate decay; returns
    the model and the test RMSE in label units."""
    train_idx, test_idx = split_by_key_hash(data, config.test_fraction)
    if not train_idx or not test_idx:
        raise CriticError("empty train or test split")
    labels = np.asarray(data.labels, dtype=np.float64)
    mean = float(labels[train_idx].mean())
    std = float(labels[train_idx].std())
    if std == 0.0:
        std = 1.0

    model = GcnRegressor(config, seed=config.seed)
    model.label_mean = mean
    model.label_std = std
    model.unit = data.unit
    params = model.named_parameters()
    steps_per_epoch = max(1, (len(train_idx) + config.batch_size - 1) // config.batch_size)
    optimizer = dc.Adam(lr=config.lr, decay=config.lr_decay, decay_every=steps_per_epoch)
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 1)))

    order = np.array(train_idx)
    for _ in range(config.epochs):
        rng.shuffle(order)
        for start in range(0, len(order), config.batch_size):
            chunk = order[start:start + config.batch_size]
            optimizer.zero_grad(params)
            loss = None
            for idx in chunk:
                pred = model.forward(data.molecules[idx])
                target = (labels[idx] - mean) / std
                err = pred + (-target)
                term = dc.weighted_sum(T.mul(err, err), np.full((1, 1), 1.0 / len(chunk)))
                loss = term if loss is None else loss + term
            loss.backward()
            optimizer.step(params)

    sq = 0.0
    for idx in test_idx:
        pred = model.predict(data.molecules[idx])
        sq += (pred - labels[idx]) ** 2
    rmse = math.sqrt(sq / len(test_idx))
    return model, rmse


def gcn_reward(model: GcnRegressor) -> Critic:
    """exp(normalized prediction + 1); strictly increasing in the raw output."""
    return Critic("gcn_reward", lambda g: math.exp(model.predict_normalized(g) + 1.0))


# -- external critic protocol ------------------------------------------------------
#
# Request  : SCORE <id> <smiles>\n
# Reply    : OK <id> <decimal score>\n   or   ERR <id> <message>\n
# Ids increase monotonically per connection; one request in flight.

class ExternalCriticError(CriticError):
    pass


class _LineChannel:
    """Blocking line I/O with a deadline over a socket or child process."""

    def __init__(self, endpoint: str):
        self.endpoint = endpoint
        self.proc: subprocess.Popen | None = None
        self.sock: socket.socket | None = None
        self.buffer = b""
        if endpoint.startswith("exec:"):
            self.proc = subprocess.Popen(
                endpoint[len("exec:"):], shell=True,
                stdin=subprocess.PIPE, stdout=subprocess.PIPE)
            self.read_fd = self.proc.stdout.fileno()
        elif endpoint.startswith("tcp:"):
            host, port = endpoint[len("tcp:"):].rsplit(":", 1)
            self.sock = socket.create_connection((host, int(port)), timeout=10.0)
            self.read_fd = self.sock.fileno()
        else:
            raise ExternalCriticError(f"unknown endpoint {endpoint!r} (use exec:... or tcp:host:port)")

    def send(self, line: bytes) -> None:
        if self.proc is not None:
            self.proc.stdin.write(line)
            self.proc.stdin.flush()
        else:
            self.sock.sendall(line)

    def readline(self, timeout: float) -> bytes:
        deadline = time.monotonic() + timeout
        while b"\n" not in self.buffer:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TimeoutError("scorer reply timed out")
            ready, _, _ = select.select([self.read_fd], [], [], remaining)
            if not ready:
                raise TimeoutError("scorer reply timed out")
            if self.proc is not None:
                chunk = self.proc.stdout.read1(65536)
            else:
                chunk = self.sock.recv(65536)
            if not chunk:
                raise ExternalCriticError("scorer closed the connection")
            self.buffer += chunk
        line, self.buffer = self.buffer.split(b"\n", 1)
        return line

    def close(self) -> None:
        if self.proc is not None:
            try:
                self.proc.stdin.close()
            except Exception:
                pass
            self.proc.terminate()
            self.proc.wait(timeout=5)
        if self.sock is not None:
            self.sock.close()


class ExternalScorer:
    def __init__(self, endpoint: str, timeout: float = 10.0, retries: int = 2):
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self.channel: _LineChannel | None = None
        self.next_id = 0

    def _connect(self) -> None:
        if self.channel is None:
            self.channel = _LineChannel(self.endpoint)
            self.next_id = 0

    def _reset(self) -> None:
        if self.channel is not None:
            self.channel.close()
            self.channel = None

    def score_smiles(self, smiles: str) -> float:
        last_error: Exception | None = None
        for _ in range(self.retries + 1):
            try:
                self._connect()
                request_id = self.next_id
                self.next_id += 1
                self.channel.send(f"SCORE {request_id} {smiles}\n".encode())
                reply = self.channel.readline(self.timeout).decode("utf-8", "replace").strip()
                parts = reply.split(" ", 2)
                if len(parts) < 2:
                    raise ExternalCriticError(f"malformed reply {reply!r}")
                status, reply_id = parts[0], parts[1]
                if reply_id != str(request_id):
                    raise ExternalCriticError(
                        f"reply id {reply_id} does not match request {request_id}")
                if status == "OK":
                    if len(parts) != 3:
                        raise ExternalCriticError(f"malformed reply {reply!r}")
                    value = float(parts[2])
                    if not math.isfinite(value):
                        raise ExternalCriticError(f"non-finite score {parts[2]!r}")
                    return value
                if status == "ERR":
                    raise ExternalCriticError(
                        f"scorer error: {parts[2] if len(parts) > 2 else ''}")
                raise ExternalCriticError(f"malformed reply {reply!r}")
            except (TimeoutError, BrokenPipeError, ConnectionError, ValueError) as exc:
                last_error = exc
                log.warning("external scorer hiccup (%s); reconnecting", exc)
                self._reset()
        raise ExternalCriticError(f"external scorer failed: {last_error}")

    def close(self) -> None:
        self._reset()


def external_critic(endpoint: str, timeout: float = 10.0, retries: int = 2,
                    vt: ValencyTable | None = None) -> Critic:
    """Scores molecules through an external process or socket speaking the
    line protocol; molecules travel as kekulized SMILES."""
    from .smiles import write as write_smiles

    scorer = ExternalScorer(endpoint, timeout=timeout, retries=retries)
    table = vt or DEFAULT_VALENCY

    def score(g: MolGraph) -> float:
        return scorer.score_smiles(write_smiles(g, table))

    critic = Critic(f"external:{endpoint}", score)
    object.__setattr__(critic, "scorer", scorer)  # so callers can close it
    return critic
