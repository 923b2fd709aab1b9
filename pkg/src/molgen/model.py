"""The graph generator: a node RNN choosing atom types and an edge RNN
choosing bond categories to the M preceding atoms, trained teacher-forced
and sampled autoregressively with optional valency masking.

Conventions used throughout (they make teacher forcing, sampling and
policy-gradient replay agree term for term):

* Node slots are 1-based; slot 1 is the fixed carbon start atom and is never
  scored. Slot i (2 <= i <= n) contributes one atom term and the edge terms
  j = 1..min(i-1, M). The terminal slot n+1 contributes only its all-zero
  edge row (min(n, M) terms); its atom prediction is not scored.
* The edge RNN is conditioned on the current slot's atom embedding. For the
  terminal slot of teacher data that atom does not exist; a carbon context
  is used. Sampled trajectories carry whatever atom was actually drawn at
  the terminal slot so replay is exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .codec import BfsSequence
from .diffcore import tensor as T
from .graph import (
    DEFAULT_VALENCY,
    BondOrder,
    Element,
    MolGraph,
    N_EDGE_CATEGORIES,
    N_ELEMENTS,
    ValencyTable,
)
from .serialize import BlobError, pack_blob, unpack_blob

CARBON = Element.C.index


class ModelError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    atom_embed: int = 128
    edge_embed: int = 16
    node_hidden: int = 256
    node_layers: int = 4
    node_mlp_hidden: int = 128
    edge_hidden: int = 128
    edge_layers: int = 4
    edge_mlp_hidden: int = 64
    window: int = 12
    min_atoms: int = 10
    max_atoms: int = 50
    grad_clip: float = 5.0
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("atom_embed", "edge_embed", "node_hidden", "node_layers",
                     "node_mlp_hidden", "edge_hidden", "edge_layers",
                     "edge_mlp_hidden", "window"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be positive")
        if not (1 <= self.window < self.max_atoms):
            raise ModelError("need 1 <= window < max_atoms")
        if self.dtype not in ("float32", "float64"):
            raise ModelError("dtype must be float32 or float64")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(**d)


@dataclass
class TeacherSequence:
    """A sequence as the scored forward sees it.

    `terminal` marks that the all-zero end row should be scored (absent only
    for rollouts cut off at the atom cap). `eos_atom` is the atom context for
    that row.
    """

    atom_types: tuple[int, ...]
    edge_rows: tuple[tuple[int, ...], ...]
    terminal: bool = True
    eos_atom: int = CARBON

    @classmethod
    def from_encoding(cls, seq: BfsSequence) -> "TeacherSequence":
        return cls(tuple(seq.atom_types), tuple(seq.edge_rows))

    @property
    def n_atoms(self) -> int:
        return len(self.atom_types)


@dataclass
class PositionTerms:
    """Cross-entropy terms of one scored position across the batch."""

    kind: str                 # "atom" | "edge"
    slot: int
    substep: int | None
    rows: list[int]           # sequence indices scored here
    losses: T.Tensor          # shape (len(rows),), 64-bit
    probs: np.ndarray | None = None   # (len(rows), K) when collected
    mask: np.ndarray | None = None
    logits: T.Tensor | None = None    # kept only on request (entropy bonus)


@dataclass
class StepDistribution:
    kind: str
    slot: int
    substep: int | None
    category: int
    probs: np.ndarray
    mask_applied: bool
    logprob: float


@dataclass
class TrajStep:
    kind: str                  # "atom" | "edge"
    slot: int
    substep: int | None
    category: int
    logprob: float
    atom_index: int            # 0-based index of the atom being placed
    partner: int | None = None
    violation: bool = False
    reward_override: float | None = None


@dataclass
class Trajectory:
    steps: list[TrajStep]
    graph: MolGraph
    violations: tuple[int, ...]
    ended_by_eos: bool
    eos_atom: int | None
    below_min: bool
    masked: bool
    terminal_reward: float = 0.0

    def to_sequence(self, window: int) -> TeacherSequence:
        """Rebuild the teacher-forcing view of this rollout (row width must
        match the model window so replay scores the identical positions)."""
        n = self.graph.n_atoms
        atom_types = tuple(a.index for a in self.graph.atoms)
        by_slot: dict[int, dict[int, int]] = {}
        for step in self.steps:
            if step.kind == "edge" and step.slot <= n:
                by_slot.setdefault(step.slot, {})[step.substep] = step.category
        rows = []
        for slot in range(2, n + 1):
            row = [0] * window
            for j, cat in by_slot.get(slot, {}).items():
                row[j - 1] = cat
            rows.append(tuple(row))
        return TeacherSequence(atom_types, tuple(rows),
                               terminal=self.ended_by_eos,
                               eos_atom=self.eos_atom if self.eos_atom is not None else CARBON)

    @property
    def total_logprob(self) -> float:
        return sum(s.logprob for s in self.steps)

    @property
    def n_transitions(self) -> int:
        """Node-addition transitions, the EOS row included when present."""
        return max(s.slot for s in self.steps) - 1 if self.steps else 0


class GeneratorModel:
    def __init__(self, config: GeneratorConfig, seed: int = 0):
        self.config = config
        ss = np.random.SeedSequence(seed)
        init_ss, train_ss = ss.spawn(2)
        rng = np.random.default_rng(init_ss)
        dt = config.np_dtype
        A, E, M = config.atom_embed, config.edge_embed, config.window

        self.atom_table = dc.uniform_init(rng, A, (N_ELEMENTS, A), dt)
        self.edge_table = dc.uniform_init(rng, E, (N_EDGE_CATEGORIES, E), dt)
        self.row_start = dc.uniform_init(rng, E, (1, E), dt)
        self.node_rnn = dc.GruStack(rng, M * E + A, config.node_hidden, config.node_layers, dt)
        self.node_head = dc.Mlp(rng, config.node_hidden, config.node_mlp_hidden, N_ELEMENTS, dt)
        self.edge_init = dc.Affine(rng, config.node_hidden, config.edge_hidden, dt)
        self.edge_rnn = dc.GruStack(rng, E + A, config.edge_hidden, config.edge_layers, dt)
        self.edge_head = dc.Mlp(rng, config.edge_hidden, config.edge_mlp_hidden, N_EDGE_CATEGORIES, dt)

        self.optimizer = dc.Adam()
        self.train_rng = np.random.default_rng(train_ss)

    # -- parameters -----------------------------------------------------------
    def named_parameters(self) -> dict[str, T.Tensor]:
        out = {"atom_table": self.atom_table, "edge_table": self.edge_table,
               "row_start": self.row_start}
        for prefix in ("node_rnn", "node_head", "edge_init", "edge_rnn", "edge_head"):
            module = getattr(self, prefix)
            for name, p in module.named_parameters().items():
                out[f"{prefix}.{name}"] = p
        return out

    # -- teacher-forced scoring ------------------------------------------------
    def forward_terms(self, seqs: Sequence[TeacherSequence], apply_mask: bool = False,
                      vt: ValencyTable | None = None,
                      collect_probs: bool = False,
                      keep_logits: bool = False) -> list[PositionTerms]:
        """Every scored cross-entropy position for a batch, in slot order."""
        if not seqs:
            raise ModelError("empty batch")
        cfg = self.config
        B = len(seqs)
        M = cfg.window
        dt = cfg.np_dtype
        n = [s.n_atoms for s in seqs]
        last_slot = [n[b] + (1 if seqs[b].terminal else 0) for b in range(B)]
        for b, s in enumerate(seqs):
            if s.atom_types[0] != CARBON:
                raise ModelError(f"sequence {b} does not start with carbon")
            if s.edge_rows and len(s.edge_rows[0]) != M:
                raise ModelError(f"sequence {b} row width {len(s.edge_rows[0])} != window {M}")

        limits = np.array((vt or DEFAULT_VALENCY).as_index_array(), dtype=np.int64)
        if apply_mask:
            used = [np.zeros(n[b] + 1, dtype=np.int64) for b in range(B)]
            elem = [np.array(list(s.atom_types) + [s.eos_atom], dtype=np.int64) for s in seqs]

        prev_atoms = np.array([s.atom_types[0] for s in seqs], dtype=np.int64)
        prev_rows = np.zeros((B, M), dtype=np.int64)
        node_states = self.node_rnn.zero_state(B, dt)
        positions: list[PositionTerms] = []

        for slot in range(2, max(last_slot) + 1):
            active = [b for b in range(B) if slot <= last_slot[b]]
            if not active:
                break
            node_in = T.concat([
                T.reshape(T.embedding(self.edge_table, prev_rows), (B, M * cfg.edge_embed)),
                T.embedding(self.atom_table, prev_atoms),
            ], axis=1)
            node_states, node_top = self.node_rnn(node_in, node_states)

            atom_rows = [b for b in active if slot <= n[b]]
            if atom_rows:
                logits = self.node_head(T.rows(node_top, atom_rows))
                targets = [seqs[b].atom_types[slot - 1] for b in atom_rows]
                losses = T.xent_rows(logits, targets)
                probs = (np.exp(T.log_probs(logits.data)) if collect_probs else None)
                positions.append(PositionTerms(
                    "atom", slot, None, atom_rows, losses, probs,
                    logits=logits if keep_logits else None))

            row_targets = np.zeros((B, M), dtype=np.int64)
            cond_atoms = np.zeros(B, dtype=np.int64)
            for b in active:
                if slot <= n[b]:
                    row_targets[b] = seqs[b].edge_rows[slot - 2]
                    cond_atoms[b] = seqs[b].atom_types[slot - 1]
                else:
                    cond_atoms[b] = seqs[b].eos_atom
            cond_emb = T.embedding(self.atom_table, cond_atoms)
            h0 = self.edge_init(node_top)
            edge_states = [h0 for _ in range(cfg.edge_layers)]
            prev_cat_emb = T.rows(self.row_start, np.zeros(B, dtype=np.int64))
            width = min(slot - 1, M)
            for j in range(1, width + 1):
                edge_states, edge_top = self.edge_rnn(
                    T.concat([prev_cat_emb, cond_emb], axis=1), edge_states)
                logits = self.edge_head(T.rows(edge_top, active))
                targets = row_targets[active, j - 1]
                mask = None
                if apply_mask:
                    mask = np.ones((len(active), N_EDGE_CATEGORIES), dtype=bool)
                    for row_idx, b in enumerate(active):
                        new = slot - 1 if slot <= n[b] else n[b]
                        partner = slot - 1 - j
                        free_new = limits[elem[b][new]] - used[b][new]
                        free_prev = limits[elem[b][partner]] - used[b][partner]
                        for k in (1, 2, 3):
                            if k > free_new or k > free_prev:
                                mask[row_idx, k] = False
                losses = T.xent_rows(logits, targets, mask)
                probs = (np.exp(T.log_probs(logits.data, mask)) if collect_probs else None)
                positions.append(PositionTerms(
                    "edge", slot, j, list(active), losses, probs, mask,
                    logits=logits if keep_logits else None))
                if apply_mask:
                    for b in active:
                        cat = row_targets[b, j - 1]
                        if cat:
                            new = slot - 1 if slot <= n[b] else n[b]
                            used[b][new] += cat
                            used[b][slot - 1 - j] += cat
                prev_cat_emb = T.embedding(self.edge_table, row_targets[:, j - 1])

            for b in active:
                if slot <= n[b]:
                    prev_atoms[b] = seqs[b].atom_types[slot - 1]
                    prev_rows[b] = seqs[b].edge_rows[slot - 2]
        return positions

    def nll(self, seqs: Sequence[TeacherSequence], apply_mask: bool = False,
            vt: ValencyTable | None = None) -> T.Tensor:
        """Mean over the batch of each sequence's total negative log
        likelihood (atom terms, edge terms, and the terminal row)."""
        positions = self.forward_terms(seqs, apply_mask=apply_mask, vt=vt)
        B = len(seqs)
        loss = None
        for pos in positions:
            term = dc.weighted_sum(pos.losses, np.full(len(pos.rows), 1.0 / B))
            loss = term if loss is None else loss + term
        return loss

    def nll_stats(self, seqs: Sequence[TeacherSequence], **kw) -> tuple[float, float, int]:
        """(batch nll, per-term mean nll, scored term count)."""
        positions = self.forward_terms(seqs, **kw)
        total = 0.0
        count = 0
        for pos in positions:
            total += float(pos.losses.data.sum())
            count += len(pos.rows)
        return total / len(seqs), total / max(count, 1), count

    def step_distributions(self, seq: TeacherSequence, apply_mask: bool = False,
                           vt: ValencyTable | None = None) -> list[StepDistribution]:
        """Per-step categorical distributions and the probability assigned to
        the sequence's own category; a probe for likelihood bookkeeping."""
        with dc.no_grad():
            positions = self.forward_terms([seq], apply_mask=apply_mask, vt=vt,
                                           collect_probs=True)
        out = []
        n = seq.n_atoms
        for pos in positions:
            if pos.kind == "atom":
                cat = seq.atom_types[pos.slot - 1]
            elif pos.slot <= n:
                cat = seq.edge_rows[pos.slot - 2][pos.substep - 1]
            else:
                cat = 0
            out.append(StepDistribution(
                kind=pos.kind, slot=pos.slot, substep=pos.substep, category=cat,
                probs=pos.probs[0], mask_applied=pos.mask is not None,
                logprob=-float(pos.losses.data[0])))
        return out

    # -- autoregressive sampling ------------------------------------------------
    def sample(self, count: int, vt: ValencyTable | None = None, masking: bool = True,
               seed: int = 0, batch_size: int = 256,
               ) -> tuple[list[MolGraph], list[Trajectory]]:
        """Generate molecules; every draw and its log probability under the
        (possibly mask-renormalized) distribution is recorded.

        Work is split into fixed-size batches with per-batch child seeds, so
        results depend only on (seed, batch_size), not on how batches are
        scheduled across workers.
        """
        if count < 1:
            raise ModelError("count must be >= 1")
        vt = vt or DEFAULT_VALENCY
        n_batches = (count + batch_size - 1) // batch_size
        children = np.random.SeedSequence(seed).spawn(n_batches)
        graphs: list[MolGraph] = []
        trajectories: list[Trajectory] = []
        for batch_idx in range(n_batches):
            todo = min(batch_size, count - batch_idx * batch_size)
            rng = np.random.default_rng(children[batch_idx])
            g, t = self._sample_batch(todo, vt, masking, rng)
            graphs.extend(g)
            trajectories.extend(t)
        return graphs, trajectories

    def _sample_batch(self, B: int, vt: ValencyTable, masking: bool,
                      rng: np.random.Generator) -> tuple[list[MolGraph], list[Trajectory]]:
        cfg = self.config
        M = cfg.window
        dt = cfg.np_dtype
        limits = np.array(vt.as_index_array(), dtype=np.int64)

        atom_types = [[CARBON] for _ in range(B)]
        rows: list[list[tuple[int, ...]]] = [[] for _ in range(B)]
        used = np.zeros((B, cfg.max_atoms + 1), dtype=np.int64)
        steps: list[list[TrajStep]] = [[] for _ in range(B)]
        violations: list[set[int]] = [set() for _ in range(B)]
        alive = np.ones(B, dtype=bool)
        ended_by_eos = np.zeros(B, dtype=bool)
        eos_atom: list[int | None] = [None] * B

        prev_atoms = np.full(B, CARBON, dtype=np.int64)
        prev_rows = np.zeros((B, M), dtype=np.int64)

        with dc.no_grad():
            node_states = self.node_rnn.zero_state(B, dt)
            for slot in range(2, cfg.max_atoms + 2):
                if not alive.any():
                    break
                node_in = T.concat([
                    T.reshape(T.embedding(self.edge_table, prev_rows), (B, M * cfg.edge_embed)),
                    T.embedding(self.atom_table, prev_atoms),
                ], axis=1)
                node_states, node_top = self.node_rnn(node_in, node_states)
                atom_logits = self.node_head(node_top)
                atom_logp = T.log_probs(atom_logits.data)
                atom_choice = _categorical(np.exp(atom_logp), rng)

                cond_emb = T.embedding(self.atom_table, atom_choice)
                h0 = self.edge_init(node_top)
                edge_states = [h0 for _ in range(cfg.edge_layers)]
                prev_cat_emb = T.rows(self.row_start, np.zeros(B, dtype=np.int64))
                width = min(slot - 1, M)
                row_cats = np.zeros((B, M), dtype=np.int64)
                row_logps = np.zeros((B, width))
                row_viol = np.zeros((B, width), dtype=bool)
                new = slot - 1  # 0-based index of the atom being placed
                new_limit = limits[atom_choice]
                new_used = np.zeros(B, dtype=np.int64)
                for j in range(1, width + 1):
                    edge_states, edge_top = self.edge_rnn(
                        T.concat([prev_cat_emb, cond_emb], axis=1), edge_states)
                    logits = self.edge_head(edge_top).data
                    partner = new - j
                    partner_elem = np.array(
                        [atom_types[b][partner] if alive[b] else CARBON for b in range(B)],
                        dtype=np.int64)
                    partner_free = limits[partner_elem] - used[np.arange(B), partner]
                    if masking:
                        mask = np.ones((B, N_EDGE_CATEGORIES), dtype=bool)
                        for k in (1, 2, 3):
                            mask[:, k] = (k <= new_limit - new_used) & (k <= partner_free)
                        logp = T.log_probs(logits, mask)
                    else:
                        mask = None
                        logp = T.log_probs(logits)
                    cats = _categorical(np.exp(logp), rng)
                    if masking and mask is not None:
                        chosen_allowed = mask[np.arange(B), cats]
                        if not chosen_allowed[alive].all():
                            raise AssertionError("masked sampling drew a masked category")
                    cats[~alive] = 0
                    row_cats[:, j - 1] = cats
                    row_logps[:, j - 1] = logp[np.arange(B), cats]
                    over = (cats > 0) & ((new_used + cats > new_limit) | (cats > partner_free))
                    row_viol[:, j - 1] = over & alive
                    new_used += cats
                    used[np.arange(B), partner] += cats
                    prev_cat_emb = T.embedding(self.edge_table, row_cats[:, j - 1])

                terminal = ~row_cats[:, :width].any(axis=1)
                for b in range(B):
                    if not alive[b]:
                        continue
                    if terminal[b]:
                        eos_atom[b] = int(atom_choice[b])
                        ended_by_eos[b] = True
                        alive[b] = False
                        for j in range(1, width + 1):
                            steps[b].append(TrajStep(
                                "edge", slot, j, 0, float(row_logps[b, j - 1]),
                                atom_index=new, partner=new - j))
                        # undo the (zero) partner bookkeeping is a no-op
                        continue
                    steps[b].append(TrajStep(
                        "atom", slot, None, int(atom_choice[b]),
                        float(atom_logp[b, atom_choice[b]]), atom_index=new))
                    atom_types[b].append(int(atom_choice[b]))
                    used[b, new] = new_used[b]
                    row = row_cats[b].copy()
                    rows[b].append(tuple(int(c) for c in row))
                    for j in range(1, width + 1):
                        cat = int(row_cats[b, j - 1])
                        viol = bool(row_viol[b, j - 1])
                        steps[b].append(TrajStep(
                            "edge", slot, j, cat, float(row_logps[b, j - 1]),
                            atom_index=new, partner=new - j, violation=viol))
                        if viol:
                            violations[b].add(new)
                            violations[b].add(new - j)
                    if len(atom_types[b]) >= cfg.max_atoms:
                        alive[b] = False

                prev_atoms = np.where(alive, atom_choice, prev_atoms)
                keep = alive[:, None]
                prev_rows = np.where(keep, row_cats, prev_rows)

        out_graphs = []
        out_trajs = []
        for b in range(B):
            bonds = []
            for t, row in enumerate(rows[b]):
                node = t + 1
                for d, cat in enumerate(row, start=1):
                    if cat:
                        bonds.append((node - d, node, BondOrder(min(cat, 3))))
            g = MolGraph([Element.from_index(a) for a in atom_types[b]], bonds)
            if masking and violations[b]:
                raise AssertionError("masked sampling produced a valency violation")
            traj = Trajectory(
                steps=steps[b], graph=g, violations=tuple(sorted(violations[b])),
                ended_by_eos=bool(ended_by_eos[b]), eos_atom=eos_atom[b],
                below_min=len(atom_types[b]) < cfg.min_atoms, masked=masking)
            out_graphs.append(g)
            out_trajs.append(traj)
        return out_graphs, out_trajs

    # -- checkpointing ----------------------------------------------------------
    CHECKPOINT_MAGIC = b"MGCKPT01"

    def save_checkpoint(self) -> bytes:
        params = self.named_parameters()
        arrays: dict[str, np.ndarray] = {name: p.data for name, p in params.items()}
        opt_state = self.optimizer.state_dict()
        for name, arr in opt_state["m"].items():
            arrays[f"adam.m.{name}"] = arr
        for name, arr in opt_state["v"].items():
            arrays[f"adam.v.{name}"] = arr
        meta = {
            "config": self.config.to_dict(),
            "adam": opt_state["hyper"],
            "train_rng": _rng_state_to_json(self.train_rng),
        }
        return pack_blob(self.CHECKPOINT_MAGIC, meta, arrays)

    @classmethod
    def load_checkpoint(cls, blob: bytes) -> "GeneratorModel":
        try:
            meta, arrays = unpack_blob(blob, cls.CHECKPOINT_MAGIC)
        except BlobError as exc:
            raise CheckpointError(str(exc)) from None

        model = cls(GeneratorConfig.from_dict(meta["config"]), seed=0)
        params = model.named_parameters()
        for name, p in params.items():
            if name not in arrays:
                raise CheckpointError(f"checkpoint missing parameter {name}")
            if arrays[name].shape != p.data.shape:
                raise CheckpointError(f"shape mismatch for {name}")
            p.data = arrays[name]
        hyper = dict(meta["adam"])
        step_count = hyper.pop("step_count")
        model.optimizer = dc.Adam(**hyper)
        model.optimizer.step_count = step_count
        model.optimizer.m = {k[len("adam.m."):]: v for k, v in arrays.items()
                             if k.startswith("adam.m.")}
        model.optimizer.v = {k[len("adam.v."):]: v for k, v in arrays.items()
                             if k.startswith("adam.v.")}
        model.train_rng = _rng_state_from_json(meta["train_rng"])
        return model


def _categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Row-wise draw from (B, K) probabilities; consumes one uniform per row."""
    cum = probs.cumsum(axis=1)
    cum[:, -1] = 1.0
    u = rng.random(probs.shape[0])
    return np.minimum((u[:, None] > cum).sum(axis=1), probs.shape[1] - 1).astype(np.int64)


def _rng_state_to_json(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=int))


def _rng_state_from_json(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    fixed = dict(state)
    if "state" in fixed and isinstance(fixed["state"], dict):
        inner = dict(fixed["state"])
        for key in ("state", "inc"):
            if key in inner and isinstance(inner[key], str):
                inner[key] = int(inner[key])
        fixed["state"] = inner
    rng.bit_generator.state = fixed
    return rng


def zero_output_layers(model: GeneratorModel) -> None:
    """Zero both output affines: every step distribution becomes uniform."""
    for head in (model.node_head, model.edge_head):
        head.lin2.weight.data[...] = 0
        head.lin2.bias.data[...] = 0
