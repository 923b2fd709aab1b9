"""Policy-gradient fine-tuning with discounted terminal rewards and the
per-atom structural penalty.

A rollout's terminal reward is spread over its node-addition transitions,
discounted away from the terminal state by default (the step next to the
end is discounted least). Edge steps that broke a valence limit during
unmasked rollouts can have that coefficient replaced by a flat penalty, so
the correction lands on the specific atoms instead of the whole molecule.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .canon import canonical_key
from .diffcore import tensor as T
from .graph import DEFAULT_VALENCY, ValencyTable
from .model import GeneratorModel, Trajectory

log = logging.getLogger(__name__)


class RlError(ValueError):
    pass


@dataclass(frozen=True)
class RlConfig:
    discount: float = 0.97
    reward_scale: float = 1.0
    iterations: int = 300
    batch_size: int = 512
    learning_rate: float = 1e-5       # constant during fine-tuning
    structural_penalty: float = -10.0
    masking: bool = True              # rollout masking
    discount_orientation: str = "from_terminal"   # or "literal"
    use_baseline: bool = True
    baseline_momentum: float = 0.9
    entropy_bonus: float = 0.0
    sample_batch: int = 256           # generation micro-batch (part of the determinism contract)
    validity_probe: int = 64          # unmasked probe rollouts per iteration (0 = off)
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.discount <= 1.0):
            raise RlError("discount must be in (0, 1]")
        if self.batch_size < 1:
            raise RlError("batch_size must be >= 1")
        if self.discount_orientation not in ("from_terminal", "literal"):
            raise RlError("discount_orientation must be 'from_terminal' or 'literal'")


def step_coefficients(traj: Trajectory, cfg: RlConfig) -> dict[tuple[str, int, int | None], float]:
    """Reward coefficient for every step, keyed by (kind, slot, substep).

    Transition i (slot i+1) carries r * gamma^(N-i) by default, or the
    literal gamma^i when configured; a structural-penalty override replaces
    the coefficient outright and is never discounted.
    """
    if not traj.steps:
        return {}
    n_transitions = traj.n_transitions
    out = {}
    for step in traj.steps:
        transition = step.slot - 1
        if step.reward_override is not None:
            coef = step.reward_override
        elif cfg.discount_orientation == "from_terminal":
            coef = traj.terminal_reward * cfg.discount ** (n_transitions - transition)
        else:
            coef = traj.terminal_reward * cfg.discount ** transition
        out[(step.kind, step.slot, step.substep)] = coef
    return out


def pg_loss(model: GeneratorModel, trajectories: Sequence[Trajectory], cfg: RlConfig,
            vt: ValencyTable | None = None) -> T.Tensor:
    """L = -(1/B) sum over trajectories and steps of coef * log p(step)."""
    if not trajectories:
        raise RlError("empty trajectory batch")
    B = len(trajectories)
    seqs = [t.to_sequence(model.config.window) for t in trajectories]
    coefs = [step_coefficients(t, cfg) for t in trajectories]
    masked = {t.masked for t in trajectories}
    if len(masked) > 1:
        raise RlError("cannot mix masked and unmasked rollouts in one batch")
    positions = model.forward_terms(seqs, apply_mask=masked.pop(), vt=vt,
                                    keep_logits=cfg.entropy_bonus != 0.0)
    loss = None
    for pos in positions:
        weights = np.array([coefs[b].get((pos.kind, pos.slot, pos.substep), 0.0)
                            for b in pos.rows])
        if weights.any():
            term = dc.weighted_sum(pos.losses, weights / B)
            loss = term if loss is None else loss + term
        if cfg.entropy_bonus:
            ent = dc.weighted_sum(T.entropy_rows(pos.logits, pos.mask),
                                  np.full(len(pos.rows), -cfg.entropy_bonus / B))
            loss = ent if loss is None else loss + ent
    if loss is None:
        loss = dc.weighted_sum(positions[0].losses, np.zeros(len(positions[0].rows)))
    return loss


def apply_structural_penalty(trajectories: Sequence[Trajectory], penalty: float,
                             ) -> Sequence[Trajectory]:
    """Give every valence-breaking edge step the flat penalty coefficient.

    Idempotent; untouched steps keep the discounted terminal reward.
    """
    for traj in trajectories:
        for step in traj.steps:
            if step.kind == "edge" and step.violation:
                step.reward_override = penalty
    return trajectories


@dataclass
class IterationReport:
    iteration: int
    mean_reward: float
    max_reward: float
    unmasked_validity: float
    unique_fraction: float
    loss: float
    dropped: int
    digests: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "mean_reward": self.mean_reward,
            "max_reward": self.max_reward,
            "unmasked_validity": self.unmasked_validity,
            "unique_fraction": self.unique_fraction,
            "loss": self.loss,
            "dropped": self.dropped,
            "digests": list(self.digests),
        }


def finetune(model: GeneratorModel, critic: Callable | None, cfg: RlConfig,
             vt: ValencyTable | None = None,
             on_iteration: Callable[[IterationReport], None] | None = None,
             ) -> list[IterationReport]:
    """Sample, score, and update in place for cfg.iterations rounds.

    `critic` maps a MolGraph to a finite scalar; None means structural
    penalty only (masking off, zero terminal reward). Invalid unmasked
    rollouts always get terminal reward zero plus per-step penalties.
    """
    from .smiles import write as write_smiles

    vt = vt or DEFAULT_VALENCY
    if critic is None and cfg.masking:
        raise RlError("structural-penalty-only tuning needs masking off")
    model.optimizer = dc.Adam(lr=cfg.learning_rate, decay=1.0)
    params = model.named_parameters()
    baseline = None
    reports: list[IterationReport] = []
    seed_root = np.random.SeedSequence(cfg.seed)
    iter_seeds = seed_root.spawn(cfg.iterations)

    for iteration in range(cfg.iterations):
        rollout_seed, probe_seed = iter_seeds[iteration].spawn(2)
        graphs, trajectories = model.sample(
            cfg.batch_size, vt=vt, masking=cfg.masking,
            seed=_seed_int(rollout_seed), batch_size=cfg.sample_batch)

        if not cfg.masking:
            apply_structural_penalty(trajectories, cfg.structural_penalty)

        kept: list[Trajectory] = []
        rewards = []
        dropped = 0
        for traj in trajectories:
            if traj.violations:
                traj.terminal_reward = 0.0
                kept.append(traj)
                rewards.append(0.0)
                continue
            if critic is None:
                traj.terminal_reward = 0.0
                kept.append(traj)
                rewards.append(0.0)
                continue
            try:
                score = float(critic(traj.graph))
            except Exception as exc:
                log.warning("critic failed on a molecule, dropping trajectory: %s", exc)
                dropped += 1
                continue
            if not math.isfinite(score):
                log.warning("critic returned a non-finite score, dropping trajectory")
                dropped += 1
                continue
            traj.terminal_reward = cfg.reward_scale * score
            kept.append(traj)
            rewards.append(traj.terminal_reward)

        if not kept:
            raise RlError(f"iteration {iteration}: every trajectory was dropped")

        mean_reward = float(np.mean(rewards)) if rewards else 0.0
        max_reward = float(np.max(rewards)) if rewards else 0.0
        if cfg.use_baseline and critic is not None:
            baseline = (mean_reward if baseline is None
                        else cfg.baseline_momentum * baseline
                        + (1 - cfg.baseline_momentum) * mean_reward)
            for traj in kept:
                traj.terminal_reward -= baseline

        model.optimizer.zero_grad(params)
        loss = pg_loss(model, kept, cfg, vt=vt)
        loss.backward()
        dc.clip_global_norm(params, model.config.grad_clip)
        model.optimizer.step(params)

        if not cfg.masking:
            valid = [g for g, t in zip(graphs, trajectories) if not t.violations]
            unmasked_validity = len(valid) / len(trajectories)
        elif cfg.validity_probe > 0:
            probe_graphs, probe_trajs = model.sample(
                cfg.validity_probe, vt=vt, masking=False,
                seed=_seed_int(probe_seed), batch_size=cfg.sample_batch)
            valid = [g for g, t in zip(probe_graphs, probe_trajs) if not t.violations]
            unmasked_validity = len(valid) / len(probe_trajs)
        else:
            valid = list(graphs)
            unmasked_validity = float("nan")

        ok_graphs = [g for g, t in zip(graphs, trajectories) if not t.violations]
        unique = len({canonical_key(g) for g in ok_graphs}) / max(len(graphs), 1)
        digests = []
        for g in ok_graphs[:3]:
            try:
                digests.append(write_smiles(g, vt))
            except Exception:
                digests.append(f"<{g.n_atoms} atoms>")
        report = IterationReport(
            iteration=iteration, mean_reward=mean_reward, max_reward=max_reward,
            unmasked_validity=unmasked_validity, unique_fraction=unique,
            loss=float(loss.data), dropped=dropped, digests=digests)
        reports.append(report)
        if on_iteration is not None:
            on_iteration(report)
    return reports


def _seed_int(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, dtype=np.uint64)[0])
