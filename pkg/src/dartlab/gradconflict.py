"""Gradient-angle analysis between reasoning and tool-use updates.

Per trajectory, each role's gradient comes from its own masked backward pass
(grads zeroed in between), flattened over all trainable parameters in manifest
order. Cross-role angles within a trajectory are compared against same-role
angles across trajectories; gradient clipping is never applied here so the
geometry is unaltered, and no parameter is ever updated.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .policy import PolicyModel, routing_for_mode, token_log_probs
from .router import ROLE_REASONING, ROLE_TOOL
from .toolenv import Corpus, EpisodeRecord, run_episode
from .trainer import loss_weights

ANGLES_HEADER = ["pair_type", "traj_i", "traj_j", "angle_rad", "cosine"]
_ROLE_MASK = {ROLE_REASONING: "reas", ROLE_TOOL: "tool"}


@dataclass
class GradientSnapshot:
    role: str
    trajectory_id: str
    flat: np.ndarray
    manifest_hash: str

    @property
    def is_zero(self) -> bool:
        return not self.flat.any()


def flatten_trainable_grads(model: PolicyModel, name_filter: str | None = None) -> np.ndarray:
    parts = []
    for name, t in model.trainable_parameters():
        if name_filter is not None and not name.startswith(name_filter):
            continue
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        parts.append(g.astype(np.float64).reshape(-1))
    return np.concatenate(parts) if parts else np.zeros(0)


def role_gradient(model: PolicyModel, record: EpisodeRecord, role: str,
                  advantage: float = 1.0, adapter_mode: str = "single:unified",
                  name_filter: str | None = None) -> GradientSnapshot:
    """Gradient of the role-masked log-likelihood objective for one trajectory.

    Parameters are read, never written; gradients are zeroed first so the
    snapshot is exactly this trajectory's contribution. A trajectory with no
    tokens of the role yields the zero vector.
    """
    if role not in _ROLE_MASK:
        raise ValueError(f"role must be one of {sorted(_ROLE_MASK)}, got {role!r}")
    model.zero_grad()
    weights = loss_weights(record, _ROLE_MASK[role], advantage, 0.0, None)
    if weights.any():
        routing = routing_for_mode(adapter_mode, record.roles)
        with Tape() as tape:
            lp = token_log_probs(model, record.tokens, routing)
            objective = ad.tsum(ad.mul(lp, Tensor(weights.astype(lp.data.dtype))))
            tape.backward(objective)
    flat = flatten_trainable_grads(model, name_filter)
    return GradientSnapshot(role=role, trajectory_id=record.question_id,
                            flat=flat, manifest_hash=model.manifest_hash())


def cosine(g1: GradientSnapshot, g2: GradientSnapshot) -> float:
    if g1.manifest_hash != g2.manifest_hash:
        raise ValueError("gradient snapshots come from different parameter manifests")
    sq1 = float(np.dot(g1.flat, g1.flat))
    sq2 = float(np.dot(g2.flat, g2.flat))
    if sq1 == 0.0 or sq2 == 0.0:
        raise ValueError("angle undefined for a zero gradient vector")
    # sqrt(sq1*sq2) keeps identical vectors at cosine exactly 1
    return float(np.dot(g1.flat, g2.flat) / np.sqrt(sq1 * sq2))


def angle(g1: GradientSnapshot, g2: GradientSnapshot) -> float:
    """arccos of the clamped cosine, in [0, pi]."""
    return float(np.arccos(np.clip(cosine(g1, g2), -1.0, 1.0)))


@dataclass
class PairRow:
    pair_type: str
    traj_i: str
    traj_j: str
    angle_rad: float
    cosine: float


@dataclass
class ConflictReport:
    rows: list[PairRow]
    n_trajectories: int
    skipped_pairs: int

    def mean_angle(self, pair_type: str) -> float:
        vals = [r.angle_rad for r in self.rows if r.pair_type == pair_type]
        return float(np.mean(vals)) if vals else float("nan")

    def summary(self) -> dict[str, float]:
        return {
            "cross_role_mean_angle": self.mean_angle("cross_role"),
            "same_role_r_mean_angle": self.mean_angle("same_role_r"),
            "same_role_a_mean_angle": self.mean_angle("same_role_a"),
            "skipped_pairs": self.skipped_pairs,
            "n_trajectories": self.n_trajectories,
        }


def conflict_report(model: PolicyModel, corpus: Corpus, n_rollouts: int = 16,
                    rng: np.random.Generator | None = None,
                    adapter_mode: str = "single:unified", n_questions: int = 4,
                    temperature: float = 1.0, budget: int = 4,
                    name_filter: str | None = None, log=None) -> ConflictReport:
    """Sample rollout groups over a fixed query set and compare role gradients.

    Within each trajectory: the cross-role pair (reasoning vs tool). Within
    each question's group: all same-role pairs across distinct trajectories.
    Pairs touching a zero gradient are skipped and counted.
    """
    if n_rollouts < 2:
        raise ValueError("need at least 2 rollouts per question")
    if rng is None:
        rng = np.random.default_rng(0)
    questions = corpus.questions_for("eval")[:n_questions]
    if not questions:
        raise ValueError("no evaluation questions available")
    before = {n: t.data.copy() for n, t in model.named_parameters()}

    rows: list[PairRow] = []
    skipped = 0
    total = 0
    for question in questions:
        snaps: dict[str, list[GradientSnapshot]] = {ROLE_REASONING: [], ROLE_TOOL: []}
        ids: list[str] = []
        for i in range(n_rollouts):
            rec = run_episode(model, adapter_mode, question, corpus, budget=budget,
                              rng=rng, temperature=temperature)
            tid = f"{question.id}/{i}"
            rec.question_id = tid  # trajectory identity for the pair table
            ids.append(tid)
            for role in (ROLE_REASONING, ROLE_TOOL):
                snaps[role].append(role_gradient(model, rec, role,
                                                 adapter_mode=adapter_mode,
                                                 name_filter=name_filter))
            total += 1
        for i in range(n_rollouts):
            g_r, g_a = snaps[ROLE_REASONING][i], snaps[ROLE_TOOL][i]
            if g_r.is_zero or g_a.is_zero:
                skipped += 1
                continue
            rows.append(PairRow("cross_role", ids[i], ids[i], angle(g_r, g_a),
                                cosine(g_r, g_a)))
        for role, tag in ((ROLE_REASONING, "same_role_r"), (ROLE_TOOL, "same_role_a")):
            for i in range(n_rollouts):
                for j in range(i + 1, n_rollouts):
                    gi, gj = snaps[role][i], snaps[role][j]
                    if gi.is_zero or gj.is_zero:
                        skipped += 1
                        continue
                    rows.append(PairRow(tag, ids[i], ids[j], angle(gi, gj),
                                        cosine(gi, gj)))
        if log is not None:
            log(f"question {question.id}: {len(rows)} pairs so far")

    model.zero_grad()
    for name, t in model.named_parameters():
        assert np.array_equal(t.data, before[name]), f"parameter {name} changed"
    return ConflictReport(rows=rows, n_trajectories=total, skipped_pairs=skipped)


def write_angles_csv(report: ConflictReport, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(ANGLES_HEADER)
        for r in report.rows:
            writer.writerow([r.pair_type, r.traj_i, r.traj_j,
                             repr(r.angle_rad), repr(r.cosine)])


def constructed_conflict_case() -> dict:
    """Deterministic micro-case: a one-layer linear policy and a two-trajectory
    batch whose reasoning target raises a logit that the tool target lowers.

    With zero weights the predictive distribution is uniform, and the
    log-softmax gradient (onehot - p) makes the two role gradients overlap
    only through -p, so their cosine is exactly negative.
    """
    n_classes, n_features = 4, 3
    w = Tensor(np.zeros((n_classes, n_features)), requires_grad=True)
    x = np.zeros((1, n_features))
    x[0, 0] = 1.0  # both trajectories condition on the same context feature
    target_reasoning, target_tool = 1, 2

    def grad_for(target: int) -> np.ndarray:
        w.zero_grad()
        onehot = np.zeros((1, n_classes))
        onehot[0, target] = 1.0
        with Tape() as tape:
            logits = ad.matmul(Tensor(x), ad.transpose(w))
            objective = ad.tsum(ad.mul(ad.row_log_softmax(logits), Tensor(onehot)))
            tape.backward(objective)
        return w.grad.astype(np.float64).reshape(-1)

    g_r = GradientSnapshot(ROLE_REASONING, "conflict/0", grad_for(target_reasoning), "micro")
    g_a = GradientSnapshot(ROLE_TOOL, "conflict/1", grad_for(target_tool), "micro")
    return {"cosine": cosine(g_r, g_a), "angle": angle(g_r, g_a),
            "snapshots": (g_r, g_a)}
