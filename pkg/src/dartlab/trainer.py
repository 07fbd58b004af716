"""Group-relative masked policy-gradient training.

One optimization step: roll out a group of episodes per question, normalize
rewards within each group, then backpropagate the token-masked surrogate

    loss = -(1/B) sum_i sum_t m_t * (A_i - beta * log(pi/pi_ref)) * log pi(c_t)

whose gradient is the KL-regularized masked policy gradient (the log-ratio
coefficient is held constant). Variant training gates the loss by role mask;
dual-adapter (dart) training backpropagates each role's masked loss with only
that role's adapter trainable, so reasoning tokens can never touch tool
parameters and vice versa — the frozen backbone mechanism, applied per role.
"""

from __future__ import annotations

import contextlib
import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .policy import PolicyModel, routing_for_mode, save_checkpoint, token_log_probs
from .router import MASK_REAS, MASK_TOOL, MASK_UNIFIED, build_mask
from .toolenv import Corpus, EpisodeRecord, Question, generate_demonstration, run_episode

VARIANT_MASKS = {"reas": MASK_REAS, "tool": MASK_TOOL, "unified": MASK_UNIFIED}
TRAIN_LOG_HEADER = ["step", "mean_reward", "loss",
                    "grad_norm_reasoning", "grad_norm_tool", "kl_term"]


@dataclass
class RolloutGroup:
    question_id: str
    records: list[EpisodeRecord]
    rewards: list[float]

    def __post_init__(self):
        if len(self.records) < 1 or len(self.records) != len(self.rewards):
            raise ValueError("a rollout group needs N >= 1 records with rewards")
        if any(r.question_id != self.question_id for r in self.records):
            raise ValueError("rollout group mixes question ids")


@dataclass
class TrainConfig:
    steps: int = 200
    rollout_batch: int = 8
    group_size: int = 8
    learning_rate: float = 3e-3
    kl_beta: float = 0.001
    clip_ratio: float = 0.2  # stored for fidelity; inert with one update per rollout batch
    temperature: float = 1.0
    top_p: float = 1.0
    variant: str = "dart"  # mask id ("reas"|"tool"|"unified") or the dual-adapter flag
    seed: int = 0
    budget: int = 4
    warmup_frac: float = 0.1
    momentum: float = 0.9
    max_grad_norm: float = 1.0  # training-only stabilizer; analysis passes never clip
    eps_num: float = 1e-8
    train_hops: int | None = None  # restrict training questions to a hop count

    def __post_init__(self):
        if self.kl_beta < 0:
            raise ValueError("kl_beta must be >= 0")
        if not 0 < self.clip_ratio < 1:
            raise ValueError("clip_ratio must be in (0, 1)")
        if self.variant != "dart" and self.variant not in VARIANT_MASKS:
            raise ValueError(f"unknown variant: {self.variant!r}")

    def adapter_mode(self) -> str:
        return "routed" if self.variant == "dart" else "single:unified"


def group_advantage(rewards: Sequence[float], eps_num: float = 1e-8) -> np.ndarray:
    """Group-relative normalization: (R - mean) / (population std + eps)."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size <= 1:
        return np.zeros_like(r)
    std = r.std()
    if std == 0.0:
        return np.zeros_like(r)
    return (r - r.mean()) / (std + eps_num)


def warmup_lr(lr: float, step: int, steps: int, frac: float = 0.1) -> float:
    """Linear warm-up: lr * min(1, step / (frac * steps)); step counts from 1."""
    return lr * min(1.0, step / (frac * steps))


def loss_weights(record: EpisodeRecord, mask_variant: str, advantage: float,
                 beta: float, logratio: np.ndarray | None) -> np.ndarray:
    """Per-token coefficient m_t * (A - beta * logratio_t); env and non-sampled
    positions are always gated out."""
    mask = np.asarray(build_mask(record.roles, mask_variant), dtype=np.float64)
    if len(mask) != len(record.tokens):
        raise ValueError(f"mask length {len(mask)} != trajectory length {len(record.tokens)}")
    mask *= np.asarray(record.sampled, dtype=np.float64)
    coef = np.full(len(mask), float(advantage))
    if beta != 0.0 and logratio is not None:
        coef = coef - beta * logratio
    return mask * coef


def _ref_log_probs(ref: tuple[PolicyModel, str], record: EpisodeRecord) -> np.ndarray:
    model, mode = ref
    routing = routing_for_mode(mode, record.roles)
    return token_log_probs(model, record.tokens, routing).data.astype(np.float64)


def masked_pg_loss(model: PolicyModel, group: RolloutGroup, variant: str,
                   ref: tuple[PolicyModel, str] | None = None,
                   beta: float = 0.0, adapter_mode: str | None = None) -> Tensor:
    """Scalar surrogate loss for one rollout group under one mask variant.

    For the dual-adapter flag this sums the two role-masked terms; gradient
    isolation additionally requires the scoped backward passes that
    ``accumulate_gradients`` performs.
    """
    if adapter_mode is None:
        adapter_mode = "routed" if variant == "dart" else "single:unified"
    advantages = group_advantage(group.rewards)
    mask_variants = [MASK_REAS, MASK_TOOL] if variant == "dart" else [VARIANT_MASKS[variant]]
    total: Tensor | None = None
    for record, adv in zip(group.records, advantages):
        routing = routing_for_mode(adapter_mode, record.roles)
        lp = token_log_probs(model, record.tokens, routing)
        logratio = None
        if beta != 0.0 and ref is not None:
            logratio = lp.data.astype(np.float64) - _ref_log_probs(ref, record)
        for mv in mask_variants:
            w = loss_weights(record, mv, float(adv), beta, logratio)
            if not w.any():
                continue
            contrib = ad.tsum(ad.mul(lp, Tensor(w.astype(lp.data.dtype))))
            total = contrib if total is None else ad.add(total, contrib)
    if total is None:
        return Tensor(np.zeros((), dtype=np.dtype(model.config.dtype)))
    return ad.scale(total, -1.0 / len(group.records))


@contextlib.contextmanager
def scoped_trainable(model: PolicyModel, roles: set[str]):
    """Temporarily mark only the named adapter sets trainable."""
    saved = {r: aset.trainable for r, aset in model.adapters.items()}
    try:
        for r, aset in model.adapters.items():
            aset.set_trainable(saved[r] and r in roles)
        yield
    finally:
        for r, aset in model.adapters.items():
            aset.set_trainable(saved[r])


def _adapter_grad_norm(model: PolicyModel, roles: Sequence[str]) -> float:
    total = 0.0
    for role in roles:
        for t in model.adapters[role].tensors():
            if t.grad is not None:
                total += float((t.grad.astype(np.float64) ** 2).sum())
    return float(np.sqrt(total))


def accumulate_gradients(model: PolicyModel, groups: Sequence[RolloutGroup],
                         cfg: TrainConfig,
                         ref: tuple[PolicyModel, str] | None) -> dict[str, float]:
    """Zero grads, then backpropagate the batch loss; returns logging stats.

    dart: one scoped forward+backward per role (other adapter held constant).
    unified: one forward, two mask-split backwards (their sum is the unified
    gradient, and the split yields the per-role norms for the log).
    reas/tool: single masked backward.
    """
    model.zero_grad()
    n_groups = len(groups)
    adapter_mode = cfg.adapter_mode()
    stats = {"loss": 0.0, "grad_norm_reasoning": 0.0, "grad_norm_tool": 0.0, "kl_term": 0.0}

    use_kl = cfg.kl_beta != 0.0 and ref is not None
    ref_lp: dict[int, np.ndarray] = {}
    if use_kl:
        for g in groups:
            for rec in g.records:
                ref_lp[id(rec)] = _ref_log_probs(ref, rec)
    advantages = {id(g): group_advantage(g.rewards) for g in groups}
    kl_acc = {"sum": 0.0, "count": 0}

    def batch_loss(mask_variants: list[str], collect_kl: bool) -> list[Tensor]:
        """One tape forward per record, shared by all requested mask variants."""
        totals: list[Tensor | None] = [None] * len(mask_variants)
        for g in groups:
            for rec, adv in zip(g.records, advantages[id(g)]):
                routing = routing_for_mode(adapter_mode, rec.roles)
                lp = token_log_probs(model, rec.tokens, routing)
                logratio = None
                if use_kl:
                    logratio = lp.data.astype(np.float64) - ref_lp[id(rec)]
                    if collect_kl:
                        gate = np.asarray(build_mask(rec.roles, MASK_UNIFIED), dtype=bool)
                        gate &= np.asarray(rec.sampled, dtype=bool)
                        kl_acc["sum"] += float(logratio[gate].sum())
                        kl_acc["count"] += int(gate.sum())
                for i, mv in enumerate(mask_variants):
                    w = loss_weights(rec, mv, float(adv), cfg.kl_beta, logratio)
                    if not w.any():
                        continue
                    contrib = ad.tsum(ad.mul(lp, Tensor(w.astype(lp.data.dtype))))
                    totals[i] = contrib if totals[i] is None else ad.add(totals[i], contrib)
        zero = Tensor(np.zeros((), dtype=np.dtype(model.config.dtype)))
        scale = -1.0 / sum(len(g.records) for g in groups)
        return [zero if t is None else ad.scale(t, scale) for t in totals]

    if cfg.variant == "dart":
        for role, mask_variant in (("reasoning", MASK_REAS), ("tool", MASK_TOOL)):
            with scoped_trainable(model, {role}):
                with Tape() as tape:
                    (loss,) = batch_loss([mask_variant], collect_kl=role == "reasoning")
                    tape.backward(loss)
            stats["loss"] += float(loss.data)
            stats[f"grad_norm_{role}"] = _adapter_grad_norm(model, [role])
    elif cfg.variant == "unified":
        with Tape() as tape:
            loss_r, loss_t = batch_loss([MASK_REAS, MASK_TOOL], collect_kl=True)
            tape.backward(loss_r)
            stats["grad_norm_reasoning"] = _adapter_grad_norm(model, list(model.adapters))
            partial = {id(t): t.grad.copy() for t in _all_adapter_tensors(model)
                       if t.grad is not None}
            tape.backward(loss_t)
        tool_sq = 0.0
        for t in _all_adapter_tensors(model):
            if t.grad is not None:
                d = t.grad.astype(np.float64) - partial.get(id(t), 0.0)
                tool_sq += float((d ** 2).sum())
        stats["grad_norm_tool"] = float(np.sqrt(tool_sq))
        stats["loss"] = float(loss_r.data) + float(loss_t.data)
    else:
        with Tape() as tape:
            (loss,) = batch_loss([VARIANT_MASKS[cfg.variant]], collect_kl=True)
            tape.backward(loss)
        norm = _adapter_grad_norm(model, list(model.adapters))
        key = "grad_norm_reasoning" if cfg.variant == "reas" else "grad_norm_tool"
        stats[key] = norm
        stats["loss"] = float(loss.data)
    stats["kl_term"] = kl_acc["sum"] / kl_acc["count"] if kl_acc["count"] else 0.0
    return stats


def _all_adapter_tensors(model: PolicyModel):
    for aset in model.adapters.values():
        yield from aset.tensors()


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients down to a global norm bound; returns the pre-clip norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


class SGDMomentum:
    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9):
        self.params = list(params)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= (lr * v).astype(p.data.dtype)


class Adam:
    def __init__(self, params: Sequence[Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)


@dataclass
class TrainResult:
    rows: list[dict]
    diverged: bool = False
    final_step: int = 0


def collect_groups(model: PolicyModel, corpus: Corpus, questions: Sequence[Question],
                   cfg: TrainConfig, rng: np.random.Generator) -> list[RolloutGroup]:
    groups = []
    for _ in range(cfg.rollout_batch):
        q = questions[int(rng.integers(len(questions)))]
        records = [run_episode(model, cfg.adapter_mode(), q, corpus, budget=cfg.budget,
                               rng=rng, temperature=cfg.temperature, top_p=cfg.top_p)
                   for _ in range(cfg.group_size)]
        groups.append(RolloutGroup(q.id, records, [float(r.reward) for r in records]))
    return groups


def train(model: PolicyModel, corpus: Corpus, cfg: TrainConfig,
          ref: tuple[PolicyModel, str] | None = None,
          log_path=None, checkpoint_path=None) -> TrainResult:
    """Rollout -> advantage -> masked loss -> SGD(momentum) update loop.

    The reference policy defaults to this model's own frozen backbone, which
    is exactly the initial policy (adapters start at zero). Divergence (NaN
    loss) aborts and restores the last stable parameters.
    """
    if not model.frozen:
        raise ValueError("adapter training requires a frozen backbone")
    if ref is None:
        ref = (model, "none")
    rng = np.random.default_rng(cfg.seed)
    questions = [q for q in corpus.questions_for("train")
                 if cfg.train_hops is None or q.hops == cfg.train_hops]
    if not questions:
        raise ValueError("no training questions match the config")
    trainable = [t for _, t in model.trainable_parameters()]
    opt = SGDMomentum(trainable, momentum=cfg.momentum)
    rows: list[dict] = []
    diverged = False
    stable = [t.data.copy() for t in trainable]
    for step in range(1, cfg.steps + 1):
        groups = collect_groups(model, corpus, questions, cfg, rng)
        stats = accumulate_gradients(model, groups, cfg, ref)
        if not np.isfinite(stats["loss"]):
            for t, snap in zip(trainable, stable):
                t.data = snap
            diverged = True
            break
        clip_grad_norm(trainable, cfg.max_grad_norm)
        opt.step(warmup_lr(cfg.learning_rate, step, cfg.steps, cfg.warmup_frac))
        stable = [t.data.copy() for t in trainable]
        mean_reward = float(np.mean([r for g in groups for r in g.rewards]))
        rows.append({"step": step, "mean_reward": mean_reward, **stats})
    if log_path is not None:
        write_train_log(rows, log_path)
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path,
                        extra={"variant": cfg.variant, "diverged": diverged})
    return TrainResult(rows=rows, diverged=diverged, final_step=len(rows))


def write_train_log(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(TRAIN_LOG_HEADER)
        for row in rows:
            writer.writerow([row["step"], repr(row["mean_reward"]), repr(row["loss"]),
                             repr(row["grad_norm_reasoning"]), repr(row["grad_norm_tool"]),
                             repr(row["kl_term"])])


# -- backbone pretraining ------------------------------------------------------

@dataclass
class PretrainConfig:
    steps: int = 3000
    batch_size: int = 16
    learning_rate: float = 3e-4
    target_accuracy: float = 0.9
    eval_every: int = 100
    n_train_demos: int = 2000
    n_heldout_demos: int = 64
    align_prob: float = 0.25
    seed: int = 0


def _mle_loss(model: PolicyModel, demos) -> Tensor:
    total = None
    count = 0
    for demo in demos:
        lp = token_log_probs(model, demo.tokens, None)
        w = np.asarray(demo.sampled, dtype=lp.data.dtype)
        count += int(w.sum())
        contrib = ad.tsum(ad.mul(lp, Tensor(w)))
        total = contrib if total is None else ad.add(total, contrib)
    return ad.scale(total, -1.0 / max(count, 1))


def next_token_accuracy(model: PolicyModel, demos) -> float:
    """Argmax accuracy over the positions the policy itself would emit."""
    hits, count = 0, 0
    for demo in demos:
        inp = [model.config.bos_id] + demo.tokens[:-1]
        logits = model.forward_logits(inp, None).data
        pred = logits.argmax(axis=1)
        for t, (tok, samp) in enumerate(zip(demo.tokens, demo.sampled)):
            if samp:
                count += 1
                hits += int(pred[t] == tok)
    return hits / max(count, 1)


def pretrain_backbone(model: PolicyModel, corpus: Corpus, cfg: PretrainConfig,
                      log=None) -> dict:
    """Maximum-likelihood training on demonstration strings until the held-out
    next-token accuracy target is reached; the caller freezes afterwards."""
    rng = np.random.default_rng(cfg.seed)
    demos = [generate_demonstration(corpus, rng, cfg.align_prob)
             for _ in range(cfg.n_train_demos)]
    heldout = [generate_demonstration(corpus, rng, cfg.align_prob)
               for _ in range(cfg.n_heldout_demos)]
    opt = Adam([t for _, t in model.trainable_parameters()])
    acc = next_token_accuracy(model, heldout)
    history = [(0, acc)]
    for step in range(1, cfg.steps + 1):
        batch = [demos[int(rng.integers(len(demos)))] for _ in range(cfg.batch_size)]
        model.zero_grad()
        with Tape() as tape:
            loss = _mle_loss(model, batch)
            tape.backward(loss)
        opt.step(cfg.learning_rate)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            acc = next_token_accuracy(model, heldout)
            history.append((step, acc))
            if log is not None:
                log(f"pretrain step {step}: loss {float(loss.data):.4f} heldout acc {acc:.3f}")
            if acc >= cfg.target_accuracy:
                break
    return {"accuracy": acc, "history": history,
            "reached_target": acc >= cfg.target_accuracy}
