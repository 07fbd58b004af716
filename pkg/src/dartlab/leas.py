"""Linear effect attribution: per-question 6x6 solve in logit space.

Each of the six variants contributes one equation z = x . lambda, where z is
the logit of the variant's estimated correctness on the question and x its
capability indicator vector. The stacked system is exactly determined and
invertible, so lambda is a dense solve; lambda_23 < 0 flags interference
between tool-use and reasoning, lambda_23 > 0 synergy.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .toolenv import Corpus, Question, generate_episode
from .variants import DESIGN_ORDER, VariantHandle, design_matrix

DEFAULT_SAMPLES = 50
DEFAULT_BIN_WIDTH = 0.25
LAMBDA_NAMES = ("lambda1", "lambda2", "lambda3", "lambda12", "lambda13", "lambda23")
RESIDUAL_TOL = 1e-9


@dataclass
class CorrectnessRecord:
    question_id: str
    kind: str
    successes: int
    n_samples: int

    @property
    def s_hat(self) -> float:
        return self.successes / self.n_samples


@dataclass
class EffectCoefficients:
    question_id: str
    lam: tuple[float, ...]
    residual: float


def estimate_correctness(handle: VariantHandle, question: Question, corpus: Corpus,
                         n_samples: int = DEFAULT_SAMPLES,
                         rng: np.random.Generator | None = None,
                         temperature: float = 1.0, top_p: float = 1.0,
                         budget: int = 4) -> CorrectnessRecord:
    """Monte-Carlo correctness under stochastic decoding."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if rng is None:
        rng = np.random.default_rng(0)
    successes = 0
    for _ in range(n_samples):
        rec = generate_episode(handle.slots, question, corpus, budget=budget, rng=rng,
                               temperature=temperature, top_p=top_p)
        successes += rec.reward
    return CorrectnessRecord(question_id=question.id, kind=handle.kind,
                             successes=successes, n_samples=n_samples)


def logit(s_hat: float, n_samples: int) -> float:
    """log(s / (1-s)) with s clamped into [1/(2N), 1 - 1/(2N)] so that empirical
    0s and 1s stay finite at a scale consistent with the sample count."""
    if not 0.0 <= s_hat <= 1.0:
        raise ValueError(f"s_hat must be in [0, 1], got {s_hat}")
    half = 1.0 / (2 * n_samples)
    s = min(max(s_hat, half), 1.0 - half)
    return float(np.log(s / (1.0 - s)))


def solve_from_logits(question_id: str, z: Sequence[float]) -> EffectCoefficients:
    """Dense double-precision solve of the exactly determined 6x6 system;
    z entries follow the design-matrix row order."""
    x = design_matrix()
    assert abs(np.linalg.det(x)) > 0.5
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (6,):
        raise ValueError(f"need six logits, got shape {z.shape}")
    lam = np.linalg.solve(x, z)
    residual = float(np.abs(x @ lam - z).max())
    return EffectCoefficients(question_id=question_id,
                              lam=tuple(float(v) for v in lam), residual=residual)


def solve_effects(records: Sequence[CorrectnessRecord]) -> EffectCoefficients:
    """Logit-transform the six variants' correctness estimates and solve."""
    by_kind = {r.kind: r for r in records}
    if len(records) != 6 or set(by_kind) != set(DESIGN_ORDER):
        raise ValueError(f"need exactly the six variants {DESIGN_ORDER}, got "
                         f"{sorted(r.kind for r in records)}")
    qids = {r.question_id for r in records}
    if len(qids) != 1:
        raise ValueError(f"records span multiple questions: {sorted(qids)}")
    z = [logit(by_kind[k].s_hat, by_kind[k].n_samples) for k in DESIGN_ORDER]
    return solve_from_logits(records[0].question_id, z)


@dataclass
class HistogramBin:
    lo: float
    hi: float
    count: int
    mean_accuracy: float


@dataclass
class LeasReport:
    retained_ids: list[str]
    dropped_ids: list[str]
    bins: list[HistogramBin]
    frac_interference: float
    frac_synergy: float
    empty: bool


def aggregate(coefficients: Sequence[EffectCoefficients],
              correctness: Sequence[CorrectnessRecord],
              bin_width: float = DEFAULT_BIN_WIDTH) -> LeasReport:
    """Question filtering, the interaction histogram, and per-bin accuracy.

    Questions where every variant scored zero are dropped (their logits are
    pure clamp artifacts). Accuracy per bin averages s_hat over all six
    variants of each retained question in the bin.
    """
    if bin_width <= 0:
        raise ValueError("bin_width must be > 0")
    by_q: dict[str, list[CorrectnessRecord]] = {}
    for rec in correctness:
        by_q.setdefault(rec.question_id, []).append(rec)
    retained, dropped = [], []
    for coef in coefficients:
        records = by_q.get(coef.question_id, [])
        if any(r.successes > 0 for r in records):
            retained.append(coef)
        else:
            dropped.append(coef.question_id)
    if not retained:
        return LeasReport(retained_ids=[], dropped_ids=dropped, bins=[],
                          frac_interference=0.0, frac_synergy=0.0, empty=True)

    lam23 = np.array([c.lam[5] for c in retained])
    mean_acc = {c.question_id: float(np.mean([r.s_hat for r in by_q[c.question_id]]))
                for c in retained}
    idx = np.floor(lam23 / bin_width).astype(int)
    bins = []
    for b in range(idx.min(), idx.max() + 1):
        members = [c for c, i in zip(retained, idx) if i == b]
        if not members:
            continue
        bins.append(HistogramBin(
            lo=b * bin_width, hi=(b + 1) * bin_width, count=len(members),
            mean_accuracy=float(np.mean([mean_acc[c.question_id] for c in members]))))
    return LeasReport(
        retained_ids=[c.question_id for c in retained], dropped_ids=dropped,
        bins=bins,
        frac_interference=float(np.mean(lam23 < 0)),
        frac_synergy=float(np.mean(lam23 > 0)),
        empty=False)


# -- pipeline + artifacts -------------------------------------------------------

def run_leas(handles: dict[str, VariantHandle], questions: Sequence[Question],
             corpus: Corpus, n_samples: int, rng: np.random.Generator,
             bin_width: float = DEFAULT_BIN_WIDTH, temperature: float = 1.0,
             budget: int = 4, log=None):
    usable = {k: handles[k] for k in DESIGN_ORDER}
    failed = [k for k, h in usable.items() if h.failed]
    if failed:
        raise ValueError(f"cannot run attribution with failed variants: {failed}")
    correctness: list[CorrectnessRecord] = []
    coefficients: list[EffectCoefficients] = []
    for question in questions:
        per_q = [estimate_correctness(usable[k], question, corpus, n_samples, rng,
                                      temperature=temperature, budget=budget)
                 for k in DESIGN_ORDER]
        correctness.extend(per_q)
        coefficients.append(solve_effects(per_q))
        if log is not None:
            log(f"question {question.id}: lambda23 = {coefficients[-1].lam[5]:+.3f}")
    report = aggregate(coefficients, correctness, bin_width)
    return correctness, coefficients, report


def write_coefficients_csv(coefficients: Sequence[EffectCoefficients], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["question_id", *LAMBDA_NAMES, "residual"])
        for c in sorted(coefficients, key=lambda c: c.question_id):
            writer.writerow([c.question_id, *[repr(v) for v in c.lam], repr(c.residual)])


def write_histogram_csv(report: LeasReport, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_lo", "bin_hi", "count", "mean_accuracy"])
        for b in report.bins:
            writer.writerow([repr(b.lo), repr(b.hi), b.count, repr(b.mean_accuracy)])
