from __future__ import annotations

from types import SimpleNamespace

import numpy as np
import pytest

from dartlab.leas import (
    CorrectnessRecord, EffectCoefficients, aggregate, estimate_correctness,
    logit, run_leas, solve_effects, solve_from_logits, write_coefficients_csv,
    write_histogram_csv,
)
from dartlab.router import ROLE_REASONING, ROLE_TOOL
from dartlab.toolenv import build_corpus
from dartlab.variants import CAPABILITY_VECTORS, DESIGN_ORDER, VariantHandle, design_matrix

CORPUS = build_corpus(seed=33, n_keys=10, n_bridge=5)
G = CORPUS.grammar


def test_logit_examples():
    assert logit(0.5, 50) == 0.0
    assert np.isclose(logit(1.0, 50), np.log(99.0), atol=1e-12)  # clamp to 0.99
    assert np.isclose(logit(1.0, 50), 4.5951, atol=1e-4)
    assert np.isclose(logit(0.25, 50), np.log(1.0 / 3.0), atol=1e-12)
    assert np.isclose(logit(0.0, 50), -np.log(99.0), atol=1e-12)
    with pytest.raises(ValueError):
        logit(1.2, 50)


def test_logit_monotone_within_clamp():
    values = [logit(s, 50) for s in np.linspace(0.02, 0.98, 30)]
    assert all(b > a for a, b in zip(values, values[1:]))


def test_solver_roundtrip_and_contrast():
    x = design_matrix()
    rng = np.random.default_rng(0)
    for _ in range(200):
        lam = rng.normal(0, 2, size=6)
        z = x @ lam
        got = solve_from_logits("q", z)
        assert np.abs(np.array(got.lam) - lam).max() < 1e-9
        assert got.residual <= 1e-9
        # closed-form identities from eliminating the triangular system
        z_by = dict(zip(DESIGN_ORDER, z))
        assert np.isclose(got.lam[0], z_by["base"], atol=1e-9)
        assert np.isclose(got.lam[1], z_by["h_tool"] - z_by["base"], atol=1e-9)
        assert np.isclose(got.lam[2], z_by["h_reas"] - z_by["base"], atol=1e-9)
        assert np.isclose(got.lam[3], z_by["m_tool"] - z_by["h_tool"], atol=1e-9)
        assert np.isclose(got.lam[4], z_by["m_reas"] - z_by["h_reas"], atol=1e-9)
        assert np.isclose(got.lam[5], z_by["m_unified"] - z_by["m_tool"]
                          - z_by["m_reas"] + z_by["base"], atol=1e-9)


def test_constant_logits_load_base_only():
    got = solve_from_logits("q", np.full(6, 1.7))
    assert np.allclose(got.lam, [1.7, 0, 0, 0, 0, 0], atol=1e-12)


def test_solve_effects_validates_inputs():
    records = [CorrectnessRecord("q1", k, successes=25, n_samples=50)
               for k in DESIGN_ORDER]
    got = solve_effects(records)
    assert np.allclose(got.lam, np.zeros(6), atol=1e-12)  # all s_hat = 0.5
    with pytest.raises(ValueError):
        solve_effects(records[:5])
    bad = [CorrectnessRecord("q2" if k == "base" else "q1", k, 25, 50)
           for k in DESIGN_ORDER]
    with pytest.raises(ValueError):
        solve_effects(bad)
    dupes = [CorrectnessRecord("q1", "base", 25, 50) for _ in range(6)]
    with pytest.raises(ValueError):
        solve_effects(dupes)


class FixedRewardSession:
    """Answers immediately; correct with a configured set of candidates."""

    def __init__(self, candidates):
        self.candidates = candidates
        self.stage = 0

    def append(self, token, label):
        logits = np.zeros(CORPUS.vocab_size)
        if token == G.answer:
            self.stage = 1
        elif self.stage == 1 and label != "env":
            self.stage = 2
        if self.stage == 0:
            logits[G.answer] = 1000.0
        elif self.stage == 1:
            for c in self.candidates:
                logits[c] = 1000.0
        else:
            logits[G.answer_end] = 1000.0
        return logits


class FixedRewardModel:
    def __init__(self, candidates):
        self.candidates = candidates
        self.config = SimpleNamespace(max_seq=32)

    def decode_session(self, mode):
        return FixedRewardSession(self.candidates)


def handle_for(candidates):
    m = FixedRewardModel(candidates)
    return VariantHandle(kind="base", capability=CAPABILITY_VECTORS["base"],
                         slots={ROLE_REASONING: (m, "none"), ROLE_TOOL: (m, "none")})


def test_estimate_correctness_always_correct_policy():
    q = CORPUS.questions[0]
    rec = estimate_correctness(handle_for([q.gold_answer[0]]), q, CORPUS,
                               n_samples=50, rng=np.random.default_rng(1))
    assert rec.s_hat == 1.0 and rec.successes == 50


def test_estimate_correctness_uniform_over_four_candidates():
    q = CORPUS.questions[0]
    wrong = [v for v in CORPUS.value_ids if [v] != q.gold_answer][:3]
    candidates = [q.gold_answer[0]] + wrong
    n = 400
    rec = estimate_correctness(handle_for(candidates), q, CORPUS, n_samples=n,
                               rng=np.random.default_rng(2))
    # binomial oracle: p = 1/4, three-sigma band
    sigma = np.sqrt(0.25 * 0.75 / n)
    assert abs(rec.s_hat - 0.25) < 3.5 * sigma
    assert rec.successes == round(rec.s_hat * n)


def make_coef(qid, lam23):
    lam = (0.1, 0.0, 0.0, 0.0, 0.0, lam23)
    return EffectCoefficients(question_id=qid, lam=lam, residual=0.0)


def make_records(qid, successes=10):
    return [CorrectnessRecord(qid, k, successes, 50) for k in DESIGN_ORDER]


def test_aggregate_single_bin_interference():
    coeffs = [make_coef(f"q{i}", -1.0) for i in range(5)]
    correctness = [r for i in range(5) for r in make_records(f"q{i}")]
    report = aggregate(coeffs, correctness, bin_width=0.25)
    assert not report.empty
    assert report.frac_interference == 1.0 and report.frac_synergy == 0.0
    assert len(report.bins) == 1
    b = report.bins[0]
    assert b.lo == -1.0 and b.hi == -0.75 and b.count == 5
    assert np.isclose(b.mean_accuracy, 0.2)


def test_aggregate_filters_all_zero_questions():
    coeffs = [make_coef("alive", -0.4), make_coef("dead", 0.4)]
    correctness = make_records("alive", successes=5) + make_records("dead", successes=0)
    report = aggregate(coeffs, correctness)
    assert report.retained_ids == ["alive"]
    assert report.dropped_ids == ["dead"]
    assert report.frac_interference == 1.0


def test_aggregate_known_mixture_fraction():
    coeffs = [make_coef(f"n{i}", -0.5 - 0.01 * i) for i in range(7)]
    coeffs += [make_coef(f"p{i}", 0.5 + 0.01 * i) for i in range(3)]
    correctness = [r for c in coeffs for r in make_records(c.question_id)]
    report = aggregate(coeffs, correctness)
    assert report.frac_interference == 0.7
    assert report.frac_synergy == 0.3


def test_aggregate_empty_report_marker():
    coeffs = [make_coef("dead", -1.0)]
    correctness = make_records("dead", successes=0)
    report = aggregate(coeffs, correctness)
    assert report.empty and report.bins == []


def test_csv_writers(tmp_path):
    coeffs = [make_coef("q1", -0.3), make_coef("q0", 0.2)]
    correctness = [r for c in coeffs for r in make_records(c.question_id)]
    report = aggregate(coeffs, correctness)
    cpath = tmp_path / "leas_coefficients.csv"
    hpath = tmp_path / "leas_histogram.csv"
    write_coefficients_csv(coeffs, cpath)
    write_histogram_csv(report, hpath)
    clines = cpath.read_text().splitlines()
    assert clines[0] == ("question_id,lambda1,lambda2,lambda3,"
                         "lambda12,lambda13,lambda23,residual")
    assert clines[1].startswith("q0,") and clines[2].startswith("q1,")
    hlines = hpath.read_text().splitlines()
    assert hlines[0] == "bin_lo,bin_hi,count,mean_accuracy"
    assert len(hlines) == 1 + len(report.bins)


def test_run_leas_pipeline_smoke():
    q = CORPUS.questions_for("eval")[:2]
    handles = {}
    for k in DESIGN_ORDER:
        gold_or_not = [q[0].gold_answer[0]] if k != "base" else [CORPUS.value_ids[0]]
        handles[k] = VariantHandle(kind=k, capability=CAPABILITY_VECTORS[k],
                                   slots=handle_for(gold_or_not).slots)
    correctness, coefficients, report = run_leas(
        handles, q, CORPUS, n_samples=4, rng=np.random.default_rng(3))
    assert len(correctness) == 12 and len(coefficients) == 2
    assert all(c.residual <= 1e-9 for c in coefficients)
