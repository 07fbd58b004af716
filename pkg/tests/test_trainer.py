from __future__ import annotations

import numpy as np
import pytest

from dartlab import trainer as tr
from dartlab.policy import PolicyConfig, PolicyModel, load_checkpoint, with_adapters
from dartlab.router import ROLE_ENV, ROLE_REASONING, ROLE_TOOL
from dartlab.toolenv import EpisodeRecord, build_corpus
from dartlab.trainer import (
    PretrainConfig, RolloutGroup, TrainConfig, accumulate_gradients,
    group_advantage, masked_pg_loss, pretrain_backbone, train, warmup_lr,
)

CORPUS = build_corpus(seed=7, n_keys=10, n_bridge=5)


def make_model(variant="dart", dtype="float64", seed=1, dim=16):
    ranks = {"reasoning": 4, "tool": 4} if variant == "dart" else {"unified": 8}
    cfg = PolicyConfig(vocab_size=CORPUS.vocab_size, dim=dim, layers=2, heads=2,
                       max_seq=48, adapter_ranks=ranks, dtype=dtype)
    model = PolicyModel(cfg, seed=seed)
    model.freeze_backbone()
    rng = np.random.default_rng(seed + 50)
    for aset in model.adapters.values():
        for b, a in aset.layers.values():
            b.data += rng.normal(0, 0.05, size=b.data.shape).astype(b.data.dtype)
            a.data += rng.normal(0, 0.05, size=a.data.shape).astype(a.data.dtype)
    return model


def make_record(rng, n=10, qid="q0", roles_pool=(ROLE_REASONING, ROLE_TOOL, ROLE_ENV)):
    tokens = [int(t) for t in rng.integers(1, CORPUS.vocab_size, size=n)]
    roles = [roles_pool[int(rng.integers(len(roles_pool)))] for _ in range(n)]
    sampled = [bool(rng.random() < 0.8) for _ in range(n)]
    sampled[0] = False
    return EpisodeRecord(question_id=qid, gold_answer=[1], tokens=tokens, roles=roles,
                         sampled=sampled, tool_calls=[], answer=None, reward=0,
                         prompt_len=1)


def make_group(rng, n_records=4, qid="q0"):
    records = [make_record(rng, qid=qid) for _ in range(n_records)]
    rewards = [float(rng.integers(0, 2)) for _ in range(n_records)]
    return RolloutGroup(qid, records, rewards)


def adapter_grads(model):
    return {name: t.grad.copy() for name, t in model.named_parameters()
            if name.startswith("adapter.") and t.grad is not None}


def test_group_advantage_examples():
    assert np.array_equal(group_advantage([1, 1, 1, 1]), np.zeros(4))
    adv = group_advantage([1.0, 0.0])
    expected = 0.5 / (0.5 + 1e-8)
    assert np.allclose(adv, [expected, -expected], atol=1e-15)
    assert np.array_equal(group_advantage([0.7]), np.zeros(1))


def test_paper_defaults_stored():
    cfg = TrainConfig()
    assert cfg.kl_beta == 0.001
    assert cfg.clip_ratio == 0.2  # inert: a single update per batch keeps the ratio at 1


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(kl_beta=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(clip_ratio=1.5)
    with pytest.raises(ValueError):
        TrainConfig(variant="everything")


def test_all_zero_mask_gives_zero_loss_and_grads():
    model = make_model("unified")
    rng = np.random.default_rng(0)
    records = [make_record(rng, roles_pool=(ROLE_TOOL,)) for _ in range(3)]
    group = RolloutGroup("q0", records, [1.0, 0.0, 1.0])
    model.zero_grad()
    from dartlab.autodiff import Tape
    with Tape() as tape:
        loss = masked_pg_loss(model, group, "reas")  # no reasoning tokens anywhere
        tape.backward(loss)
    assert float(loss.data) == 0.0
    assert all(not g.any() for g in adapter_grads(model).values())


def test_unified_grad_is_sum_of_reas_and_tool_grads():
    rng = np.random.default_rng(1)
    group = make_group(rng)

    def grads_for(mask_variant):
        model = make_model("unified", dtype="float64")
        cfg = TrainConfig(variant=mask_variant, kl_beta=0.0)
        stats = accumulate_gradients(model, [group], cfg, ref=None)
        return adapter_grads(model), stats

    g_uni, _ = grads_for("unified")
    g_reas, _ = grads_for("reas")
    g_tool, _ = grads_for("tool")
    for name in g_uni:
        assert np.allclose(g_uni[name], g_reas[name] + g_tool[name], atol=1e-12)


def test_kl_penalty_vanishes_when_policy_equals_ref():
    # Zeroed adapters make the current policy exactly the backbone = reference.
    model = make_model("unified", dtype="float64")
    for aset in model.adapters.values():
        for b, a in aset.layers.values():
            b.data[...] = 0.0
    rng = np.random.default_rng(2)
    group = make_group(rng)
    cfg_kl = TrainConfig(variant="unified", kl_beta=0.001)
    cfg_nokl = TrainConfig(variant="unified", kl_beta=0.0)
    stats_kl = accumulate_gradients(model, [group], cfg_kl, ref=(model, "none"))
    g_kl = adapter_grads(model)
    stats_nokl = accumulate_gradients(model, [group], cfg_nokl, ref=None)
    g_nokl = adapter_grads(model)
    assert stats_kl["kl_term"] == 0.0
    for name in g_kl:
        assert np.array_equal(g_kl[name], g_nokl[name])


def test_dart_isolation_reasoning_batch_leaves_tool_untouched():
    model = make_model("dart", dtype="float32")
    rng = np.random.default_rng(3)
    records = [make_record(rng, roles_pool=(ROLE_REASONING,)) for _ in range(4)]
    group = RolloutGroup("q0", records, [1.0, 0.0, 0.0, 1.0])
    cfg = TrainConfig(variant="dart", kl_beta=0.0)
    before_tool = [t.data.copy() for t in model.adapters["tool"].tensors()]
    before_backbone = [t.data.copy() for t in model.backbone.values()]
    before_reas = [t.data.copy() for t in model.adapters["reasoning"].tensors()]
    accumulate_gradients(model, [group], cfg, ref=None)
    for t in model.adapters["tool"].tensors():
        assert t.grad is None or np.all(t.grad == 0.0)
    assert any(t.grad.any() for t in model.adapters["reasoning"].tensors())
    opt = tr.SGDMomentum([t for _, t in model.trainable_parameters()])
    opt.step(1e-2)
    for t, snap in zip(model.adapters["tool"].tensors(), before_tool):
        assert np.array_equal(t.data, snap)
    for t, snap in zip(model.backbone.values(), before_backbone):
        assert np.array_equal(t.data, snap)
    assert any(not np.array_equal(t.data, snap)
               for t, snap in zip(model.adapters["reasoning"].tensors(), before_reas))


def test_dart_symmetric_isolation_tool_batch():
    model = make_model("dart", dtype="float32")
    rng = np.random.default_rng(4)
    records = [make_record(rng, roles_pool=(ROLE_TOOL,)) for _ in range(4)]
    group = RolloutGroup("q0", records, [1.0, 0.0, 0.0, 1.0])
    accumulate_gradients(model, [group], TrainConfig(variant="dart", kl_beta=0.0), ref=None)
    for t in model.adapters["reasoning"].tensors():
        assert t.grad is None or np.all(t.grad == 0.0)
    assert any(t.grad.any() for t in model.adapters["tool"].tensors())


def test_scoped_backward_sum_equals_combined_backward():
    # Gradient accumulation across separate backward passes is exactly additive,
    # which is what makes microbatching equivalent to full batches.
    rng = np.random.default_rng(5)
    g1 = make_group(rng, qid="q0")
    g2 = make_group(rng, qid="q1")
    model = make_model("unified", dtype="float64")
    cfg = TrainConfig(variant="unified", kl_beta=0.0)
    accumulate_gradients(model, [g1, g2], cfg, ref=None)
    combined = adapter_grads(model)

    model2 = make_model("unified", dtype="float64")
    from dartlab.autodiff import Tape
    model2.zero_grad()
    for group in (g1, g2):
        with Tape() as tape:
            loss = masked_pg_loss(model2, group, "unified")
            tape.backward(loss)
    split = adapter_grads(model2)
    for name in combined:
        assert np.allclose(2 * combined[name], split[name], atol=1e-12)


def test_loss_weights_length_mismatch():
    rng = np.random.default_rng(6)
    rec = make_record(rng)
    rec.roles = rec.roles[:-1]
    with pytest.raises(ValueError):
        tr.loss_weights(rec, "unified", 1.0, 0.0, None)


def test_warmup_schedule():
    lr = 3e-3
    steps = 200
    assert warmup_lr(lr, 1, steps) == lr * (1 / 20)
    assert warmup_lr(lr, 10, steps) == lr * (10 / 20)
    assert warmup_lr(lr, 20, steps) == lr
    assert warmup_lr(lr, 150, steps) == lr


def test_zero_learning_rate_keeps_parameters_bit_identical():
    model = make_model("dart", dtype="float32")
    snap = {n: t.data.copy() for n, t in model.named_parameters()}
    cfg = TrainConfig(steps=2, rollout_batch=1, group_size=2, learning_rate=0.0,
                      variant="dart", seed=3)
    train(model, CORPUS, cfg)
    for n, t in model.named_parameters():
        assert np.array_equal(t.data, snap[n]), n


def test_train_writes_log_and_checkpoint(tmp_path):
    model = make_model("dart", dtype="float32")
    cfg = TrainConfig(steps=2, rollout_batch=1, group_size=2, learning_rate=1e-3,
                      variant="dart", seed=3)
    log_path = tmp_path / "train_log.csv"
    ckpt_path = tmp_path / "model.npz"
    result = train(model, CORPUS, cfg, log_path=log_path, checkpoint_path=ckpt_path)
    assert result.final_step == 2 and not result.diverged
    text = log_path.read_text().splitlines()
    assert text[0] == "step,mean_reward,loss,grad_norm_reasoning,grad_norm_tool,kl_term"
    assert len(text) == 3
    loaded, extra = load_checkpoint(ckpt_path)
    assert extra["variant"] == "dart"
    for (n1, t1), (_, t2) in zip(model.named_parameters(), loaded.named_parameters()):
        assert np.array_equal(t1.data, t2.data), n1


def test_train_is_deterministic():
    def run():
        model = make_model("dart", dtype="float32")
        cfg = TrainConfig(steps=2, rollout_batch=1, group_size=2, learning_rate=1e-3,
                          variant="dart", seed=11)
        result = train(model, CORPUS, cfg)
        return result.rows, {n: t.data.copy() for n, t in model.named_parameters()}

    rows_a, params_a = run()
    rows_b, params_b = run()
    assert rows_a == rows_b
    for n in params_a:
        assert np.array_equal(params_a[n], params_b[n])


def test_divergence_aborts_and_restores_last_stable(monkeypatch):
    model = make_model("dart", dtype="float32")
    real = tr.accumulate_gradients
    calls = {"n": 0, "snapshot": None}

    def wrapper(m, groups, cfg, ref):
        calls["n"] += 1
        if calls["n"] == 2:
            calls["snapshot"] = {n: t.data.copy() for n, t in m.named_parameters()}
            return {"loss": float("nan"), "grad_norm_reasoning": 0.0,
                    "grad_norm_tool": 0.0, "kl_term": 0.0}
        return real(m, groups, cfg, ref)

    monkeypatch.setattr(tr, "accumulate_gradients", wrapper)
    cfg = TrainConfig(steps=5, rollout_batch=1, group_size=2, learning_rate=1e-3,
                      variant="dart", seed=3)
    result = train(model, CORPUS, cfg)
    assert result.diverged and result.final_step == 1
    for n, t in model.named_parameters():
        assert np.array_equal(t.data, calls["snapshot"][n]), n


def test_frozen_backbone_required():
    cfg = PolicyConfig(vocab_size=CORPUS.vocab_size, dim=16, layers=1, heads=2,
                       max_seq=32, adapter_ranks={"unified": 4})
    model = PolicyModel(cfg, seed=0)
    with pytest.raises(ValueError):
        train(model, CORPUS, TrainConfig(steps=1, variant="unified"))


def test_pretrain_improves_next_token_accuracy():
    cfg = PolicyConfig(vocab_size=CORPUS.vocab_size, dim=32, layers=2, heads=2,
                       max_seq=64, dtype="float32")
    model = PolicyModel(cfg, seed=0)
    pcfg = PretrainConfig(steps=120, batch_size=8, learning_rate=1e-3,
                          target_accuracy=0.55, eval_every=40,
                          n_train_demos=200, n_heldout_demos=16, seed=0)
    report = pretrain_backbone(model, CORPUS, pcfg)
    start = report["history"][0][1]
    assert report["accuracy"] > start
    assert report["accuracy"] >= 0.5


def test_with_adapters_shares_backbone_values():
    base = make_model("unified")
    derived = with_adapters(base, {"reasoning": 4, "tool": 4}, seed=9)
    assert set(derived.adapters) == {"reasoning", "tool"}
    assert derived.frozen
    for name, t in base.backbone.items():
        assert np.array_equal(t.data, derived.backbone[name].data)
