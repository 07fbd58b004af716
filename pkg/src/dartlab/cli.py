"""Batch experiment CLI: pipeline subcommands, config files, reports.

Every subcommand is headless and reproducible: all randomness derives from the
config seed, and artifacts (CSV / JSONL / JSON / Markdown) are written with
deterministic formatting so identical configs produce byte-identical outputs.

Artifacts inside a run directory:
    corpus.json                 the generated fact corpus and question set
    base.npz                    pretrained frozen backbone
    variants.json, <kind>.npz   variant registry and checkpoints
    train_log_<variant>.csv     per-step training log
    episodes_<variant>.jsonl    recorded evaluation episodes
    eval_<variant>.json         held-out exact-match summaries
    leas_coefficients.csv       per-question effect coefficients
    leas_histogram.csv          interaction-coefficient histogram
    gradient_angles.csv         role-gradient angle pairs
    efficiency.csv              memory/latency model outputs
    report.md                   collated Markdown summary
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .gradconflict import conflict_report, write_angles_csv
from .leas import run_leas, write_coefficients_csv, write_histogram_csv
from .policy import PolicyConfig, PolicyModel, load_checkpoint, save_checkpoint, with_adapters
from .toolenv import (build_corpus, load_corpus, load_records, mean_em,
                      replay_eval, save_corpus, save_records, generate_episode)
from .trainer import PretrainConfig, TrainConfig, pretrain_backbone, train
from .variants import (DESIGN_ORDER, KIND_DART, build_variants, dart_single_ability,
                       load_variant_registry, save_variant_registry)

OUT_ENV_VAR = "DARTLAB_OUT"
TRAINABLE_VARIANTS = ("dart", "m_reas", "m_tool", "m_unified")


class ConfigError(ValueError):
    pass


@dataclass
class CorpusSpec:
    n_keys: int = 40
    n_bridge: int = 20
    n_values: int = 12
    train_frac: float = 0.7


@dataclass
class PolicySpec:
    dim: int = 64
    layers: int = 2
    heads: int = 2
    max_seq: int = 128
    dtype: str = "float32"


@dataclass
class PretrainSpec:
    steps: int = 3000
    batch_size: int = 16
    learning_rate: float = 3e-4
    target_accuracy: float = 0.9
    eval_every: int = 100
    n_train_demos: int = 2000
    n_heldout_demos: int = 64
    align_prob: float = 0.25


@dataclass
class TrainSpec:
    steps: int = 200
    rollout_batch: int = 8
    group_size: int = 8
    learning_rate: float = 3e-3
    kl_beta: float = 0.001
    clip_ratio: float = 0.2
    temperature: float = 1.0
    top_p: float = 1.0
    budget: int = 4
    train_hops: int | None = None
    variant_rank: int = 16
    dart_rank: int = 8


@dataclass
class LeasSpec:
    n_samples: int = 50
    bin_width: float = 0.25
    max_questions: int | None = None


@dataclass
class GradAngleSpec:
    n_rollouts: int = 16
    n_questions: int = 4


@dataclass
class EvalSpec:
    samples_per_question: int = 16
    hops: int | None = None


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str | None = None
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    policy: PolicySpec = field(default_factory=PolicySpec)
    pretrain: PretrainSpec = field(default_factory=PretrainSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    leas: LeasSpec = field(default_factory=LeasSpec)
    gradangle: GradAngleSpec = field(default_factory=GradAngleSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)


_SECTIONS = {f.name: f.type for f in fields(ExperimentConfig)
             if f.name not in ("seed", "out_dir")}
_SECTION_TYPES = {"corpus": CorpusSpec, "policy": PolicySpec, "pretrain": PretrainSpec,
                  "train": TrainSpec, "leas": LeasSpec, "gradangle": GradAngleSpec,
                  "eval": EvalSpec}


def _build_section(name: str, cls, data: dict):
    allowed = {f.name for f in fields(cls)}
    out = cls()
    for key, value in data.items():
        if key not in allowed:
            raise ConfigError(f"unknown key '{name}.{key}' (allowed: {sorted(allowed)})")
        setattr(out, key, value)
    return out


def load_config(path: str | None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is None:
        return cfg
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from e
    except OSError as e:
        raise ConfigError(f"{path}: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    for key, value in doc.items():
        if key == "seed":
            cfg.seed = int(value)
        elif key == "out_dir":
            cfg.out_dir = str(value)
        elif key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: '{key}' must be an object")
            setattr(cfg, key, _build_section(key, _SECTION_TYPES[key], value))
        else:
            raise ConfigError(f"{path}: unknown key '{key}' "
                              f"(allowed: seed, out_dir, {', '.join(_SECTION_TYPES)})")
    return cfg


def resolve_out_dir(cfg: ExperimentConfig, override: str | None) -> Path:
    if override:
        out = Path(override)
    elif cfg.out_dir:
        out = Path(cfg.out_dir)
    else:
        out = Path(os.environ.get(OUT_ENV_VAR, "runs")) / "default"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise ConfigError(f"missing {path.name} in {path.parent} (run `{hint}` first)")
    return path


def _train_config(spec: TrainSpec, variant: str, seed: int) -> TrainConfig:
    return TrainConfig(steps=spec.steps, rollout_batch=spec.rollout_batch,
                       group_size=spec.group_size, learning_rate=spec.learning_rate,
                       kl_beta=spec.kl_beta, clip_ratio=spec.clip_ratio,
                       temperature=spec.temperature, top_p=spec.top_p,
                       variant=variant, seed=seed, budget=spec.budget,
                       train_hops=spec.train_hops)


def _mask_variant(kind: str) -> str:
    return {"dart": "dart", "m_reas": "reas", "m_tool": "tool",
            "m_unified": "unified"}[kind]


# -- efficiency model -----------------------------------------------------------

@dataclass
class EfficiencyInputs:
    backbone_params: float
    adapter_params: float = 0.0
    context_lengths: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.backbone_params <= 0:
            raise ValueError("backbone parameter count must be > 0")
        if self.adapter_params < 0:
            raise ValueError("adapter parameter count must be >= 0")


def efficiency_model(inputs: EfficiencyInputs) -> dict[str, float | bool]:
    """Static training-memory and context-switch latency estimates.

    Unit convention: 4 units per trainable parameter per model (weights, grads,
    two optimizer moments), so two trainable backbones cost 8P while a frozen
    backbone with trainable adapters costs P + 8p. A byte-level accounting
    (BF16 weights/grads + FP32 moments = 12 bytes per trainable parameter) is
    reported alongside since the two conventions disagree. Context switching:
    a two-model handoff re-encodes the whole history (sum of L^2); a shared
    backbone reuses its cache (0).
    """
    p_big = float(inputs.backbone_params)
    p_small = float(inputs.adapter_params)
    cost_2agent = 8.0 * p_big
    cost_dart = p_big + 8.0 * p_small
    bytes_2agent = 2 * 12.0 * p_big
    bytes_dart = 2.0 * p_big + 12.0 * p_small
    reencode = float(sum(l * l for l in inputs.context_lengths))
    return {
        "cost_2agent_units": cost_2agent,
        "cost_dart_units": cost_dart,
        "memory_ratio_units": cost_2agent / cost_dart,
        "cost_2agent_bytes": bytes_2agent,
        "cost_dart_bytes": bytes_dart,
        "memory_ratio_bytes": bytes_2agent / bytes_dart,
        "reencode_tokens_sq_2agent": reencode,
        "reencode_tokens_sq_dart": 0.0,
        "small_adapter_regime": p_small <= 0.005 * p_big,
    }


def write_efficiency_csv(result: dict, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "value"])
        for key, value in result.items():
            writer.writerow([key, repr(value) if isinstance(value, float) else value])


# -- subcommands ------------------------------------------------------------------

def cmd_pretrain(cfg: ExperimentConfig, out: Path, log) -> int:
    corpus = build_corpus(cfg.seed, cfg.corpus.n_keys, cfg.corpus.n_bridge,
                          cfg.corpus.n_values, cfg.corpus.train_frac)
    save_corpus(corpus, out / "corpus.json")
    pcfg = PolicyConfig(vocab_size=corpus.vocab_size, dim=cfg.policy.dim,
                        layers=cfg.policy.layers, heads=cfg.policy.heads,
                        max_seq=cfg.policy.max_seq, dtype=cfg.policy.dtype)
    model = PolicyModel(pcfg, seed=cfg.seed)
    spec = cfg.pretrain
    report = pretrain_backbone(model, corpus, PretrainConfig(
        steps=spec.steps, batch_size=spec.batch_size, learning_rate=spec.learning_rate,
        target_accuracy=spec.target_accuracy, eval_every=spec.eval_every,
        n_train_demos=spec.n_train_demos, n_heldout_demos=spec.n_heldout_demos,
        align_prob=spec.align_prob, seed=cfg.seed + 1), log=log)
    if not report["reached_target"]:
        log(f"error: pretraining stopped at accuracy {report['accuracy']:.3f} "
            f"< target {spec.target_accuracy}")
        return 1
    model.freeze_backbone()
    save_checkpoint(model, out / "base.npz",
                    extra={"grammar": corpus.grammar.to_dict(),
                           "pretrain": {"accuracy": report["accuracy"],
                                        "align_prob": spec.align_prob}})
    log(f"base checkpoint written: heldout accuracy {report['accuracy']:.3f}")
    return 0


def _load_base(cfg: ExperimentConfig, out: Path):
    corpus = load_corpus(_require(out / "corpus.json", "dartlab pretrain"))
    base, _ = load_checkpoint(_require(out / "base.npz", "dartlab pretrain"))
    return corpus, base


def _adapted_for_variant(base: PolicyModel, kind: str, spec: TrainSpec,
                         seed: int) -> PolicyModel:
    if kind == "dart":
        ranks = {"reasoning": spec.dart_rank, "tool": spec.dart_rank}
    else:
        ranks = {"unified": spec.variant_rank}
    return with_adapters(base, ranks, seed=seed)


def cmd_train(cfg: ExperimentConfig, out: Path, log, kind: str) -> int:
    if kind not in TRAINABLE_VARIANTS:
        raise ConfigError(f"--variant must be one of {TRAINABLE_VARIANTS}, got {kind!r}")
    corpus, base = _load_base(cfg, out)
    model = _adapted_for_variant(base, kind, cfg.train, cfg.seed + 2)
    tcfg = _train_config(cfg.train, _mask_variant(kind), cfg.seed + 3)
    result = train(model, corpus, tcfg,
                   log_path=out / f"train_log_{kind}.csv",
                   checkpoint_path=out / f"{kind}.npz")
    if result.rows:
        log(f"{kind}: {result.final_step} steps, final mean reward "
            f"{result.rows[-1]['mean_reward']:.3f}")
    if result.diverged:
        log(f"warning: {kind} diverged; last stable checkpoint retained")
    return 0


def cmd_variants(cfg: ExperimentConfig, out: Path, log) -> int:
    corpus, base = _load_base(cfg, out)
    tcfg = _train_config(cfg.train, "unified", cfg.seed + 3)
    handles, results = build_variants(base, corpus, tcfg,
                                      variant_rank=cfg.train.variant_rank,
                                      dart_rank=cfg.train.dart_rank, log=log)
    save_variant_registry(handles, out, grammar=corpus.grammar.to_dict())
    from .trainer import write_train_log
    for kind, result in results.items():
        write_train_log(result.rows, out / f"train_log_{kind}.csv")
        status = "diverged" if result.diverged else "ok"
        log(f"{kind}: {result.final_step} steps ({status})")
    return 0


def _eval_questions(corpus, hops):
    return corpus.questions_for("eval", hops)


def cmd_leas(cfg: ExperimentConfig, out: Path, log) -> int:
    corpus = load_corpus(_require(out / "corpus.json", "dartlab pretrain"))
    handles = load_variant_registry(_require(out / "variants.json", "dartlab variants"))
    questions = _eval_questions(corpus, None)
    if cfg.leas.max_questions is not None:
        questions = questions[:cfg.leas.max_questions]
    rng = np.random.default_rng(cfg.seed + 4)
    correctness, coefficients, report = run_leas(
        handles, questions, corpus, cfg.leas.n_samples, rng,
        bin_width=cfg.leas.bin_width, budget=cfg.train.budget, log=log)
    write_coefficients_csv(coefficients, out / "leas_coefficients.csv")
    write_histogram_csv(report, out / "leas_histogram.csv")
    summary = {"retained": len(report.retained_ids), "dropped": len(report.dropped_ids),
               "frac_interference": report.frac_interference,
               "frac_synergy": report.frac_synergy, "empty": report.empty,
               "n_samples": cfg.leas.n_samples}
    with open(out / "leas_summary.json", "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
    log(f"interference fraction {report.frac_interference:.2f}, "
        f"synergy {report.frac_synergy:.2f} over {len(report.retained_ids)} questions")
    return 0


def cmd_gradangle(cfg: ExperimentConfig, out: Path, log, kind: str) -> int:
    corpus = load_corpus(_require(out / "corpus.json", "dartlab pretrain"))
    handles = load_variant_registry(_require(out / "variants.json", "dartlab variants"))
    if kind not in handles:
        raise ConfigError(f"variant {kind!r} not in registry ({sorted(handles)})")
    handle = handles[kind]
    if handle.is_hybrid:
        raise ConfigError("gradient analysis needs a single-model variant")
    model, mode = handle.slots["reasoning"]
    report = conflict_report(model, corpus, n_rollouts=cfg.gradangle.n_rollouts,
                             rng=np.random.default_rng(cfg.seed + 5),
                             adapter_mode=mode, n_questions=cfg.gradangle.n_questions,
                             temperature=cfg.train.temperature, budget=cfg.train.budget)
    write_angles_csv(report, out / "gradient_angles.csv")
    s = report.summary()
    log(f"cross-role mean angle {s['cross_role_mean_angle']:.3f} rad over "
        f"{len(report.rows)} pairs ({report.skipped_pairs} skipped)")
    return 0


def cmd_eval(cfg: ExperimentConfig, out: Path, log, kind: str, ability: str | None,
             save_episodes: bool) -> int:
    corpus = load_corpus(_require(out / "corpus.json", "dartlab pretrain"))
    handles = load_variant_registry(_require(out / "variants.json", "dartlab variants"))
    if kind not in handles:
        raise ConfigError(f"variant {kind!r} not in registry ({sorted(handles)})")
    handle = handles[kind]
    questions = _eval_questions(corpus, cfg.eval.hops)
    rng = np.random.default_rng(cfg.seed + 6)
    result: dict = {"variant": kind, "n_questions": len(questions),
                    "samples_per_question": cfg.eval.samples_per_question}
    if ability is not None:
        if kind != KIND_DART:
            raise ConfigError("--ability applies to the dart variant only")
        model, _ = handle.slots["reasoning"]
        em = dart_single_ability(model, ability, questions, corpus,
                                 cfg.eval.samples_per_question, rng,
                                 temperature=cfg.train.temperature)
        result["ability"] = ability
    else:
        em = mean_em(handle.slots, questions, corpus, cfg.eval.samples_per_question,
                     rng, budget=cfg.train.budget, temperature=cfg.train.temperature)
    result["em"] = em
    with open(out / f"eval_{kind}.json", "w") as f:
        json.dump(result, f, indent=1, sort_keys=True)
    if save_episodes:
        records = [generate_episode(handle.slots, q, corpus, budget=cfg.train.budget,
                                    rng=rng, temperature=cfg.train.temperature)
                   for q in questions]
        save_records(records, out / f"episodes_{kind}.jsonl")
    log(f"{kind}{'/' + ability if ability else ''}: EM {em:.3f} "
        f"over {len(questions)} held-out questions")
    return 0


def cmd_replay_eval(cfg: ExperimentConfig, out: Path, log, kind: str,
                    records_path: str) -> int:
    corpus = load_corpus(_require(out / "corpus.json", "dartlab pretrain"))
    handles = load_variant_registry(_require(out / "variants.json", "dartlab variants"))
    if kind not in handles:
        raise ConfigError(f"variant {kind!r} not in registry ({sorted(handles)})")
    records = load_records(_require(Path(records_path), "dartlab eval --save-episodes"))
    em = replay_eval(handles[kind].slots, records, corpus, budget=cfg.train.budget,
                     rng=np.random.default_rng(cfg.seed + 7),
                     temperature=cfg.train.temperature)
    with open(out / f"replay_eval_{kind}.json", "w") as f:
        json.dump({"variant": kind, "records": len(records), "em": em},
                  f, indent=1, sort_keys=True)
    log(f"{kind} under fixed retrieval: EM {em:.3f} over {len(records)} records")
    return 0


def cmd_efficiency(cfg: ExperimentConfig, out: Path, log, backbone: float,
                   adapter: float, lengths: list[float]) -> int:
    result = efficiency_model(EfficiencyInputs(backbone_params=backbone,
                                               adapter_params=adapter,
                                               context_lengths=lengths))
    write_efficiency_csv(result, out / "efficiency.csv")
    log(f"memory ratio (unit convention) {result['memory_ratio_units']:.3f}, "
        f"re-encode cost {result['reencode_tokens_sq_2agent']:.0f} tokens^2")
    return 0


def _read_csv(path: Path) -> list[dict]:
    with open(path) as f:
        return list(csv.DictReader(f))


def cmd_report(cfg: ExperimentConfig, out: Path, log) -> int:
    lines = ["# Run report", ""]
    corpus_path = out / "corpus.json"
    if corpus_path.exists():
        corpus = load_corpus(corpus_path)
        n_train = len(corpus.questions_for("train"))
        n_eval = len(corpus.questions_for("eval"))
        lines += [f"Corpus: {len(corpus.facts)} facts, vocab {corpus.vocab_size}, "
                  f"{n_train} train / {n_eval} eval questions.", ""]
    for kind in ("m_reas", "m_tool", "m_unified", "dart"):
        path = out / f"train_log_{kind}.csv"
        if path.exists():
            rows = _read_csv(path)
            if rows:
                lines += [f"- `{kind}`: {len(rows)} steps, final mean reward "
                          f"{float(rows[-1]['mean_reward']):.3f}"]
    lines += [""]
    evals = sorted(out.glob("eval_*.json"))
    if evals:
        lines += ["## Held-out exact match", "", "| variant | EM |", "|---|---|"]
        for p in evals:
            with open(p) as f:
                d = json.load(f)
            tag = d["variant"] + (f" ({d['ability']})" if "ability" in d else "")
            lines += [f"| {tag} | {d['em']:.3f} |"]
        lines += [""]
    hist_path = out / "leas_histogram.csv"
    if hist_path.exists():
        lines += ["## Interaction coefficient distribution", "",
                  "| bin | count | mean accuracy |", "|---|---|---|"]
        for row in _read_csv(hist_path):
            lines += [f"| [{float(row['bin_lo']):+.2f}, {float(row['bin_hi']):+.2f}) "
                      f"| {row['count']} | {float(row['mean_accuracy']):.3f} |"]
        summary_path = out / "leas_summary.json"
        if summary_path.exists():
            with open(summary_path) as f:
                s = json.load(f)
            lines += ["", f"Interference fraction {s['frac_interference']:.2f}, "
                      f"synergy fraction {s['frac_synergy']:.2f} "
                      f"({s['retained']} questions retained, {s['dropped']} dropped)."]
        lines += [""]
    ang_path = out / "gradient_angles.csv"
    if ang_path.exists():
        rows = _read_csv(ang_path)
        lines += ["## Gradient angles", "", "| pair type | pairs | mean angle (rad) |",
                  "|---|---|---|"]
        for tag in ("cross_role", "same_role_r", "same_role_a"):
            vals = [float(r["angle_rad"]) for r in rows if r["pair_type"] == tag]
            if vals:
                lines += [f"| {tag} | {len(vals)} | {np.mean(vals):.3f} |"]
        lines += [""]
    eff_path = out / "efficiency.csv"
    if eff_path.exists():
        lines += ["## Efficiency model", "", "| metric | value |", "|---|---|"]
        for row in _read_csv(eff_path):
            lines += [f"| {row['metric']} | {row['value']} |"]
        lines += [""]
    report_path = out / "report.md"
    report_path.write_text("\n".join(lines))
    log(f"report written to {report_path}")
    return 0


# -- argument parsing ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dartlab",
        description="desk-scale experiments on capability interference and "
                    "token-routed dual-adapter training")
    parser.add_argument("--config", help="JSON experiment config")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help=f"run directory (default ${OUT_ENV_VAR}/default)")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", help="build the corpus and pretrain the frozen backbone")
    p_train = sub.add_parser("train", help="train one variant from the base checkpoint")
    p_train.add_argument("--variant", default="dart", choices=TRAINABLE_VARIANTS)
    sub.add_parser("variants", help="train all variants and write the registry")
    sub.add_parser("leas", help="estimate correctness and solve effect coefficients")
    p_ga = sub.add_parser("gradangle", help="role-gradient angle analysis")
    p_ga.add_argument("--variant", default="m_unified")
    p_eval = sub.add_parser("eval", help="held-out exact-match evaluation")
    p_eval.add_argument("--variant", default="dart")
    p_eval.add_argument("--ability", choices=("reasoning", "tool"))
    p_eval.add_argument("--save-episodes", action="store_true")
    p_re = sub.add_parser("replay-eval", help="evaluate under recorded retrieval")
    p_re.add_argument("--variant", default="dart")
    p_re.add_argument("--records", required=True)
    p_eff = sub.add_parser("efficiency", help="memory/latency model")
    p_eff.add_argument("--backbone-params", type=float, default=1e9)
    p_eff.add_argument("--adapter-params", type=float, default=5e6)
    p_eff.add_argument("--context-lengths", default="",
                       help="comma-separated handoff context lengths")
    sub.add_parser("report", help="collate run artifacts into report.md")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    def log(msg: str) -> None:
        print(msg, file=sys.stderr)

    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        out = resolve_out_dir(cfg, args.out)
        if args.command == "pretrain":
            return cmd_pretrain(cfg, out, log)
        if args.command == "train":
            return cmd_train(cfg, out, log, args.variant)
        if args.command == "variants":
            return cmd_variants(cfg, out, log)
        if args.command == "leas":
            return cmd_leas(cfg, out, log)
        if args.command == "gradangle":
            return cmd_gradangle(cfg, out, log, args.variant)
        if args.command == "eval":
            return cmd_eval(cfg, out, log, args.variant, args.ability,
                            args.save_episodes)
        if args.command == "replay-eval":
            return cmd_replay_eval(cfg, out, log, args.variant, args.records)
        if args.command == "efficiency":
            lengths = [float(x) for x in args.context_lengths.split(",") if x.strip()]
            return cmd_efficiency(cfg, out, log, args.backbone_params,
                                  args.adapter_params, lengths)
        if args.command == "report":
            return cmd_report(cfg, out, log)
        raise AssertionError(args.command)
    except (ConfigError, ValueError) as e:
        log(f"error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
