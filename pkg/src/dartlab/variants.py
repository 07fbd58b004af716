"""The six attribution model variants, hybrid inference, and the dual-adapter policy.

Capability indicator vectors are ordered (x1, x2, x3, x12, x13, x23):
base / tool-use / reasoning main effects, then pairwise joint-training
interactions. Hybrids compose two trained models at inference time, so all
their interaction bits are zero; the routed dual-adapter model trains both
capabilities but never jointly, so its tool-reasoning interaction bit is zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .policy import PolicyModel, load_checkpoint, save_checkpoint, with_adapters
from .router import ROLE_REASONING, ROLE_TOOL
from .toolenv import Corpus, EpisodeRecord, Question, generate_episode, mean_em
from .trainer import TrainConfig, TrainResult, train

REGISTRY_FORMAT = "dartlab-variants-v1"

KIND_BASE = "base"
KIND_M_REAS = "m_reas"
KIND_M_TOOL = "m_tool"
KIND_M_UNIFIED = "m_unified"
KIND_H_TOOL = "h_tool"
KIND_H_REAS = "h_reas"
KIND_DART = "dart"

CAPABILITY_VECTORS: dict[str, tuple[int, ...]] = {
    KIND_BASE:      (1, 0, 0, 0, 0, 0),
    KIND_M_TOOL:    (1, 1, 0, 1, 0, 0),
    KIND_M_REAS:    (1, 0, 1, 0, 1, 0),
    KIND_M_UNIFIED: (1, 1, 1, 1, 1, 1),
    KIND_H_TOOL:    (1, 1, 0, 0, 0, 0),
    KIND_H_REAS:    (1, 0, 1, 0, 0, 0),
    KIND_DART:      (1, 1, 1, 1, 1, 0),
}

# Row order of the attribution design matrix (the six identifiable variants).
DESIGN_ORDER = (KIND_BASE, KIND_M_TOOL, KIND_M_REAS, KIND_M_UNIFIED,
                KIND_H_TOOL, KIND_H_REAS)

_PAIR_INDEX = {3: (0, 1), 4: (0, 2), 5: (1, 2)}


def check_capability_vector(vec: Sequence[int]) -> None:
    """Interaction bits require both main effects: x_ij = 1 => x_i = x_j = 1."""
    if len(vec) != 6 or any(b not in (0, 1) for b in vec):
        raise ValueError(f"capability vector must be six 0/1 entries, got {vec}")
    for idx, (i, j) in _PAIR_INDEX.items():
        if vec[idx] == 1 and not (vec[i] == 1 and vec[j] == 1):
            raise ValueError(f"interaction bit {idx} set without main effects in {vec}")


def design_matrix() -> np.ndarray:
    rows = [CAPABILITY_VECTORS[k] for k in DESIGN_ORDER]
    return np.array(rows, dtype=np.float64)


@dataclass
class VariantHandle:
    kind: str
    capability: tuple[int, ...]
    slots: dict[str, tuple[PolicyModel, str]]
    checkpoints: dict[str, str] | None = None  # slot role -> checkpoint filename
    failed: bool = False

    def __post_init__(self):
        check_capability_vector(self.capability)

    @property
    def is_hybrid(self) -> bool:
        return self.kind in (KIND_H_TOOL, KIND_H_REAS)


def model_handle(kind: str, model: PolicyModel, mode: str) -> VariantHandle:
    slots = {ROLE_REASONING: (model, mode), ROLE_TOOL: (model, mode)}
    return VariantHandle(kind=kind, capability=CAPABILITY_VECTORS[kind], slots=slots)


def hybrid_handle(kind: str, reasoning: tuple[PolicyModel, str],
                  tool: tuple[PolicyModel, str]) -> VariantHandle:
    slots = {ROLE_REASONING: reasoning, ROLE_TOOL: tool}
    return VariantHandle(kind=kind, capability=CAPABILITY_VECTORS[kind], slots=slots)


def build_variants(base: PolicyModel, corpus: Corpus, train_cfg: TrainConfig,
                   variant_rank: int = 16, dart_rank: int = 8,
                   log=None) -> tuple[dict[str, VariantHandle], dict[str, TrainResult]]:
    """Train the three mask variants and the dual-adapter model from one base
    (identical data, architecture, and optimization config), then compose the
    two inference-time hybrids. Diverged trainings are marked failed."""
    if not base.frozen:
        raise ValueError("variant training starts from a frozen base")
    handles: dict[str, VariantHandle] = {KIND_BASE: model_handle(KIND_BASE, base, "none")}
    results: dict[str, TrainResult] = {}

    trained: dict[str, PolicyModel] = {}
    for kind, mask in ((KIND_M_REAS, "reas"), (KIND_M_TOOL, "tool"),
                       (KIND_M_UNIFIED, "unified")):
        model = with_adapters(base, {"unified": variant_rank}, seed=train_cfg.seed)
        cfg = replace(train_cfg, variant=mask)
        if log is not None:
            log(f"training {kind} (mask {mask})")
        results[kind] = train(model, corpus, cfg)
        trained[kind] = model
        handle = model_handle(kind, model, "single:unified")
        handle.failed = results[kind].diverged
        handles[kind] = handle

    dart_model = with_adapters(base, {ROLE_REASONING: dart_rank, ROLE_TOOL: dart_rank},
                               seed=train_cfg.seed)
    if log is not None:
        log("training dart (routed dual adapters)")
    results[KIND_DART] = train(dart_model, corpus, replace(train_cfg, variant="dart"))
    dart = model_handle(KIND_DART, dart_model, "routed")
    dart.failed = results[KIND_DART].diverged
    handles[KIND_DART] = dart

    handles[KIND_H_TOOL] = hybrid_handle(
        KIND_H_TOOL, reasoning=(base, "none"),
        tool=(trained[KIND_M_TOOL], "single:unified"))
    handles[KIND_H_TOOL].failed = handles[KIND_M_TOOL].failed
    handles[KIND_H_REAS] = hybrid_handle(
        KIND_H_REAS, reasoning=(trained[KIND_M_REAS], "single:unified"),
        tool=(base, "none"))
    handles[KIND_H_REAS].failed = handles[KIND_M_REAS].failed
    return handles, results


def hybrid_generate(handle: VariantHandle, question: Question, corpus: Corpus,
                    rng: np.random.Generator, budget: int = 4,
                    temperature: float = 1.0, top_p: float = 1.0) -> EpisodeRecord:
    """Decode with per-role model composition; parameters are never written."""
    if not handle.is_hybrid:
        raise ValueError(f"{handle.kind} is not a hybrid handle")
    return generate_episode(handle.slots, question, corpus, budget=budget, rng=rng,
                            temperature=temperature, top_p=top_p)


def dart_single_ability(model: PolicyModel, which: str, questions: Sequence[Question],
                        corpus: Corpus, samples_per_question: int,
                        rng: np.random.Generator, temperature: float = 1.0,
                        top_p: float = 1.0) -> float:
    """EM with only the named adapter attached; the other role's positions run
    backbone-only."""
    if which not in model.adapters:
        raise ValueError(f"unknown role: {which!r}")
    mode = f"routed-only:{which}"
    slots = {ROLE_REASONING: (model, mode), ROLE_TOOL: (model, mode)}
    return mean_em(slots, questions, corpus, samples_per_question, rng,
                   temperature=temperature, top_p=top_p)


def em_eval(handle: VariantHandle, questions: Sequence[Question], corpus: Corpus,
            samples_per_question: int, rng: np.random.Generator,
            temperature: float = 1.0, top_p: float = 1.0) -> float:
    return mean_em(handle.slots, questions, corpus, samples_per_question, rng,
                   temperature=temperature, top_p=top_p)


# -- registry (checkpoint paths + capability vectors, consumed downstream) ------

def save_variant_registry(handles: dict[str, VariantHandle], out_dir,
                          grammar: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    saved_models: dict[int, str] = {}
    entries: dict[str, dict] = {}
    for kind, handle in handles.items():
        slots_meta = {}
        for slot_role, (model, mode) in handle.slots.items():
            key = id(model)
            if key not in saved_models:
                filename = f"{kind}.npz" if not handle.is_hybrid else f"{kind}_{slot_role}.npz"
                save_checkpoint(model, out_dir / filename,
                                extra={"kind": kind, "grammar": grammar})
                saved_models[key] = filename
            slots_meta[slot_role] = {"checkpoint": saved_models[key], "mode": mode}
        entries[kind] = {"capability": list(handle.capability),
                         "failed": handle.failed, "slots": slots_meta}
    path = out_dir / "variants.json"
    with open(path, "w") as f:
        json.dump({"format": REGISTRY_FORMAT, "variants": entries}, f,
                  indent=1, sort_keys=True)
    return path


def load_variant_registry(path) -> dict[str, VariantHandle]:
    path = Path(path)
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != REGISTRY_FORMAT:
        raise ValueError(f"not a variant registry: {path}")
    cache: dict[str, PolicyModel] = {}

    def load(filename: str) -> PolicyModel:
        if filename not in cache:
            cache[filename], _ = load_checkpoint(path.parent / filename)
        return cache[filename]

    handles = {}
    for kind, entry in doc["variants"].items():
        slots = {slot: (load(meta["checkpoint"]), meta["mode"])
                 for slot, meta in entry["slots"].items()}
        handles[kind] = VariantHandle(
            kind=kind, capability=tuple(entry["capability"]), slots=slots,
            checkpoints={s: m["checkpoint"] for s, m in entry["slots"].items()},
            failed=entry["failed"])
    return handles
