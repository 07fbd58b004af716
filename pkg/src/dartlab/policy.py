"""Tiny autoregressive transformer policy with named low-rank adapters.

The backbone (GPT-style: RMSNorm, causal multi-head attention, ReLU MLP, no
biases) can be frozen, after which all training capacity lives in low-rank
adapter pairs (B, A) attached to every linear layer. Three forward modes:

* ``routing=None``       backbone only
* ``routing="name"``     one adapter applied at every position (plain LoRA)
* ``routing=[labels]``   per-token routing: each position's contribution comes
                         from its role's adapter; env positions are backbone-only

Adapters start with B = 0, so a freshly adapted model computes exactly the
backbone function.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, Tensor
from .router import ROLE_ENV, ROLE_REASONING, ROLE_TOOL

NEG_INF = -1e9
CHECKPOINT_FORMAT = "dartlab-checkpoint-v1"


@dataclass
class PolicyConfig:
    vocab_size: int
    dim: int = 64
    layers: int = 2
    heads: int = 2
    max_seq: int = 128
    adapter_ranks: dict[str, int] = field(default_factory=dict)
    dtype: str = "float32"
    bos_id: int = 0

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        for role, r in self.adapter_ranks.items():
            if not 1 <= r <= self.dim // 2:
                raise ValueError(f"adapter rank {r} for {role!r} must satisfy 1 <= r << {self.dim}")


def _linear_shapes(cfg: PolicyConfig) -> dict[str, tuple[int, int]]:
    """All linear layers, (in, out), in declaration order."""
    shapes = _adapted_linear_shapes(cfg)
    shapes["lm_head"] = (cfg.dim, cfg.vocab_size)
    return shapes


def _adapted_linear_shapes(cfg: PolicyConfig) -> dict[str, tuple[int, int]]:
    """The transformer-block linear layers that carry adapters (the output
    head stays frozen-only, following low-rank-adapter convention)."""
    shapes: dict[str, tuple[int, int]] = {}
    for i in range(cfg.layers):
        for name in ("attn_wq", "attn_wk", "attn_wv", "attn_wo"):
            shapes[f"layer{i}.{name}"] = (cfg.dim, cfg.dim)
        shapes[f"layer{i}.mlp_fc1"] = (cfg.dim, 4 * cfg.dim)
        shapes[f"layer{i}.mlp_fc2"] = (4 * cfg.dim, cfg.dim)
    return shapes


class AdapterSet:
    """One named role's low-rank pairs, one (B, A) per linear layer.

    B is zero-initialized so the initial contribution (h @ A) @ B vanishes.
    """

    def __init__(self, role: str, rank: int, cfg: PolicyConfig, rng: np.random.Generator):
        self.role = role
        self.rank = rank
        dt = np.dtype(cfg.dtype)
        self.layers: dict[str, tuple[Tensor, Tensor]] = {}
        for name, (in_dim, out_dim) in _adapted_linear_shapes(cfg).items():
            b = Tensor(np.zeros((rank, out_dim), dtype=dt), requires_grad=True)
            # fan-in scaled so B receives usable gradient from the first step
            a = Tensor(rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(in_dim, rank)).astype(dt),
                       requires_grad=True)
            self.layers[name] = (b, a)

    @property
    def trainable(self) -> bool:
        return all(b.requires_grad and a.requires_grad for b, a in self.layers.values())

    def set_trainable(self, flag: bool) -> None:
        for b, a in self.layers.values():
            b.requires_grad = flag
            a.requires_grad = flag

    def tensors(self) -> list[Tensor]:
        out = []
        for b, a in self.layers.values():
            out.extend((b, a))
        return out

    def param_count(self) -> int:
        return sum(t.data.size for t in self.tensors())


class PolicyModel:
    """Frozen-able transformer backbone plus named adapter sets."""

    def __init__(self, config: PolicyConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        dt = np.dtype(config.dtype)

        def init(shape, std=0.02):
            if std == 0.0:
                return Tensor(np.zeros(shape, dtype=dt), requires_grad=True)
            return Tensor(rng.normal(0.0, std, size=shape).astype(dt), requires_grad=True)

        self.backbone: dict[str, Tensor] = {
            "wte": init((config.vocab_size, config.dim)),
            "wpe": init((config.max_seq, config.dim)),
        }
        for name, shape in _linear_shapes(config).items():
            # zero-init the residual-writing projections, as is conventional
            std = 0.0 if name.endswith(("attn_wo", "mlp_fc2")) else 0.02
            self.backbone[name] = init(shape, std)
        self.frozen = False
        self.adapters: dict[str, AdapterSet] = {}
        for role, rank in config.adapter_ranks.items():
            self.adapters[role] = AdapterSet(role, rank, config, rng)

    # -- parameter bookkeeping ------------------------------------------------

    def freeze_backbone(self) -> None:
        self.frozen = True
        for t in self.backbone.values():
            t.requires_grad = False

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [(f"backbone.{n}", t) for n, t in self.backbone.items()]
        for role, aset in self.adapters.items():
            for layer, (b, a) in aset.layers.items():
                out.append((f"adapter.{role}.{layer}.B", b))
                out.append((f"adapter.{role}.{layer}.A", a))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_parameters() if t.requires_grad]

    def param_manifest(self) -> list[tuple[str, tuple[int, ...], str]]:
        """Deterministic (declaration-order) listing of all parameter tensors."""
        return [(n, tuple(t.data.shape), str(t.data.dtype)) for n, t in self.named_parameters()]

    def manifest_hash(self) -> str:
        trainable = [(n, tuple(t.data.shape), str(t.data.dtype))
                     for n, t in self.trainable_parameters()]
        blob = json.dumps(trainable).encode()
        return hashlib.sha256(blob).hexdigest()

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def decode_session(self, mode: str) -> "DecodeSession":
        return DecodeSession(self, mode)

    def clone(self) -> "PolicyModel":
        other = PolicyModel(self.config, seed=0)
        for (_, src), (_, dst) in zip(self.named_parameters(), other.named_parameters()):
            dst.data = src.data.copy()
            dst.requires_grad = src.requires_grad
            dst.grad = np.zeros_like(dst.data) if src.requires_grad else None
        other.frozen = self.frozen
        return other

    # -- forward --------------------------------------------------------------

    def _resolve_routing(self, routing, length: int) -> list[str | None]:
        """Normalize a routing spec to one adapter name (or None) per position."""
        if routing is None:
            return [None] * length
        if isinstance(routing, str):
            if routing not in self.adapters:
                raise ContractViolation(f"unknown role id: {routing!r}")
            return [routing] * length
        routing = list(routing)
        if len(routing) != length:
            raise ContractViolation(
                f"routing length {len(routing)} != token length {length}")
        resolved: list[str | None] = []
        for label in routing:
            if label is None or label == ROLE_ENV:
                resolved.append(None)
            elif label in self.adapters:
                resolved.append(label)
            else:
                raise ContractViolation(f"unknown role id: {label!r}")
        return resolved

    def _adapter_masks(self, names: list[str | None]) -> dict[str, np.ndarray | None]:
        """Per adapter: None if unused, 'full' coverage as all-ones, else (T,1) mask."""
        masks: dict[str, np.ndarray | None] = {}
        dt = np.dtype(self.config.dtype)
        for role in self.adapters:
            hits = np.fromiter((1.0 if n == role else 0.0 for n in names),
                               dtype=dt, count=len(names))
            masks[role] = hits[:, None] if hits.any() else None
        return masks

    def _linear(self, x: Tensor, name: str, masks: dict[str, np.ndarray | None]) -> Tensor:
        out = ad.matmul(x, self.backbone[name])
        for role, mask in masks.items():
            if mask is None or name not in self.adapters[role].layers:
                continue
            b, a = self.adapters[role].layers[name]
            contrib = ad.matmul(ad.matmul(x, a), b)
            if mask.all():
                out = ad.add(out, contrib)
            else:
                out = ad.add(out, ad.mul(contrib, Tensor(mask)))
        return out

    def forward_logits(self, tokens: Sequence[int], routing=None) -> Tensor:
        """Next-token logits, one row per position of ``tokens``."""
        cfg = self.config
        T = len(tokens)
        if T == 0 or T > cfg.max_seq:
            raise ContractViolation(f"sequence length {T} outside 1..{cfg.max_seq}")
        masks = self._adapter_masks(self._resolve_routing(routing, T))
        head_dim = cfg.dim // cfg.heads
        inv_sqrt = 1.0 / float(np.sqrt(head_dim))
        causal = Tensor(np.triu(np.full((T, T), NEG_INF, dtype=np.dtype(cfg.dtype)), k=1))

        x = ad.add(ad.embedding(self.backbone["wte"], np.asarray(tokens, dtype=np.intp)),
                   ad.slice2d(self.backbone["wpe"], slice(0, T)))
        x = ad.rms_norm(x)
        for i in range(cfg.layers):
            h = ad.rms_norm(x)
            q = self._linear(h, f"layer{i}.attn_wq", masks)
            k = self._linear(h, f"layer{i}.attn_wk", masks)
            v = self._linear(h, f"layer{i}.attn_wv", masks)
            heads = []
            for hh in range(cfg.heads):
                cols = slice(hh * head_dim, (hh + 1) * head_dim)
                q_h = ad.slice2d(q, cols=cols)
                k_h = ad.slice2d(k, cols=cols)
                v_h = ad.slice2d(v, cols=cols)
                scores = ad.add(ad.scale(ad.matmul(q_h, ad.transpose(k_h)), inv_sqrt), causal)
                heads.append(ad.matmul(ad.row_softmax(scores), v_h))
            attn = ad.concat(heads, axis=1)
            x = ad.add(self._linear(attn, f"layer{i}.attn_wo", masks), x)
            h = ad.rms_norm(x)
            m = ad.relu(self._linear(h, f"layer{i}.mlp_fc1", masks))
            x = ad.add(self._linear(m, f"layer{i}.mlp_fc2", masks), x)
        return self._linear(x, "lm_head", masks)


def shift_for_scoring(model: PolicyModel, tokens: Sequence[int], routing):
    """Input sequence and routing whose logits row t scores tokens[t].

    Row t of the forward over [bos, c_0, ..., c_{T-2}] is the distribution of
    c_t; the first token is scored from the begin-of-sequence token alone.
    """
    inp = [model.config.bos_id] + list(tokens[:-1])
    if routing is None or isinstance(routing, str):
        return inp, routing
    return inp, [ROLE_REASONING] + list(routing[:-1])


def token_log_probs(model: PolicyModel, tokens: Sequence[int], routing=None) -> Tensor:
    """Log-probability of each token given its prefix (bos-conditioned)."""
    inp, inp_routing = shift_for_scoring(model, tokens, routing)
    logits = model.forward_logits(inp, inp_routing)
    lsm = ad.row_log_softmax(logits)
    onehot = np.zeros(lsm.shape, dtype=lsm.data.dtype)
    onehot[np.arange(len(tokens)), np.asarray(tokens, dtype=np.intp)] = 1.0
    return ad.tsum(ad.mul(lsm, Tensor(onehot)), axis=1)


def sample_from_logits(logits: np.ndarray, temperature: float, top_p: float,
                       rng: np.random.Generator) -> int:
    """Temperature + nucleus sampling; temperature 0 is greedy argmax."""
    if temperature < 0 or not 0 < top_p <= 1:
        raise ContractViolation(f"bad sampling params: temperature={temperature}, top_p={top_p}")
    if temperature == 0.0:
        return int(np.argmax(logits))
    z = np.asarray(logits, dtype=np.float64) / temperature
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    order = np.argsort(-p, kind="stable")
    if top_p < 1.0:
        cum = np.cumsum(p[order])
        cutoff = int(np.searchsorted(cum, top_p) + 1)
        order = order[:cutoff]
    kept = p[order]
    kept /= kept.sum()
    assert kept.size > 0
    r = rng.random()
    idx = int(np.searchsorted(np.cumsum(kept), r))
    return int(order[min(idx, kept.size - 1)])


def sample_step(model: PolicyModel, prefix: Sequence[int], routing,
                temperature: float, top_p: float, rng: np.random.Generator) -> int:
    """Draw the next token after ``prefix`` (bos-conditioned full recompute)."""
    if isinstance(routing, (list, tuple)):
        inp_routing = [ROLE_REASONING] + list(routing)
    else:
        inp_routing = routing
    logits = model.forward_logits([model.config.bos_id] + list(prefix), inp_routing)
    return sample_from_logits(logits.data[-1], temperature, top_p, rng)


# -- adapter application modes -----------------------------------------------
#
# A mode string fixes how role labels map to adapter names during decoding and
# scoring: "none", "single:<name>", "routed", "routed-only:<role>".

def selector_for_mode(mode: str):
    if mode == "none":
        return lambda label: None
    if mode.startswith("single:"):
        name = mode.split(":", 1)[1]
        return lambda label: name
    if mode == "routed":
        table = {ROLE_REASONING: ROLE_REASONING, ROLE_TOOL: ROLE_TOOL, ROLE_ENV: None}
        return lambda label: table[label]
    if mode.startswith("routed-only:"):
        only = mode.split(":", 1)[1]
        return lambda label: only if label == only else None
    raise ValueError(f"unknown adapter mode: {mode!r}")


def routing_for_mode(mode: str, labels: Sequence[str]):
    """Routing argument for forward_logits/token_log_probs under a mode."""
    if mode == "none":
        return None
    if mode.startswith("single:"):
        return mode.split(":", 1)[1]
    sel = selector_for_mode(mode)
    return [sel(lb) for lb in labels]


class DecodeSession:
    """Incremental no-grad decoder with preallocated key/value caches.

    Tokens are appended singly or as a block (with their router labels, which
    fix each position's adapter under the session's mode); the next-token
    logits for the last appended position are returned. Matches
    ``forward_logits`` up to floating-point association.
    """

    def __init__(self, model: PolicyModel, mode: str):
        self.model = model
        self.mode = mode
        self.select = selector_for_mode(mode)
        cfg = model.config
        if mode.startswith("single:") and mode.split(":", 1)[1] not in model.adapters:
            raise ContractViolation(f"unknown role id in mode {mode!r}")
        self._hd = cfg.dim // cfg.heads
        dt = np.dtype(cfg.dtype)
        self._k = np.empty((cfg.layers, cfg.heads, cfg.max_seq, self._hd), dtype=dt)
        self._v = np.empty_like(self._k)
        self._inv_sqrt = 1.0 / float(np.sqrt(self._hd))
        self.position = 0

    def _linear_rows(self, x: np.ndarray, name: str,
                     adapters: list[str | None]) -> np.ndarray:
        out = x @ self.model.backbone[name].data
        for adapter in set(adapters):
            if adapter is None or name not in self.model.adapters[adapter].layers:
                continue
            b, a = self.model.adapters[adapter].layers[name]
            if all(s == adapter for s in adapters):
                out += (x @ a.data) @ b.data
            else:
                rows = np.fromiter((i for i, s in enumerate(adapters) if s == adapter),
                                   dtype=np.intp)
                out[rows] += (x[rows] @ a.data) @ b.data
        return out

    @staticmethod
    def _rms(x: np.ndarray) -> np.ndarray:
        return x / np.sqrt((x * x).mean(axis=1, keepdims=True) + ad.RMS_EPS)

    def append(self, token: int, label: str) -> np.ndarray:
        return self.append_block([token], [label])

    def append_block(self, tokens, labels) -> np.ndarray:
        """Encode a token block; returns the final position's logits row."""
        cfg = self.model.config
        n = len(tokens)
        start = self.position
        if n == 0:
            raise ContractViolation("empty decode block")
        if start + n > cfg.max_seq:
            raise ContractViolation(f"decode past max_seq {cfg.max_seq}")
        adapters = []
        for label in labels:
            adapter = self.select(label)
            if adapter is not None and adapter not in self.model.adapters:
                raise ContractViolation(f"unknown role id: {adapter!r}")
            adapters.append(adapter)
        heads = cfg.heads
        hd = self._hd
        backbone = self.model.backbone
        end = start + n
        x = backbone["wte"].data[np.asarray(tokens, dtype=np.intp)] \
            + backbone["wpe"].data[start:end]
        x = self._rms(x)
        if n > 1:
            # intra-block causality: block row i sees cache + block rows <= i
            block_mask = np.triu(np.full((n, n), NEG_INF, dtype=x.dtype), k=1)
        for i in range(cfg.layers):
            h = self._rms(x)
            q = self._linear_rows(h, f"layer{i}.attn_wq", adapters)
            k = self._linear_rows(h, f"layer{i}.attn_wk", adapters)
            v = self._linear_rows(h, f"layer{i}.attn_wv", adapters)
            self._k[i, :, start:end] = k.reshape(n, heads, hd).transpose(1, 0, 2)
            self._v[i, :, start:end] = v.reshape(n, heads, hd).transpose(1, 0, 2)
            q_h = q.reshape(n, heads, hd).transpose(1, 0, 2)
            scores = q_h @ self._k[i, :, :end].transpose(0, 2, 1) * self._inv_sqrt
            if n > 1:
                scores[:, :, start:end] += block_mask
            scores -= scores.max(axis=2, keepdims=True)
            w = np.exp(scores)
            w /= w.sum(axis=2, keepdims=True)
            attn = (w @ self._v[i, :, :end]).transpose(1, 0, 2).reshape(n, cfg.dim)
            x = self._linear_rows(attn, f"layer{i}.attn_wo", adapters) + x
            h = self._rms(x)
            m = np.maximum(self._linear_rows(h, f"layer{i}.mlp_fc1", adapters), 0.0)
            x = self._linear_rows(m, f"layer{i}.mlp_fc2", adapters) + x
        self.position = end
        return self._linear_rows(x[-1:], "lm_head", adapters[-1:])[0]


def with_adapters(base: PolicyModel, adapter_ranks: dict[str, int],
                  seed: int = 0) -> PolicyModel:
    """New model with the base's backbone values (copied) and fresh adapters."""
    cfg = replace(base.config, adapter_ranks=dict(adapter_ranks))
    model = PolicyModel(cfg, seed=seed)
    for name, t in base.backbone.items():
        model.backbone[name].data = t.data.copy()
    if base.frozen:
        model.freeze_backbone()
    return model


# -- checkpointing -------------------------------------------------------------

def save_checkpoint(model: PolicyModel, path, extra: dict | None = None) -> None:
    """Self-describing container: config, manifest, every tensor, extras."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "frozen": model.frozen,
        "adapter_trainable": {r: s.trainable for r, s in model.adapters.items()},
        "manifest": model.param_manifest(),
        "extra": extra or {},
    }
    arrays = {name: t.data for name, t in model.named_parameters()}
    with open(path, "wb") as f:
        np.savez(f, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
                 **arrays)


def load_checkpoint(path) -> tuple[PolicyModel, dict]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not a policy checkpoint: {path}")
        cfg = PolicyConfig(**meta["config"])
        model = PolicyModel(cfg, seed=0)
        for name, t in model.named_parameters():
            t.data = data[name].copy()
    if meta["frozen"]:
        model.freeze_backbone()
    for role, flag in meta["adapter_trainable"].items():
        model.adapters[role].set_trainable(flag)
    for t in model.parameters():
        t.grad = np.zeros_like(t.data) if t.requires_grad else None
    return model, meta["extra"]
