"""Synthetic tool-augmented QA environment.

A tiny key/value fact corpus with a deterministic search tool. Questions ask
for the value of a key (single-hop) or the value of the value (two-hop, where
the first lookup lands on another key). Episodes interleave policy-sampled
tokens with environment-inserted <information> spans; the reward is exact
match of the <answer> span against the gold answer.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .policy import DecodeSession, PolicyModel, sample_from_logits
from .router import ROLE_REASONING, ROLE_TOOL, RouterState, SegmentGrammar, label_tokens

CORPUS_FORMAT = "dartlab-corpus-v1"

BOS_ID = 0
GRAMMAR = SegmentGrammar(think=1, think_end=2, search=3, search_end=4,
                         information=5, information_end=6, answer=7, answer_end=8)
Q1_ID = 9
Q2_ID = 10
CONTENT_BASE = 11

DEFAULT_TOP_K = 3
DEFAULT_BUDGET = 4


@dataclass
class Question:
    id: str
    surface: list[int]
    hops: int
    gold_answer: list[int]
    gold_chain: list[int]
    split: str


@dataclass
class Corpus:
    seed: int
    grammar: SegmentGrammar
    bos_id: int
    q1_id: int
    q2_id: int
    key_ids: list[int]
    value_ids: list[int]
    facts: dict[int, int]
    questions: list[Question]
    vocab_size: int
    anomalies: int = 0

    def passage(self, key: int) -> tuple[int, int]:
        """Two-token rendering of the fact: the key, then its value."""
        return (key, self.facts[key])

    def questions_for(self, split: str, hops: int | None = None) -> list[Question]:
        return [q for q in self.questions
                if q.split == split and (hops is None or q.hops == hops)]

    def question_by_id(self, qid: str) -> Question:
        for q in self.questions:
            if q.id == qid:
                return q
        raise KeyError(qid)


def build_corpus(seed: int, n_keys: int = 40, n_bridge: int = 20,
                 n_values: int = 12, train_frac: float = 0.7) -> Corpus:
    """Bridge keys map to other keys (enabling two-hop chains); the remaining
    terminal keys map to value-range tokens. Key and value id ranges are
    disjoint; values are fewer than keys and reused, so every value token is a
    plausible answer for both question splits."""
    if not 0 < n_bridge < n_keys:
        raise ValueError(f"need 0 < n_bridge < n_keys, got {n_bridge}/{n_keys}")
    n_terminal = n_keys - n_bridge
    if n_bridge > n_terminal:
        raise ValueError("each bridge key needs a distinct terminal key to land on")
    if n_values < 2:
        raise ValueError(f"need at least 2 value tokens, got {n_values}")
    rng = np.random.default_rng(seed)
    key_ids = list(range(CONTENT_BASE, CONTENT_BASE + n_keys))
    value_ids = list(range(CONTENT_BASE + n_keys, CONTENT_BASE + n_keys + n_values))
    keys = np.array(key_ids)
    rng.shuffle(keys)
    bridge_keys = [int(k) for k in keys[:n_bridge]]
    terminal_keys = [int(k) for k in keys[n_bridge:]]

    facts: dict[int, int] = {}
    landing = rng.permutation(n_terminal)
    for i, bk in enumerate(bridge_keys):
        facts[bk] = terminal_keys[int(landing[i])]
    spread = rng.permutation([value_ids[j % n_values] for j in range(n_terminal)])
    for j, tk in enumerate(terminal_keys):
        facts[tk] = int(spread[j])

    questions: list[Question] = []
    for i, tk in enumerate(terminal_keys[:n_bridge]):  # 50/50 single vs two-hop
        questions.append(Question(id=f"s{i:03d}", surface=[Q1_ID, tk], hops=1,
                                  gold_answer=[facts[tk]], gold_chain=[tk], split=""))
    for i, bk in enumerate(bridge_keys):
        mid = facts[bk]
        questions.append(Question(id=f"m{i:03d}", surface=[Q2_ID, bk], hops=2,
                                  gold_answer=[facts[mid]], gold_chain=[bk, mid], split=""))
    for hops in (1, 2):
        group = [q for q in questions if q.hops == hops]
        order = rng.permutation(len(group))
        n_train = int(round(train_frac * len(group)))
        for rank, idx in enumerate(order):
            group[int(idx)].split = "train" if rank < n_train else "eval"

    vocab_size = CONTENT_BASE + n_keys + n_values
    return Corpus(seed=seed, grammar=GRAMMAR, bos_id=BOS_ID, q1_id=Q1_ID, q2_id=Q2_ID,
                  key_ids=key_ids, value_ids=value_ids, facts=facts,
                  questions=questions, vocab_size=vocab_size)


def save_corpus(corpus: Corpus, path) -> None:
    doc = {
        "format": CORPUS_FORMAT,
        "seed": corpus.seed,
        "grammar": corpus.grammar.to_dict(),
        "bos_id": corpus.bos_id,
        "q1_id": corpus.q1_id,
        "q2_id": corpus.q2_id,
        "key_ids": corpus.key_ids,
        "value_ids": corpus.value_ids,
        "facts": {str(k): v for k, v in corpus.facts.items()},
        "questions": [asdict(q) for q in corpus.questions],
        "vocab_size": corpus.vocab_size,
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)


def load_corpus(path) -> Corpus:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != CORPUS_FORMAT:
        raise ValueError(f"not a corpus file: {path}")
    return Corpus(seed=doc["seed"], grammar=SegmentGrammar.from_dict(doc["grammar"]),
                  bos_id=doc["bos_id"], q1_id=doc["q1_id"], q2_id=doc["q2_id"],
                  key_ids=doc["key_ids"], value_ids=doc["value_ids"],
                  facts={int(k): v for k, v in doc["facts"].items()},
                  questions=[Question(**q) for q in doc["questions"]],
                  vocab_size=doc["vocab_size"])


# -- search tool ----------------------------------------------------------------

def search(corpus: Corpus, query: Sequence[int], k: int) -> list[tuple[int, int]]:
    """Deterministic retrieval: the first key token in the query matches
    exactly and ranks first; remaining slots are filled by token-id distance."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    known = set(corpus.facts)
    anchor = None
    for tok in query:
        if tok in known:
            anchor = tok
            break
    if anchor is None:
        if len(query) == 0:
            corpus.anomalies += 1
            anchor = min(corpus.facts)
        else:
            anchor = int(query[0])
    ranked = sorted(corpus.facts, key=lambda key: (abs(key - anchor), key))
    return [corpus.passage(key) for key in ranked[:min(k, len(ranked))]]


def flatten_passages(passages: Sequence[tuple[int, int]]) -> list[int]:
    return [tok for p in passages for tok in p]


# -- reward ----------------------------------------------------------------------

def em_reward(answer: Sequence[int], gold: Sequence[int],
              grammar: SegmentGrammar | None = None) -> int:
    """Exact match after stripping answer-span markers; all-or-nothing."""
    if grammar is not None:
        markers = {grammar.answer, grammar.answer_end}
        answer = [t for t in answer if t not in markers]
        gold = [t for t in gold if t not in markers]
    return int(list(answer) == list(gold))


def extract_answer(tokens: Sequence[int], grammar: SegmentGrammar) -> list[int] | None:
    """Content of the last complete <answer>...</answer> span, else None."""
    best = None
    start = None
    for i, t in enumerate(tokens):
        if t == grammar.answer:
            start = i
        elif t == grammar.answer_end and start is not None:
            best = list(tokens[start + 1:i])
            start = None
    return best


# -- episodes ----------------------------------------------------------------------

@dataclass
class EpisodeRecord:
    question_id: str
    gold_answer: list[int]
    tokens: list[int]
    roles: list[str]
    sampled: list[bool]
    tool_calls: list[tuple[list[int], list[int]]]
    answer: list[int] | None
    reward: int
    prompt_len: int
    truncated: bool = False
    searches_refused: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tool_calls"] = [[list(q), list(r)] for q, r in self.tool_calls]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeRecord":
        d = dict(d)
        d["tool_calls"] = [(list(q), list(r)) for q, r in d["tool_calls"]]
        return cls(**d)


def save_records(records: Sequence[EpisodeRecord], path) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def load_records(path) -> list[EpisodeRecord]:
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                out.append(EpisodeRecord.from_dict(json.loads(line)))
    return out


Slots = dict[str, tuple[PolicyModel, str]]  # generation role -> (model, adapter mode)


def generate_episode(slots: Slots, question: Question, corpus: Corpus,
                     budget: int = DEFAULT_BUDGET, rng: np.random.Generator | None = None,
                     temperature: float = 1.0, top_p: float = 1.0,
                     top_k_passages: int = DEFAULT_TOP_K,
                     fetch: Callable[[list[int]], list[int]] | None = None) -> EpisodeRecord:
    """Roll out one episode.

    The active generation role (tool inside an open <search> span, reasoning
    otherwise) picks which slot's model samples the next token. Completed
    search spans trigger ``fetch`` (corpus search by default) and the result is
    appended as a never-sampled <information> span. After ``budget`` executed
    searches, further attempts get an empty span.
    """
    if budget < 0:
        raise ValueError(f"budget must be >= 0, got {budget}")
    if rng is None:
        rng = np.random.default_rng(0)
    grammar = corpus.grammar
    max_seq = min(m.config.max_seq for m, _ in slots.values())

    sessions: dict[tuple[int, str], DecodeSession] = {}
    last_logits: dict[tuple[int, str], np.ndarray] = {}
    slot_key: dict[str, tuple[int, str]] = {}
    for role, (model, mode) in slots.items():
        key = (id(model), mode)
        if key not in sessions:
            sessions[key] = model.decode_session(mode)
        slot_key[role] = key

    state = RouterState(grammar)
    tokens: list[int] = []
    roles: list[str] = []
    sampled: list[bool] = []

    def room() -> int:
        # +1 for the bos position every session consumed
        return max_seq - 1 - len(tokens)

    def push(tok: int, is_sampled: bool) -> None:
        label = state.label(tok)
        tokens.append(tok)
        roles.append(label)
        sampled.append(is_sampled)
        for key, sess in sessions.items():
            last_logits[key] = sess.append(tok, label)

    def push_block(toks: list[int], is_sampled: bool) -> None:
        labels = [state.label(t) for t in toks]
        tokens.extend(toks)
        roles.extend(labels)
        sampled.extend([is_sampled] * len(toks))
        for key, sess in sessions.items():
            if hasattr(sess, "append_block"):
                last_logits[key] = sess.append_block(toks, labels)
            else:
                for t, lb in zip(toks, labels):
                    last_logits[key] = sess.append(t, lb)

    for key, sess in sessions.items():
        last_logits[key] = sess.append(corpus.bos_id, ROLE_REASONING)
    push_block(list(question.surface), False)
    prompt_len = len(tokens)
    if prompt_len == 0:
        raise ValueError("question surface must be nonempty")

    tool_calls: list[tuple[list[int], list[int]]] = []
    searches_refused = 0
    truncated = False
    query: list[int] | None = None

    while True:
        if room() <= 0:
            truncated = True
            break
        gen_role = state.active_role
        logits = last_logits[slot_key[gen_role]]
        tok = sample_from_logits(logits, temperature, top_p, rng)
        if tok == grammar.search:
            query = []
            push(tok, True)
            continue
        if query is not None and tok != grammar.search_end:
            query.append(tok)
            push(tok, True)
            continue
        if tok == grammar.search_end and query is not None:
            push(tok, True)
            if len(tool_calls) < budget:
                if fetch is None:
                    returned = flatten_passages(search(corpus, query, top_k_passages))
                else:
                    returned = list(fetch(query))
                tool_calls.append((query, returned))
            else:
                returned = []
                searches_refused += 1
            query = None
            span = [grammar.information] + returned + [grammar.information_end]
            if len(span) > room():
                truncated = True
                break
            push_block(span, False)
            continue
        push(tok, True)
        if tok == grammar.answer_end:
            break

    answer = extract_answer(tokens, grammar)
    reward = em_reward(answer, question.gold_answer, grammar) if answer is not None else 0
    return EpisodeRecord(question_id=question.id, gold_answer=list(question.gold_answer),
                         tokens=tokens, roles=roles, sampled=sampled,
                         tool_calls=tool_calls, answer=answer, reward=reward,
                         prompt_len=prompt_len, truncated=truncated,
                         searches_refused=searches_refused)


def run_episode(model: PolicyModel, mode: str, question: Question, corpus: Corpus,
                budget: int = DEFAULT_BUDGET, rng: np.random.Generator | None = None,
                temperature: float = 1.0, top_p: float = 1.0,
                top_k_passages: int = DEFAULT_TOP_K) -> EpisodeRecord:
    slots = {ROLE_REASONING: (model, mode), ROLE_TOOL: (model, mode)}
    return generate_episode(slots, question, corpus, budget=budget, rng=rng,
                            temperature=temperature, top_p=top_p,
                            top_k_passages=top_k_passages)


# -- evaluation --------------------------------------------------------------------

def retrieval_accuracy(records: Sequence[EpisodeRecord]) -> float:
    """Fraction of episodes where some retrieved span contains the gold answer."""
    if not records:
        raise ValueError("retrieval_accuracy needs a nonempty record list")

    def contains(hay: Sequence[int], needle: Sequence[int]) -> bool:
        n = len(needle)
        return n > 0 and any(list(hay[i:i + n]) == list(needle)
                             for i in range(len(hay) - n + 1))

    hits = sum(1 for r in records
               if any(contains(ret, r.gold_answer) for _, ret in r.tool_calls))
    return hits / len(records)


def replay_eval(slots: Slots, records: Sequence[EpisodeRecord], corpus: Corpus,
                budget: int = DEFAULT_BUDGET, rng: np.random.Generator | None = None,
                temperature: float = 1.0, top_p: float = 1.0) -> float:
    """Mean exact match with retrieval held fixed: the evaluated model's
    searches are answered by the recorded information spans, in order; surplus
    searches get empty spans."""
    if rng is None:
        rng = np.random.default_rng(0)
    rewards = []
    for rec in records:
        question = corpus.question_by_id(rec.question_id)
        queue = [list(ret) for _, ret in rec.tool_calls]

        def fetch(_query, _queue=queue):
            return _queue.pop(0) if _queue else []

        replayed = generate_episode(slots, question, corpus, budget=budget, rng=rng,
                                    temperature=temperature, top_p=top_p, fetch=fetch)
        rewards.append(replayed.reward)
    return float(np.mean(rewards))


def mean_em(slots: Slots, questions: Sequence[Question], corpus: Corpus,
            samples_per_question: int, rng: np.random.Generator,
            budget: int = DEFAULT_BUDGET, temperature: float = 1.0,
            top_p: float = 1.0) -> float:
    """Monte-Carlo EM over a question set with stochastic decoding."""
    total = 0.0
    for q in questions:
        for _ in range(samples_per_question):
            total += generate_episode(slots, q, corpus, budget=budget, rng=rng,
                                      temperature=temperature, top_p=top_p).reward
    return total / (len(questions) * samples_per_question)


# -- demonstrations for backbone pretraining -----------------------------------------

@dataclass
class DemoSequence:
    tokens: list[int]
    roles: list[str]
    sampled: list[bool]
    prompt_len: int


def _demo_info_span(corpus: Corpus, rng: np.random.Generator, first_key: int,
                    first_value: int, n_passages: int) -> list[int]:
    span = [corpus.grammar.information, first_key, first_value]
    for _ in range(n_passages - 1):
        span.append(int(rng.choice(corpus.key_ids)))
        span.append(int(rng.choice(corpus.value_ids)))
    span.append(corpus.grammar.information_end)
    return span


def generate_demonstration(corpus: Corpus, rng: np.random.Generator,
                           align_prob: float = 0.25,
                           n_passages: int = DEFAULT_TOP_K) -> DemoSequence:
    """One grammar-conformant episode string for maximum-likelihood pretraining.

    Retrieved values are drawn fresh per demo, so the only learnable skills
    are the span grammar and the copy mechanics (echo a key into the query,
    carry a retrieved value into the next query or the answer). With
    probability ``align_prob`` the chain starts at the question's own key,
    which is what leaves reinforcement learning headroom to improve.
    """
    g = corpus.grammar
    hops = 1 if rng.random() < 0.5 else 2
    q_key = int(rng.choice(corpus.key_ids))
    marker = corpus.q1_id if hops == 1 else corpus.q2_id
    k1 = q_key if rng.random() < align_prob else int(rng.choice(corpus.key_ids))

    tokens = [marker, q_key]
    prompt_len = len(tokens)
    env_spans: list[tuple[int, int]] = []  # (start, end) of env insertions

    def add_hop(chain_key: int, value: int) -> None:
        tokens.extend([g.think, chain_key, g.think_end])
        tokens.extend([g.search, chain_key, g.search_end])
        span = _demo_info_span(corpus, rng, chain_key, value, n_passages)
        env_spans.append((len(tokens), len(tokens) + len(span)))
        tokens.extend(span)

    if hops == 1:
        v = int(rng.choice(corpus.value_ids))
        add_hop(k1, v)
    else:
        mid = int(rng.choice(corpus.key_ids))
        add_hop(k1, mid)
        v = int(rng.choice(corpus.value_ids))
        add_hop(mid, v)
    tokens.extend([g.answer, v, g.answer_end])

    roles = label_tokens(tokens, g)
    sampled = [True] * len(tokens)
    for i in range(prompt_len):
        sampled[i] = False
    for start, end in env_spans:
        for i in range(start, end):
            sampled[i] = False
    return DemoSequence(tokens=tokens, roles=roles, sampled=sampled, prompt_len=prompt_len)
