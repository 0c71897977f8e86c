"""Tokenization, corpora, batching, and the synthetic closed-world generator.

Corpora are JSONL, one record per line:

    dialogue:   {"personas": [str, ...], "query": str, "response": str}
    inference:  {"premise": str, "hypothesis": str, "label": "entail"|"neutral"|"contradict"}
    eval tuple: {"personas": [str, ...], "query": str, "entailed": str, "contradicted": str}

Loaders never abort on a malformed line; they collect errors with line
numbers so error count + example count always equals the line count.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

# Reserved vocabulary ids, stable across save/load. `mask` backs the
# encoder-only ablation's masked-token objective.
PAD, UNK, SEP, BOS, EOS, MASK = 0, 1, 2, 3, 4, 5
RESERVED = ["<pad>", "<unk>", "<s>", "<bos>", "<eos>", "<mask>"]

LABELS = ("entail", "neutral", "contradict")

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation boundaries."""
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: list[str]) -> str:
    return " ".join(tokens)


class Vocab:
    """Bijective token/id mapping with fixed reserved ids."""

    def __init__(self, tokens: list[str]):
        if tokens[: len(RESERVED)] != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def build(cls, texts) -> "Vocab":
        """Collect vocabulary from an iterable of strings, most frequent first."""
        counts: dict[str, int] = {}
        for text in texts:
            for tok in tokenize(text):
                counts[tok] = counts.get(tok, 0) + 1
        ordered = sorted(counts, key=lambda t: (-counts[t], t))
        return cls(RESERVED + [t for t in ordered if t not in RESERVED])

    def encode(self, text: str) -> list[int]:
        return [self.index.get(t, UNK) for t in tokenize(text)]

    def decode(self, ids) -> str:
        return detokenize([self.tokens[i] for i in ids
                           if i not in (PAD, BOS, EOS)])


# ---------------------------------------------------------------------------
# record types and loaders


@dataclass
class DialogueExample:
    personas: list[str]
    query: str
    response: str

    def __post_init__(self):
        if not self.response:
            raise ValueError("response must be non-empty")


@dataclass
class InferencePair:
    premise: str
    hypothesis: str
    label: str

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}, got {self.label!r}")


@dataclass
class EvalTuple:
    personas: list[str]
    query: str
    entailed: str
    contradicted: str


@dataclass
class LoadError:
    line: int
    message: str


@dataclass
class LoadResult:
    examples: list
    errors: list[LoadError] = field(default_factory=list)


def _load_jsonl(path, parse) -> LoadResult:
    result = LoadResult(examples=[])
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                result.errors.append(LoadError(lineno, "blank line"))
                continue
            try:
                record = json.loads(line)
                result.examples.append(parse(record))
            except (ValueError, TypeError, KeyError) as exc:
                result.errors.append(LoadError(lineno, str(exc)))
    return result


def _parse_dialogue(record: dict) -> DialogueExample:
    return DialogueExample(personas=[str(p) for p in record["personas"]],
                           query=str(record["query"]),
                           response=str(record["response"]))


def _parse_inference(record: dict) -> InferencePair:
    return InferencePair(premise=str(record["premise"]),
                         hypothesis=str(record["hypothesis"]),
                         label=str(record["label"]))


def _parse_eval_tuple(record: dict) -> EvalTuple:
    return EvalTuple(personas=[str(p) for p in record["personas"]],
                     query=str(record["query"]),
                     entailed=str(record["entailed"]),
                     contradicted=str(record["contradicted"]))


def load_dialogue_jsonl(path) -> LoadResult:
    return _load_jsonl(path, _parse_dialogue)


def load_inference_jsonl(path) -> LoadResult:
    return _load_jsonl(path, _parse_inference)


def load_eval_tuples_jsonl(path) -> LoadResult:
    return _load_jsonl(path, _parse_eval_tuple)


# ---------------------------------------------------------------------------
# model input assembly


def build_input(personas: list[list[int]], query: list[int], config):
    """Lay out one encoder input: persona tokens, separator, query tokens.

    Type ids are 0 over the persona segment (separator included) and 1 over
    the query.  On overflow the persona segment is truncated from the left,
    never the query.
    """
    persona = [t for p in personas for t in p]
    budget = config.max_len - len(query) - 1
    if budget < 0:
        raise ValueError(
            f"query of {len(query)} tokens cannot fit in max_len={config.max_len}")
    if len(persona) > budget:
        persona = persona[len(persona) - budget:]
    ids = persona + [SEP] + query
    type_ids = [0] * (len(persona) + 1) + [1] * len(query)
    position_ids = list(range(len(ids)))
    padding_mask = [False] * len(ids)
    return (np.array(ids, dtype=np.int64),
            np.array(type_ids, dtype=np.int64),
            np.array(position_ids, dtype=np.int64),
            np.array(padding_mask, dtype=bool))


@dataclass
class DialogueBatch:
    enc_ids: np.ndarray        # [b, l] persona + sep + query
    enc_types: np.ndarray
    enc_pos: np.ndarray
    enc_pad: np.ndarray        # bool, True at padding
    persona_ids: np.ndarray    # [b, lp] persona tokens only
    persona_pos: np.ndarray
    persona_pad: np.ndarray
    dec_in: np.ndarray         # [b, t] bos + response
    labels: np.ndarray         # [b, t] response + eos
    dec_pad: np.ndarray

    @property
    def size(self) -> int:
        return self.enc_ids.shape[0]

    @property
    def target_tokens(self) -> int:
        return int((~self.dec_pad).sum())


@dataclass
class NliBatch:
    """Premise in the persona slot, hypothesis in the response slot."""
    persona_ids: np.ndarray
    persona_pos: np.ndarray
    persona_pad: np.ndarray
    dec_in: np.ndarray
    labels: np.ndarray
    dec_pad: np.ndarray

    @property
    def size(self) -> int:
        return self.persona_ids.shape[0]


def _pad_rows(rows: list[list[int]], fill: int = PAD):
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), fill, dtype=np.int64)
    pad = np.ones((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
        pad[i, : len(r)] = False
    return out, pad


def _positions_like(pad: np.ndarray) -> np.ndarray:
    pos = np.tile(np.arange(pad.shape[1], dtype=np.int64), (pad.shape[0], 1))
    return np.where(pad, 0, pos)


def make_batches(examples: list[DialogueExample], vocab: Vocab, config,
                 batch_size: int, seed: int):
    """Shuffle, tokenize, and pad dialogue examples into batches.

    Returns (batches, skipped) where skipped counts examples that could not
    fit max_len even after persona truncation or had an empty target.
    """
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(examples))
    prepared = []
    skipped = 0
    max_target = config.max_len - 2
    for idx in order:
        ex = examples[idx]
        persona_ids = [vocab.encode(p) for p in ex.personas]
        query_ids = vocab.encode(ex.query)
        response_ids = vocab.encode(ex.response)[:max_target]
        if not response_ids:
            skipped += 1
            continue
        try:
            ids, types, pos, _ = build_input(persona_ids, query_ids, config)
        except ValueError:
            skipped += 1
            continue
        n_persona = len(ids) - len(query_ids) - 1
        prepared.append({
            "enc": (list(ids), list(types), list(pos)),
            "persona": list(ids[:n_persona]),
            "dec_in": [BOS] + response_ids,
            "labels": response_ids + [EOS],
        })

    batches = []
    for start in range(0, len(prepared), batch_size):
        chunk = prepared[start: start + batch_size]
        enc_ids, enc_pad = _pad_rows([c["enc"][0] for c in chunk])
        enc_types, _ = _pad_rows([c["enc"][1] for c in chunk], fill=0)
        enc_pos, _ = _pad_rows([c["enc"][2] for c in chunk], fill=0)
        persona_rows = [c["persona"] if c["persona"] else [PAD] for c in chunk]
        persona_ids, persona_pad = _pad_rows(persona_rows)
        # An all-pad persona row keeps attention well-defined for empty personas.
        for i, c in enumerate(chunk):
            if not c["persona"]:
                persona_pad[i, :] = True
        dec_in, dec_pad = _pad_rows([c["dec_in"] for c in chunk])
        labels, _ = _pad_rows([c["labels"] for c in chunk])
        batches.append(DialogueBatch(
            enc_ids=enc_ids, enc_types=enc_types, enc_pos=enc_pos, enc_pad=enc_pad,
            persona_ids=persona_ids, persona_pos=_positions_like(persona_pad),
            persona_pad=persona_pad,
            dec_in=dec_in, labels=labels, dec_pad=dec_pad))
    return batches, skipped


def make_nli_batches(pairs: list[InferencePair], vocab: Vocab, config,
                     batch_size: int, seed: int):
    """Batch premise/hypothesis pairs for the understanding-only path.

    The hypothesis takes the decoder layout (bos-shifted input, in-sequence
    labels), so a judged token's own embedding sits one position to the
    right exactly as it does in the draft states the decoder refines."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pairs))
    prepared = []
    skipped = 0
    max_target = config.max_len - 2
    for idx in order:
        pair = pairs[idx]
        prem = vocab.encode(pair.premise)[: config.max_len]
        hyp = vocab.encode(pair.hypothesis)[:max_target]
        if not prem or not hyp:
            skipped += 1
            continue
        prepared.append({"prem": prem, "dec_in": [BOS] + hyp, "labels": hyp + [EOS]})

    batches = []
    for start in range(0, len(prepared), batch_size):
        chunk = prepared[start: start + batch_size]
        persona_ids, persona_pad = _pad_rows([c["prem"] for c in chunk])
        dec_in, dec_pad = _pad_rows([c["dec_in"] for c in chunk])
        labels, _ = _pad_rows([c["labels"] for c in chunk])
        batches.append(NliBatch(
            persona_ids=persona_ids, persona_pos=_positions_like(persona_pad),
            persona_pad=persona_pad,
            dec_in=dec_in, labels=labels, dec_pad=dec_pad))
    return batches, skipped


class BatchCycler:
    """Deterministic batch schedule: the batch at a step is a pure function
    of (seed, step), so training can resume mid-run bit-exactly."""

    def __init__(self, batches: list, seed: int):
        if not batches:
            raise ValueError("no batches to cycle")
        self.batches = batches
        self.seed = seed
        self._epoch = -1
        self._order = None

    def at(self, step: int):
        epoch, offset = divmod(step, len(self.batches))
        if epoch != self._epoch:
            rng = np.random.default_rng((self.seed, epoch))
            self._order = rng.permutation(len(self.batches))
            self._epoch = epoch
        return self.batches[self._order[offset]]


# ---------------------------------------------------------------------------
# synthetic closed-world corpus

WORLD = {
    "pet": ["dog", "cat", "bird", "fish"],
    "city": ["paris", "rome", "oslo", "cairo"],
    "job": ["chef", "pilot", "nurse", "farmer"],
}

PERSONA_TEMPLATES = {
    "pet": "i have a {v}",
    "city": "i live in {v}",
    "job": "i work as a {v}",
}

ENTAIL_TEMPLATES = {
    "pet": "i own a {v}",
    "city": "my home is in {v}",
    "job": "i am a {v}",
}

QUERY_TEMPLATES = {
    "pet": ["do you have a pet ?", "any pet at home ?"],
    "city": ["where do you live ?", "which city is home ?"],
    "job": ["what do you do for work ?", "what is your job ?"],
}

RESPONSE_TEMPLATES = {
    "pet": "yes i have a {v}",
    "city": "i live in {v}",
    "job": "i work as a {v}",
}

NEUTRAL_SENTENCES = [
    "the weather is nice today",
    "tomorrow will be a busy day",
    "the train was late again",
]

CHITCHAT = [
    ("hello there !", "hello nice to meet you"),
    ("how are you ?", "i am fine thank you"),
    ("see you later !", "see you next time"),
]


def _swap_value(rng: np.random.Generator, slot: str, value: str) -> str:
    others = [v for v in WORLD[slot] if v != value]
    return others[rng.integers(len(others))]


def synth_generate(num_profiles: int, seed: int, dense_per_profile: int = 1):
    """Build a dialogue corpus, an inference corpus, and held-out eval tuples.

    Profiles assign one value per slot; roughly a fifth are held out and
    yield the eval tuples (each query paired with its entailed response and
    a value-swapped contradiction, over the full persona).

    The dialogue corpus is deliberately persona-sparse: a slot question is
    always asked while the queried slot's own sentence is absent from that
    example's persona, and the answer value is drawn uniformly.  Dialogue
    data therefore teaches templates, values, and chitchat, but carries no
    signal tying an answer to the persona and never contradicts it either.

    The inference corpus carries all of the consistency signal, one third
    each of entail, neutral, contradict: entailment keeps the value and may
    swap the sentence template, a contradiction swaps exactly one value,
    and neutral hypotheses are unrelated sentences.  Entailed and
    contradicted hypotheses share one template pool, so the value relation
    is the only signal separating those labels.
    """
    if num_profiles < 2:
        raise ValueError("need at least 2 profiles")
    rng = np.random.default_rng(seed)
    slots = list(WORLD)
    n_holdout = max(1, num_profiles // 5)
    profiles = [{s: WORLD[s][rng.integers(len(WORLD[s]))] for s in slots}
                for _ in range(num_profiles)]
    train_profiles = profiles[: num_profiles - n_holdout]
    holdout_profiles = profiles[num_profiles - n_holdout:]

    def persona_sentences(profile):
        return [PERSONA_TEMPLATES[s].format(v=profile[s]) for s in slots]

    def shuffled(sentences):
        return [sentences[i] for i in rng.permutation(len(sentences))]

    dialogue = []
    for profile in train_profiles:
        sentences = persona_sentences(profile)
        for slot in slots:
            others = [PERSONA_TEMPLATES[s].format(v=profile[s])
                      for s in slots if s != slot]
            for query in QUERY_TEMPLATES[slot]:
                value = WORLD[slot][rng.integers(len(WORLD[slot]))]
                keep = shuffled(others)[: 1 + rng.integers(len(others))]
                dialogue.append(DialogueExample(
                    personas=keep,
                    query=query,
                    response=RESPONSE_TEMPLATES[slot].format(v=value)))
        # A few persona-dense examples per profile: the full persona is
        # present and the answer agrees with it.
        for _ in range(dense_per_profile):
            dense_slot = slots[rng.integers(len(slots))]
            dense_query = QUERY_TEMPLATES[dense_slot][
                rng.integers(len(QUERY_TEMPLATES[dense_slot]))]
            dialogue.append(DialogueExample(
                personas=shuffled(sentences),
                query=dense_query,
                response=RESPONSE_TEMPLATES[dense_slot].format(v=profile[dense_slot])))
        for query, response in CHITCHAT:
            dialogue.append(DialogueExample(
                personas=shuffled(sentences), query=query, response=response))

    hypothesis_pool = {
        s: [PERSONA_TEMPLATES[s], ENTAIL_TEMPLATES[s], RESPONSE_TEMPLATES[s]]
        for s in slots
    }

    def premise_for(slot, value):
        """Synthetic whole-persona premise holding `value` at `slot`.

        Premises always carry all three slots in shuffled order, so the
        only way to judge a hypothesis is to find the sentence whose slot
        matches; no fixed position ever gives the answer away."""
        profile = {s: WORLD[s][rng.integers(len(WORLD[s]))] for s in slots}
        profile[slot] = value
        return " ".join(shuffled(persona_sentences(profile)))

    inference = []
    for _ in range(2 * len(train_profiles)):
        for slot in slots:
            value = WORLD[slot][rng.integers(len(WORLD[slot]))]
            pool = hypothesis_pool[slot]
            inference.append(InferencePair(
                premise=premise_for(slot, value),
                hypothesis=pool[rng.integers(len(pool))].format(v=value),
                label="entail"))
            inference.append(InferencePair(
                premise=premise_for(slot, value),
                hypothesis=pool[rng.integers(len(pool))].format(
                    v=_swap_value(rng, slot, value)),
                label="contradict"))
            if rng.random() < 0.5:
                other = slots[rng.integers(len(slots))]
                while other == slot:
                    other = slots[rng.integers(len(slots))]
                neutral = PERSONA_TEMPLATES[other].format(
                    v=WORLD[other][rng.integers(len(WORLD[other]))])
            else:
                neutral = NEUTRAL_SENTENCES[rng.integers(len(NEUTRAL_SENTENCES))]
            inference.append(InferencePair(
                premise=PERSONA_TEMPLATES[slot].format(v=value),
                hypothesis=neutral, label="neutral"))

    eval_tuples = []
    for profile in holdout_profiles:
        sentences = persona_sentences(profile)
        for slot in slots:
            value = profile[slot]
            for query in QUERY_TEMPLATES[slot]:
                eval_tuples.append(EvalTuple(
                    personas=shuffled(sentences),
                    query=query,
                    entailed=RESPONSE_TEMPLATES[slot].format(v=value),
                    contradicted=RESPONSE_TEMPLATES[slot].format(
                        v=_swap_value(rng, slot, value))))

    return dialogue, inference, eval_tuples


def write_jsonl(path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def dialogue_to_dict(ex: DialogueExample) -> dict:
    return {"personas": ex.personas, "query": ex.query, "response": ex.response}


def inference_to_dict(pair: InferencePair) -> dict:
    return {"premise": pair.premise, "hypothesis": pair.hypothesis, "label": pair.label}


def eval_tuple_to_dict(t: EvalTuple) -> dict:
    return {"personas": t.personas, "query": t.query,
            "entailed": t.entailed, "contradicted": t.contradicted}
