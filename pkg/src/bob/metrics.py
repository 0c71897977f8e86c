"""Evaluation suite: perplexity, Distinct-1/2, delta-perplexity, C.Score.

The consistency referee is pluggable: anything callable as
oracle(response, persona) -> -1 | 0 | 1 works.  A rule-based oracle covers
the synthetic closed world; SubprocessOracle adapts an external referee
speaking a tab-separated line protocol.
"""

from __future__ import annotations

import shlex
import subprocess
from dataclasses import dataclass, asdict

import numpy as np

from bob.data import WORLD, EvalTuple, Vocab, tokenize
from bob.inference import score_response
from bob.model import BobModel


@dataclass
class EvalReport:
    ppl: float
    dist1: float
    dist2: float
    p_ent: float
    p_ctd: float
    delta_p: float
    c_score: float
    counts: dict

    def __post_init__(self):
        if abs(self.delta_p - (self.p_ctd - self.p_ent)) > 1e-9:
            raise ValueError("delta_p must equal p_ctd - p_ent")
        for name in ("dist1", "dist2"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# consistency oracles


class RuleNliOracle:
    """Referee for the synthetic closed world.

    The persona sentence names one slot value; the response entails it when
    it mentions that value, contradicts it when it mentions a different
    value of the same slot (contradiction wins if both appear), and is
    irrelevant otherwise.
    """

    def __init__(self, world: dict[str, list[str]] | None = None):
        self.value_slot = {}
        for slot, values in (world or WORLD).items():
            for value in values:
                self.value_slot[value] = slot

    def _slot_values(self, text: str) -> dict[str, set]:
        found: dict[str, set] = {}
        for token in tokenize(text):
            slot = self.value_slot.get(token)
            if slot is not None:
                found.setdefault(slot, set()).add(token)
        return found

    def __call__(self, response: str, persona: str) -> int:
        persona_slots = self._slot_values(persona)
        if not persona_slots:
            return 0
        response_slots = self._slot_values(response)
        verdict = 0
        for slot, values in persona_slots.items():
            mentioned = response_slots.get(slot)
            if not mentioned:
                continue
            if mentioned - values:
                return -1
            verdict = 1
        return verdict


class SubprocessOracle:
    """External referee over a line protocol: write "persona\\thypothesis",
    read back one of -1, 0, 1 per line."""

    def __init__(self, command: str):
        self.proc = subprocess.Popen(
            shlex.split(command), stdin=subprocess.PIPE, stdout=subprocess.PIPE,
            text=True, bufsize=1)

    def __call__(self, response: str, persona: str) -> int:
        self.proc.stdin.write(f"{persona}\t{response}\n")
        self.proc.stdin.flush()
        verdict = int(self.proc.stdout.readline().strip())
        if verdict not in (-1, 0, 1):
            raise ValueError(f"oracle returned {verdict}, expected -1, 0, or 1")
        return verdict

    def close(self) -> None:
        if self.proc.stdin:
            self.proc.stdin.close()
        self.proc.wait(timeout=10)


# ---------------------------------------------------------------------------
# metrics


def perplexity(model: BobModel, vocab: Vocab, examples, view: str = "d2") -> float:
    """exp(total NLL / token count) over gold responses, teacher-forced
    through the full path.  The refined (d2) view is the primary one."""
    if not examples:
        raise ValueError("perplexity needs a non-empty corpus")
    total, count = 0.0, 0
    for ex in examples:
        lp1, lp2 = score_response(model, vocab, ex.personas, ex.query, ex.response)
        lp = lp2 if view == "d2" else lp1
        total -= lp.sum()
        count += lp.shape[0]
    return float(np.exp(total / count))


def distinct_n(responses: list[list[str]], n: int,
               per_response: bool = False) -> float:
    """Unique n-grams divided by total n-grams, corpus-level by default."""
    def ngrams(tokens):
        return [tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1)]

    if per_response:
        ratios = []
        for tokens in responses:
            grams = ngrams(tokens)
            if grams:
                ratios.append(len(set(grams)) / len(grams))
        if not ratios:
            raise ValueError(f"no {n}-grams in corpus; distinct-{n} undefined")
        return float(np.mean(ratios))

    grams = [g for tokens in responses for g in ngrams(tokens)]
    if not grams:
        raise ValueError(f"no {n}-grams in corpus; distinct-{n} undefined")
    return len(set(grams)) / len(grams)


def delta_from_buckets(p_ent: float, p_ctd: float) -> float:
    """Contradicted-bucket perplexity minus entailed-bucket perplexity."""
    return p_ctd - p_ent


def delta_p(model: BobModel, vocab: Vocab, entailed, contradicted,
            view: str = "d2"):
    """(p_ent, p_ctd, delta) over {personas, query, response} tuples."""
    if not entailed or not contradicted:
        raise ValueError("both buckets must be non-empty")

    def bucket_ppl(tuples):
        total, count = 0.0, 0
        for personas, query, response in tuples:
            lp1, lp2 = score_response(model, vocab, personas, query, response)
            lp = lp2 if view == "d2" else lp1
            total -= lp.sum()
            count += lp.shape[0]
        return float(np.exp(total / count))

    p_ent = bucket_ppl(entailed)
    p_ctd = bucket_ppl(contradicted)
    return p_ent, p_ctd, delta_from_buckets(p_ent, p_ctd)


def c_score(responses_with_personas, oracle) -> float:
    """Mean over responses of the summed referee verdicts against each
    persona sentence."""
    scores = [sum(oracle(response, p) for p in personas)
              for response, personas in responses_with_personas]
    return float(np.mean(scores)) if scores else 0.0


def eval_buckets(tuples: list[EvalTuple]):
    """Split eval tuples into (entailed, contradicted) scoring triples."""
    entailed = [(t.personas, t.query, t.entailed) for t in tuples]
    contradicted = [(t.personas, t.query, t.contradicted) for t in tuples]
    return entailed, contradicted


def mean_token_probability(model: BobModel, vocab: Vocab, tuples,
                           view: str = "d2") -> float:
    """Mean per-token probability over {personas, query, response} triples."""
    probs = []
    for personas, query, response in tuples:
        lp1, lp2 = score_response(model, vocab, personas, query, response)
        lp = lp2 if view == "d2" else lp1
        probs.extend(np.exp(lp).tolist())
    return float(np.mean(probs))
