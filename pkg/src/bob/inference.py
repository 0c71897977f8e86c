"""Two-stage response generation and teacher-forced scoring.

Stage 1 decodes a draft autoregressively (greedy or top-k).  Stage 2 hands
the draft's hidden states and the persona to the refinement decoder, whose
per-position argmax is the final response.  Both surfaces are returned so
the refinement effect stays observable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bob import tensor as T
from bob.data import (BOS, EOS, PAD, DialogueBatch, Vocab, build_input,
                      _positions_like)
from bob.model import BobModel, EncodedBatch


@dataclass
class DecodeConfig:
    strategy: str = "greedy"      # greedy | topk
    k: int = 5
    max_new_tokens: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in ("greedy", "topk"):
            raise ValueError("strategy must be 'greedy' or 'topk'")
        if self.strategy == "topk" and self.k < 1:
            raise ValueError("k must be >= 1")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")


def _single_example_batch(vocab: Vocab, personas: list[str], query: str,
                          config) -> DialogueBatch:
    persona_ids = [vocab.encode(p) for p in personas]
    query_ids = vocab.encode(query)
    ids, types, pos, pad = build_input(persona_ids, query_ids, config)
    n_persona = len(ids) - len(query_ids) - 1
    persona_row = ids[:n_persona] if n_persona else np.array([PAD], dtype=np.int64)
    persona_pad = np.zeros((1, len(persona_row)), dtype=bool)
    if n_persona == 0:
        persona_pad[:] = True
    return DialogueBatch(
        enc_ids=ids[None, :], enc_types=types[None, :], enc_pos=pos[None, :],
        enc_pad=pad[None, :],
        persona_ids=persona_row[None, :],
        persona_pos=_positions_like(persona_pad),
        persona_pad=persona_pad,
        dec_in=np.array([[BOS]], dtype=np.int64),
        labels=np.array([[EOS]], dtype=np.int64),
        dec_pad=np.zeros((1, 1), dtype=bool))


def _pick_token(logits_row: np.ndarray, decode: DecodeConfig,
                rng: np.random.Generator) -> int:
    if decode.strategy == "greedy":
        return int(logits_row.argmax())
    k = min(decode.k, logits_row.shape[0])
    top = np.argpartition(logits_row, -k)[-k:]
    z = logits_row[top] - logits_row[top].max()
    p = np.exp(z)
    p /= p.sum()
    return int(top[rng.choice(k, p=p)])


def _decode_step(model: BobModel, enc: EncodedBatch, prefix: list[int]):
    dec_in = np.array([prefix], dtype=np.int64)
    dec_pad = np.zeros((1, len(prefix)), dtype=bool)
    return model.decode_d1(dec_in, dec_pad, enc)


def generate(model: BobModel, vocab: Vocab, personas: list[str], query: str,
             decode: DecodeConfig | None = None) -> tuple[str, str]:
    """Return (draft, final) response strings for one persona/query pair."""
    if model.has_invalid_parameters():
        raise RuntimeError("model parameters contain NaN/Inf; refusing to generate")
    decode = decode or DecodeConfig()
    was_training = model.training
    model.eval()
    try:
        rng = np.random.default_rng(decode.seed)
        batch = _single_example_batch(vocab, personas, query, model.config)
        enc = model.encode_batch(batch)

        prefix = [BOS]
        for _ in range(decode.max_new_tokens):
            _, logits = _decode_step(model, enc, prefix)
            token = _pick_token(logits.data[0, -1], decode, rng)
            prefix.append(token)
            if token == EOS:
                break

        r1, _ = _decode_step(model, enc, prefix)
        dec_pad = np.zeros((1, len(prefix)), dtype=bool)
        _, logits2 = model.decode_d2(enc.persona, enc.persona_pad, r1, dec_pad)
        # Final token i+1 is the argmax at position i; the draft fixes the length.
        final_ids = logits2.data[0, : len(prefix) - 1].argmax(axis=-1).tolist()

        draft = vocab.decode(_strip_eos(prefix[1:]))
        final = vocab.decode(_strip_eos(final_ids))
        return draft, final
    finally:
        model.train(was_training)


def _strip_eos(ids: list[int]) -> list[int]:
    return ids[: ids.index(EOS)] if EOS in ids else ids


def score_response(model: BobModel, vocab: Vocab, personas: list[str],
                   query: str, response: str):
    """Teacher-forced per-token log-probabilities of `response`.

    Returns (draft_view, refined_view) as float arrays over the response
    tokens plus the end-of-sequence token.  Deterministic; dropout off.
    """
    if not response:
        raise ValueError("response must be non-empty")
    was_training = model.training
    model.eval()
    try:
        batch = _single_example_batch(vocab, personas, query, model.config)
        response_ids = vocab.encode(response)[: model.config.max_len - 2]
        dec_in = np.array([[BOS] + response_ids], dtype=np.int64)
        labels = np.array(response_ids + [EOS], dtype=np.int64)
        dec_pad = np.zeros((1, dec_in.shape[1]), dtype=bool)

        enc = model.encode_batch(batch)
        r1, logits1 = model.decode_d1(dec_in, dec_pad, enc)
        _, logits2 = model.decode_d2(enc.persona, enc.persona_pad, r1, dec_pad)

        rows = np.arange(labels.shape[0])
        lp1 = T.log_softmax(logits1, axis=-1).data[0][rows, labels]
        lp2 = T.log_softmax(logits2, axis=-1).data[0][rows, labels]
        return lp1, lp2
    finally:
        model.train(was_training)
