"""The three transformer stacks: encoder, draft decoder, refinement decoder.

Sublayers are pre-norm, x + Sublayer(LN(x)), with one LayerNorm closing
each stack (skipped for zero-layer stacks so the output is the input):

    encoder layer    x  = x + SelfAttn(LN(x));  x = x + FFN(LN(x))
    draft (d1) layer x  = x + CausalSelfAttn(LN(x)); x = x + CrossAttn(LN(x), H);
                     x  = x + FFN(LN(x))
    refine (d2) layer u = r + Attn(LN(r), P); u = u + FFN(LN(u));
                     v  = u + Attn(LN(u), R1); r = v + FFN(LN(v))

Pre-norm keeps the residual stream additive: a token's embedding survives
verbatim inside the draft states R1, so the refinement decoder sees tokens
in one geometry whether they arrive as raw embeddings (its inference-pair
training path) or through the draft decoder.

d2 attends bidirectionally and its signature admits only the persona
representations and the draft states R1, never the query.  The parameter
set splits into theta (embeddings, encoder, d1, d1 projection) and gamma
(d2, d2 projection); d2 reads the shared embedding table without gradient
flow, so understanding-only updates touch gamma alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from bob import tensor as T
from bob.tensor import Tensor

ABLATIONS = ("full", "no_ul", "e_d1", "e_only")


@dataclass
class ModelConfig:
    num_layers: int = 2
    hidden_size: int = 64
    num_heads: int = 4
    ffn_size: int = 128
    vocab_size: int = 128
    max_len: int = 48
    dropout: float = 0.1
    ablation: str = "full"
    activation: str = "relu"          # relu | gelu
    tie_embeddings: bool = True
    d2_causal: bool = False           # causal mask on the refine-over-R1 attention
    persona_from_encoder: bool = False

    def __post_init__(self):
        if self.hidden_size % self.num_heads != 0:
            raise ValueError(
                f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}")
        if self.num_layers < 0:
            raise ValueError("num_layers must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        if self.activation not in ("relu", "gelu"):
            raise ValueError("activation must be 'relu' or 'gelu'")

    @classmethod
    def bert_base(cls, vocab_size: int = 30522, **overrides) -> "ModelConfig":
        """Full-scale preset: 12 layers, hidden 768.  Not a desk default."""
        args = dict(num_layers=12, hidden_size=768, num_heads=12, ffn_size=3072,
                    vocab_size=vocab_size, max_len=512)
        args.update(overrides)
        return cls(**args)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncodedBatch:
    h: Tensor                  # [b, l, hidden]
    src_pad: np.ndarray        # [b, l] True at padding
    persona: Tensor            # [b, lp, hidden], gradient-free from d2's side
    persona_pad: np.ndarray    # [b, lp]


class _ParamStore:
    def __init__(self, rng: np.random.Generator, std: float):
        self.rng = rng
        self.std = std
        self.params: dict[str, Tensor] = {}

    def _register(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name}")
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        return t

    def normal(self, name: str, shape) -> Tensor:
        return self._register(name, self.rng.normal(0.0, self.std, size=shape))

    def zeros(self, name: str, shape) -> Tensor:
        return self._register(name, np.zeros(shape))

    def ones(self, name: str, shape) -> Tensor:
        return self._register(name, np.ones(shape))


class _Attn:
    """Projection weights for one multi-head attention block.

    Query/key/value projections are bias-free; only the output projection
    carries a bias, so a zeroed key/value source contributes exactly nothing.
    """

    def __init__(self, store: _ParamStore, prefix: str, d: int):
        self.wq = store.normal(f"{prefix}.wq", (d, d))
        self.wk = store.normal(f"{prefix}.wk", (d, d))
        self.wv = store.normal(f"{prefix}.wv", (d, d))
        self.wo = store.normal(f"{prefix}.wo", (d, d))
        self.bo = store.zeros(f"{prefix}.bo", (d,))


class _Ffn:
    def __init__(self, store: _ParamStore, prefix: str, d: int, f: int):
        self.w1 = store.normal(f"{prefix}.w1", (d, f))
        self.b1 = store.zeros(f"{prefix}.b1", (f,))
        self.w2 = store.normal(f"{prefix}.w2", (f, d))
        self.b2 = store.zeros(f"{prefix}.b2", (d,))


class _LayerNorm:
    def __init__(self, store: _ParamStore, prefix: str, d: int):
        self.gain = store.ones(f"{prefix}.gain", (d,))
        self.bias = store.zeros(f"{prefix}.bias", (d,))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


def multi_head_attention(query: Tensor, key: Tensor, value: Tensor,
                         mask, params: _Attn, num_heads: int) -> Tensor:
    """softmax(QK^T / sqrt(d_head) + mask) V per head, concat, project.

    `mask` is a boolean array broadcastable to [b, heads, tq, tk]; True
    means no attention.
    """
    b, tq, d = query.shape
    tk = key.shape[1]
    dh = d // num_heads

    def split(x: Tensor, t: int) -> Tensor:
        return T.transpose(T.reshape(x, (b, t, num_heads, dh)), (0, 2, 1, 3))

    q = split(T.matmul(query, params.wq), tq)
    k = split(T.matmul(key, params.wk), tk)
    v = split(T.matmul(value, params.wv), tk)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    if mask is not None:
        scores = T.masked_fill(scores, mask)
    attn = T.softmax(scores, axis=-1)
    ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (b, tq, d))
    return T.add(T.matmul(ctx, params.wo), params.bo)


def causal_mask(t: int) -> np.ndarray:
    """[1, 1, t, t] boolean; True above the diagonal (future positions)."""
    return np.triu(np.ones((1, 1, t, t), dtype=bool), k=1)


def key_padding_mask(pad: np.ndarray) -> np.ndarray:
    """[b, l] padding flags -> [b, 1, 1, l] attention mask."""
    return pad[:, None, None, :]


class _EncoderLayer:
    def __init__(self, store, prefix, config):
        d, f = config.hidden_size, config.ffn_size
        self.attn = _Attn(store, f"{prefix}.attn", d)
        self.ln1 = _LayerNorm(store, f"{prefix}.ln1", d)
        self.ffn = _Ffn(store, f"{prefix}.ffn", d, f)
        self.ln2 = _LayerNorm(store, f"{prefix}.ln2", d)


class _D1Layer:
    def __init__(self, store, prefix, config):
        d, f = config.hidden_size, config.ffn_size
        self.self_attn = _Attn(store, f"{prefix}.self_attn", d)
        self.ln1 = _LayerNorm(store, f"{prefix}.ln1", d)
        self.cross_attn = _Attn(store, f"{prefix}.cross_attn", d)
        self.ln2 = _LayerNorm(store, f"{prefix}.ln2", d)
        self.ffn = _Ffn(store, f"{prefix}.ffn", d, f)
        self.ln3 = _LayerNorm(store, f"{prefix}.ln3", d)


class _D2Layer:
    def __init__(self, store, prefix, config):
        d, f = config.hidden_size, config.ffn_size
        self.persona_attn = _Attn(store, f"{prefix}.persona_attn", d)
        self.ln1 = _LayerNorm(store, f"{prefix}.ln1", d)
        self.persona_ffn = _Ffn(store, f"{prefix}.persona_ffn", d, f)
        self.ln2 = _LayerNorm(store, f"{prefix}.ln2", d)
        self.memory_attn = _Attn(store, f"{prefix}.memory_attn", d)
        self.ln3 = _LayerNorm(store, f"{prefix}.ln3", d)
        self.memory_ffn = _Ffn(store, f"{prefix}.memory_ffn", d, f)
        self.ln4 = _LayerNorm(store, f"{prefix}.ln4", d)


class BobModel:
    """Encoder + draft decoder (theta) and refinement decoder (gamma)."""

    INIT_STD = 0.02

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        store = _ParamStore(np.random.default_rng(seed), self.INIT_STD)
        d = config.hidden_size
        self.tok_emb = store.normal("theta.embeddings.token", (config.vocab_size, d))
        self.type_emb = store.normal("theta.embeddings.type", (2, d))
        self.pos_emb = store.normal("theta.embeddings.position", (config.max_len, d))
        # Embedding LayerNorm keeps every stack's input at the same scale as
        # the post-norm hidden states, so the refinement decoder sees draft
        # states and raw embeddings in one distribution.
        self.emb_ln = _LayerNorm(store, "theta.embeddings.ln", d)
        self.encoder = [_EncoderLayer(store, f"theta.encoder.{i}", config)
                        for i in range(config.num_layers)]
        self.d1 = [_D1Layer(store, f"theta.d1.{i}", config)
                   for i in range(config.num_layers)]
        self.d2 = [_D2Layer(store, f"gamma.d2.{i}", config)
                   for i in range(config.num_layers)]
        if config.num_layers > 0:
            self.enc_final_ln = _LayerNorm(store, "theta.encoder.final_ln", d)
            self.d1_final_ln = _LayerNorm(store, "theta.d1.final_ln", d)
            self.d2_final_ln = _LayerNorm(store, "gamma.d2.final_ln", d)
        if not config.tie_embeddings:
            self.d1_proj_w = store.normal("theta.d1_proj.w", (d, config.vocab_size))
            self.d1_proj_b = store.zeros("theta.d1_proj.b", (config.vocab_size,))
            self.d2_proj_w = store.normal("gamma.d2_proj.w", (d, config.vocab_size))
            self.d2_proj_b = store.zeros("gamma.d2_proj.b", (config.vocab_size,))
        self.params = store.params
        self.rng = np.random.default_rng(seed + 1)  # dropout / masking stream
        self.training = True

    # -- parameter bookkeeping ------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params

    def theta_parameters(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if n.startswith("theta.")}

    def gamma_parameters(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if n.startswith("gamma.")}

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def train(self, flag: bool = True) -> "BobModel":
        self.training = flag
        return self

    def eval(self) -> "BobModel":
        return self.train(False)

    def has_invalid_parameters(self) -> bool:
        return any(not np.isfinite(p.data).all() for p in self.params.values())

    # -- shared pieces ----------------------------------------------------

    def _drop(self, x: Tensor) -> Tensor:
        if self.training and self.config.dropout > 0.0:
            return T.dropout(x, self.config.dropout, self.rng)
        return x

    def embed(self, ids, type_ids, pos_ids, detached: bool = False,
              drop: bool = True) -> Tensor:
        tok = self.tok_emb.detach() if detached else self.tok_emb
        typ = self.type_emb.detach() if detached else self.type_emb
        pos = self.pos_emb.detach() if detached else self.pos_emb
        gain = self.emb_ln.gain.detach() if detached else self.emb_ln.gain
        bias = self.emb_ln.bias.detach() if detached else self.emb_ln.bias
        e = T.add(T.add(T.embedding_lookup(tok, ids),
                        T.embedding_lookup(typ, type_ids)),
                  T.embedding_lookup(pos, pos_ids))
        e = T.layer_norm(e, gain, bias)
        return self._drop(e) if drop else e

    def _ffn(self, ffn: _Ffn, x: Tensor) -> Tensor:
        act = T.relu if self.config.activation == "relu" else T.gelu
        h = act(T.add(T.matmul(x, ffn.w1), ffn.b1))
        return T.add(T.matmul(h, ffn.w2), ffn.b2)

    def _residual(self, x: Tensor, out: Tensor) -> Tensor:
        return T.add(x, self._drop(out))

    def project_d1(self, h: Tensor) -> Tensor:
        if self.config.tie_embeddings:
            return T.matmul(h, T.transpose(self.tok_emb, (1, 0)))
        return T.add(T.matmul(h, self.d1_proj_w), self.d1_proj_b)

    def project_d2(self, h: Tensor) -> Tensor:
        # Tied projection reads the theta-owned table without gradient flow.
        if self.config.tie_embeddings:
            return T.matmul(h, T.transpose(self.tok_emb.detach(), (1, 0)))
        return T.add(T.matmul(h, self.d2_proj_w), self.d2_proj_b)

    # -- encoder ----------------------------------------------------------

    def encode(self, ids, type_ids, pos_ids, pad: np.ndarray) -> Tensor:
        """Full bidirectional self-attention over persona + query."""
        h = self.embed(ids, type_ids, pos_ids)
        mask = key_padding_mask(pad)
        for layer in self.encoder:
            n = layer.ln1(h)
            h = self._residual(h, multi_head_attention(
                n, n, n, mask, layer.attn, self.config.num_heads))
            h = self._residual(h, self._ffn(layer.ffn, layer.ln2(h)))
        if self.encoder:
            h = self.enc_final_ln(h)
        return h

    def persona_repr(self, batch) -> Tensor:
        """Persona-side input to the refinement decoder, gradient-free.

        Default: raw embeddings of the persona tokens (type 0).  Option:
        the encoder-output slice over persona positions.
        """
        zeros = np.zeros_like(batch.persona_ids)
        return self.embed(batch.persona_ids, zeros, batch.persona_pos,
                          detached=True, drop=False)

    def encode_batch(self, batch) -> EncodedBatch:
        h = self.encode(batch.enc_ids, batch.enc_types, batch.enc_pos, batch.enc_pad)
        if self.config.persona_from_encoder:
            lp = batch.persona_ids.shape[1]
            persona = T.narrow(h, 1, 0, lp).detach()
        else:
            persona = self.persona_repr(batch)
        return EncodedBatch(h=h, src_pad=batch.enc_pad,
                            persona=persona, persona_pad=batch.persona_pad)

    # -- draft decoder ----------------------------------------------------

    def decode_d1(self, dec_ids, dec_pad: np.ndarray, enc: EncodedBatch):
        """Causal self-attention over the target prefix plus cross-attention
        into the encoder states.  Returns (r1, logits)."""
        b, t = dec_ids.shape
        pos = np.tile(np.arange(t, dtype=np.int64), (b, 1))
        types = np.ones_like(dec_ids)
        r = self.embed(dec_ids, types, pos)
        self_mask = causal_mask(t) | key_padding_mask(dec_pad)
        cross_mask = key_padding_mask(enc.src_pad)
        for layer in self.d1:
            n = layer.ln1(r)
            r = self._residual(r, multi_head_attention(
                n, n, n, self_mask, layer.self_attn, self.config.num_heads))
            r = self._residual(r, multi_head_attention(
                layer.ln2(r), enc.h, enc.h, cross_mask, layer.cross_attn,
                self.config.num_heads))
            r = self._residual(r, self._ffn(layer.ffn, layer.ln3(r)))
        if self.d1:
            r = self.d1_final_ln(r)
        return r, self.project_d1(r)

    # -- refinement decoder ------------------------------------------------

    def decode_d2(self, persona: Tensor, persona_pad: np.ndarray,
                  r1: Tensor, r1_pad: np.ndarray):
        """Refine draft states against the persona; never reads the query.

        Attention is bidirectional over both inputs (an optional causal
        variant masks the attention over r1).  Returns (r2, logits)."""
        r = r1
        p_mask = key_padding_mask(persona_pad)
        m_mask = key_padding_mask(r1_pad)
        if self.config.d2_causal:
            m_mask = m_mask | causal_mask(r1.shape[1])
        for layer in self.d2:
            u = self._residual(r, multi_head_attention(
                layer.ln1(r), persona, persona, p_mask, layer.persona_attn,
                self.config.num_heads))
            u = self._residual(u, self._ffn(layer.persona_ffn, layer.ln2(u)))
            v = self._residual(u, multi_head_attention(
                layer.ln3(u), r1, r1, m_mask, layer.memory_attn,
                self.config.num_heads))
            r = self._residual(v, self._ffn(layer.memory_ffn, layer.ln4(v)))
        out = self.d2_final_ln(r) if self.d2 else r
        return out, self.project_d2(out)
