"""From-scratch causal text model: byte-level tokenizer, compression of a
text observation into a latent-sized summary vector, and latent-conditioned
text likelihood/generation. One parameter set serves encoding and decoding.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Node
from .nn import EmbeddingTable, Linear, MLP, ParamRegistry

N_BYTES = 256
BOS = 256
EOS = 257
PAD = 258
NULLTEXT = 259
N_SPECIALS = 4  # BOS, EOS, PAD, NULLTEXT; summary tokens follow


def vocab_size(n_summary: int) -> int:
    return N_BYTES + N_SPECIALS + n_summary


def summary_token(k: int) -> int:
    """Token id of the k-th summary slot (0-based)."""
    return N_BYTES + N_SPECIALS + k


def tokenize(text: str) -> list[int]:
    """UTF-8 bytes wrapped in BOS/EOS; total on any string."""
    return [BOS] + list(text.encode("utf-8")) + [EOS]


def detokenize(ids) -> str:
    """Inverse of tokenize; non-byte tokens are dropped."""
    data = bytes(i for i in ids if 0 <= i < N_BYTES)
    return data.decode("utf-8", errors="replace")


class TextModel:
    """Decoder-only causal transformer, depth 2, width 64, 2 heads by default.

    Summary tokens are appended at the end of the input so causal attention
    lets them read the whole text; their final hidden states are concatenated
    and projected down to the latent dimension. For likelihood/generation the
    latent state is projected to a block of prefix embeddings prepended to
    the token sequence. The output head is tied to the embedding table.
    """

    def __init__(self, registry: ParamRegistry, latent_dim: int,
                 d_model: int = 64, n_heads: int = 2, depth: int = 2,
                 ff_dim: int = 128, n_summary: int = 8, n_prefix: int = 8,
                 max_seq_len: int = 256, summary_hidden: int = 64):
        if d_model % n_heads != 0:
            raise ContractError(
                f"text model width {d_model} not divisible by {n_heads} heads"
            )
        self.d_model = d_model
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.depth = depth
        self.n_summary = n_summary
        self.n_prefix = n_prefix
        self.max_seq_len = max_seq_len
        self.latent_dim = latent_dim
        self.vocab = vocab_size(n_summary)

        self.tok_emb = EmbeddingTable(registry, "text.tok_emb", self.vocab, d_model)
        n_pos = max_seq_len + n_summary + n_prefix
        self.pos_emb = EmbeddingTable(registry, "text.pos_emb", n_pos, d_model)
        self.blocks = []
        for i in range(depth):
            base = f"text.block{i}"
            self.blocks.append({
                "wq": Linear(registry, f"{base}.wq", d_model, d_model),
                "wk": Linear(registry, f"{base}.wk", d_model, d_model),
                "wv": Linear(registry, f"{base}.wv", d_model, d_model),
                "wo": Linear(registry, f"{base}.wo", d_model, d_model),
                "ff1": Linear(registry, f"{base}.ff1", d_model, ff_dim),
                "ff2": Linear(registry, f"{base}.ff2", ff_dim, d_model),
            })
        self.prefix_proj = Linear(registry, "text.prefix_proj",
                                  latent_dim, n_prefix * d_model)
        self.summary_mlp = MLP(registry, "text.summary_mlp",
                               [n_summary * d_model, summary_hidden, latent_dim])
        self._masks: dict[tuple[int, str], np.ndarray] = {}

    # -- backbone ----------------------------------------------------------

    def _causal_mask(self, t: int, dtype) -> np.ndarray:
        key = (t, np.dtype(dtype).str)
        mask = self._masks.get(key)
        if mask is None:
            mask = np.triu(np.full((t, t), -1e9, dtype=dtype), k=1)
            self._masks[key] = mask
        return mask

    def _attend(self, block, h: Node, mask: Node) -> Node:
        q, k, v = block["wq"](h), block["wk"](h), block["wv"](h)
        scale = 1.0 / math.sqrt(self.head_dim)
        heads = []
        for i in range(self.n_heads):
            lo, hi = i * self.head_dim, (i + 1) * self.head_dim
            qi = ad.slice_cols(q, lo, hi)
            ki = ad.slice_cols(k, lo, hi)
            vi = ad.slice_cols(v, lo, hi)
            scores = ad.add(ad.scale(ad.matmul(qi, ad.transpose(ki)), scale), mask)
            heads.append(ad.matmul(ad.softmax(scores), vi))
        return block["wo"](ad.concat(heads, axis=1))

    def _backbone(self, x: Node) -> Node:
        """Pre-norm causal blocks plus a final normalization; x is (T, d)."""
        t = x.value.shape[0]
        mask = ad.constant(self._causal_mask(t, x.value.dtype))
        for block in self.blocks:
            x = ad.add(x, self._attend(block, ad.rmsnorm(x), mask))
            ff = block["ff2"](ad.relu(block["ff1"](ad.rmsnorm(x))))
            x = ad.add(x, ff)
        return ad.rmsnorm(x)

    def _embed(self, ids) -> Node:
        rows = self.tok_emb.lookup(ids)
        pos = ad.slice_rows(self.pos_emb.rows, 0, len(ids))
        return ad.add(rows, pos)

    def _truncate(self, ids) -> list[int]:
        ids = list(ids)
        if not ids:
            ids = [BOS, EOS]
        if len(ids) > self.max_seq_len:
            ids = ids[-self.max_seq_len:]
        return ids

    # -- encoding ----------------------------------------------------------

    def encode_summary(self, ids) -> Node:
        """Compress a token sequence into a latent-sized summary vector."""
        ids = self._truncate(ids) + [summary_token(k) for k in range(self.n_summary)]
        out = self._backbone(self._embed(ids))
        t = len(ids)
        sum_h = ad.slice_rows(out, t - self.n_summary, t)
        flat = ad.reshape(sum_h, (self.n_summary * self.d_model,))
        return self.summary_mlp(flat)

    def null_summary(self) -> Node:
        """Learned summary used when a timestep carries no text."""
        return self.encode_summary([BOS, NULLTEXT, EOS])

    # -- decoding ----------------------------------------------------------

    def _prefix_rows(self, x_hat: Node) -> Node:
        flat = self.prefix_proj(x_hat)
        return ad.reshape(flat, (self.n_prefix, self.d_model))

    def _sequence(self, x_hat: Node, input_ids) -> Node:
        prefix = self._prefix_rows(x_hat)
        tok = self._embed_with_offset(input_ids)
        return self._backbone(ad.concat([prefix, tok], axis=0))

    def _embed_with_offset(self, ids) -> Node:
        rows = self.tok_emb.lookup(ids)
        pos = ad.slice_rows(self.pos_emb.rows, self.n_prefix,
                            self.n_prefix + len(ids))
        return ad.add(rows, pos)

    def _logits(self, hidden: Node) -> Node:
        return ad.matmul(hidden, ad.transpose(self.tok_emb.rows))

    def text_loss(self, x_hat: Node, ids) -> Node:
        """Mean per-token NLL of ids under teacher forcing, conditioned on the
        latent state through the prefix block; prefix positions carry no loss."""
        ids = self._truncate(ids)
        if len(ids) < 2:
            raise ContractError("text_loss: need at least two tokens")
        inputs, targets = ids[:-1], ids[1:]
        out = self._sequence(x_hat, inputs)
        pred = ad.slice_rows(out, self.n_prefix, self.n_prefix + len(inputs))
        logp = ad.log_softmax(self._logits(pred))
        return ad.neg(ad.mean(ad.pick(logp, targets)))

    def per_token_nll(self, x_hat: Node, ids) -> np.ndarray:
        """NLL of each target token (no averaging); evaluation helper."""
        ids = self._truncate(ids)
        inputs, targets = ids[:-1], ids[1:]
        out = self._sequence(x_hat, inputs)
        pred = ad.slice_rows(out, self.n_prefix, self.n_prefix + len(inputs))
        logp = ad.log_softmax(self._logits(pred))
        return -ad.pick(logp, targets).value.copy()

    def generate(self, x_hat: np.ndarray, max_len: int, temperature: float,
                 seed: int, prompt: str = "") -> str:
        """Autoregressive sampling conditioned on the latent state. A
        temperature of 0 is greedy argmax with first-index tie-break; sampling
        stops at EOS or after max_len generated tokens."""
        if max_len < 1:
            raise ContractError(f"generate: max_len must be >= 1, got {max_len}")
        if temperature < 0:
            raise ContractError(f"generate: temperature must be >= 0, got {temperature}")
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
        x_node = ad.constant(np.asarray(x_hat, dtype=ad.default_dtype()))
        ids = [BOS] + list(prompt.encode("utf-8"))
        limit = self.max_seq_len - 1
        generated = 0
        while generated < max_len:
            window = ids[-limit:]
            out = self._sequence(x_node, window)
            last = ad.slice_rows(out, out.value.shape[0] - 1, out.value.shape[0])
            logits = self._logits(last).value[0]
            if temperature == 0.0:
                tok = int(np.argmax(logits))
            else:
                z = logits / temperature
                z = z - z.max()
                probs = np.exp(z)
                probs /= probs.sum()
                tok = int(rng.choice(len(probs), p=probs))
            generated += 1
            if tok == EOS:
                break
            ids.append(tok)
        return detokenize(ids)
