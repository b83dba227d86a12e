"""Encoder-decoder network for token-synchronous instruction decoding.

The encoder is a small pre-norm transformer over the utterance plus a
handful of dialog-state feature tokens.  Utterance tokens are embedded as
the mean of hashed subword units (the whole token and its character
trigrams), so the vocabulary is open and the table size fixed.  Each token
position also carries an embedding of its span label, which is how entity
and carryover matches reach the model.

The decoder is a GRU that emits one instruction symbol at a time.  It is
token-synchronous: its input at every step is the encoder output at the
current cursor position, and the cursor only moves when the decoded
program says so.  The cursor trace during training is therefore derived
from the gold instruction stream, not learned.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from pocketnlu.ontology import NEXT
from pocketnlu.parser import nn


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 48
    label_dim: int = 16
    hidden: int = 96
    layers: int = 2
    heads: int = 4
    ffn: int = 256
    symbol_dim: int = 32
    buckets: int = 4096
    label_buckets: int = 128
    max_tokens: int = 40
    max_context: int = 16
    ngram: int = 3

    @property
    def width(self) -> int:
        return self.embed_dim + self.label_dim

    def validate(self) -> None:
        if self.width % self.heads != 0:
            raise ValueError("encoder width must divide evenly across heads")


@dataclass
class Example:
    """One decoder training or inference instance.

    ``labels`` has one entry per token ("O" where no span applies);
    ``context`` holds dialog-state feature tokens; ``target_ids`` is the
    gold instruction stream as symbol indices, absent at inference.
    """

    tokens: list[str]
    labels: list[str]
    context: list[str] = field(default_factory=list)
    target_ids: Optional[list[int]] = None


class ParserNetwork:
    def __init__(
        self,
        symbols: Sequence[str],
        config: Optional[ModelConfig] = None,
        seed: int = 0,
        dtype=np.float32,
    ):
        self.symbols = list(symbols)
        self.config = config or ModelConfig()
        self.config.validate()
        self.dtype = np.dtype(dtype)
        self.sym_id = {s: i for i, s in enumerate(self.symbols)}
        self.bos_id = len(self.symbols)
        self.next_id = self.sym_id[NEXT]
        self._ctx_label = self._label_bucket("CTX")
        self._pad_label = self._label_bucket("PAD")
        self.params: dict[str, nn.Tensor] = {}
        self._init_params(seed)

    # ------------------------------------------------------------------
    # Parameters

    def _init_params(self, seed: int) -> None:
        cfg = self.config
        rng = np.random.default_rng(seed)

        def table(name, rows, cols):
            self.params[name] = nn.parameter(
                (rng.normal(0, 0.1, size=(rows, cols))).astype(self.dtype), name)

        def linear(name, fan_in, fan_out):
            w = rng.normal(0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
            self.params[f"{name}.W"] = nn.parameter(w.astype(self.dtype), f"{name}.W")
            self.params[f"{name}.b"] = nn.parameter(
                np.zeros(fan_out, dtype=self.dtype), f"{name}.b")

        def norm(name, dim):
            self.params[f"{name}.g"] = nn.parameter(np.ones(dim, dtype=self.dtype), f"{name}.g")
            self.params[f"{name}.b"] = nn.parameter(np.zeros(dim, dtype=self.dtype), f"{name}.b")

        d = cfg.width
        table("tok_table", cfg.buckets, cfg.embed_dim)
        table("label_table", cfg.label_buckets, cfg.label_dim)
        table("pos_utt", cfg.max_tokens, d)
        table("pos_ctx", cfg.max_context, d)
        for i in range(cfg.layers):
            norm(f"l{i}.ln1", d)
            for proj in ("q", "k", "v", "o"):
                linear(f"l{i}.{proj}", d, d)
            # a key bias shifts every score for a query by the same amount,
            # so softmax ignores it; drop the dead parameter
            del self.params[f"l{i}.k.b"]
            norm(f"l{i}.ln2", d)
            linear(f"l{i}.f1", d, cfg.ffn)
            linear(f"l{i}.f2", cfg.ffn, d)
        norm("ln_f", d)
        linear("bridge", d, cfg.hidden)
        table("sym_table", len(self.symbols) + 1, cfg.symbol_dim)
        d_in = d + cfg.symbol_dim
        for gate in ("z", "r", "n"):
            w = rng.normal(0, 1.0 / np.sqrt(d_in), size=(d_in, cfg.hidden))
            u = rng.normal(0, 1.0 / np.sqrt(cfg.hidden), size=(cfg.hidden, cfg.hidden))
            self.params[f"gru.W{gate}"] = nn.parameter(w.astype(self.dtype))
            self.params[f"gru.U{gate}"] = nn.parameter(u.astype(self.dtype))
            self.params[f"gru.b{gate}"] = nn.parameter(np.zeros(cfg.hidden, dtype=self.dtype))
        linear("out", cfg.hidden, len(self.symbols))
        for name, p in self.params.items():
            p.name = name

    def parameters(self) -> list[nn.Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.value.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            if k not in state:
                raise KeyError(f"checkpoint is missing parameter {k!r}")
            if tuple(state[k].shape) != tuple(t.value.shape):
                raise ValueError(f"parameter {k!r} has shape {state[k].shape}, "
                                 f"expected {t.value.shape}")
            t.value = np.ascontiguousarray(state[k].astype(self.dtype))

    # ------------------------------------------------------------------
    # Featurization

    def _bucket(self, key: bytes) -> int:
        return nn.fnv1a(key) % self.config.buckets

    def _label_bucket(self, label: str) -> int:
        return nn.fnv1a(b"l:" + label.encode("utf-8")) % self.config.label_buckets

    def token_units(self, token: str) -> list[int]:
        """Hashed subword units: the whole token plus char n-grams of the
        boundary-padded form."""
        units = [self._bucket(b"w:" + token.encode("utf-8"))]
        padded = "^" + token + "$"
        n = self.config.ngram
        for i in range(len(padded) - n + 1):
            units.append(self._bucket(b"g:" + padded[i:i + n].encode("utf-8")))
        return units

    def pack(self, examples: Sequence[Example]) -> dict:
        cfg = self.config
        bsz = len(examples)
        if bsz == 0:
            raise ValueError("cannot pack an empty batch")
        if any(not e.tokens for e in examples):
            raise ValueError("cannot pack an example with no tokens")
        t_max = max(len(e.tokens) for e in examples)
        if t_max > cfg.max_tokens:
            raise ValueError(f"utterance has {t_max} tokens, model capacity is {cfg.max_tokens}")
        unit_lists = [[self.token_units(t) for t in e.tokens] for e in examples]
        k_max = max(len(u) for ul in unit_lists for u in ul)
        c_max = min(max(len(e.context) for e in examples), cfg.max_context)

        unit_idx = np.zeros((bsz, t_max, k_max), dtype=np.int64)
        unit_w = np.zeros((bsz, t_max, k_max), dtype=np.float64)
        label_idx = np.full((bsz, t_max), self._pad_label, dtype=np.int64)
        ctx_idx = np.zeros((bsz, c_max), dtype=np.int64)
        mask = np.zeros((bsz, t_max + c_max), dtype=np.float64)
        n_tokens = np.zeros(bsz, dtype=np.int64)

        for b, ex in enumerate(examples):
            if len(ex.labels) != len(ex.tokens):
                raise ValueError("labels must align one-to-one with tokens")
            n_tokens[b] = len(ex.tokens)
            for t, units in enumerate(unit_lists[b]):
                unit_idx[b, t, :len(units)] = units
                unit_w[b, t, :len(units)] = 1.0 / len(units)
            for t, lab in enumerate(ex.labels):
                label_idx[b, t] = self._label_bucket(lab)
            mask[b, :len(ex.tokens)] = 1.0
            for j, ctok in enumerate(ex.context[:c_max]):
                ctx_idx[b, j] = self._bucket(b"c:" + ctok.encode("utf-8"))
                mask[b, t_max + j] = 1.0

        batch = {
            "unit_idx": unit_idx, "unit_w": unit_w, "label_idx": label_idx,
            "ctx_idx": ctx_idx, "enc_mask": mask, "n_tokens": n_tokens,
        }
        if all(e.target_ids is not None for e in examples):
            s_max = max(len(e.target_ids) for e in examples)
            prev_ids = np.full((bsz, s_max), self.bos_id, dtype=np.int64)
            tgt_ids = np.zeros((bsz, s_max), dtype=np.int64)
            cursors = np.zeros((bsz, s_max), dtype=np.int64)
            step_w = np.zeros((bsz, s_max), dtype=np.float64)
            for b, ex in enumerate(examples):
                ids = ex.target_ids
                cur = 0
                for s, sym in enumerate(ids):
                    tgt_ids[b, s] = sym
                    if s > 0:
                        prev_ids[b, s] = ids[s - 1]
                    cursors[b, s] = min(cur, len(ex.tokens) - 1)
                    if sym == self.next_id:
                        cur += 1
                step_w[b, :len(ids)] = 1.0
            batch.update(prev_ids=prev_ids, tgt_ids=tgt_ids,
                         cursors=cursors, step_w=step_w)
        return batch

    # ------------------------------------------------------------------
    # Forward

    def _block(self, i: int, x: nn.Tensor, bias: np.ndarray) -> nn.Tensor:
        cfg = self.config
        p = self.params
        bsz, length, d = x.shape
        heads, dh = cfg.heads, d // cfg.heads
        y = nn.layer_norm(x, p[f"l{i}.ln1.g"], p[f"l{i}.ln1.b"])

        def proj(name):
            t = nn.matmul(y, p[f"l{i}.{name}.W"])
            if f"l{i}.{name}.b" in p:
                t = nn.add(t, p[f"l{i}.{name}.b"])
            return nn.transpose(nn.reshape(t, (bsz, length, heads, dh)), (0, 2, 1, 3))

        q, k, v = proj("q"), proj("k"), proj("v")
        scores = nn.scale(nn.matmul(q, nn.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        attn = nn.softmax(nn.add(scores, nn.constant(bias)))
        mixed = nn.reshape(nn.transpose(nn.matmul(attn, v), (0, 2, 1, 3)), (bsz, length, d))
        x = nn.add(x, nn.add(nn.matmul(mixed, p[f"l{i}.o.W"]), p[f"l{i}.o.b"]))
        y2 = nn.layer_norm(x, p[f"l{i}.ln2.g"], p[f"l{i}.ln2.b"])
        y2 = nn.relu(nn.add(nn.matmul(y2, p[f"l{i}.f1.W"]), p[f"l{i}.f1.b"]))
        y2 = nn.add(nn.matmul(y2, p[f"l{i}.f2.W"]), p[f"l{i}.f2.b"])
        return nn.add(x, y2)

    def encode(self, batch: dict) -> tuple[nn.Tensor, nn.Tensor]:
        """Returns (encoder outputs (B, T+C, D), initial decoder state (B, H))."""
        cfg = self.config
        p = self.params
        bsz, t_max, k_max = batch["unit_idx"].shape
        tok = nn.gather_mean(p["tok_table"],
                             batch["unit_idx"].reshape(bsz * t_max, k_max),
                             batch["unit_w"].reshape(bsz * t_max, k_max))
        tok = nn.reshape(tok, (bsz, t_max, cfg.embed_dim))
        lab = nn.gather(p["label_table"], batch["label_idx"])
        x = nn.add(nn.concat([tok, lab], axis=-1),
                   nn.gather(p["pos_utt"], np.arange(t_max)))
        c_max = batch["ctx_idx"].shape[1]
        if c_max:
            ctok = nn.gather(p["tok_table"], batch["ctx_idx"])
            clab = nn.gather(p["label_table"],
                             np.full((bsz, c_max), self._ctx_label, dtype=np.int64))
            cx = nn.add(nn.concat([ctok, clab], axis=-1),
                        nn.gather(p["pos_ctx"], np.arange(c_max)))
            x = nn.concat([x, cx], axis=1)
        mask = batch["enc_mask"]
        bias = np.where(mask > 0, 0.0, -1e9).astype(self.dtype)[:, None, None, :]
        for i in range(cfg.layers):
            x = self._block(i, x, bias)
        x = nn.layer_norm(x, p["ln_f.g"], p["ln_f.b"])
        pool_w = mask / mask.sum(axis=1, keepdims=True)
        pooled = nn.weighted_pool(x, pool_w)
        h0 = nn.tanh(nn.add(nn.matmul(pooled, p["bridge.W"]), p["bridge.b"]))
        return x, h0

    def decode_step(self, enc: nn.Tensor, h: nn.Tensor,
                    cursor: np.ndarray, prev_ids: np.ndarray) -> tuple[nn.Tensor, nn.Tensor]:
        p = self.params
        inp = nn.concat([nn.gather_time(enc, cursor),
                         nn.gather(p["sym_table"], prev_ids)], axis=-1)
        z = nn.sigmoid(nn.add(nn.add(nn.matmul(inp, p["gru.Wz"]),
                                     nn.matmul(h, p["gru.Uz"])), p["gru.bz"]))
        r = nn.sigmoid(nn.add(nn.add(nn.matmul(inp, p["gru.Wr"]),
                                     nn.matmul(h, p["gru.Ur"])), p["gru.br"]))
        n = nn.tanh(nn.add(nn.add(nn.matmul(inp, p["gru.Wn"]),
                                  nn.mul(r, nn.matmul(h, p["gru.Un"]))), p["gru.bn"]))
        h2 = nn.add(n, nn.mul(z, nn.sub(h, n)))
        logits = nn.add(nn.matmul(h2, p["out.W"]), p["out.b"])
        return logits, h2

    def loss(self, batch: dict) -> nn.Tensor:
        """Teacher-forced mean cross-entropy over all real decode steps."""
        if "tgt_ids" not in batch:
            raise ValueError("batch has no targets; pack examples with target_ids")
        enc, h = self.encode(batch)
        bsz, s_max = batch["tgt_ids"].shape
        step_logits = []
        for s in range(s_max):
            logits, h = self.decode_step(enc, h, batch["cursors"][:, s],
                                         batch["prev_ids"][:, s])
            step_logits.append(nn.reshape(logits, (bsz, 1, len(self.symbols))))
        flat = nn.reshape(nn.concat(step_logits, axis=1), (bsz * s_max, len(self.symbols)))
        return nn.cross_entropy(flat, batch["tgt_ids"].reshape(-1),
                                batch["step_w"].reshape(-1))

    # ------------------------------------------------------------------
    # Inference fast path (no tape)

    def encode_example(self, example: Example) -> tuple[np.ndarray, np.ndarray]:
        enc, h0 = self.encode(self.pack([example]))
        return enc.value[0], h0.value[0]

    def step_np(self, enc: np.ndarray, h: np.ndarray,
                cursor: int, prev_id: int) -> tuple[np.ndarray, np.ndarray]:
        """Single greedy decode step on raw arrays."""
        v = {k: t.value for k, t in self.params.items()}
        inp = np.concatenate([enc[cursor], v["sym_table"][prev_id]])
        z = _sigm(inp @ v["gru.Wz"] + h @ v["gru.Uz"] + v["gru.bz"])
        r = _sigm(inp @ v["gru.Wr"] + h @ v["gru.Ur"] + v["gru.br"])
        n = np.tanh(inp @ v["gru.Wn"] + r * (h @ v["gru.Un"]) + v["gru.bn"])
        h2 = n + z * (h - n)
        return h2 @ v["out.W"] + v["out.b"], h2


def _sigm(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))
