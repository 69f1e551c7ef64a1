"""Toy encoder-decoder with aggregation and emission heads.

The encoder is causal (unidirectional) self-attention, so encoding a prefix
equals encoding the full sequence restricted to that prefix; streaming
inference can therefore reuse offline encodings exactly.  The decoder's
cross-attention is modulated by the expected availability matrix during
training and hard-masked to the received source tokens during inference.

Target tokens are represented for the emission head by the decoder's input
stream (embedding plus position, before the decoder stack), so emission
decisions never depend on cross-attention outputs that themselves depend
on emission.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Graph,
    Tensor,
    add_bias,
    concat,
    embedding,
    layer_norm,
    masked_softmax,
    renorm_rows,
)

CHECKPOINT_MAGIC = b"S2SG"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    d: int = 32
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    ffn: int = 64
    dropout: float = 0.0
    max_len: int = 256

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError(f"model width {self.d} not divisible by {self.heads} heads")

    def to_flat(self) -> dict:
        return {f"model_{k}": v for k, v in vars(self).items()}


def sinusoid_table(max_len: int, d: int, scale: float = 0.5) -> np.ndarray:
    # scaled down so token identity is not drowned out at desk-scale widths
    pos = np.arange(max_len)[:, None]
    dim = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (dim // 2)) / d)
    table = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return scale * table


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=(fan_in, fan_out))


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, ffn = config.d, config.ffn
    p: dict[str, np.ndarray] = {}
    p["src_embed"] = rng.normal(0.0, 0.1, size=(config.src_vocab, d))
    p["tgt_embed"] = rng.normal(0.0, 0.1, size=(config.tgt_vocab, d))

    def block(prefix: str, lns: int):
        for i in range(1, lns + 1):
            p[f"{prefix}.ln{i}.gain"] = np.ones(d)
            p[f"{prefix}.ln{i}.bias"] = np.zeros(d)
        p[f"{prefix}.ffn.w1"] = _xavier(rng, d, ffn)
        p[f"{prefix}.ffn.b1"] = np.zeros(ffn)
        p[f"{prefix}.ffn.w2"] = _xavier(rng, ffn, d)
        p[f"{prefix}.ffn.b2"] = np.zeros(d)

    def attn(prefix: str):
        for w in ("wq", "wk", "wv", "wo"):
            p[f"{prefix}.{w}"] = _xavier(rng, d, d)

    for l in range(config.enc_layers):
        attn(f"enc.{l}.attn")
        block(f"enc.{l}", lns=2)
    p["enc.final_ln.gain"] = np.ones(d)
    p["enc.final_ln.bias"] = np.zeros(d)

    for l in range(config.dec_layers):
        attn(f"dec.{l}.self")
        attn(f"dec.{l}.cross")
        block(f"dec.{l}", lns=3)
    p["dec.final_ln.gain"] = np.ones(d)
    p["dec.final_ln.bias"] = np.zeros(d)

    # segment pivot space: scaled-identity start keeps the pivot aligned
    # with both token spaces and the emission logits small
    p["w_src_seg"] = 0.5 * np.eye(d)
    p["w_tgt_seg"] = 0.5 * np.eye(d)

    p["agg.w1"] = _xavier(rng, d, d)
    p["agg.b1"] = np.zeros(d)
    p["agg.w2"] = _xavier(rng, d, 1)
    # start near the offline regime (few close decisions) so the quality
    # signal shapes the mapping before the latency terms tighten it
    p["agg.b2"] = np.full(1, -2.0)

    p["out.w"] = _xavier(rng, d, config.tgt_vocab)
    p["out.b"] = np.zeros(config.tgt_vocab)
    return p


def _causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


class SegmentModel:
    """Configuration plus a named parameter store; forwards run on a Graph."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self._pos = sinusoid_table(config.max_len, config.d)

    @classmethod
    def create(cls, config: ModelConfig, seed: int) -> "SegmentModel":
        return cls(config, init_params(config, np.random.default_rng(seed)))

    def bind(self, graph: Graph) -> dict[str, Tensor]:
        return {name: graph.parameter(name, arr) for name, arr in self.params.items()}

    # -- building blocks ----------------------------------------------------

    def _attend(self, b, prefix, x_q, x_kv, mask=None, mapping=None):
        cfg = self.config
        dh = cfg.d // cfg.heads
        q = x_q @ b[f"{prefix}.wq"]
        k = x_kv @ b[f"{prefix}.wk"]
        v = x_kv @ b[f"{prefix}.wv"]
        scale = 1.0 / np.sqrt(dh)
        outs = []
        for h in range(cfg.heads):
            cols = slice(h * dh, (h + 1) * dh)
            scores = (q[:, cols] @ k[:, cols].T) * scale
            weights = masked_softmax(scores, mask)
            if mapping is not None:
                weights = renorm_rows(weights * mapping)
            outs.append(weights @ v[:, cols])
        return concat(outs, axis=1) @ b[f"{prefix}.wo"]

    def _ffn(self, b, prefix, x):
        hidden = add_bias(x @ b[f"{prefix}.ffn.w1"], b[f"{prefix}.ffn.b1"]).relu()
        return add_bias(hidden @ b[f"{prefix}.ffn.w2"], b[f"{prefix}.ffn.b2"])

    def _ln(self, b, prefix, x):
        return layer_norm(x, b[f"{prefix}.gain"], b[f"{prefix}.bias"])

    def _dropout(self, graph, x, rng):
        rate = self.config.dropout
        if rng is None or rate <= 0.0:
            return x
        keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
        return x * graph.tensor(keep)

    def _embed(self, graph, b, table_name, tokens):
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size == 0:
            raise ValueError("empty token sequence")
        if tokens.size > self.config.max_len:
            raise ValueError(f"sequence of length {tokens.size} exceeds max_len "
                             f"{self.config.max_len}")
        emb = embedding(b[table_name], tokens)
        return emb + graph.tensor(self._pos[: tokens.size])

    # -- forward passes -------------------------------------------------------

    def encode(self, graph: Graph, b, src_tokens, rng=None) -> Tensor:
        """Causal encoder states, [J, d]."""
        x = self._embed(graph, b, "src_embed", src_tokens)
        mask = _causal_mask(x.shape[0])
        for l in range(self.config.enc_layers):
            h = self._ln(b, f"enc.{l}.ln1", x)
            x = x + self._dropout(graph, self._attend(b, f"enc.{l}.attn", h, h, mask=mask), rng)
            h = self._ln(b, f"enc.{l}.ln2", x)
            x = x + self._dropout(graph, self._ffn(b, f"enc.{l}", h), rng)
        return self._ln(b, "enc.final_ln", x)

    def aggregation_probs(self, b, enc_states: Tensor) -> Tensor:
        """Per-position close probabilities alpha, [J]."""
        hidden = add_bias(enc_states @ b["agg.w1"], b["agg.b1"]).relu()
        logits = add_bias(hidden @ b["agg.w2"], b["agg.b2"])
        return logits.reshape(enc_states.shape[0]).sigmoid()

    def decoder_inputs(self, graph: Graph, b, prefix_tokens) -> Tensor:
        """Input-stream representations of the target prefix, [I, d]."""
        return self._embed(graph, b, "tgt_embed", prefix_tokens)

    def emission_probs(self, b, dec_inputs: Tensor, seg_reps: Tensor) -> Tensor:
        """Raw emission probabilities beta, [I, K]."""
        if dec_inputs.shape[1] != seg_reps.shape[1]:
            raise ValueError(f"emission_probs: width mismatch, decoder {dec_inputs.shape} "
                             f"vs segments {seg_reps.shape}")
        queries = dec_inputs @ b["w_tgt_seg"]
        logits = (queries @ seg_reps.T) * (1.0 / np.sqrt(self.config.d))
        return logits.sigmoid()

    def decode(self, graph: Graph, b, prefix_tokens, enc_states: Tensor,
               mapping: Tensor | None = None, availability: np.ndarray | None = None,
               rng=None) -> Tensor:
        """Next-token distributions for each prefix position, [I, tgt_vocab].

        Training passes `mapping` (soft availability in [0, 1], multiplied
        into the cross-attention weights then renormalized); inference
        passes `availability` (boolean mask of received source tokens).
        """
        if mapping is not None and availability is not None:
            raise ValueError("pass either mapping or availability, not both")
        x = self._embed(graph, b, "tgt_embed", prefix_tokens)
        i_total = x.shape[0]
        self_mask = _causal_mask(i_total)
        if availability is not None:
            availability = np.asarray(availability, dtype=bool)
            if availability.shape != (i_total, enc_states.shape[0]):
                raise ValueError(f"availability shape {availability.shape} does not match "
                                 f"[{i_total}, {enc_states.shape[0]}]")
        for l in range(self.config.dec_layers):
            h = self._ln(b, f"dec.{l}.ln1", x)
            x = x + self._dropout(graph, self._attend(b, f"dec.{l}.self", h, h, mask=self_mask), rng)
            h = self._ln(b, f"dec.{l}.ln2", x)
            x = x + self._dropout(
                graph,
                self._attend(b, f"dec.{l}.cross", h, enc_states,
                             mask=availability, mapping=mapping),
                rng)
            h = self._ln(b, f"dec.{l}.ln3", x)
            x = x + self._dropout(graph, self._ffn(b, f"dec.{l}", h), rng)
        x = self._ln(b, "dec.final_ln", x)
        logits = add_bias(x @ b["out.w"], b["out.b"])
        return masked_softmax(logits)

    # -- persistence -----------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(self.params, path)

    @classmethod
    def load(cls, path, config: ModelConfig) -> "SegmentModel":
        params = load_checkpoint(path)
        template = init_params(config, np.random.default_rng(0))
        if set(params) != set(template):
            missing = sorted(set(template) - set(params))
            extra = sorted(set(params) - set(template))
            raise ValueError(f"checkpoint does not match model config: "
                             f"missing {missing}, unexpected {extra}")
        for name, arr in params.items():
            if arr.shape != template[name].shape:
                raise ValueError(f"checkpoint shape mismatch for {name}: "
                                 f"{arr.shape} vs expected {template[name].shape}")
        return cls(config, params)


def save_checkpoint(params: dict[str, np.ndarray], path) -> None:
    """Versioned named-array container, little-endian."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for name, arr in params.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr, dtype=np.float64)
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint file: bad magic {data[:4]!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    params: dict[str, np.ndarray] = {}
    offset = 12
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        name = data[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", data, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", data, offset)
        offset += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=offset).reshape(dims)
        offset += 8 * size
        params[name] = arr.copy()
    if offset != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return params
