"""A small trainable transformer encoder.

Produces per-token hidden states together with the post-softmax self-attention
weights of the final block, behind an interface a pretrained backbone could
satisfy later. Runs one document at a time; batching happens above this layer,
so documents can never attend to each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import MarkedDocument

__all__ = ["EncoderConfig", "EncodingOutput", "Encoder", "average_attention_heads"]


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    dim: int = 64
    heads: int = 4
    layers: int = 4
    ffn_dim: int = 256
    max_len: int = 512
    dropout: float = 0.1

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError("model dimension must be divisible by the head count")
        if self.vocab_size < 1 or self.max_len < 1:
            raise ValueError("vocab_size and max_len must be positive")


@dataclass
class EncodingOutput:
    """Hidden states (l, d) and final-block attention weights (heads, l, l)."""

    hidden: Tensor
    attention: Tensor


def _layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + eps).sqrt() * gain + bias


def _dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * ad.constant(keep)


class Encoder:
    """Pre-norm transformer stack with learned absolute position embeddings
    and a final layer norm; pre-norm keeps from-scratch training stable at
    the small scales this library targets."""

    def __init__(self, config: EncoderConfig, seed: int = 0,
                 params: dict[str, Tensor] | None = None):
        self.config = config
        self.params = params if params is not None else self._init_params(seed)

    def _init_params(self, seed: int) -> dict[str, Tensor]:
        cfg = self.config
        rng = np.random.default_rng(seed)

        def weight(*shape):
            return ad.parameter(rng.normal(0.0, 0.02, size=shape))

        def zeros(*shape):
            return ad.parameter(np.zeros(shape))

        p: dict[str, Tensor] = {
            "emb.tok": weight(cfg.vocab_size, cfg.dim),
            "emb.pos": weight(cfg.max_len, cfg.dim),
        }
        for i in range(cfg.layers):
            b = f"block{i}"
            for piece in ("wq", "wk", "wv", "wo"):
                p[f"{b}.attn.{piece}"] = weight(cfg.dim, cfg.dim)
            for piece in ("bq", "bk", "bv", "bo"):
                p[f"{b}.attn.{piece}"] = zeros(cfg.dim)
            p[f"{b}.ln1.g"] = ad.parameter(np.ones(cfg.dim))
            p[f"{b}.ln1.b"] = zeros(cfg.dim)
            p[f"{b}.ffn.w1"] = weight(cfg.dim, cfg.ffn_dim)
            p[f"{b}.ffn.b1"] = zeros(cfg.ffn_dim)
            p[f"{b}.ffn.w2"] = weight(cfg.ffn_dim, cfg.dim)
            p[f"{b}.ffn.b2"] = zeros(cfg.dim)
            p[f"{b}.ln2.g"] = ad.parameter(np.ones(cfg.dim))
            p[f"{b}.ln2.b"] = zeros(cfg.dim)
        return p

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def encode(self, doc: MarkedDocument | np.ndarray, train: bool = False,
               rng: np.random.Generator | None = None) -> EncodingOutput:
        """Encode one document. Training mode applies dropout drawn from
        ``rng``; eval mode is fully deterministic."""
        cfg = self.config
        ids = doc.token_ids if isinstance(doc, MarkedDocument) else np.asarray(doc)
        length = int(ids.shape[0])
        if length > cfg.max_len:
            raise ValueError(f"document length {length} exceeds max length {cfg.max_len}")
        if length == 0:
            raise ValueError("cannot encode an empty document")
        if train and rng is None:
            raise ValueError("training-mode encoding requires an rng")

        p = self.params
        head_dim = cfg.dim // cfg.heads
        scale = 1.0 / np.sqrt(head_dim)

        x = ad.gather_rows(p["emb.tok"], ids) + ad.gather_rows(p["emb.pos"], np.arange(length))
        attention: Tensor | None = None
        for i in range(cfg.layers):
            b = f"block{i}"
            q = x @ p[f"{b}.attn.wq"] + p[f"{b}.attn.bq"]
            k = x @ p[f"{b}.attn.wk"] + p[f"{b}.attn.bk"]
            v = x @ p[f"{b}.attn.wv"] + p[f"{b}.attn.bv"]
            q = q.reshape(length, cfg.heads, head_dim).swapaxes(0, 1)
            k = k.reshape(length, cfg.heads, head_dim).swapaxes(0, 1)
            v = v.reshape(length, cfg.heads, head_dim).swapaxes(0, 1)
            scores = (q @ k.swapaxes(-1, -2)) * scale
            probs = ad.softmax(scores, axis=-1)
            if i == cfg.layers - 1:
                # exposed weights are the pre-dropout distributions
                attention = probs
            weights = _dropout(probs, cfg.dropout, rng) if train else probs
            context = (weights @ v).swapaxes(0, 1).reshape(length, cfg.dim)
            x = _layer_norm(x + context @ p[f"{b}.attn.wo"] + p[f"{b}.attn.bo"],
                            p[f"{b}.ln1.g"], p[f"{b}.ln1.b"])
            ff = ad.gelu(x @ p[f"{b}.ffn.w1"] + p[f"{b}.ffn.b1"]) @ p[f"{b}.ffn.w2"] \
                + p[f"{b}.ffn.b2"]
            if train:
                ff = _dropout(ff, cfg.dropout, rng)
            x = _layer_norm(x + ff, p[f"{b}.ln2.g"], p[f"{b}.ln2.b"])

        if not np.all(np.isfinite(x.data)):
            raise FloatingPointError("encoder produced non-finite hidden states")
        return EncodingOutput(hidden=x, attention=attention)


def average_attention_heads(attention: Tensor) -> Tensor:
    """Mean over the head axis of an (h, l, l) attention tensor; rows stay
    stochastic because the mean of distributions is a distribution."""
    return attention.mean(axis=0)
