"""Toy transformer conversational encoder and its prediction heads.

Pre-norm architecture: embeddings (token + learned position), then L blocks
of multi-head self-attention and a GELU feed-forward, each wrapped in a
residual connection with layer normalization, and a final layer norm.  The
hidden state at position 0 ([CLS]) is the conversation vector; the states at
the [SEP] positions are the per-utterance vectors.

Three linear heads read those states: a topic head and a coreference head
(scalar sigmoid per utterance) and a word head (sigmoid over the vocabulary).
The teacher is the same architecture with its own frozen parameters; its
tensors never require gradients, so no loss can reach them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import ModelInput

INIT_STD = 0.02


@dataclass
class EncoderConfig:
    hidden_size: int = 64
    layers: int = 2
    heads: int = 4
    ff_size: int = 128
    max_positions: int = 512
    vocab_size: int = 0
    dropout: float = 0.1
    max_utterances: int = 64

    def __post_init__(self):
        if self.hidden_size % self.heads != 0:
            raise ValueError(
                f"hidden_size {self.hidden_size} not divisible by heads {self.heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.heads


@dataclass
class EncoderOutput:
    """Last-layer hidden states plus the extracted special-token vectors."""

    hidden_states: Tensor  # [seq_len, hidden]
    cls_vector: Tensor  # [hidden]
    sep_vectors: Tensor  # [utterances, hidden]


def _trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) samples redrawn outside +-2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def _sinusoidal_positions(max_positions: int, hidden: int, scale: float = 0.1) -> np.ndarray:
    """Classic sin/cos position table, scaled to embedding magnitude.

    Used as the *initialization* of the trainable position embeddings: the
    fixed frequencies let attention express relative-offset patterns (such
    as "pool my own utterance") long before enough data has shaped a learned
    table, which matters at desk scale.
    """
    positions = np.arange(max_positions)[:, None]
    dims = np.arange(hidden)[None, :]
    angles = positions / np.power(10000.0, (2 * (dims // 2)) / hidden)
    table = np.where(dims % 2 == 0, np.sin(angles), np.cos(angles))
    return scale * table


def _param(data: np.ndarray) -> Tensor:
    t = Tensor(data)
    t.requires_grad = True
    return t


def init_encoder_params(config: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fresh encoder-body parameters: truncated-normal weights, zero biases."""
    if config.vocab_size <= 0:
        raise ValueError("config.vocab_size must be set before initialization")
    h, ff = config.hidden_size, config.ff_size
    params: dict[str, Tensor] = {
        "tok_emb": _param(_trunc_normal(rng, (config.vocab_size, h))),
        "pos_emb": _param(_sinusoidal_positions(config.max_positions, h)),
        # segment rows start larger than other weights: they are the only
        # signal separating utterances, and attention has to find them fast
        "seg_emb": _param(_trunc_normal(rng, (config.max_utterances, h), std=0.1)),
        "ln_f.gain": _param(np.ones(h)),
        "ln_f.bias": _param(np.zeros(h)),
    }
    for layer in range(config.layers):
        p = f"layers.{layer}."
        for name in ("q", "k", "v", "o"):
            params[p + f"attn.{name}_w"] = _param(_trunc_normal(rng, (h, h)))
            params[p + f"attn.{name}_b"] = _param(np.zeros(h))
        params[p + "ln1.gain"] = _param(np.ones(h))
        params[p + "ln1.bias"] = _param(np.zeros(h))
        params[p + "ln2.gain"] = _param(np.ones(h))
        params[p + "ln2.bias"] = _param(np.zeros(h))
        params[p + "ff.w1"] = _param(_trunc_normal(rng, (h, ff)))
        params[p + "ff.b1"] = _param(np.zeros(ff))
        params[p + "ff.w2"] = _param(_trunc_normal(rng, (ff, h)))
        params[p + "ff.b2"] = _param(np.zeros(h))
    return params


def init_head_params(config: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Topic, coreference, and word-reconstruction heads."""
    h = config.hidden_size
    return {
        "heads.topic.w": _param(_trunc_normal(rng, (h, 1))),
        "heads.topic.b": _param(np.zeros(1)),
        "heads.coref.w": _param(_trunc_normal(rng, (h, 1))),
        "heads.coref.b": _param(np.zeros(1)),
        "heads.word.w": _param(_trunc_normal(rng, (h, config.vocab_size))),
        "heads.word.b": _param(np.zeros(config.vocab_size)),
    }


def init_student_params(config: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params = init_encoder_params(config, rng)
    params.update(init_head_params(config, rng))
    return params


def clone_params(params: dict[str, Tensor], trainable: bool = True) -> dict[str, Tensor]:
    """Deep-copy a parameter dict; with trainable=False the copy is frozen."""
    out = {}
    for name, tensor in params.items():
        t = Tensor(tensor.data.copy())
        t.requires_grad = trainable
        out[name] = t
    return out


def freeze(params: dict[str, Tensor]) -> dict[str, Tensor]:
    for tensor in params.values():
        tensor.requires_grad = False
    return params


def params_checksum(params: dict[str, Tensor]) -> str:
    """SHA-256 over all parameter bytes in name order."""
    import hashlib

    digest = hashlib.sha256()
    for name in sorted(params):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(params[name].data).tobytes())
    return digest.hexdigest()


def segment_ids(model_input: ModelInput) -> np.ndarray:
    """Per-token utterance index (1-based; [CLS] and padding-free gaps get 0).

    Utterance i's tokens and its closing [SEP] share segment i+1, so
    attention can pool an utterance by matching segments instead of having
    to learn position-banded patterns.
    """
    seg = np.zeros(len(model_input.token_ids), dtype=np.int64)
    for i, (start, end) in enumerate(model_input.utterance_spans):
        seg[start:end] = i + 1
    for i, pos in enumerate(model_input.sep_positions):
        seg[pos] = i + 1
    return seg


def encode(
    model_input: ModelInput,
    params: dict[str, Tensor],
    config: EncoderConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> EncoderOutput:
    """Forward pass over one encoded conversation.

    The input embedding is the sum of token, position, and per-utterance
    segment embeddings.  Deterministic in inference mode; in training mode
    dropout masks are drawn from ``rng``.  Rejects out-of-range token ids
    and over-length inputs.
    """
    ids = np.asarray(model_input.token_ids, dtype=np.int64)
    seq_len = ids.shape[0]
    if seq_len > config.max_positions:
        raise ValueError(
            f"input length {seq_len} exceeds max_positions {config.max_positions}"
        )
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= config.vocab_size:
        raise ValueError("token id out of vocabulary range")
    segments = segment_ids(model_input)
    if segments.max(initial=0) >= config.max_utterances:
        raise ValueError(
            f"input has {segments.max()} utterances; max_utterances is "
            f"{config.max_utterances}"
        )
    if train and config.dropout > 0 and rng is None:
        raise ValueError("training-mode encode needs an rng for dropout")

    rate = config.dropout if train else 0.0

    def drop(t: Tensor) -> Tensor:
        return ad.dropout(t, rate, rng) if rate > 0 else t

    x = (
        ad.take_rows(params["tok_emb"], ids)
        + ad.take_rows(params["pos_emb"], np.arange(seq_len))
        + ad.take_rows(params["seg_emb"], segments)
    )
    x = drop(x)
    nh, hd = config.heads, config.head_dim
    scale = 1.0 / np.sqrt(hd)
    for layer in range(config.layers):
        p = f"layers.{layer}."
        a = ad.layer_norm(x, params[p + "ln1.gain"], params[p + "ln1.bias"])
        q = a @ params[p + "attn.q_w"] + params[p + "attn.q_b"]
        k = a @ params[p + "attn.k_w"] + params[p + "attn.k_b"]
        v = a @ params[p + "attn.v_w"] + params[p + "attn.v_b"]
        # [seq, h] -> [heads, seq, head_dim]
        q = ad.transpose(q.reshape(seq_len, nh, hd), (1, 0, 2))
        k = ad.transpose(k.reshape(seq_len, nh, hd), (1, 0, 2))
        v = ad.transpose(v.reshape(seq_len, nh, hd), (1, 0, 2))
        scores = (q @ ad.transpose(k, (0, 2, 1))) * scale
        attn = drop(ad.softmax(scores, axis=-1))
        ctx = ad.transpose(attn @ v, (1, 0, 2)).reshape(seq_len, nh * hd)
        x = x + drop(ctx @ params[p + "attn.o_w"] + params[p + "attn.o_b"])

        f = ad.layer_norm(x, params[p + "ln2.gain"], params[p + "ln2.bias"])
        f = ad.gelu(f @ params[p + "ff.w1"] + params[p + "ff.b1"])
        x = x + drop(f @ params[p + "ff.w2"] + params[p + "ff.b2"])

    hidden = ad.layer_norm(x, params["ln_f.gain"], params["ln_f.bias"])
    cls_vector = ad.take_rows(hidden, np.array([model_input.cls_position])).reshape(
        config.hidden_size
    )
    sep_vectors = ad.take_rows(hidden, np.asarray(model_input.sep_positions, dtype=np.int64))
    return EncoderOutput(hidden_states=hidden, cls_vector=cls_vector, sep_vectors=sep_vectors)


def _sigmoid_head(vectors: Tensor, w: Tensor, b: Tensor) -> Tensor:
    n = vectors.data.shape[0]
    return ad.sigmoid((vectors @ w).reshape(n) + b)


def predict_topic(sep_vectors: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Per-utterance probability of being a grafted noise utterance."""
    return _sigmoid_head(sep_vectors, params["heads.topic.w"], params["heads.topic.b"])


def predict_coref(sep_vectors: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Per-context-utterance probability of being the referred query.

    Independent sigmoids, not a softmax: evaluation takes the argmax."""
    return _sigmoid_head(sep_vectors, params["heads.coref.w"], params["heads.coref.b"])


def reconstruct_words(cls_vector: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Sigmoid bag-of-words reconstruction from the conversation vector."""
    logits = cls_vector.reshape(1, cls_vector.data.shape[0]) @ params["heads.word.w"]
    vocab_size = params["heads.word.b"].data.shape[0]
    return ad.sigmoid(logits.reshape(vocab_size) + params["heads.word.b"])


@dataclass
class TeacherOutput:
    """Frozen-teacher conversation vector; carries no gradient graph."""

    cls_vector: Tensor


def teacher_vector(
    model_input: ModelInput, teacher_params: dict[str, Tensor], config: EncoderConfig
) -> Tensor:
    """Frozen-teacher [CLS] vector for an already-encoded input.

    The returned tensor is detached, so no gradient can flow into the
    teacher.
    """
    out = encode(model_input, teacher_params, config, train=False)
    return out.cls_vector.detach()


def encode_teacher(
    q_star: str,
    teacher_params: dict[str, Tensor],
    config: EncoderConfig,
    vocab,
    max_len: int = 256,
) -> TeacherOutput:
    """Build the ``[CLS] q* [SEP]`` input for a rewritten query and encode it
    with the frozen teacher."""
    from .data import Conversation, build_model_input

    model_input = build_model_input(Conversation("teacher", (q_star,)), vocab, max_len)
    return TeacherOutput(cls_vector=teacher_vector(model_input, teacher_params, config))
