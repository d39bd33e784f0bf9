"""Tokenizer and causal transformer text encoder producing hidden states."""

from __future__ import annotations

import zlib
from typing import Iterable

import numpy as np

from ..lexicon import WORDS
from ..nn import Params, ParamInit, causal_mask, dense, lnorm, transformer_block
from ..numerics import Tensor
from ..numerics import ops

TEXT_LENGTH = 16
WIDTH = 64
HEADS = 4
BLOCKS = 2
HASH_BUCKETS = 32

START_ID = 0
PAD_ID = 1
_WORD_IDS = {w: i + 2 for i, w in enumerate(dict.fromkeys(WORDS))}
_HASH_BASE = 2 + len(_WORD_IDS)
VOCAB_SIZE = _HASH_BASE + HASH_BUCKETS


def word_id(word: str) -> int:
    if word in _WORD_IDS:
        return _WORD_IDS[word]
    return _HASH_BASE + zlib.crc32(word.encode("utf-8")) % HASH_BUCKETS


def tokenize(prompt: str) -> np.ndarray:
    """Lowercase word split, lexicon lookup with hash fallback, START + pad to 16."""
    ids = [START_ID] + [word_id(w) for w in prompt.lower().split()]
    ids = ids[:TEXT_LENGTH]
    ids += [PAD_ID] * (TEXT_LENGTH - len(ids))
    return np.array(ids, dtype=np.int64)


def tokenize_batch(prompts: Iterable[str]) -> np.ndarray:
    return np.stack([tokenize(p) for p in prompts])


def init_text_encoder(seed: int) -> Params:
    init = ParamInit(seed, "text")
    init.normal("token_embedding", (VOCAB_SIZE, WIDTH), 0.5)
    init.normal("position_embedding", (TEXT_LENGTH, WIDTH), 0.1)
    for i in range(BLOCKS):
        init.transformer_block(f"block{i}", WIDTH, 2 * WIDTH)
    init.norm("final_ln", WIDTH)
    return init.params


_MASK = causal_mask(TEXT_LENGTH)


def text_encode(tokens: np.ndarray, p: Params) -> Tensor:
    """(N, 16) token ids -> (N, 16, 64) hidden states."""
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None]
    if tokens.shape[1] != TEXT_LENGTH:
        raise ops.ShapeError(f"expected {TEXT_LENGTH} tokens, got {tokens.shape[1]}")
    if tokens.min() < 0 or tokens.max() >= VOCAB_SIZE:
        raise ValueError(f"token id outside vocabulary of size {VOCAB_SIZE}")
    x = ops.embedding(tokens, p["text.token_embedding"])
    pos = p["text.position_embedding"]
    x = ops.add(x, pos)
    for i in range(BLOCKS):
        x = transformer_block(p, f"text.block{i}", x, HEADS, mask=_MASK)
    return lnorm(p, "text.final_ln", x)


def encode_prompts(prompts: Iterable[str], p: Params) -> np.ndarray:
    return text_encode(tokenize_batch(prompts), p).data
