"""Prompt conditioning: a deterministic hashing tokenizer over a learned table.

Stand-in for a text encoder: each word hashes to a fixed row of the embedding
table, prompts are padded/truncated to a fixed token count, and the empty
prompt maps to a dedicated null row broadcast across all positions.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import torch
from torch import nn

PAD_ID = 0
NULL_ID = 1
RESERVED_IDS = 2


@dataclass
class ConditionEmbedding:
    """Fixed-length sequence of condition vectors; `is_null` marks the empty prompt."""

    tokens: torch.Tensor  # (L, cond_dim)
    is_null: bool

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ValueError("condition tokens must be a (L, dim) matrix")


def _word_id(word: str, vocab_size: int) -> int:
    digest = hashlib.sha1(word.encode("utf-8")).digest()
    return RESERVED_IDS + int.from_bytes(digest[:8], "big") % (vocab_size - RESERVED_IDS)


def tokenize(text: str, vocab_size: int, length: int) -> list:
    """Word ids for a prompt, padded/truncated to `length`; empty text -> all-null."""
    words = [w for w in text.lower().split() if w]
    if not words:
        return [NULL_ID] * length
    ids = [_word_id(w, vocab_size) for w in words[:length]]
    ids += [PAD_ID] * (length - len(ids))
    return ids


class PromptEncoder(nn.Module):
    """Learned embedding table behind the hashing tokenizer."""

    def __init__(self, vocab_size: int, cond_dim: int, length: int):
        super().__init__()
        if vocab_size <= RESERVED_IDS:
            raise ValueError("vocab_size must exceed the reserved ids")
        self.vocab_size = vocab_size
        self.length = length
        self.table = nn.Embedding(vocab_size, cond_dim)

    def embed_prompt(self, text: str) -> ConditionEmbedding:
        is_null = not text.strip()
        ids = torch.tensor(tokenize(text, self.vocab_size, self.length), dtype=torch.long)
        with torch.no_grad():
            tokens = self.table(ids).detach().clone()
        return ConditionEmbedding(tokens=tokens, is_null=is_null)

    def embed_batch(self, texts: list) -> torch.Tensor:
        """Differentiable (B, L, dim) batch used by the trainer."""
        ids = torch.tensor(
            [tokenize(t, self.vocab_size, self.length) for t in texts], dtype=torch.long
        )
        return self.table(ids)
