"""Caption conditioning: a tiny fixed-vocabulary tokenizer and text encoder.

Captions follow the grammar "track the <color> <shape>"; anything outside the
vocabulary maps to UNK. The empty caption encodes to the null condition used
whenever no language description exists.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import RangeError

PAD, NULL, UNK = 0, 1, 2

_WORDS = [
    "track", "follow", "find", "the", "a",
    "red", "green", "blue", "yellow", "magenta", "cyan", "orange", "purple",
    "white", "gray", "pink", "brown",
    "circle", "square", "triangle",
    "object", "shape", "target", "thing", "blob",
    "small", "large", "big", "tiny", "bright", "dark",
    "moving", "still", "fast", "slow",
    "left", "right", "top", "bottom", "center",
    "near", "far", "first", "second", "other",
    "light", "deep", "pale",
]


@dataclass
class Vocabulary:
    tokens: list  # dense ids 0..V-1; PAD=0, NULL=1, UNK=2 fixed

    def __post_init__(self):
        assert self.tokens[:3] == ["<pad>", "<null>", "<unk>"]
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    @property
    def size(self):
        return len(self.tokens)


def default_vocabulary(extra_words=()):
    words = list(dict.fromkeys(list(_WORDS) + list(extra_words)))
    return Vocabulary(["<pad>", "<null>", "<unk>"] + words)


def tokenize(caption, vocab, length=8):
    """Lowercase, split on whitespace, map to ids, pad/truncate to `length`.

    The empty caption maps to [NULL, PAD, ...]. Total function.
    """
    words = str(caption).lower().split()
    if not words:
        ids = [NULL]
    else:
        ids = [vocab.index.get(w, UNK) for w in words[:length]]
    ids = ids + [PAD] * (length - len(ids))
    return torch.tensor(ids, dtype=torch.long)


@dataclass
class TextCondition:
    embeddings: torch.Tensor  # [L_c, d_cond]
    token_ids: torch.Tensor  # [L_c]
    is_null: bool


class TextEncoder(nn.Module):
    """Token + positional embedding followed by one self-attention block."""

    def __init__(self, vocab_size, d_cond=64, length=8, heads=4):
        super().__init__()
        self.length = length
        self.d_cond = d_cond
        self.emb = nn.Embedding(vocab_size, d_cond)
        self.pos = nn.Parameter(torch.zeros(length, d_cond))
        nn.init.normal_(self.pos, std=0.02)
        self.norm1 = nn.LayerNorm(d_cond)
        self.attn = nn.MultiheadAttention(d_cond, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(d_cond)
        self.ffn = nn.Sequential(nn.Linear(d_cond, d_cond * 4), nn.GELU(), nn.Linear(d_cond * 4, d_cond))

    def forward(self, token_ids):
        """[L] or [B, L] token ids -> [B, L, d_cond] embeddings."""
        if token_ids.dim() == 1:
            token_ids = token_ids.unsqueeze(0)
        if int(token_ids.max()) >= self.emb.num_embeddings:
            raise RangeError(f"token id {int(token_ids.max())} outside vocabulary")
        x = self.emb(token_ids) + self.pos
        h = self.norm1(x)
        a, _ = self.attn(h, h, h, need_weights=False)
        x = x + a
        x = x + self.ffn(self.norm2(x))
        return x


def encode_text(token_ids, encoder):
    """Deterministic TextCondition for one caption's token ids."""
    with torch.no_grad():
        emb = encoder(token_ids)[0]
    ids = token_ids if token_ids.dim() == 1 else token_ids[0]
    is_null = bool(ids[0].item() == NULL and (ids[1:] == PAD).all().item())
    return TextCondition(embeddings=emb, token_ids=ids, is_null=is_null)


def null_condition(encoder, vocab):
    cond = encode_text(tokenize("", vocab, encoder.length), encoder)
    cond.is_null = True
    return cond
