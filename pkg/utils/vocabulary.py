"""Seeded hash tokenizer and the lexicon shared by the text encoder and the benchmark generator."""
import re
import zlib
from functools import lru_cache
from typing import List, Sequence

import numpy as np

from utils.errors import DegenerateInputError

LEXICON_SEED = 7_204_911
DEFAULT_BUCKETS = 1 << 20

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> List[str]:
    return _TOKEN_RE.findall(text.lower())


def token_index(token: str, buckets: int = DEFAULT_BUCKETS) -> int:
    return zlib.crc32(token.encode("utf-8")) % buckets


@lru_cache(maxsize=32768)
def _lexicon_row(index: int, d: int) -> np.ndarray:
    rng = np.random.default_rng([LEXICON_SEED, index, d])
    row = (rng.standard_normal(d) / np.sqrt(d)).astype(np.float32)
    row.setflags(write=False)
    return row


def embed_tokens(tokens: Sequence[str], d: int) -> np.ndarray:
    """(len(tokens), d) lexicon rows; an empty token list gives a (0, d) array."""
    if not tokens:
        return np.zeros((0, d), dtype=np.float32)
    return np.stack([_lexicon_row(token_index(t), d) for t in tokens])


def embed_text(text: str, d: int) -> np.ndarray:
    return embed_tokens(tokenize(text), d)


def phrase_vector(text: str, d: int) -> np.ndarray:
    """Unit-norm mean embedding of a phrase."""
    rows = embed_text(text, d)
    if rows.shape[0] == 0:
        raise DegenerateInputError(f"phrase {text!r} has no tokens")
    v = rows.mean(axis=0)
    return (v / np.linalg.norm(v)).astype(np.float32)
