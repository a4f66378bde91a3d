"""Frozen text tower stand-in.

Each whitespace token hashes (keyed 64-bit blake2b) to a fixed Gaussian
vector; a text is the L2-normalized mean of its token vectors passed through
one frozen random linear map and normalized again. A precomputed table
(e.g. genuine CLIP text embeddings exported offline) takes precedence.
"""
from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, List, Literal, Mapping, Optional, Sequence

import numpy as np

from sketchseg.core.errors import ContractError, EmbeddingLoadError
from sketchseg.models.domain import TextToken
from sketchseg.models.schemas import CaptionRecord

logger = logging.getLogger("sketchseg.text")

PROMPT_TEMPLATE = "A sketch of {category}"


def build_category_prompts(record: CaptionRecord | Sequence[str]) -> List[str]:
    """One "A sketch of <category>" prompt per category, caption order kept."""
    if isinstance(record, CaptionRecord):
        categories, owner = record.categories, f"caption {record.sketch_id!r}"
    else:
        categories, owner = list(record), "prompt list"
    if not categories:
        raise ContractError(f"{owner} has no categories")
    return [PROMPT_TEMPLATE.format(category=c) for c in categories]


def _normalize(vec: np.ndarray) -> np.ndarray:
    vec = vec.astype(np.float64)
    norm = np.linalg.norm(vec)
    if not np.isfinite(norm) or norm == 0.0:
        raise ContractError("cannot normalize a zero or non-finite text vector")
    return (vec / norm).astype(np.float32)


def load_precomputed_embeddings(path: str | Path, dim: int) -> Dict[str, np.ndarray]:
    """JSONL rows `{"text": ..., "vector": [...]}`; every vector must have length `dim`."""
    table: Dict[str, np.ndarray] = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise EmbeddingLoadError(f"cannot read embeddings {path}: {e}") from e
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            text, vector = str(row["text"]), np.asarray(row["vector"], dtype=np.float64)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise EmbeddingLoadError(f"{path}:{lineno}: malformed embedding row") from e
        if vector.shape != (dim,):
            raise EmbeddingLoadError(f"{path}:{lineno}: vector for {text!r} has shape {vector.shape}, expected ({dim},)")
        table[text] = _normalize(vector)
    logger.info("Precomputed text embeddings loaded",
                extra={"event": "text_embeddings_loaded", "path": str(path), "count": len(table)})
    return table


class TextEncoder:
    """Deterministic text -> R^dim map; immutable after construction."""

    def __init__(self, dim: int, seed: int = 0, table: Optional[Mapping[str, np.ndarray]] = None) -> None:
        if dim < 1:
            raise ContractError("text embedding dimension must be positive")
        self.dim = dim
        self.seed = seed
        self._key = int(seed).to_bytes(8, "little", signed=True)
        self._table: Dict[str, np.ndarray] = {}
        for k, v in (table or {}).items():
            v = np.asarray(v)
            if v.shape != (dim,):
                raise EmbeddingLoadError(f"vector for {k!r} has shape {v.shape}, expected ({dim},)")
            self._table[k] = _normalize(v)
        rng = np.random.default_rng([seed, 0x7E47])
        self._mixing = rng.standard_normal((dim, dim)) / np.sqrt(dim)
        self._mixing.setflags(write=False)

    @classmethod
    def from_file(cls, path: str | Path, dim: int, seed: int = 0) -> "TextEncoder":
        return cls(dim, seed, load_precomputed_embeddings(path, dim))

    def _token_vector(self, token: str) -> np.ndarray:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=self._key).digest()
        return np.random.default_rng(int.from_bytes(digest, "little")).standard_normal(self.dim)

    def _standin(self, text: str) -> np.ndarray:
        tokens = text.lower().split()
        bag = np.mean([self._token_vector(t) for t in tokens], axis=0)
        bag = bag / np.linalg.norm(bag)
        return _normalize(self._mixing @ bag)

    def embed_text(self, text: str, kind: Literal["CST", "CCT"] = "CST") -> TextToken:
        if not text or not text.strip():
            raise ContractError("cannot embed empty text")
        vector = self._table.get(text)
        if vector is None:
            vector = self._standin(text)
        vector = np.array(vector, dtype=np.float32)
        vector.setflags(write=False)
        return TextToken(kind=kind, vector=vector, source_text=text)

    def caption_token(self, record: CaptionRecord) -> TextToken:
        text = record.caption if record.caption.strip() else " and ".join(f"a {c}" for c in record.categories)
        return self.embed_text(text, kind="CST")

    def category_tokens(self, categories: CaptionRecord | Sequence[str]) -> List[TextToken]:
        return [self.embed_text(prompt, kind="CCT") for prompt in build_category_prompts(categories)]


def embed_text(text: str, dim: int = 32, seed: int = 0) -> TextToken:
    return TextEncoder(dim, seed).embed_text(text)


__all__ = [
    "PROMPT_TEMPLATE",
    "TextEncoder",
    "build_category_prompts",
    "embed_text",
    "load_precomputed_embeddings",
]
