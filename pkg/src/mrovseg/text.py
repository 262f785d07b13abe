"""Deterministic toy text encoder with prompt-template ensembling."""

from __future__ import annotations

import hashlib
import logging
import math
from collections import Counter
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError

logger = logging.getLogger(__name__)

TEMPLATES: tuple[str, ...] = (
    "a photo of a {}.",
    "This is a photo of a {}",
    "There is a {} in the scene",
    "There is the {} in the scene",
    "a photo of a {} in the scene",
    "a photo of a small {}.",
    "a photo of a medium {}.",
    "a photo of a large {}.",
    "This is a photo of a small {}.",
    "This is a photo of a medium {}.",
    "This is a photo of a large {}.",
    "There is a small {} in the scene.",
    "There is a medium {} in the scene.",
    "There is a large {} in the scene.",
)


def load_templates(path) -> tuple[str, ...]:
    """One template per non-empty line, each with exactly one ``{}``."""
    lines = [ln.rstrip("\n") for ln in Path(path).read_text().splitlines() if ln.strip()]
    check_templates(lines)
    return tuple(lines)


def check_templates(templates: Sequence[str]) -> None:
    if not templates:
        raise ContractError("template set is empty")
    for t in templates:
        if t.count("{}") != 1:
            raise ContractError(f"template {t!r} must contain exactly one '{{}}' slot")


class HashTextEncoder:
    """Signed character-trigram hashing followed by a fixed random rotation."""

    def __init__(self, embed_dim: int = 512, seed: int = 0, ngram: int = 3):
        self.embed_dim = embed_dim
        self.seed = seed
        self.ngram = ngram
        rng = np.random.default_rng(seed)
        q, r = np.linalg.qr(rng.normal(size=(embed_dim, embed_dim)))
        self.rotation = q * np.sign(np.diag(r))
        self._key = seed.to_bytes(8, "little", signed=False)

    def _bucket(self, gram: str) -> tuple[int, float]:
        digest = hashlib.blake2b(gram.encode(), digest_size=8, key=self._key).digest()
        v = int.from_bytes(digest, "little")
        return v % self.embed_dim, 1.0 if (v >> 63) & 1 else -1.0

    def embed_sentence(self, text: str) -> np.ndarray:
        s = f"<{text.lower()}>"
        grams = Counter(s[i:i + self.ngram] for i in range(max(1, len(s) - self.ngram + 1)))
        vec = np.zeros(self.embed_dim)
        for gram, n in sorted(grams.items()):
            idx, sign = self._bucket(gram)
            vec[idx] += sign * n
        vec /= np.linalg.norm(vec) or 1.0
        return self.rotation @ vec

    def embed_class(self, name: str, templates: Sequence[str] = TEMPLATES) -> np.ndarray:
        """Average of the template-filled sentence embeddings, L2-normalised.

        Coordinates are summed with ``math.fsum`` so the result does not
        depend on template order.
        """
        if not name or not name.strip():
            raise ContractError("class name must be non-empty")
        check_templates(templates)
        rows = np.stack([self.embed_sentence(t.format(name)) for t in templates])
        mean = np.array([math.fsum(col) for col in rows.T]) / len(templates)
        return mean / np.linalg.norm(mean)

    def embed_vocabulary(self, names: Sequence[str],
                         templates: Optional[Sequence[str]] = None) -> np.ndarray:
        templates = TEMPLATES if templates is None else templates
        dupes = [n for n, c in Counter(names).items() if c > 1]
        if dupes:
            logger.warning("duplicate class names in vocabulary: %s", dupes)
        if not names:
            return np.zeros((0, self.embed_dim))
        return np.stack([self.embed_class(n, templates) for n in names])
