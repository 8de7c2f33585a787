"""Cosine-similarity tool retrieval over demonstration embeddings."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

import numpy as np

from .dataset import Instance
from .metrics import tokenize
from .registry import ToolStore

DEFAULT_DIM = 256
DEFAULT_K = 10
TRIGRAM_WEIGHT = 0.5


class EmbeddingProvider(Protocol):
    dim: int

    def embed(self, text: str) -> Sequence[float]: ...


class RetrievalError(RuntimeError):
    """Embedding a tool failed, or the index is unusable."""


def _bucket(feature: str, dim: int) -> tuple[int, float]:
    digest = int.from_bytes(hashlib.blake2b(feature.encode("utf-8"), digest_size=8).digest(), "big")
    sign = 1.0 if digest >> 63 else -1.0
    return digest % dim, sign


def normalize(values: Sequence[float]) -> np.ndarray:
    vec = np.asarray(values, dtype=np.float64)
    norm = float(np.linalg.norm(vec))
    return vec / norm if norm > 0 else np.zeros_like(vec)


def embed_text(text: str, dim: int = DEFAULT_DIM) -> np.ndarray:
    """Signed feature hashing of word unigrams and per-word character trigrams.

    Trigrams are taken inside ``#word#`` so repeating a text only scales the
    raw vector, which normalization removes.
    """
    if dim < 64:
        raise ValueError("dim must be >= 64")
    vec = np.zeros(dim, dtype=np.float64)
    for word in tokenize(text):
        idx, sign = _bucket("w:" + word, dim)
        vec[idx] += sign
        padded = f"#{word}#"
        for i in range(len(padded) - 2):
            idx, sign = _bucket("c:" + padded[i:i + 3], dim)
            vec[idx] += sign * TRIGRAM_WEIGHT
    return normalize(vec)


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    va, vb = normalize(a), normalize(b)
    return float(np.clip(np.sum(va * vb), -1.0, 1.0))


class HashingEmbedder:
    """Built-in deterministic embedder; needs no model."""

    name = "hashing"

    def __init__(self, dim: int = DEFAULT_DIM):
        if dim < 64:
            raise ValueError("dim must be >= 64")
        self.dim = dim

    def embed(self, text: str) -> np.ndarray:
        return embed_text(text, self.dim)


@dataclass(frozen=True)
class ToolIndex:
    names: tuple[str, ...]
    matrix: np.ndarray  # (len(names), dim), rows L2-normalized
    dim: int
    provider: EmbeddingProvider | None = None

    def __len__(self) -> int:
        return len(self.names)

    @property
    def entries(self) -> list[tuple[str, np.ndarray]]:
        return list(zip(self.names, self.matrix))

    def query_vector(self, query: str) -> np.ndarray:
        provider = self.provider or HashingEmbedder(self.dim)
        return normalize(provider.embed(query))

    def to_json(self) -> str:
        payload = {
            "dim": self.dim,
            "provider": getattr(self.provider, "name", "hashing"),
            "entries": [{"name": n, "values": [float(x) for x in row]} for n, row in self.entries],
        }
        return json.dumps(payload) + "\n"

    @classmethod
    def from_json(cls, text: str, provider: EmbeddingProvider | None = None) -> "ToolIndex":
        data = json.loads(text)
        dim = int(data["dim"])
        names = tuple(e["name"] for e in data["entries"])
        matrix = np.array([e["values"] for e in data["entries"]], dtype=np.float64).reshape(len(names), dim)
        if provider is None and data.get("provider", "hashing") == "hashing":
            provider = HashingEmbedder(dim)
        return cls(names, matrix, dim, provider)


def build_index(
    store: ToolStore, provider: EmbeddingProvider | None = None, workers: int = 1
) -> ToolIndex:
    """Embed every tool's demonstration; entries are ordered by tool name."""
    provider = provider or HashingEmbedder()
    names = store.names()

    def embed_one(name: str) -> np.ndarray:
        try:
            return normalize(provider.embed(store[name].demonstration))
        except Exception as exc:
            raise RetrievalError(f"embedding failed for tool {name}: {exc}") from exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(embed_one, names))
    else:
        rows = [embed_one(n) for n in names]
    dim = provider.dim
    for name, row in zip(names, rows):
        if row.shape != (dim,):
            raise RetrievalError(f"embedding for tool {name} has shape {row.shape}, expected ({dim},)")
    matrix = np.vstack(rows) if rows else np.zeros((0, dim))
    return ToolIndex(tuple(names), matrix, dim, provider)


def similarities(index: ToolIndex, query: str) -> np.ndarray:
    q = index.query_vector(query)
    # elementwise product then row sum: each score depends only on its own row
    return np.clip(np.sum(index.matrix * q, axis=1), -1.0, 1.0)


def retrieve(index: ToolIndex, query: str, k: int = DEFAULT_K) -> list[tuple[str, float]]:
    """Top-k tools by cosine similarity, ties broken by name."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(index) == 0:
        raise RetrievalError("empty index")
    sims = similarities(index, query)
    ranked = sorted(zip(index.names, sims.tolist()), key=lambda p: (-p[1], p[0]))
    return ranked[:k]


def recall_at_k(index: ToolIndex, instances: Iterable[Instance], k: int = DEFAULT_K) -> float:
    instances = list(instances)
    if not instances:
        raise ValueError("empty instance list")
    total = 0.0
    for inst in instances:
        gold = set(inst.gold_tools)
        if not gold:
            raise ValueError(f"instance {inst.id} has no gold tools")
        hits = {name for name, _ in retrieve(index, inst.query, k)}
        total += len(gold & hits) / len(gold)
    return total / len(instances)
