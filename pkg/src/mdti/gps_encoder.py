"""GPS semantic encoding: chunk the raw trace, score chunks against a pattern
library, render each chunk as a text prompt and embed it with a frozen text
model.

Everything here runs once per trajectory ahead of training; the resulting
``[n_chunks, d_lm]`` arrays are constants as far as the optimiser is
concerned.
"""
from __future__ import annotations

import hashlib
import math
from typing import Protocol, Sequence

import numpy as np

from .errors import EmbedderError, TrajectoryTooShortError
from .trajectory import TrajectorySample, point_speeds

CHUNK = 3
SIM_SCALE = 2.0 * math.sqrt(3.0)
TOP_PATTERNS = 3


def chunk(traj) -> np.ndarray:
    """Split a ``[T, 3]`` trace into ``floor(T/3)`` flattened 9-vectors.

    The trailing 1-2 points that do not fill a chunk are dropped.
    """
    arr = np.asarray(traj, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected a [T, 3] trace, got shape {arr.shape}")
    if arr.shape[0] < CHUNK:
        raise TrajectoryTooShortError(f"trajectory too short to chunk ({arr.shape[0]} < {CHUNK} points)")
    n = arr.shape[0] // CHUNK
    return arr[: n * CHUNK].reshape(n, CHUNK * 3)


def pattern_similarity(p, library) -> np.ndarray:
    """``exp(-||p - P_k|| / (2 sqrt 3))`` for every library row; broadcasts over leading axes of ``p``."""
    p = np.asarray(p, dtype=np.float64)
    lib = np.asarray(library, dtype=np.float64)
    if p.shape[-1] != 9 or lib.ndim != 2 or lib.shape[1] != 9:
        raise ValueError(f"pattern similarity needs 9-vectors, got {p.shape} vs {lib.shape}")
    dist = np.linalg.norm(p[..., None, :] - lib, axis=-1)
    return np.exp(-dist / SIM_SCALE)


def trend(values: Sequence[float]) -> float:
    """Cumulative change ``sum_t (v_t - v_{t-1})``.

    The sum is taken exactly over the expanded terms, so it equals the
    correctly rounded ``v[-1] - v[0]``.
    """
    v = [float(x) for x in values]
    if not v:
        raise ValueError("trend of an empty sequence")
    return math.fsum(x for t in range(1, len(v)) for x in (v[t], -v[t - 1])) + 0.0


def top_patterns(similarities, n: int = TOP_PATTERNS) -> list[tuple[int, float]]:
    """Best ``n`` (index, similarity) pairs; equal scores keep the lower index first."""
    sims = np.asarray(similarities, dtype=np.float64)
    order = sorted(range(len(sims)), key=lambda k: (-sims[k], k))
    return [(k, float(sims[k])) for k in order[:n]]


def _fmt(x: float) -> str:
    return f"{float(x) + 0.0:.6g}"


def build_prompt(segment_index: int, values, trends, patterns: Sequence[tuple[int, float]]) -> str:
    vals = np.asarray(values, dtype=np.float64).reshape(-1)
    if vals.size != 9 or len(trends) != 3:
        raise ValueError("prompt needs a 3x3 value block and three trends")
    if len(patterns) > TOP_PATTERNS:
        raise ValueError(f"at most {TOP_PATTERNS} patterns fit in a prompt")
    pats = " ".join(f"{k}:{_fmt(s)}" for k, s in patterns) if patterns else "none"
    d0, d1, d2 = (_fmt(d) for d in trends)
    return (
        f"segment {segment_index}: values {' '.join(_fmt(v) for v in vals)}; "
        f"trend lon {d0} lat {d1} speed {d2}; patterns: {pats}"
    )


class TextEmbedder(Protocol):
    dim: int

    def embed(self, text: str) -> np.ndarray: ...


class HashingEmbedder:
    """Deterministic stand-in for a language model.

    Whitespace tokens are hashed (64-bit BLAKE2b) into ``buckets`` counts, the
    count vector goes through a fixed Gaussian projection, and the result is
    layer-normalised. Holds no mutable state, so concurrent calls are safe.
    """

    def __init__(self, dim: int = 256, buckets: int = 4096, seed: int = 0):
        self.dim = dim
        self.buckets = buckets
        self.seed = seed
        rng = np.random.default_rng(seed)
        self._proj = rng.standard_normal((buckets, dim)) / math.sqrt(dim)

    def token_bucket(self, token: str) -> int:
        h = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")
        return h % self.buckets

    def embed(self, text: str) -> np.ndarray:
        counts = np.zeros(self.buckets)
        for tok in text.split():
            counts[self.token_bucket(tok)] += 1.0
        v = counts @ self._proj
        return (v - v.mean()) / math.sqrt(v.var() + 1e-5)


class HFLastTokenEmbedder:
    """Last-token hidden state of a Hugging Face causal LM (e.g. ``gpt2``).

    Loaded lazily; use only when the weights are available locally. Calls are
    serialised by the caller (declared single-threaded).
    """

    thread_safe = False

    def __init__(self, model_name: str = "gpt2"):
        from transformers import AutoModel, AutoTokenizer

        self.tokenizer = AutoTokenizer.from_pretrained(model_name)
        self.model = AutoModel.from_pretrained(model_name).eval()
        self.dim = int(self.model.config.hidden_size)

    def embed(self, text: str) -> np.ndarray:
        import torch

        with torch.no_grad():
            ids = self.tokenizer(text, return_tensors="pt")
            hidden = self.model(**ids).last_hidden_state
        return hidden[0, -1].double().numpy()


def embed_prompts(prompts: Sequence[str], embedder: TextEmbedder) -> np.ndarray:
    rows = []
    for i, text in enumerate(prompts):
        try:
            rows.append(np.asarray(embedder.embed(text), dtype=np.float64))
        except Exception as exc:
            raise EmbedderError(i, exc) from exc
    if not rows:
        return np.zeros((0, embedder.dim))
    return np.stack(rows)


def gps_channels(sample: TrajectorySample, center: tuple[float, float]) -> np.ndarray:
    """``[T, 3]`` (lon, lat, speed m/s) trace of a sample."""
    arr = sample.gps.array()
    return np.column_stack([arr[:, 0], arr[:, 1], point_speeds(arr, center)])


def fit_pattern_library(chunks: np.ndarray, k: int = 16, seed: int = 0, iters: int = 20) -> np.ndarray:
    """K-means centroids of training chunk vectors (``[K, 9]``)."""
    from sklearn.cluster import KMeans

    chunks = np.asarray(chunks, dtype=np.float64)
    n_unique = len(np.unique(chunks, axis=0))
    k = max(1, min(k, n_unique))
    km = KMeans(n_clusters=k, n_init=1, max_iter=iters, random_state=seed, algorithm="lloyd")
    km.fit(chunks)
    return km.cluster_centers_.astype(np.float64)


def sample_prompts(sample: TrajectorySample, library: np.ndarray, center) -> list[str]:
    chunks = chunk(gps_channels(sample, center))
    sims = pattern_similarity(chunks, library)
    prompts = []
    for i, (vec, s) in enumerate(zip(chunks, sims)):
        block = vec.reshape(CHUNK, 3)
        trends = [trend(block[:, c]) for c in range(3)]
        prompts.append(build_prompt(i, block, trends, top_patterns(s)))
    return prompts


class GpsSemanticEncoder:
    """Prompt builder plus embedder bound to one pattern library and map centre."""

    def __init__(self, library: np.ndarray, center, embedder: TextEmbedder | None = None):
        self.library = np.asarray(library, dtype=np.float64)
        self.center = tuple(center)
        self.embedder = embedder or HashingEmbedder()

    @property
    def dim(self) -> int:
        return self.embedder.dim

    def prompts(self, sample: TrajectorySample) -> list[str]:
        return sample_prompts(sample, self.library, self.center)

    def encode(self, sample: TrajectorySample) -> np.ndarray:
        """``[n_chunks, d_lm]`` semantic sequence of one trajectory."""
        return embed_prompts(self.prompts(sample), self.embedder)

    @classmethod
    def fit(cls, samples, center, k: int = 16, seed: int = 0, embedder: TextEmbedder | None = None):
        chunks = np.concatenate([chunk(gps_channels(s, center)) for s in samples])
        return cls(fit_pattern_library(chunks, k, seed), center, embedder)
