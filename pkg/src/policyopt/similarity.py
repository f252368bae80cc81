"""Phrase similarity for visual operator questions.

Two scores are combined by multiplication: a TF-IDF cosine over the pair of
phrases (term overlap, which keeps "men" and "women" apart) and an embedding
cosine from a pluggable provider. The pair counts as the same object when
the product reaches 0.5.
"""

from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Optional, Protocol, Sequence

import numpy as np
from sklearn.feature_extraction.text import CountVectorizer, TfidfVectorizer

log = logging.getLogger(__name__)

THRESHOLD = 0.5

DEFAULT_SYNONYMS: tuple[tuple[str, ...], ...] = (
    ("person", "persons", "people", "human", "humans"),
    ("man", "men"),
    ("woman", "women"),
    ("child", "children", "kid", "kids"),
    ("picture", "pictures", "image", "images", "photo", "photos"),
    ("car", "cars", "automobile", "automobiles"),
    ("dog", "dogs", "puppy", "puppies"),
    ("cat", "cats", "kitten", "kittens"),
    ("bike", "bikes", "bicycle", "bicycles"),
    ("boat", "boats", "ship", "ships"),
    ("mouse", "mice"),
    ("goose", "geese"),
    ("tooth", "teeth"),
    ("foot", "feet"),
)

# Question scaffolding carries no object identity.
STOP_WORDS = frozenset(
    "a an the any some both is are there how many of in on this these those "
    "do does can you see".split()
)

_TOKEN = re.compile(r"[a-z0-9]+")


class BackendUnavailable(RuntimeError):
    """The embedding provider could not produce vectors."""


class Lexicon:
    def __init__(self, synonym_sets: Iterable[Sequence[str]] = DEFAULT_SYNONYMS):
        self.sets = tuple(tuple(w.lower() for w in group) for group in synonym_sets)
        self._canon = {}
        for group in self.sets:
            for word in group:
                self._canon.setdefault(word, group[0])

    @classmethod
    def load(cls, path) -> "Lexicon":
        return cls(json.loads(Path(path).read_text()))

    def canonical_word(self, word: str) -> str:
        if word in self._canon:
            return self._canon[word]
        # plain plural
        if len(word) > 3 and word.endswith("s") and not word.endswith("ss"):
            return self._canon.get(word[:-1], word[:-1])
        return word

    def tokens(self, text: str) -> tuple[str, ...]:
        words = _TOKEN.findall(text.lower())
        return tuple(self.canonical_word(w) for w in words if w not in STOP_WORDS)


DEFAULT_LEXICON = Lexicon()


class EmbeddingProvider(Protocol):
    def embed(self, texts: Sequence[str]) -> np.ndarray:
        """Return one row vector per text."""


class CountEmbedding:
    """Deterministic offline provider: unigram + bigram counts of canonical tokens."""

    def __init__(self, lexicon: Lexicon = DEFAULT_LEXICON):
        self.lexicon = lexicon

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        token_lists = [self.lexicon.tokens(t) for t in texts]
        if not any(token_lists):
            return np.zeros((len(texts), 1))
        vectorizer = CountVectorizer(analyzer=_ngrams)
        return vectorizer.fit_transform(token_lists).toarray().astype(float)


def _ngrams(tokens: Sequence[str]) -> list[str]:
    grams = list(tokens)
    grams += [f"{a} {b}" for a, b in zip(tokens, tokens[1:])]
    return grams


class RemoteEmbedding:
    """Embedding endpoint speaking the common ``/embeddings`` JSON shape.

    Cosines below zero are clipped to zero when mapped into [0, 1].
    """

    def __init__(self, url: str, model: str, api_key_env: str = "EMBEDDING_API_KEY",
                 timeout: float = 30.0, transport=None):
        self.url = url
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.transport = transport

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        import httpx

        headers = {}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        try:
            with httpx.Client(timeout=self.timeout, transport=self.transport) as client:
                resp = client.post(self.url, json={"model": self.model, "input": list(texts)},
                                   headers=headers)
                resp.raise_for_status()
                rows = [item["embedding"] for item in resp.json()["data"]]
        except (httpx.HTTPError, KeyError, TypeError, ValueError) as exc:
            raise BackendUnavailable(str(exc)) from exc
        return np.asarray(rows, dtype=float)


@dataclass(frozen=True)
class SimilarityReport:
    lexical_score: float
    semantic_score: float
    combined: float
    equivalent: bool
    degraded: bool = False


@lru_cache(maxsize=65536)
def _tfidf_cosine(a: tuple[str, ...], b: tuple[str, ...]) -> float:
    if a == b:
        return 1.0
    if not a or not b:
        return 0.0
    matrix = TfidfVectorizer(analyzer=lambda doc: doc).fit_transform([a, b]).toarray()
    return _cosine(matrix[0], matrix[1])


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    value = float(np.dot(u, v) / (nu * nv))
    return min(1.0, max(0.0, round(value, 12)))


def lexical_score(a: str, b: str, lexicon: Lexicon = DEFAULT_LEXICON) -> float:
    ta, tb = sorted((lexicon.tokens(a), lexicon.tokens(b)))
    if not ta and not tb:
        return 1.0 if " ".join(a.lower().split()) == " ".join(b.lower().split()) else 0.0
    return _tfidf_cosine(ta, tb)


def semantic_score(a: str, b: str, backend: EmbeddingProvider) -> float:
    if a == b:
        return 1.0
    first, second = sorted((a, b))
    vectors = backend.embed([first, second])
    return _cosine(vectors[0], vectors[1])


def sentence_similarity(a: str, b: str, backend: Optional[EmbeddingProvider] = None,
                        lexicon: Optional[Lexicon] = None,
                        threshold: float = THRESHOLD) -> SimilarityReport:
    """Hybrid similarity of two phrases.

    Raises :class:`BackendUnavailable` when the embedding provider fails;
    :func:`phrase_match` is the forgiving wrapper.
    """
    if not a or not b:
        raise ValueError("phrases must be non-empty")
    lexicon = lexicon or getattr(backend, "lexicon", None) or DEFAULT_LEXICON
    backend = backend or CountEmbedding(lexicon)
    lex = lexical_score(a, b, lexicon)
    sem = semantic_score(a, b, backend)
    combined = lex * sem
    return SimilarityReport(lex, sem, combined, combined >= threshold)


def phrase_match(a: str, b: str, backend: Optional[EmbeddingProvider] = None,
                 threshold: float = THRESHOLD) -> SimilarityReport:
    """Like :func:`sentence_similarity` but degrades to the lexical score alone."""
    try:
        return sentence_similarity(a, b, backend, threshold=threshold)
    except BackendUnavailable as exc:
        log.warning("embedding backend unavailable (%s); using lexical score only", exc)
        lexicon = getattr(backend, "lexicon", None) or DEFAULT_LEXICON
        lex = lexical_score(a, b, lexicon)
        # semantic factor is neutral so combined stays lexical * semantic
        return SimilarityReport(lex, 1.0, lex, lex >= threshold, degraded=True)


class PhraseMatcher:
    """Memoizing same-object test shared by the monitor and the rewriter."""

    def __init__(self, backend: Optional[EmbeddingProvider] = None, threshold: float = THRESHOLD):
        self.backend = backend or CountEmbedding()
        self.threshold = threshold
        self._cache: dict[tuple[str, str], bool] = {}

    def same(self, a: str, b: str) -> bool:
        key = (a, b) if a <= b else (b, a)
        hit = self._cache.get(key)
        if hit is None:
            hit = a == b or phrase_match(a, b, self.backend, self.threshold).equivalent
            self._cache[key] = hit
        return hit


def as_matcher(backend) -> PhraseMatcher:
    if isinstance(backend, PhraseMatcher):
        return backend
    return PhraseMatcher(backend)
