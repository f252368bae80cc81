import random

import httpx
import numpy as np
import pytest

from policyopt.similarity import (
    BackendUnavailable,
    CountEmbedding,
    Lexicon,
    RemoteEmbedding,
    phrase_match,
    sentence_similarity,
)

WORDS = ["man", "men", "woman", "dog", "dogs", "cat", "red car", "person", "people", "boat",
         "bicycle", "tree", "blue sky", "child", "kids", "horse", "painting", "sun", "mice", "how many"]


def random_phrases(seed, n):
    rng = random.Random(seed)
    return [" ".join(rng.sample(WORDS, rng.randint(1, 3))) for _ in range(n)]


def test_persons_people_equivalent():
    report = sentence_similarity("how many persons", "how many people")
    assert report.equivalent
    assert report.combined == pytest.approx(report.lexical_score * report.semantic_score)


def test_men_women_not_equivalent():
    report = sentence_similarity("men", "women")
    assert not report.equivalent
    assert report.combined < 0.5


def test_identity_scores_one():
    r = sentence_similarity("a red car", "a red car")
    assert (r.lexical_score, r.semantic_score, r.combined, r.equivalent) == (1.0, 1.0, 1.0, True)


def test_symmetry_and_range_over_random_pairs():
    left, right = random_phrases(1, 200), random_phrases(2, 200)
    for a, b in zip(left, right):
        ab, ba = sentence_similarity(a, b), sentence_similarity(b, a)
        assert ab == ba
        for score in (ab.lexical_score, ab.semantic_score, ab.combined):
            assert 0.0 <= score <= 1.0
        assert sentence_similarity(a, a).combined == 1.0


def test_empty_phrase_rejected():
    with pytest.raises(ValueError):
        sentence_similarity("", "dog")


def test_custom_lexicon():
    lex = Lexicon([("sofa", "couch")])
    assert sentence_similarity("sofa", "couch", CountEmbedding(lex), lex).equivalent
    assert not sentence_similarity("sofa", "couch").equivalent


def test_lexicon_file(tmp_path):
    path = tmp_path / "syn.json"
    path.write_text('[["auto", "car"]]')
    assert Lexicon.load(path).canonical_word("car") == "auto"


class _Broken:
    def embed(self, texts):
        raise BackendUnavailable("down")


def test_backend_failure_degrades_to_lexical():
    with pytest.raises(BackendUnavailable):
        sentence_similarity("dogs", "dog", _Broken())
    report = phrase_match("dogs", "dog", _Broken())
    assert report.degraded and report.equivalent
    assert report.combined == report.lexical_score


def test_remote_provider_reads_embeddings():
    def handler(request):
        return httpx.Response(200, json={"data": [{"embedding": [1.0, 0.0]}, {"embedding": [1.0, 0.0]}]})
    remote = RemoteEmbedding("http://embed.test/v1/embeddings", "m", transport=httpx.MockTransport(handler))
    assert np.allclose(remote.embed(["a", "b"]), [[1, 0], [1, 0]])


def test_remote_provider_failure_is_backend_unavailable():
    remote = RemoteEmbedding("http://embed.test/v1/embeddings", "m",
                             transport=httpx.MockTransport(lambda r: httpx.Response(503)))
    with pytest.raises(BackendUnavailable):
        remote.embed(["a", "b"])
