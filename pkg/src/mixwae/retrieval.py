"""BM25 index over training contexts and exemplar retrieval.

A document is the concatenated surface-token sequence of a training pair's
context. Queries use the last utterance of the context only. The idf uses the
Lucene-style +1 smoothing, idf(t) = ln((N - df + 0.5) / (df + 0.5) + 1),
which keeps every score non-negative. Scoring sums over query tokens with
repetition (no query-frequency saturation term).
"""

import json
import math
from collections import Counter
from dataclasses import dataclass

from .corpus import ContextResponsePair, Utterance

INDEX_FORMAT = "mixwae-bm25"
INDEX_VERSION = 1


@dataclass
class ExemplarSet:
    """The k retrieved (context, response) pairs with scores for one query.

    exemplars is sorted by score descending and has length exactly k; when the
    candidate pool is short the top hit is repeated and `padded` is set.
    """
    exemplars: list  # list of (ContextResponsePair, float)
    query_pair_id: str
    padded: bool = False

    def __len__(self):
        return len(self.exemplars)

    def pairs(self):
        return [p for p, _ in self.exemplars]


class Bm25Index:
    """Inverted index with standard BM25 term statistics.

    Immutable after build_index; concurrent retrieval reads are safe.
    """

    def __init__(self, k1, b):
        if k1 <= 0:
            raise ValueError("k1 must be > 0")
        if not (0.0 <= b <= 1.0):
            raise ValueError("b must lie in [0, 1]")
        self.k1 = k1
        self.b = b
        self.pairs = {}        # pair_id -> ContextResponsePair
        self.doc_tf = {}       # pair_id -> Counter(term -> tf)
        self.doc_len = {}      # pair_id -> document length
        self.df = Counter()    # term -> document frequency
        self.avgdl = 0.0

    @property
    def size(self):
        return len(self.pairs)

    def idf(self, term):
        n = self.df.get(term, 0)
        return math.log((self.size - n + 0.5) / (n + 0.5) + 1.0)

    def score(self, query_tokens, pair_id):
        tf = self.doc_tf[pair_id]
        dl = self.doc_len[pair_id]
        norm = self.k1 * (1.0 - self.b + self.b * dl / self.avgdl)
        s = 0.0
        for t in query_tokens:
            f = tf.get(t, 0)
            if f == 0:
                continue
            s += self.idf(t) * f * (self.k1 + 1.0) / (f + norm)
        return s


def _doc_tokens(pair):
    toks = []
    for utt in pair.context:
        toks.extend(utt.surface_tokens())
    return toks


def build_index(pairs, k1=1.2, b=0.75):
    """Index the contexts of a training corpus for BM25 retrieval."""
    if not pairs:
        raise ValueError("cannot build a BM25 index over an empty corpus")
    index = Bm25Index(k1=k1, b=b)
    total_len = 0
    for pair in pairs:
        if pair.pair_id in index.pairs:
            raise ValueError(f"duplicate pair_id in corpus: {pair.pair_id}")
        toks = _doc_tokens(pair)
        index.pairs[pair.pair_id] = pair
        index.doc_tf[pair.pair_id] = Counter(toks)
        index.doc_len[pair.pair_id] = len(toks)
        total_len += len(toks)
        for term in set(toks):
            index.df[term] += 1
    index.avgdl = total_len / len(pairs)
    return index


def retrieve(index, query, k, exclude_self=True):
    """Top-k exemplars for a query context, by BM25 over its last utterance.

    Ties break on pair_id ascending. With exclude_self the query's own pair_id
    is filtered before truncation. A short candidate pool is padded by
    repeating the top hit so downstream tensor shapes stay static.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if index.size == 0:
        raise ValueError("index is empty")
    query_tokens = query.last_utterance().surface_tokens()
    scored = []
    for pair_id in index.pairs:
        if exclude_self and pair_id == query.pair_id:
            continue
        scored.append((pair_id, index.score(query_tokens, pair_id)))
    if not scored:
        raise ValueError(
            f"no retrieval candidates for {query.pair_id} after self-exclusion")
    scored.sort(key=lambda it: (-it[1], it[0]))
    top = scored[:k]
    padded = len(top) < k
    while len(top) < k:
        top.append(top[0])
    exemplars = [(index.pairs[pid], score) for pid, score in top]
    return ExemplarSet(exemplars=exemplars, query_pair_id=query.pair_id, padded=padded)


def save_index(index, path):
    """Persist the index as self-describing JSON (format/version/k1/b header)."""
    payload = {
        "format": INDEX_FORMAT,
        "version": INDEX_VERSION,
        "k1": index.k1,
        "b": index.b,
        "avgdl": index.avgdl,
        "pairs": [
            {
                "pair_id": pid,
                "context": [u.raw_text for u in pair.context],
                "response": pair.response.raw_text,
            }
            for pid, pair in index.pairs.items()
        ],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, ensure_ascii=False)


def load_index(path):
    with open(path, encoding="utf-8") as f:
        payload = json.load(f)
    if payload.get("format") != INDEX_FORMAT:
        raise ValueError(f"{path} is not a {INDEX_FORMAT} file")
    if payload.get("version") != INDEX_VERSION:
        raise ValueError(f"unsupported index version {payload.get('version')}")
    pairs = [
        ContextResponsePair(
            context=[Utterance.from_text(t) for t in rec["context"]],
            response=Utterance.from_text(rec["response"]),
            pair_id=rec["pair_id"],
        )
        for rec in payload["pairs"]
    ]
    index = build_index(pairs, k1=payload["k1"], b=payload["b"])
    return index
