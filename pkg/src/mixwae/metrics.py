"""Automatic evaluation: smoothed BLEU R/P/F1, BOW-embedding scores, distinct.

All metrics operate on surface-token lists (same tokenizer as the corpus) and
score a SampleSet: the S responses sampled for one test context against the
single gold reference. Per-context values are aggregated over contexts by
plain means. Every reported value lies in [0, 1].

BLEU here is the cumulative n<4 variant (n = 1..3) with add-one smoothing on
the numerator and denominator of every modified n-gram precision, times the
brevity penalty exp(1 - |ref|/|hyp|) for short hypotheses. Recall is the max
sentence BLEU over the S samples, precision the mean; this mean/max
aggregation is a documented convention, not part of the BLEU definition.
"""

import logging
import math
from collections import Counter
from dataclasses import dataclass, asdict

import numpy as np

log = logging.getLogger(__name__)

BLEU_MAX_N = 3


@dataclass
class SampleSet:
    """S generated token sequences plus the gold reference for one context."""
    context_id: str
    samples: list          # list of token lists, length S >= 1
    reference: list        # gold token list

    def validate(self):
        if len(self.samples) < 1:
            raise ValueError("a sample set needs at least one sample")
        return self


@dataclass
class MetricReport:
    bleu_r: float
    bleu_p: float
    bleu_f1: float
    bow_greedy: float
    bow_extrema: float
    bow_average: float
    intra_dist1: float
    intra_dist2: float
    inter_dist1: float
    inter_dist2: float
    n_contexts: int = 0

    FIELDS = ("bleu_r", "bleu_p", "bleu_f1", "bow_greedy", "bow_extrema",
              "bow_average", "intra_dist1", "intra_dist2", "inter_dist1",
              "inter_dist2")

    def validate(self):
        for name in self.FIELDS:
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name}={v} outside [0, 1]")
        return self

    def to_dict(self):
        return asdict(self)


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def sentence_bleu(hyp, ref):
    """Add-one smoothed cumulative BLEU over n = 1..3 with brevity penalty."""
    if not hyp or not ref:
        raise ValueError("sentence_bleu requires non-empty sequences")
    log_p = 0.0
    for n in range(1, BLEU_MAX_N + 1):
        hyp_ngrams = _ngrams(hyp, n)
        ref_ngrams = _ngrams(ref, n)
        total = sum(hyp_ngrams.values())
        match = sum((hyp_ngrams & ref_ngrams).values())
        log_p += math.log((match + 1.0) / (total + 1.0))
    bleu = math.exp(log_p / BLEU_MAX_N)
    if len(hyp) < len(ref):
        bleu *= math.exp(1.0 - len(ref) / len(hyp))
    return bleu


def bleu_prf(sample_set):
    """(recall, precision, f1) for one context: max / mean over the samples."""
    sample_set.validate()
    scores = [sentence_bleu(s, sample_set.reference) for s in sample_set.samples]
    recall = max(scores)
    precision = sum(scores) / len(scores)
    f1 = _harmonic(recall, precision)
    return recall, precision, f1


def _harmonic(r, p):
    return 0.0 if r <= 0 or p <= 0 else 2.0 * r * p / (r + p)


# ---------------------------------------------------------------------------
# BOW embedding metrics
# ---------------------------------------------------------------------------

def _vectors(tokens, embeddings):
    """Embedding rows for the embedded tokens only (UNK/missing excluded)."""
    vecs = [embeddings[t] for t in tokens if t in embeddings]
    return np.asarray(vecs) if vecs else np.zeros((0, 0))


def _cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    # clamped to [0, 1] so the reported metric stays in range
    return min(1.0, max(0.0, float(np.dot(a, b) / (na * nb))))


def _greedy_directed(va, vb):
    sims = []
    for a in va:
        sims.append(max(_cosine(a, b) for b in vb))
    return sum(sims) / len(sims)


def _extrema_pool(vecs):
    hi, lo = vecs.max(axis=0), vecs.min(axis=0)
    return np.where(hi >= np.abs(lo), hi, lo)


def bow_sample_scores(hyp, ref, embeddings):
    """(greedy, extrema, average) for one hypothesis against the reference."""
    vh, vr = _vectors(hyp, embeddings), _vectors(ref, embeddings)
    if vh.size == 0 or vr.size == 0:
        log.info("all-UNK sentence scored 0 in BOW metrics")
        return 0.0, 0.0, 0.0
    greedy = 0.5 * (_greedy_directed(vh, vr) + _greedy_directed(vr, vh))
    extrema = _cosine(_extrema_pool(vh), _extrema_pool(vr))
    average = _cosine(vh.mean(axis=0), vr.mean(axis=0))
    return greedy, extrema, average


def bow_scores(sample_set, embeddings):
    """Per-context (greedy, extrema, average): max over the S samples."""
    sample_set.validate()
    per_sample = [bow_sample_scores(s, sample_set.reference, embeddings)
                  for s in sample_set.samples]
    return tuple(max(col) for col in zip(*per_sample))


# ---------------------------------------------------------------------------
# distinct n-grams
# ---------------------------------------------------------------------------

def _distinct_ratio(ngram_counts):
    total = sum(ngram_counts.values())
    if total == 0:
        return 1.0   # shorter-than-n convention
    return len(ngram_counts) / total


def distinct(sample_set):
    """(intra_d1, intra_d2, inter_d1, inter_d2) for one context.

    intra: distinct ratio within each sample, averaged over samples.
    inter: ratio over the n-grams pooled across all S samples.
    """
    sample_set.validate()
    out = []
    for n in (1, 2):
        ratios = []
        for s in sample_set.samples:
            if len(s) < n:
                log.debug("sample shorter than n=%d counts as ratio 1", n)
            ratios.append(_distinct_ratio(_ngrams(s, n)))
        out.append(sum(ratios) / len(ratios))
    for n in (1, 2):
        pooled = Counter()
        for s in sample_set.samples:
            pooled.update(_ngrams(s, n))
        out.append(_distinct_ratio(pooled))
    return tuple(out)


# ---------------------------------------------------------------------------
# corpus-level aggregation and embeddings
# ---------------------------------------------------------------------------

def evaluate_sample_sets(sample_sets, embeddings, pooled_inter=False):
    """MetricReport over a list of SampleSet (means over contexts)."""
    if not sample_sets:
        raise ValueError("no sample sets to evaluate")
    acc = {name: 0.0 for name in MetricReport.FIELDS}
    for ss in sample_sets:
        r, p, f1 = bleu_prf(ss)
        g, e, a = bow_scores(ss, embeddings)
        i1, i2, x1, x2 = distinct(ss)
        for name, v in zip(MetricReport.FIELDS, (r, p, f1, g, e, a, i1, i2, x1, x2)):
            acc[name] += v
    report = MetricReport(**{k: v / len(sample_sets) for k, v in acc.items()},
                          n_contexts=len(sample_sets))
    if pooled_inter:
        for field, n in (("inter_dist1", 1), ("inter_dist2", 2)):
            pooled = Counter()
            for ss in sample_sets:
                for s in ss.samples:
                    pooled.update(_ngrams(s, n))
            setattr(report, field, _distinct_ratio(pooled))
    return report.validate()


def load_glove(path):
    """GloVe-format text file: token followed by its vector, one per line."""
    table = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            parts = line.rstrip().split(" ")
            if len(parts) < 2:
                continue
            table[parts[0]] = np.asarray([float(x) for x in parts[1:]])
    if not table:
        raise ValueError(f"no embeddings found in {path}")
    return table


def random_embeddings(tokens, dim=50, seed=0):
    """Deterministic random table keyed by seed, for desk-scale evaluation."""
    rs = np.random.RandomState(seed)
    table = {}
    for tok in sorted(set(tokens)):
        if tok == "<unk>":
            continue
        table[tok] = rs.normal(size=dim)
    return table
