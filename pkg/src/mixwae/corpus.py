"""Data model, tokenization, vocabulary and the synthetic multimodal dialogue task.

The corpus layer is deliberately framework-free: everything here operates on
plain Python lists of token strings / ids so that retrieval and metrics share
the exact same token stream as the model.

Tokenization is lowercased whitespace splitting with punctuation detached
("hello, world!" -> ["hello", ",", "world", "!"]). Ids 0..3 are reserved for
PAD/UNK/BOS/EOS.
"""

import json
import re
import random
from collections import Counter
from dataclasses import dataclass, field

PAD_ID = 0
UNK_ID = 1
BOS_ID = 2
EOS_ID = 3
RESERVED_TOKENS = ["<pad>", "<unk>", "<bos>", "<eos>"]

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text):
    """Lowercase and split on whitespace with punctuation detached."""
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens):
    return " ".join(tokens)


def normalize(text):
    """Canonical surface form: lowercased, single-spaced, punctuation detached."""
    return detokenize(tokenize(text))


@dataclass
class Utterance:
    """One turn of dialogue: token ids plus the raw surface string.

    raw_text is retained because retrieval and the automatic metrics operate
    on surface tokens, not ids.
    """
    tokens: list
    raw_text: str

    @classmethod
    def from_text(cls, text, vocab=None):
        toks = tokenize(text)
        ids = vocab.encode(toks) if vocab is not None else []
        return cls(tokens=ids, raw_text=text)

    def surface_tokens(self):
        return tokenize(self.raw_text)


@dataclass
class ContextResponsePair:
    """A training/eval instance: multi-turn context plus the gold response."""
    context: list  # list of Utterance, oldest first, at least one turn
    response: Utterance
    pair_id: str

    def last_utterance(self):
        return self.context[-1]


class CorpusError(ValueError):
    """Malformed corpus input (bad JSONL line, empty turn, ...)."""


class Vocabulary:
    """Bijective token<->id maps with fixed reserved ids 0..3."""

    def __init__(self, tokens, embedding_dim=200):
        if embedding_dim <= 0:
            raise ValueError("embedding_dim must be positive")
        self.embedding_dim = embedding_dim
        self.token2id = {}
        self.id2token = {}
        for tok in RESERVED_TOKENS + list(tokens):
            if tok in self.token2id:
                raise ValueError(f"duplicate token in vocabulary: {tok!r}")
            idx = len(self.token2id)
            self.token2id[tok] = idx
            self.id2token[idx] = tok

    def __len__(self):
        return len(self.token2id)

    def __contains__(self, token):
        return token in self.token2id

    def encode(self, tokens):
        return [self.token2id.get(t, UNK_ID) for t in tokens]

    def decode(self, ids, skip_special=True):
        out = []
        for i in ids:
            tok = self.id2token[int(i)]
            if skip_special and tok in ("<pad>", "<bos>", "<eos>"):
                continue
            out.append(tok)
        return out

    def encode_text(self, text):
        return self.encode(tokenize(text))

    def decode_to_text(self, ids):
        return detokenize(self.decode(ids))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for tok, idx in sorted(self.token2id.items(), key=lambda kv: kv[1]):
                f.write(f"{tok}\t{idx}\n")

    @classmethod
    def load(cls, path, embedding_dim=200):
        entries = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, idx = line.split("\t")
                entries.append((int(idx), tok))
        entries.sort()
        tokens = [tok for idx, tok in entries]
        if tokens[: len(RESERVED_TOKENS)] != RESERVED_TOKENS:
            raise CorpusError(f"vocabulary file {path} lacks the reserved id block")
        return cls(tokens[len(RESERVED_TOKENS):], embedding_dim=embedding_dim)


def attach_vocabulary(pairs, vocab):
    """Re-encode every utterance's token ids under vocab (OOV -> UNK), in place."""
    for pair in pairs:
        for utt in pair.context:
            utt.tokens = vocab.encode(utt.surface_tokens())
        pair.response.tokens = vocab.encode(pair.response.surface_tokens())
    return pairs


def load_jsonl(path):
    """Load context/response pairs from a JSON-lines file.

    Each line must be an object with "context" (non-empty array of non-empty
    strings) and "response" (non-empty string). Token ids are left empty until
    a vocabulary is attached via attach_vocabulary.
    """
    pairs = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path}: malformed JSON on line {lineno}: {e}") from e
            if not isinstance(obj, dict) or "context" not in obj or "response" not in obj:
                raise CorpusError(
                    f"{path}: line {lineno} must be an object with 'context' and 'response'")
            ctx = obj["context"]
            resp = obj["response"]
            if not isinstance(ctx, list) or len(ctx) == 0:
                raise CorpusError(f"{path}: pair {lineno}: context must be a non-empty array")
            if not isinstance(resp, str) or not tokenize(resp):
                raise CorpusError(f"{path}: pair {lineno}: response is empty")
            turns = []
            for t, text in enumerate(ctx):
                if not isinstance(text, str) or not tokenize(text):
                    raise CorpusError(f"{path}: pair {lineno}: context turn {t} is empty")
                turns.append(Utterance.from_text(text))
            pair_id = obj.get("pair_id", f"line{lineno:06d}")
            pairs.append(ContextResponsePair(turns, Utterance.from_text(resp), pair_id))
    return pairs


def save_jsonl(pairs, path):
    with open(path, "w", encoding="utf-8") as f:
        for pair in pairs:
            obj = {
                "pair_id": pair.pair_id,
                "context": [u.raw_text for u in pair.context],
                "response": pair.response.raw_text,
            }
            f.write(json.dumps(obj, ensure_ascii=False) + "\n")


def build_vocabulary(pairs, min_count=1, max_size=20000, embedding_dim=200):
    """Frequency-ranked vocabulary over all context and response tokens.

    Tokens with frequency >= min_count are kept, ranked by frequency with
    lexicographic tie-break, then truncated so the total size (including the
    4 reserved ids) does not exceed max_size.
    """
    if not pairs:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for pair in pairs:
        for utt in pair.context:
            counts.update(utt.surface_tokens())
        counts.update(pair.response.surface_tokens())
    ranked = sorted(
        (tok for tok, c in counts.items() if c >= min_count),
        key=lambda tok: (-counts[tok], tok),
    )
    keep = max(0, max_size - len(RESERVED_TOKENS))
    vocab = Vocabulary(ranked[:keep], embedding_dim=embedding_dim)
    attach_vocabulary(pairs, vocab)
    return vocab


# ---------------------------------------------------------------------------
# Synthetic multimodal dialogue task
# ---------------------------------------------------------------------------

@dataclass
class SyntheticTaskSpec:
    """Desk-scale stand-in corpus: each context has several valid responses.

    Contexts are grouped by topic and draw their modes_per_context template
    responses from a shared per-topic pool (twice that size), so same-topic
    contexts have overlapping but not identical mode sets. Context strings mix
    a topic word with per-context filler, which makes BM25 retrieval surface
    same-topic exemplars whose responses are plausible alternative modes
    rather than exact duplicates of the query's own set.
    """
    n_contexts: int
    modes_per_context: int = 3
    noise_rate: float = 0.0
    seed: int = 0
    pairs_per_context: int = 0     # 0 -> 2 * modes_per_context
    contexts_per_topic: int = 4


_TOPIC_WORDS = [
    "tea", "coffee", "rent", "music", "soccer", "novels", "hiking", "pasta",
    "winter", "jazz", "chess", "gardens", "trains", "whales", "poetry", "cider",
    "cinema", "sailing", "deserts", "violins", "bridges", "comets", "orchids",
    "canyons", "glaciers", "lanterns", "meadows", "harbors", "spices", "quilts",
    "engines", "rivers", "castles", "falcons", "markets", "tunnels", "beacons",
    "orchards", "pebbles", "anthems",
]

_OPENERS = ["so", "hey", "well", "say", "right", "ok"]
_FILLERS = ["honestly", "lately", "again", "anyway", "maybe", "somehow",
            "frankly", "overall", "tonight", "perhaps", "still", "clearly"]
_ASK_TEMPLATES = [
    "what do you think about {topic} ?",
    "how do you feel about {topic} ?",
    "any thoughts on {topic} ?",
    "tell me about {topic} .",
    "what about {topic} then ?",
    "is {topic} worth it ?",
]
_LEAD_TEMPLATES = [
    "i was wondering something .",
    "got a minute ?",
    "quick question for you .",
    "let me ask you something .",
]
_PHRASE_HEADS = ["sounds", "seems", "looks", "feels", "gets"]
_PHRASE_TAILS = [
    "great to me", "fine i guess", "boring honestly", "pretty odd", "too pricey",
    "quite nice", "rather dull", "really fun", "a bit much", "worth a try",
    "old fashioned", "very relaxing",
]


def _topic_word(i):
    base = _TOPIC_WORDS[i % len(_TOPIC_WORDS)]
    return base if i < len(_TOPIC_WORDS) else f"{base}{i // len(_TOPIC_WORDS)}"


def _phrase_pool(rng, size):
    combos = [f"{h} {t}" for h in _PHRASE_HEADS for t in _PHRASE_TAILS]
    rng.shuffle(combos)
    if size > len(combos):
        raise ValueError(f"phrase pool exhausted: need {size}, have {len(combos)}")
    return combos[:size]


def generate_synthetic(spec):
    """Generate (train, valid, test) pair lists plus the mode manifest.

    Deterministic given spec.seed. Every context keeps at least one pair in
    train so retrieval has signal for every valid/test context. The manifest
    maps context_id -> list of normalized mode strings; pair ids follow the
    "ctx####-p##" convention so a pair's context_id is its prefix.
    """
    if spec.modes_per_context < 2:
        raise ValueError("modes_per_context must be >= 2: the task must be multimodal")
    if not (0.0 <= spec.noise_rate <= 1.0):
        raise ValueError("noise_rate must lie in [0, 1]")
    if spec.n_contexts < 1:
        raise ValueError("n_contexts must be >= 1")

    rng = random.Random(spec.seed)
    pairs_per_context = spec.pairs_per_context or 2 * spec.modes_per_context
    n_topics = max(2, spec.n_contexts // max(1, spec.contexts_per_topic))
    pool = _phrase_pool(rng, max(4 * spec.modes_per_context, 12))

    topic_pools = {}
    for t in range(n_topics):
        topic_pools[t] = rng.sample(pool, min(2 * spec.modes_per_context,
                                              len(pool)))

    manifest = {}
    splits = {"train": [], "valid": [], "test": []}
    for ci in range(spec.n_contexts):
        topic = ci % n_topics
        topic_tok = _topic_word(topic)
        context_id = f"ctx{ci:04d}"
        modes = rng.sample(topic_pools[topic], spec.modes_per_context)
        manifest[context_id] = [normalize(m) for m in modes]

        ask = rng.choice(_ASK_TEMPLATES).format(topic=topic_tok)
        filler = rng.choice(_FILLERS)
        turns = [f"{rng.choice(_OPENERS)} {filler} , {ask}"]
        if rng.random() < 0.5:
            turns = [rng.choice(_LEAD_TEMPLATES)] + turns

        for pj in range(pairs_per_context):
            mode = rng.choice(modes)
            if spec.noise_rate > 0 and rng.random() < spec.noise_rate:
                mode = rng.choice(pool)
            pair = ContextResponsePair(
                context=[Utterance.from_text(t) for t in turns],
                response=Utterance.from_text(mode),
                pair_id=f"{context_id}-p{pj:02d}",
            )
            if pj == 0:
                split = "train"  # every context is retrievable from train
            else:
                # probabilities chosen so the overall split is 8:1:1 after
                # the forced-train first pair
                m = pairs_per_context
                p_train = max(0.0, (0.8 * m - 1.0) / (m - 1.0))
                p_valid = (1.0 - p_train) / 2.0
                r = rng.random()
                split = ("train" if r < p_train
                         else "valid" if r < p_train + p_valid else "test")
            splits[split].append(pair)

    return splits["train"], splits["valid"], splits["test"], manifest


def context_id_of(pair):
    """Recover the synthetic manifest key from a generated pair id."""
    return pair.pair_id.split("-")[0]


def save_manifest(manifest, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_manifest(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)
