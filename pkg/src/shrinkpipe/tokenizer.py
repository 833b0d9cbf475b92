"""Word-level tokenizer, corpora, and the synthetic desk-scale data generator."""
from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .autodiff import seeded_rng

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
NUM_SPECIALS = len(SPECIALS)
TOKENIZER_VERSION = 1

_WORD_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class CorpusError(ValueError):
    pass


def split_words(text: str) -> list[str]:
    return _WORD_RE.findall(text)


class Tokenizer:
    def __init__(self, tokens: Sequence[str], frequencies: Sequence[int] | None = None):
        tokens = list(tokens)
        if tuple(tokens[:NUM_SPECIALS]) != SPECIALS:
            raise ValueError(f"first {NUM_SPECIALS} tokens must be the specials {SPECIALS}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate surface forms in vocabulary")
        self.tokens = tokens
        self.token_to_id = {tok: i for i, tok in enumerate(tokens)}
        freqs = [0] * len(tokens) if frequencies is None else [int(f) for f in frequencies]
        if len(freqs) != len(tokens):
            raise ValueError("frequencies must align with tokens")
        self.frequencies = freqs

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        return [self.token_to_id.get(w, UNK_ID) for w in split_words(text)]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids if i != PAD_ID)

    def to_dict(self) -> dict:
        return {
            "version": TOKENIZER_VERSION,
            "specials": list(SPECIALS),
            "tokens": self.tokens,
            "frequencies": self.frequencies,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tokenizer":
        if d.get("version") != TOKENIZER_VERSION:
            raise ValueError(f"unsupported tokenizer version {d.get('version')!r}")
        if list(d.get("specials", [])) != list(SPECIALS):
            raise ValueError("tokenizer specials do not match")
        return cls(d["tokens"], d.get("frequencies"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), ensure_ascii=False, indent=1) + "\n",
                              encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Tokenizer":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _rank_key(count: int, surface: str) -> tuple:
    return (-count, surface)


def build_tokenizer(texts: Iterable[str], vocab_size: int) -> Tokenizer:
    """Keep the ``vocab_size - 5`` most frequent words; the rest become UNK."""
    counts: Counter[str] = Counter()
    total = 0
    for line in texts:
        words = split_words(line)
        counts.update(words)
        total += len(words)
    if total == 0:
        raise CorpusError("cannot build a tokenizer from an empty corpus")
    if vocab_size < NUM_SPECIALS:
        raise ValueError(f"vocab_size must be at least {NUM_SPECIALS}")
    for special in SPECIALS:
        counts.pop(special, None)
    ranked = sorted(counts.items(), key=lambda kv: _rank_key(kv[1], kv[0]))
    kept = ranked[: vocab_size - NUM_SPECIALS]
    kept_total = sum(c for _, c in kept)
    freqs = [0, total - kept_total, 0, 0, 0] + [c for _, c in kept]
    return Tokenizer(list(SPECIALS) + [w for w, _ in kept], freqs)


def read_text_documents(path) -> list[str]:
    """One document per non-blank line of a UTF-8 text file."""
    p = Path(path)
    if not p.exists():
        raise CorpusError(f"corpus file not found: {p}")
    return [line.strip() for line in p.read_text(encoding="utf-8").splitlines() if line.strip()]


@dataclass
class Corpus:
    documents: list[list[int]]
    split: str = "train"

    def __post_init__(self):
        if self.split not in ("train", "validation"):
            raise ValueError(f"unknown split {self.split!r}")

    def __len__(self) -> int:
        return len(self.documents)

    @property
    def num_tokens(self) -> int:
        return sum(len(d) for d in self.documents)

    def check_ids(self, vocab_size: int) -> None:
        for d in self.documents:
            if d and max(d) >= vocab_size:
                raise CorpusError(f"corpus id {max(d)} >= vocab size {vocab_size}")

    def token_counts(self, vocab_size: int) -> np.ndarray:
        flat = np.fromiter((i for d in self.documents for i in d), dtype=np.int64)
        return np.bincount(flat, minlength=vocab_size)

    def remap(self, old_to_new: dict[int, int]) -> "Corpus":
        docs = [[old_to_new.get(i, UNK_ID) for i in d] for d in self.documents]
        return Corpus(docs, self.split)

    def sequences(self, seq_len: int) -> np.ndarray:
        """Pack documents into CLS-prefixed rows of ``seq_len``, PAD-filled."""
        body = seq_len - 1
        if body < 1:
            raise ValueError("seq_len must be at least 2")
        rows = []
        for d in self.documents:
            for start in range(0, max(len(d), 1), body):
                chunk = d[start:start + body]
                if not chunk:
                    continue
                rows.append([CLS_ID] + chunk + [PAD_ID] * (body - len(chunk)))
        if not rows:
            return np.zeros((0, seq_len), dtype=np.int64)
        return np.asarray(rows, dtype=np.int64)


def encode_corpus(tokenizer: Tokenizer, texts: Iterable[str], split: str = "train") -> Corpus:
    return Corpus([tokenizer.encode(t) for t in texts], split)


def train_validation_split(texts: Sequence[str], fraction: float = 0.05,
                           seed: int = 0) -> tuple[list[str], list[str]]:
    """Hold out ``fraction`` of documents (at least one) for validation."""
    n = len(texts)
    if n < 2:
        raise CorpusError("need at least two documents to split")
    n_val = max(1, int(round(n * fraction)))
    order = seeded_rng(seed).permutation(n)
    val_idx = set(order[:n_val].tolist())
    train = [t for i, t in enumerate(texts) if i not in val_idx]
    val = [t for i, t in enumerate(texts) if i in val_idx]
    return train, val


def select_top_tokens(tokenizer: Tokenizer, corpus: Corpus, n: int) -> list[int]:
    """Specials plus the ``n - 5`` most frequent non-special ids on ``corpus``."""
    if n < NUM_SPECIALS:
        raise ValueError(f"n must be at least {NUM_SPECIALS}, got {n}")
    V = tokenizer.vocab_size
    if n > V:
        raise ValueError(f"n={n} exceeds vocabulary size {V}")
    counts = corpus.token_counts(V)
    candidates = sorted(range(NUM_SPECIALS, V),
                        key=lambda i: _rank_key(int(counts[i]), tokenizer.tokens[i]))
    return list(range(NUM_SPECIALS)) + candidates[: n - NUM_SPECIALS]


# ------------------------------------------------------------------ synthetic

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
           "ch", "sh", "tr", "kl", "br", "st"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]


@dataclass(frozen=True)
class SyntheticSpec:
    num_topics: int = 6
    vocab_per_topic: int = 60
    tag_lexicon: dict = field(default_factory=lambda: {"PER": 12, "LOC": 8})
    doc_count: int = 6000
    doc_length: int = 32
    seed: int = 0
    num_function_words: int = 16

    def validate(self) -> None:
        if self.num_topics < 1 or self.vocab_per_topic < 2:
            raise ValueError("synthetic corpus needs at least one topic with two words")
        if self.doc_count < 1 or self.doc_length < 1:
            raise ValueError("doc_count and doc_length must be positive")
        if any(int(v) < 1 for v in self.tag_lexicon.values()):
            raise ValueError("each tag type needs at least one name")


@dataclass
class SyntheticData:
    texts: list[str]
    classification: list[tuple[str, str]]
    tagging: list[list[tuple[str, str]]]
    topic_words: list[list[str]]
    function_words: list[str]
    names: dict[str, list[tuple[str, ...]]]


def _word_factory(rng: np.random.Generator):
    seen: set[str] = set()

    def make(min_syl=2, max_syl=3) -> str:
        while True:
            n = int(rng.integers(min_syl, max_syl + 1))
            w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
                        for _ in range(n))
            if w not in seen:
                seen.add(w)
                return w

    return make


def generate_synthetic_corpus(spec: SyntheticSpec) -> SyntheticData:
    """Topic-conditioned Markov text with tagged multi-token names.

    Topic vocabularies are disjoint, every word has three preferred
    successors inside its topic, and each name token belongs to exactly one
    tag so gold tags follow from tokens alone.
    """
    spec.validate()
    rng = seeded_rng(spec.seed)
    word = _word_factory(rng)
    function_words = [word(1, 1) for _ in range(spec.num_function_words)]
    topic_words = [[word() for _ in range(spec.vocab_per_topic)] for _ in range(spec.num_topics)]
    names: dict[str, list[tuple[str, ...]]] = {}
    for tag in sorted(spec.tag_lexicon):
        count = int(spec.tag_lexicon[tag])
        names[tag] = [tuple(word(2, 2).capitalize() for _ in range(2 if j % 3 else 1))
                      for j in range(count)]
    successors = [rng.integers(0, spec.vocab_per_topic, size=(spec.vocab_per_topic, 3))
                  for _ in range(spec.num_topics)]
    succ_p = np.array([0.6, 0.3, 0.1])
    tag_names = sorted(names)

    texts, classification, tagging = [], [], []
    for _ in range(spec.doc_count):
        topic = int(rng.integers(spec.num_topics))
        vocab = topic_words[topic]
        toks: list[tuple[str, str]] = []
        cur = int(rng.integers(spec.vocab_per_topic))
        toks.append((vocab[cur], "O"))
        while len(toks) < spec.doc_length:
            r = rng.random()
            if r < 0.75:
                cur = int(successors[topic][cur, rng.choice(3, p=succ_p)])
                toks.append((vocab[cur], "O"))
            elif r < 0.9:
                toks.append((function_words[rng.integers(len(function_words))], "O"))
                cur = int(rng.integers(spec.vocab_per_topic))
            else:
                tag = tag_names[rng.integers(len(tag_names))]
                name = names[tag][rng.integers(len(names[tag]))]
                for j, part in enumerate(name):
                    toks.append((part, ("B-" if j == 0 else "I-") + tag))
        toks = toks[: spec.doc_length]
        text = " ".join(t for t, _ in toks)
        texts.append(text)
        classification.append((text, f"topic{topic}"))
        tagging.append(toks)
    return SyntheticData(texts, classification, tagging, topic_words, function_words, names)


def write_classification_tsv(pairs: Iterable[tuple[str, str]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for text, label in pairs:
            fh.write(f"{text}\t{label}\n")


def read_classification_tsv(path) -> list[tuple[str, str]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise CorpusError(f"{path}:{lineno}: expected text<TAB>label")
        text, label = line.rsplit("\t", 1)
        out.append((text, label))
    return out


def write_conll(sentences: Iterable[Sequence[tuple[str, str]]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sent in sentences:
            for tok, tag in sent:
                fh.write(f"{tok}\t{tag}\n")
            fh.write("\n")


def read_conll(path) -> list[list[tuple[str, str]]]:
    sentences, cur = [], []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            if cur:
                sentences.append(cur)
                cur = []
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise CorpusError(f"{path}:{lineno}: expected token<TAB>tag")
        cur.append((parts[0], parts[1]))
    if cur:
        sentences.append(cur)
    return sentences


def iter_rows(rows: np.ndarray, batch_size: int, rng: np.random.Generator | None = None
              ) -> Iterator[np.ndarray]:
    order = np.arange(len(rows)) if rng is None else rng.permutation(len(rows))
    for start in range(0, len(rows), batch_size):
        yield rows[order[start:start + batch_size]]
