"""Document-aligned corpus loading, vocabulary, batch planning and the synthetic context task.

Corpus files are UTF-8 text, one whitespace-tokenized sentence per line; a
line consisting exactly of the boundary marker (default ``<DOC>``) in both
files starts a new document. Ground-truth tables for the synthetic task
are tab-separated lines: doc_id, sentence_idx, token_position, expected_token.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD_ID = 0
UNK_ID = 1
BOS_ID = 2
EOS_ID = 3
SPECIALS = ("<pad>", "<unk>", "<bos>", "<eos>")

DOC_MARKER = "<DOC>"


class CorpusError(ValueError):
    """Raised for malformed corpus files."""


@dataclass
class Document:
    """Ordered aligned sentence pairs; order is the discourse order."""

    id: str
    pairs: list  # list of (source_tokens, target_tokens), each a list[str]

    def __post_init__(self):
        if not self.pairs:
            raise CorpusError(f"document {self.id!r} has no sentences")

    def __len__(self):
        return len(self.pairs)


@dataclass
class Vocabulary:
    token_to_id: dict
    id_to_token: list

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def encode(self, tokens) -> list[int]:
        return [self.token_to_id.get(t, UNK_ID) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def save(self, path):
        Path(path).write_text("\n".join(self.id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens = Path(path).read_text(encoding="utf-8").splitlines()
        if tokens[: len(SPECIALS)] != list(SPECIALS):
            raise CorpusError(f"vocabulary file {path} does not start with the special tokens")
        return cls({t: i for i, t in enumerate(tokens)}, tokens)


def build_vocab(documents, cap: int, side: str) -> Vocabulary:
    """Keep the cap-4 most frequent tokens of one side; ties break lexicographically."""
    if cap <= 4:
        raise CorpusError(f"vocabulary cap must exceed the 4 specials, got {cap}")
    if side not in ("source", "target"):
        raise ValueError(f"side must be 'source' or 'target', got {side!r}")
    idx = 0 if side == "source" else 1
    counts = Counter()
    for doc in documents:
        for pair in doc.pairs:
            counts.update(pair[idx])
    if not counts:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, _ in ranked[: cap - 4]]
    id_to_token = list(SPECIALS) + kept
    return Vocabulary({t: i for i, t in enumerate(id_to_token)}, id_to_token)


def _read_lines(path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def load_corpus(source_path, target_path, doc_boundary_marker: str = DOC_MARKER) -> list[Document]:
    """Read line-aligned source/target files into documents.

    A marker line must appear at the same index on both sides; a marker on
    one side only is an error naming the line.
    """
    src_lines = _read_lines(source_path)
    tgt_lines = _read_lines(target_path)
    if len(src_lines) != len(tgt_lines):
        raise CorpusError(
            f"line counts differ: {source_path} has {len(src_lines)}, {target_path} has {len(tgt_lines)}")
    documents: list[Document] = []
    pairs: list = []
    doc_idx = 0

    def flush():
        nonlocal pairs, doc_idx
        if pairs:
            documents.append(Document(id=f"doc{doc_idx}", pairs=pairs))
            doc_idx += 1
        pairs = []

    for lineno, (src, tgt) in enumerate(zip(src_lines, tgt_lines)):
        src_is_marker = src.strip() == doc_boundary_marker
        tgt_is_marker = tgt.strip() == doc_boundary_marker
        if src_is_marker != tgt_is_marker:
            side = "source" if src_is_marker else "target"
            raise CorpusError(f"document marker on {side} side only at line {lineno}")
        if src_is_marker:
            flush()
            continue
        pairs.append((src.split(), tgt.split()))
    flush()
    return documents


def write_corpus(documents, source_path, target_path, doc_boundary_marker: str = DOC_MARKER):
    """Inverse of load_corpus; the first document carries no leading marker."""
    src_out, tgt_out = [], []
    for i, doc in enumerate(documents):
        if i > 0:
            src_out.append(doc_boundary_marker)
            tgt_out.append(doc_boundary_marker)
        for src, tgt in doc.pairs:
            src_out.append(" ".join(src))
            tgt_out.append(" ".join(tgt))
    Path(source_path).write_text("\n".join(src_out) + "\n", encoding="utf-8")
    Path(target_path).write_text("\n".join(tgt_out) + "\n", encoding="utf-8")


@dataclass
class BatchPlan:
    """Ordered steps of (document id, sentence index) processed together.

    Within any document, sentence n is always scheduled strictly after
    sentence n-1, so context caches are complete when a sentence trains.
    """

    steps: list = field(default_factory=list)

    def __iter__(self):
        return iter(self.steps)

    def __len__(self):
        return len(self.steps)


def plan_batches(documents, max_tokens_per_step: int, shuffle_seed: int) -> BatchPlan:
    """Group sentences of equal document depth across documents.

    Documents are shuffled by seed; each step holds at most
    ``max_tokens_per_step`` source tokens (an overlong single sentence
    still gets its own step). Depth d steps all precede depth d+1 steps,
    which enforces the cache-validity ordering.
    """
    rng = np.random.default_rng(shuffle_seed)
    order = list(rng.permutation(len(documents)))
    max_depth = max((len(d) for d in documents), default=0)
    steps = []
    for depth in range(max_depth):
        current, tokens = [], 0
        for di in order:
            doc = documents[di]
            if depth >= len(doc):
                continue
            n_tok = len(doc.pairs[depth][0])
            if current and tokens + n_tok > max_tokens_per_step:
                steps.append(current)
                current, tokens = [], 0
            current.append((doc.id, depth))
            tokens += n_tok
        if current:
            steps.append(current)
    return BatchPlan(steps)


# ---------------------------------------------------------------------------
# synthetic context task


@dataclass
class TruthRecord:
    doc_id: str
    sentence_idx: int
    token_position: int
    expected_token: str


def write_truth(records, path):
    lines = [f"{r.doc_id}\t{r.sentence_idx}\t{r.token_position}\t{r.expected_token}" for r in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_truth(path) -> list[TruthRecord]:
    records = []
    for line in _read_lines(path):
        if not line.strip():
            continue
        doc_id, sent, pos, tok = line.split("\t")
        records.append(TruthRecord(doc_id, int(sent), int(pos), tok))
    return records


def gen_synthetic(seed: int, n_docs: int, doc_len: int, m_alternatives: int,
                  filler_vocab: int, window: int = 3, min_len: int = 3,
                  max_len: int = 6, doc_prefix: str = "syn"):
    """Generate an antecedent-resolution corpus.

    Each document plants one antecedent marker token in an early sentence
    and one ambiguous token in a later sentence at most ``window``
    sentences downstream; the ambiguous token's correct translation is
    determined solely by the antecedent. Every other token is a filler
    copied deterministically to the target side. Returns (documents,
    ground-truth records).
    """
    if doc_len < 2:
        raise ValueError(f"doc_len must be >= 2, got {doc_len}")
    if m_alternatives < 1:
        raise ValueError(f"m_alternatives must be >= 1, got {m_alternatives}")
    if window < 1:
        raise ValueError(f"the antecedent cannot sit within a context window of {window}")
    if filler_vocab < 1:
        raise ValueError("filler_vocab must be positive")
    if min_len < 1 or max_len < min_len:
        raise ValueError(f"bad sentence length range [{min_len}, {max_len}]")

    rng = np.random.default_rng(seed)
    fillers = [f"w{i}" for i in range(filler_vocab)]
    tgt_of = {f"w{i}": f"W{i}" for i in range(filler_vocab)}
    for i in range(m_alternatives):
        tgt_of[f"ant{i}"] = f"ANT{i}"

    documents, truth = [], []
    for n in range(n_docs):
        alt = int(rng.integers(m_alternatives))
        amb_sent = int(rng.integers(1, doc_len))
        ant_sent = int(rng.integers(max(0, amb_sent - window), amb_sent))
        lengths = [int(rng.integers(min_len, max_len + 1)) for _ in range(doc_len)]

        pairs = []
        doc_id = f"{doc_prefix}{n}"
        for s in range(doc_len):
            src = [fillers[int(i)] for i in rng.integers(filler_vocab, size=lengths[s])]
            if s == ant_sent:
                src[int(rng.integers(lengths[s]))] = f"ant{alt}"
            tgt = [tgt_of[t] for t in src]
            if s == amb_sent:
                pos = int(rng.integers(lengths[s]))
                src[pos] = "amb"
                tgt[pos] = f"REF{alt}"
                truth.append(TruthRecord(doc_id, s, pos, f"REF{alt}"))
            pairs.append((src, tgt))
        documents.append(Document(id=doc_id, pairs=pairs))
    return documents, truth


def context_accuracy(translated: dict, truth) -> tuple[float, int, int]:
    """Score decoded documents against a ground-truth table.

    ``translated`` maps doc_id -> list of target sentences (token lists).
    Returns (accuracy, hits, total); a missing document or too-short
    sentence counts as a miss.
    """
    hits = 0
    for rec in truth:
        sentences = translated.get(rec.doc_id)
        if sentences is None or rec.sentence_idx >= len(sentences):
            continue
        sent = sentences[rec.sentence_idx]
        if rec.token_position < len(sent) and sent[rec.token_position] == rec.expected_token:
            hits += 1
    total = len(truth)
    return (hits / total if total else 0.0), hits, total
