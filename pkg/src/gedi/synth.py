"""Synthetic class-labelled corpora from sources with known distributions.

Two canonical sources are provided.  ``s1`` is small enough that every
quantity can be checked by hand: tokens {A, B}, two classes, order 0,
P(A | class0) = 0.8 and P(A | class1) = 0.2, lengths uniform in [8, 16].
``s2`` is an order-1 source with 4 classes over 8 tokens whose transition
tables are drawn from a seed; it shares most of its structure across classes
so that classes differ only through small per-class offsets.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import networkx as nx
import numpy as np
from scipy.special import logsumexp, softmax

from .cclm import ControlCodeSet, TabularCCLM, Vocab, from_probabilities
from .errors import ConfigError, DataError, FormatVersionError, ParseError, TokenOutOfRangeError

SOURCE_FORMAT = "gedi-source"
SOURCE_VERSION = 1
CORPUS_MAGIC = "#gedi-corpus"
CORPUS_VERSION = 1
SPLIT_TAGS = ("A", "B", "val", "-")
VALIDATION_FRACTION = 0.1


@dataclass
class SourceSpec:
    """Exact generative source: per-class order-k next-token probabilities.

    ``probs`` has shape ``(C, (V + 1) ** order, V)`` using the same context
    layout as :class:`~gedi.cclm.TabularCCLM`.  Lengths are uniform in
    ``[min_len, max_len]`` when ``stop_prob`` is None, otherwise
    ``min_len`` plus a geometric number of extra tokens, capped at ``max_len``.
    """

    vocab: Vocab
    class_names: tuple[str, ...]
    order: int
    probs: np.ndarray
    min_len: int
    max_len: int
    stop_prob: float | None = None
    seed: int | None = None
    name: str = "custom"

    def __post_init__(self):
        self.class_names = tuple(self.class_names)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        expected = (len(self.class_names), (self.vocab.size + 1) ** self.order, self.vocab.size)
        if self.probs.shape != expected:
            raise ConfigError(f"probability table shape {self.probs.shape} != {expected}")
        if np.any(self.probs < 0) or not np.allclose(self.probs.sum(-1), 1.0, atol=1e-12):
            raise ConfigError("every source cell must be a probability distribution")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("need 1 <= min_len <= max_len")
        if self.stop_prob is not None and not 0 < self.stop_prob <= 1:
            raise ConfigError("stop_prob must be in (0, 1]")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def to_model(self, alpha: float = 1.0) -> TabularCCLM:
        return from_probabilities(self.vocab, ControlCodeSet(self.class_names), self.order,
                                  self.probs, alpha=alpha)

    def to_dict(self) -> dict:
        return {
            "format": SOURCE_FORMAT,
            "version": SOURCE_VERSION,
            "name": self.name,
            "vocab": list(self.vocab.tokens),
            "eos": self.vocab.eos,
            "class_names": list(self.class_names),
            "order": self.order,
            "min_len": self.min_len,
            "max_len": self.max_len,
            "stop_prob": self.stop_prob,
            "seed": self.seed,
            "probs": self.probs.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SourceSpec":
        if d.get("format") != SOURCE_FORMAT:
            raise ParseError("not a source specification")
        if d.get("version") != SOURCE_VERSION:
            raise FormatVersionError(f"unsupported source version {d.get('version')!r}")
        return cls(Vocab(tuple(d["vocab"]), d.get("eos")), tuple(d["class_names"]), d["order"],
                   np.array(d["probs"], dtype=np.float64), d["min_len"], d["max_len"],
                   d.get("stop_prob"), d.get("seed"), d.get("name", "custom"))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def save_source(spec: SourceSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=1) + "\n")


def load_source(path) -> SourceSpec:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(str(exc), line=exc.lineno, path=path) from None
    return SourceSpec.from_dict(d)


def s1() -> SourceSpec:
    probs = np.array([[[0.8, 0.2]], [[0.2, 0.8]]])
    return SourceSpec(Vocab(("A", "B")), ("class0", "class1"), 0, probs, 8, 16, name="s1")


def s2(seed: int = 0, n_tokens: int = 8, n_classes: int = 4, shared_scale: float = 3.0,
       class_scale: float = 1.5) -> SourceSpec:
    """Order-1 source: shared transition logits plus per-class offsets.

    The class signal lives in the transitions, so an order-0 model of this
    source is misspecified (the regime where discriminative training helps).
    """
    rng = np.random.default_rng(seed)
    shared = rng.normal(0.0, shared_scale, size=(n_tokens + 1, n_tokens))
    offsets = rng.normal(0.0, class_scale, size=(n_classes, n_tokens + 1, n_tokens))
    probs = softmax(shared[None] + offsets, axis=-1)
    vocab = Vocab(tuple(f"t{i}" for i in range(n_tokens)))
    names = tuple(f"c{i}" for i in range(n_classes))
    return SourceSpec(vocab, names, 1, probs, 4, 20, stop_prob=0.12, seed=seed, name="s2")


SOURCES = {"s1": lambda seed: s1(), "s2": s2}


@dataclass
class LabeledCorpus:
    vocab: Vocab
    class_names: tuple[str, ...]
    sequences: list[tuple[int, ...]]
    labels: list[int]
    splits: list[str] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.class_names = tuple(self.class_names)
        self.sequences = [tuple(int(t) for t in s) for s in self.sequences]
        self.labels = [int(c) for c in self.labels]
        if not self.splits:
            self.splits = ["-"] * len(self.sequences)
        if not len(self.sequences) == len(self.labels) == len(self.splits):
            raise DataError("sequences, labels and split tags must align")

    def __len__(self) -> int:
        return len(self.sequences)

    def __iter__(self):
        return iter(zip(self.sequences, self.labels))

    def subset(self, split: str) -> "LabeledCorpus":
        keep = [i for i, s in enumerate(self.splits) if s == split]
        return self.select(keep)

    def select(self, indices) -> "LabeledCorpus":
        return replace(self, sequences=[self.sequences[i] for i in indices],
                       labels=[self.labels[i] for i in indices],
                       splits=[self.splits[i] for i in indices],
                       provenance=dict(self.provenance))

    def __eq__(self, other):
        if not isinstance(other, LabeledCorpus):
            return NotImplemented
        return (self.vocab == other.vocab and self.class_names == other.class_names
                and self.sequences == other.sequences and self.labels == other.labels
                and self.splits == other.splits and self.provenance == other.provenance)


def _sample_length(spec: SourceSpec, rng: np.random.Generator) -> int:
    if spec.stop_prob is None:
        return int(rng.integers(spec.min_len, spec.max_len + 1))
    return min(spec.max_len, spec.min_len + int(rng.geometric(spec.stop_prob)) - 1)


def sample_corpus(spec: SourceSpec, n: int, seed: int) -> LabeledCorpus:
    """Draw ``n`` sequences with uniformly random classes.

    Each sequence gets its own child generator spawned from ``seed`` so the
    result does not depend on the order in which sequences are produced.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    cdf = np.cumsum(spec.probs, axis=-1)
    vocab_size = spec.vocab.size
    base = vocab_size + 1
    n_ctx = base ** spec.order
    sequences, labels = [], []
    for child in np.random.SeedSequence(seed).spawn(n):
        rng = np.random.default_rng(child)
        c = int(rng.integers(spec.n_classes))
        length = _sample_length(spec, rng)
        draws = rng.random(length)
        ctx = sum(vocab_size * base ** i for i in range(spec.order))
        seq = []
        for u in draws:
            tok = min(int(np.searchsorted(cdf[c, ctx], u, side="right")), vocab_size - 1)
            seq.append(tok)
            if spec.order:
                ctx = (ctx * base + tok) % n_ctx
        sequences.append(tuple(seq))
        labels.append(c)
    provenance = {"source": spec.name, "source_digest": spec.digest(), "seed": seed, "n": n}
    return LabeledCorpus(spec.vocab, spec.class_names, sequences, labels, provenance=provenance)


def sequence_loglik(spec: SourceSpec, class_id: int, tokens) -> float:
    vocab_size = spec.vocab.size
    base = vocab_size + 1
    n_ctx = base ** spec.order
    ctx = sum(vocab_size * base ** i for i in range(spec.order))
    total = 0.0
    for tok in tokens:
        if not 0 <= tok < vocab_size:
            raise TokenOutOfRangeError(f"token id {tok} out of range [0, {vocab_size})")
        total += np.log(spec.probs[class_id, ctx, tok])
        if spec.order:
            ctx = (ctx * base + tok) % n_ctx
    return float(total)


def oracle_posterior(spec: SourceSpec, tokens) -> np.ndarray:
    """Exact Bayes posterior over classes under a uniform prior."""
    ll = np.array([sequence_loglik(spec, c, tokens) for c in range(spec.n_classes)])
    return np.exp(ll - logsumexp(ll))


def _controlled_round(row_totals, col_totals) -> np.ndarray:
    """Integer table with the given margins, each cell within 1 of proportional.

    Cells start at floor(n_c * m_s / n); the leftover units are placed by an
    integral max-flow restricted to cells whose proportional value is
    fractional.
    """
    n = sum(row_totals)
    rows, cols = len(row_totals), len(col_totals)
    table = np.zeros((rows, cols), dtype=int)
    g = nx.DiGraph()
    for c, nc in enumerate(row_totals):
        for s, ms in enumerate(col_totals):
            q, r = divmod(nc * ms, n)
            table[c, s] = q
            if r:
                g.add_edge(("r", c), ("c", s), capacity=1)
    for c in range(rows):
        g.add_edge("src", ("r", c), capacity=int(row_totals[c] - table[c].sum()))
    for s in range(cols):
        g.add_edge(("c", s), "sink", capacity=int(col_totals[s] - table[:, s].sum()))
    _, flow = nx.maximum_flow(g, "src", "sink")
    for c in range(rows):
        for (_, s), f in flow.get(("r", c), {}).items():
            table[c, s] += f
    assert (table.sum(1) == np.asarray(row_totals)).all()
    assert (table.sum(0) == np.asarray(col_totals)).all()
    return table


def split_sizes(n: int) -> tuple[int, int, int]:
    """(|A|, |B|, |val|) for a corpus of size n."""
    if n < 3:
        raise DataError(f"corpus too small to split: {n} < 3")
    n_val = max(1, (n + 5) // 10)
    rest = n - n_val
    return (rest + 1) // 2, rest // 2, n_val


def assign_splits(corpus: LabeledCorpus, seed: int) -> LabeledCorpus:
    """Tag every sequence A, B or val with class-stratified proportions."""
    n_a, n_b, n_val = split_sizes(len(corpus))
    n_classes = len(corpus.class_names)
    members = [[] for _ in range(n_classes)]
    for i, c in enumerate(corpus.labels):
        members[c].append(i)
    counts = _controlled_round([len(m) for m in members], [n_val, n_a, n_b])
    rng = np.random.default_rng(seed)
    tags = ["-"] * len(corpus)
    for c in range(n_classes):
        order = rng.permutation(len(members[c]))
        bounds = np.cumsum(counts[c])
        for rank, j in enumerate(order):
            tag = "val" if rank < bounds[0] else ("A" if rank < bounds[1] else "B")
            tags[members[c][j]] = tag
    provenance = dict(corpus.provenance, split_seed=seed)
    return replace(corpus, splits=tags, provenance=provenance)


def half_split(corpus: LabeledCorpus, seed: int):
    """Return (A, B, validation) subsets; A and B are equal halves of the non-validation rest."""
    tagged = assign_splits(corpus, seed)
    return tagged.subset("A"), tagged.subset("B"), tagged.subset("val")


# -- corpus file -----------------------------------------------------------
#
#   #gedi-corpus 1
#   #vocab A B
#   #eos -
#   #classes class0 class1
#   #meta key=value            (zero or more)
#   <class> <split> <token> <token> ...
#   #end <record count>


def _format_meta_value(value) -> str:
    text = json.dumps(value)
    if any(ch.isspace() for ch in text):
        text = json.dumps(value, separators=(",", ":"))
    return text


def save_corpus(corpus: LabeledCorpus, path) -> None:
    lines = [
        f"{CORPUS_MAGIC} {CORPUS_VERSION}",
        "#vocab " + " ".join(corpus.vocab.tokens),
        f"#eos {corpus.vocab.eos or '-'}",
        "#classes " + " ".join(corpus.class_names),
    ]
    for key in sorted(corpus.provenance):
        lines.append(f"#meta {key}={_format_meta_value(corpus.provenance[key])}")
    for seq, c, tag in zip(corpus.sequences, corpus.labels, corpus.splits):
        lines.append(" ".join([corpus.class_names[c], tag] + [corpus.vocab.tokens[t] for t in seq]))
    lines.append(f"#end {len(corpus)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_corpus(path) -> LabeledCorpus:
    text = Path(path).read_text()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty corpus file", line=1, path=path)
    head = lines[0].split()
    if len(head) != 2 or head[0] != CORPUS_MAGIC:
        raise ParseError("missing '#gedi-corpus' header", line=1, path=path)
    if head[1] != str(CORPUS_VERSION):
        raise FormatVersionError(f"{path}: unsupported corpus version {head[1]!r}")

    vocab_tokens = eos = class_names = None
    provenance = {}
    sequences, labels, splits = [], [], []
    ended = False
    lineno = 1
    for lineno, line in enumerate(lines[1:], start=2):
        if ended:
            raise ParseError("content after #end", line=lineno, path=path)
        if line.startswith("#"):
            key, _, value = line[1:].partition(" ")
            if key == "vocab":
                vocab_tokens = tuple(value.split())
            elif key == "eos":
                eos = None if value.strip() == "-" else value.strip()
            elif key == "classes":
                class_names = tuple(value.split())
            elif key == "meta":
                k, sep, v = value.partition("=")
                if not sep:
                    raise ParseError(f"bad meta line {line!r}", line=lineno, path=path)
                try:
                    provenance[k] = json.loads(v)
                except json.JSONDecodeError:
                    raise ParseError(f"bad meta value {v!r}", line=lineno, path=path) from None
            elif key == "end":
                try:
                    declared = int(value)
                except ValueError:
                    raise ParseError(f"bad record count {value!r}", line=lineno, path=path) from None
                if declared != len(sequences):
                    raise ParseError(f"#end declares {declared} records, found {len(sequences)}",
                                     line=lineno, path=path)
                ended = True
            else:
                raise ParseError(f"unknown directive #{key}", line=lineno, path=path)
            continue
        if vocab_tokens is None or class_names is None:
            raise ParseError("record before #vocab/#classes header", line=lineno, path=path)
        fields = line.split()
        if len(fields) < 2:
            raise ParseError(f"expected '<class> <split> tokens...', got {line!r}",
                             line=lineno, path=path)
        cname, tag, names = fields[0], fields[1], fields[2:]
        if cname not in class_names:
            raise ParseError(f"unknown class {cname!r}", line=lineno, path=path)
        if tag not in SPLIT_TAGS:
            raise ParseError(f"unknown split tag {tag!r}", line=lineno, path=path)
        index = {name: i for i, name in enumerate(vocab_tokens)}
        try:
            seq = tuple(index[name] for name in names)
        except KeyError as exc:
            raise ParseError(f"unknown token {exc.args[0]!r}", line=lineno, path=path) from None
        sequences.append(seq)
        labels.append(class_names.index(cname))
        splits.append(tag)
    if not ended:
        raise ParseError("file truncated: missing #end line", line=lineno, path=path)
    return LabeledCorpus(Vocab(vocab_tokens, eos), class_names, sequences, labels, splits,
                         provenance)
