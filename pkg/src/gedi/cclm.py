"""Class-conditional language models with an exact tabular backend.

A :class:`TabularCCLM` stores one logit row per (class, context, next token)
where the context is the last ``order`` tokens, left-padded with BOS.  All
probabilities are exchanged as natural-log values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ClassOutOfRangeError,
    ConfigError,
    DataError,
    FormatVersionError,
    ParseError,
    TokenOutOfRangeError,
    VocabMismatchError,
)

BOS = "<bos>"
PAD = "<pad>"
CHECKPOINT_MAGIC = "gedi-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Vocab:
    """Ordered set of atomic token names.

    Ids ``0 .. size-1`` are the emittable tokens.  BOS and PAD are reserved
    context-only markers with ids ``size`` and ``size + 1``; they never appear
    in a next-token distribution.  ``eos`` optionally names one of the
    emittable tokens as the end-of-sequence marker.
    """

    tokens: tuple[str, ...]
    eos: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if not self.tokens:
            raise ConfigError("vocab must contain at least one token")
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigError("vocab token names must be unique")
        for name in self.tokens:
            if not name or any(ch.isspace() for ch in name) or name in (BOS, PAD):
                raise ConfigError(f"invalid token name {name!r}")
        if self.eos is not None and self.eos not in self.tokens:
            raise ConfigError(f"eos token {self.eos!r} not in vocab")

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def bos_id(self) -> int:
        return self.size

    @property
    def pad_id(self) -> int:
        return self.size + 1

    @property
    def eos_id(self) -> int | None:
        return None if self.eos is None else self.tokens.index(self.eos)

    def id(self, name: str) -> int:
        try:
            return self.tokens.index(name)
        except ValueError:
            raise TokenOutOfRangeError(f"unknown token {name!r}") from None

    def name(self, token_id: int) -> str:
        if token_id == self.bos_id:
            return BOS
        if token_id == self.pad_id:
            return PAD
        if not 0 <= token_id < self.size:
            raise TokenOutOfRangeError(f"token id {token_id} out of range [0, {self.size})")
        return self.tokens[token_id]

    def encode(self, names) -> list[int]:
        return [self.id(n) for n in names]

    def decode(self, ids) -> list[str]:
        return [self.name(int(i)) for i in ids]

    def extended(self, extra) -> "Vocab":
        """A new vocab with ``extra`` names appended; existing ids are unchanged."""
        return Vocab(self.tokens + tuple(n for n in extra if n not in self.tokens), self.eos)


@dataclass(frozen=True)
class ControlCodeSet:
    """Names of the control codes a model conditions on.

    In binarized mode the codes are exactly ``("true", "false")`` and
    ``class_names`` lists the class-name tokens (vocab entries) that are
    placed as the first sequence token to say which class is being tested.
    A single code is allowed for unconditional base models.
    """

    names: tuple[str, ...]
    anti: tuple[int, ...] | None = None
    binarized: bool = False
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.anti is not None:
            object.__setattr__(self, "anti", tuple(int(a) for a in self.anti))
        if not self.names:
            raise ConfigError("at least one control code is required")
        if len(set(self.names)) != len(self.names):
            raise ConfigError("control code names must be distinct")
        if self.binarized:
            if self.names != ("true", "false"):
                raise ConfigError("binarized code set must be exactly ('true', 'false')")
            if len(self.class_names) < 2:
                raise ConfigError("binarized code set needs at least two class names")
        if self.anti is not None:
            if len(self.anti) != len(self.names):
                raise ConfigError("anti-code list must have one entry per code")
            for c, a in enumerate(self.anti):
                if not 0 <= a < len(self.names) or a == c:
                    raise ConfigError(f"invalid anti code {a} for code {c}")

    @classmethod
    def binary_pair(cls, class_names) -> "ControlCodeSet":
        return cls(("true", "false"), binarized=True, class_names=tuple(class_names))

    @property
    def size(self) -> int:
        return len(self.names)

    def index(self, code) -> int:
        if isinstance(code, str):
            if code not in self.names:
                raise ClassOutOfRangeError(f"unknown control code {code!r}")
            return self.names.index(code)
        code = int(code)
        if not 0 <= code < len(self.names):
            raise ClassOutOfRangeError(f"class id {code} out of range [0, {len(self.names)})")
        return code

    def anti_code(self, code: int) -> int | None:
        if self.anti is not None:
            return self.anti[code]
        if len(self.names) == 2:
            return 1 - code
        return None


@dataclass(frozen=True)
class LMState:
    """Decoding state of one class-conditional stream.

    ``t`` counts tokens consumed after the control code, ``cumll`` is their
    summed log-probability under the conditioning class.  ``topic`` is the
    index of the class name a binarized model has read (None before that).
    """

    class_id: int
    context: tuple[int, ...]
    t: int = 0
    cumll: float = 0.0
    topic: int | None = None


def log_softmax(row: np.ndarray) -> np.ndarray:
    m = np.max(row, axis=-1, keepdims=True)
    shifted = row - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


class TabularCCLM:
    """Order-k class-conditional token model with a full logit table.

    ``logits`` has shape ``(n_classes, n_contexts, V)``.  A context is the
    last ``order`` tokens over V + 1 symbols (the extra one is BOS), so a
    standard model has ``(V + 1) ** order`` of them.  A binarized model
    also remembers the first class-name token it read, which multiplies
    the context count by ``len(class_names) + 1`` (slot 0 = no name yet).
    Without that slot the true/false code could only see the class name
    while it sat inside the n-gram window.
    ``alpha`` is the posterior length scale and ``bias`` the per-class
    log-prior.
    """

    def __init__(self, vocab: Vocab, codes: ControlCodeSet, order: int, logits,
                 alpha: float = 1.0, bias=None):
        if order < 0:
            raise ConfigError("order must be >= 0")
        if not alpha > 0 or not math.isfinite(alpha):
            raise ConfigError(f"alpha must be positive and finite, got {alpha}")
        self.vocab = vocab
        self.codes = codes
        self.order = int(order)
        self._logits = np.array(logits, dtype=np.float64)
        expected = table_shape(vocab, codes, self.order)
        if self.logits.shape != expected:
            raise DataError(f"logit table shape {self.logits.shape} != {expected}")
        self._topics = {}
        if codes.binarized:
            for i, name in enumerate(codes.class_names):
                if name not in vocab.tokens:
                    raise VocabMismatchError(f"class-name token {name!r} missing from vocab")
                self._topics[vocab.id(name)] = i
        self._table = None
        self.alpha = float(alpha)
        self.bias = np.zeros(codes.size) if bias is None else np.array(bias, dtype=np.float64)
        if self.bias.shape != (codes.size,):
            raise DataError("bias must have one entry per control code")

    @property
    def logits(self) -> np.ndarray:
        return self._logits

    @logits.setter
    def logits(self, value):
        value = np.array(value, dtype=np.float64)
        if value.shape != self._logits.shape:
            raise DataError(f"logit table shape {value.shape} != {self._logits.shape}")
        self._logits = value
        self._table = None

    @property
    def n_classes(self) -> int:
        return self.codes.size

    @property
    def n_contexts(self) -> int:
        return self.logits.shape[1]

    def copy(self) -> "TabularCCLM":
        return TabularCCLM(self.vocab, self.codes, self.order, self.logits.copy(),
                           self.alpha, self.bias.copy())

    @property
    def n_grams(self) -> int:
        """Number of distinct n-gram windows, ``(V + 1) ** order``."""
        return (self.vocab.size + 1) ** self.order

    def topic_of(self, token_id: int) -> int | None:
        """Class-name index of ``token_id`` in a binarized model, else None."""
        return self._topics.get(int(token_id))

    def context_index(self, context, topic: int | None = None) -> int:
        base = self.vocab.size + 1
        idx = 0
        for tok in context:
            idx = idx * base + tok
        if topic is not None:
            idx += (topic + 1) * self.n_grams
        return idx

    def _check_class(self, class_id) -> int:
        return self.codes.index(class_id)

    def _check_token(self, token_id) -> int:
        if isinstance(token_id, (bool, np.bool_)) or not isinstance(token_id, (int, np.integer)):
            raise TokenOutOfRangeError(f"token id must be an integer, got {token_id!r}")
        if not 0 <= token_id < self.vocab.size:
            raise TokenOutOfRangeError(
                f"token id {token_id} out of range [0, {self.vocab.size})")
        return int(token_id)

    def init_state(self, class_id) -> LMState:
        c = self._check_class(class_id)
        return LMState(c, (self.vocab.bos_id,) * self.order, 0, 0.0)

    def next_token_logprobs(self, state: LMState) -> np.ndarray:
        return self.log_prob_table()[state.class_id,
                                     self.context_index(state.context, state.topic)]

    def advance(self, state: LMState, token_id, logprobs=None) -> LMState:
        """Consume one token.  ``logprobs`` may pass in this state's already
        computed next-token row so the update costs no extra evaluation."""
        tok = self._check_token(token_id)
        if logprobs is None:
            logprobs = self.next_token_logprobs(state)
        lp = float(logprobs[tok])
        context = (state.context + (tok,))[1:] if self.order else ()
        topic = state.topic if state.topic is not None else self._topics.get(tok)
        return LMState(state.class_id, context, state.t + 1, state.cumll + lp, topic)

    def consume(self, state: LMState, tokens) -> LMState:
        for tok in tokens:
            state = self.advance(state, tok)
        return state

    def sequence_logprob(self, class_id, tokens) -> float:
        """log P(tokens | class), summed left to right exactly as ``advance`` does."""
        return self.consume(self.init_state(class_id), tokens).cumll

    def log_prob_table(self) -> np.ndarray:
        """Normalised log-probabilities for every cell; cached, read-only.

        The cache is dropped whenever ``logits`` is reassigned.  In-place
        edits of the logit array are not detected.
        """
        if self._table is None:
            table = log_softmax(self._logits)
            table.flags.writeable = False
            self._table = table
        return self._table

    def same_vocab(self, other: "TabularCCLM") -> bool:
        return self.vocab == other.vocab

    def __eq__(self, other):
        if not isinstance(other, TabularCCLM):
            return NotImplemented
        return (self.vocab == other.vocab and self.codes == other.codes
                and self.order == other.order and self.alpha == other.alpha
                and np.array_equal(self.bias, other.bias)
                and self.logits.shape == other.logits.shape
                and self.logits.tobytes() == other.logits.tobytes())

    __hash__ = None


def table_shape(vocab: Vocab, codes: ControlCodeSet, order: int) -> tuple[int, int, int]:
    n_contexts = (vocab.size + 1) ** order
    if codes.binarized:
        n_contexts *= len(codes.class_names) + 1
    return (codes.size, n_contexts, vocab.size)


def tabular_init(vocab: Vocab, order: int, codes: ControlCodeSet, init_scheme: str = "zeros",
                 rng_seed: int | None = None, noise_scale: float = 0.01) -> TabularCCLM:
    """Fresh model: zero logits or N(0, noise_scale^2) logits, alpha = 1, bias = 0."""
    if order < 0:
        raise ConfigError("order must be >= 0")
    shape = table_shape(vocab, codes, order)
    if init_scheme == "zeros":
        logits = np.zeros(shape)
    elif init_scheme == "noise":
        logits = np.random.default_rng(rng_seed).normal(0.0, noise_scale, size=shape)
    else:
        raise ConfigError(f"unknown init scheme {init_scheme!r}")
    return TabularCCLM(vocab, codes, order, logits)


def from_probabilities(vocab: Vocab, codes: ControlCodeSet, order: int, probs,
                       alpha: float = 1.0, bias=None) -> TabularCCLM:
    with np.errstate(divide="ignore"):
        logits = np.log(np.asarray(probs, dtype=np.float64))
    return TabularCCLM(vocab, codes, order, logits, alpha, bias)


# -- checkpoint file -------------------------------------------------------
#
# Text preamble of "key: value" lines, terminated by "end-header", followed by
# the logit table as little-endian float64 in row-major (class, context,
# token) order.  Floats in the preamble use repr() so they round-trip exactly.

_END_HEADER = b"end-header\n"


def _join(items) -> str:
    return " ".join(items) if items else "-"


def _split(value: str) -> list[str]:
    return [] if value == "-" else value.split()


def save_checkpoint(model: TabularCCLM, path, metadata: dict | None = None) -> None:
    lines = [
        f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}",
        f"vocab: {_join(model.vocab.tokens)}",
        f"eos: {model.vocab.eos or '-'}",
        f"order: {model.order}",
        f"codes: {_join(model.codes.names)}",
        f"anti: {_join(str(a) for a in model.codes.anti) if model.codes.anti else '-'}",
        f"binarized: {int(model.codes.binarized)}",
        f"class_names: {_join(model.codes.class_names)}",
        f"alpha: {model.alpha!r}",
        f"bias: {' '.join(repr(float(b)) for b in model.bias)}",
        f"shape: {' '.join(str(s) for s in model.logits.shape)}",
        "dtype: float64-le",
    ]
    for key, value in (metadata or {}).items():
        lines.append(f"meta.{key}: {value}")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    Path(path).write_bytes(header + _END_HEADER + model.logits.astype("<f8").tobytes())


def read_checkpoint_header(data: bytes, path=None) -> tuple[dict, int]:
    end = data.find(b"\n" + _END_HEADER)
    if end < 0:
        raise ParseError("missing end-header marker", path=path)
    text = data[:end].decode("utf-8")
    lines = text.split("\n")
    first = lines[0].split()
    if len(first) != 2 or first[0] != CHECKPOINT_MAGIC:
        raise ParseError("not a checkpoint file", line=1, path=path)
    if first[1] != str(CHECKPOINT_VERSION):
        raise FormatVersionError(f"unsupported checkpoint version {first[1]!r}")
    fields = {}
    for lineno, line in enumerate(lines[1:], start=2):
        key, sep, value = line.partition(": ")
        if not sep:
            key, sep, value = line.partition(":")
            if not sep:
                raise ParseError(f"expected 'key: value', got {line!r}", line=lineno, path=path)
        fields[key] = value.strip()
    return fields, end + 1 + len(_END_HEADER)


def load_checkpoint(path) -> TabularCCLM:
    data = Path(path).read_bytes()
    fields, offset = read_checkpoint_header(data, path)
    try:
        vocab = Vocab(tuple(_split(fields["vocab"])),
                      None if fields["eos"] == "-" else fields["eos"])
        anti = _split(fields["anti"])
        codes = ControlCodeSet(tuple(_split(fields["codes"])),
                               tuple(int(a) for a in anti) if anti else None,
                               bool(int(fields["binarized"])),
                               tuple(_split(fields["class_names"])))
        order = int(fields["order"])
        alpha = float(fields["alpha"])
        bias = [float(b) for b in fields["bias"].split()]
        shape = tuple(int(s) for s in fields["shape"].split())
    except (KeyError, ValueError) as exc:
        raise ParseError(f"bad checkpoint header: {exc}", path=path) from None
    if fields.get("dtype") != "float64-le":
        raise ParseError(f"unsupported dtype {fields.get('dtype')!r}", path=path)
    payload = data[offset:]
    n = int(np.prod(shape))
    if len(payload) != 8 * n:
        raise ParseError(f"logit table has {len(payload)} bytes, expected {8 * n}", path=path)
    logits = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    return TabularCCLM(vocab, codes, order, logits, alpha, bias)


def checkpoint_metadata(path) -> dict:
    fields, _ = read_checkpoint_header(Path(path).read_bytes(), path)
    return {k[5:]: v for k, v in fields.items() if k.startswith("meta.")}
