"""Hybrid generative / discriminative training of tabular CC-LMs.

The objective is ``lam * L_g + (1 - lam) * L_d`` where ``L_g`` is the
per-token-averaged negative log-likelihood under the true code and ``L_d``
the negative log class posterior obtained by Bayes rule with the
length-normalised exponent ``alpha / T``.  Gradients are exact: every
sequence log-likelihood is a sum of log-softmax entries of the logit table,
so everything is propagated through a count matrix per example.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .cclm import TabularCCLM, log_softmax
from .errors import ConfigError, DataError, NumericalError, VocabMismatchError

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.6
    lr: float = 0.05
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    optimizer: str = "adam"
    learn_bias: bool = False
    learn_alpha: bool = True
    binarized: bool = False

    def __post_init__(self):
        if not 0 <= self.lam <= 1:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")


@dataclass(frozen=True)
class TrainingExample:
    tokens: tuple[int, ...]
    label: int


@dataclass
class GradientBundle:
    logits: np.ndarray
    log_alpha: float
    bias: np.ndarray
    loss_g: float
    loss_d: float
    loss_gd: float

    def flat(self) -> np.ndarray:
        return np.concatenate([self.logits.ravel(), [self.log_alpha], self.bias])


def as_examples(batch) -> list[TrainingExample]:
    out = []
    for item in batch:
        ex = item if isinstance(item, TrainingExample) else TrainingExample(tuple(item[0]), int(item[1]))
        out.append(ex)
    return out


@dataclass
class _Encoded:
    ex: np.ndarray       # example index of each position
    ctx: np.ndarray      # context index of each position
    tok: np.ndarray      # token id of each position
    lengths: np.ndarray  # T_i
    labels: np.ndarray   # true code of each example


def _positions(model: TabularCCLM, tokens) -> tuple[list[int], list[int]]:
    base = model.vocab.size + 1
    n_grams = model.n_grams
    gram = model.context_index((model.vocab.bos_id,) * model.order)
    topic_offset = 0
    ctxs = []
    for tok in tokens:
        ctxs.append(topic_offset + gram)
        if model.order:
            gram = (gram * base + tok) % n_grams
        if not topic_offset:
            topic = model.topic_of(tok)
            if topic is not None:
                topic_offset = (topic + 1) * n_grams
    return ctxs, list(tokens)


def _encode(model: TabularCCLM, examples: list[TrainingExample]) -> _Encoded:
    if not examples:
        raise DataError("batch must be nonempty")
    ex, ctx, tok, lengths, labels = [], [], [], [], []
    for i, e in enumerate(examples):
        if len(e.tokens) < 1:
            raise DataError(f"example {i} is empty")
        model.codes.index(e.label)
        for t in e.tokens:
            model._check_token(t)
        c, k = _positions(model, e.tokens)
        ex.extend([i] * len(k))
        ctx.extend(c)
        tok.extend(k)
        lengths.append(len(e.tokens))
        labels.append(e.label)
    return _Encoded(np.array(ex), np.array(ctx), np.array(tok),
                    np.array(lengths, dtype=np.float64), np.array(labels))


def _subset(enc: _Encoded, idx) -> _Encoded:
    """Positions of the examples ``idx`` (renumbered 0..len(idx)-1)."""
    idx = np.asarray(idx)
    lengths = enc.lengths.astype(np.int64)
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    sel_len = lengths[idx]
    offsets = np.arange(sel_len.sum()) - np.repeat(np.cumsum(sel_len) - sel_len, sel_len)
    pos = np.repeat(starts[idx], sel_len) + offsets
    return _Encoded(np.repeat(np.arange(len(idx)), sel_len), enc.ctx[pos], enc.tok[pos],
                    enc.lengths[idx], enc.labels[idx])


def _sequence_logliks(logp: np.ndarray, enc: _Encoded) -> np.ndarray:
    """(N, C) matrix of log P(x_i | c)."""
    gathered = logp[:, enc.ctx, enc.tok]
    n = len(enc.lengths)
    return np.stack([np.bincount(enc.ex, weights=gathered[c], minlength=n)
                     for c in range(logp.shape[0])], axis=1)


def _losses(model: TabularCCLM, enc: _Encoded):
    logp = model.log_prob_table()
    ll = _sequence_logliks(logp, enc)
    n = len(enc.lengths)
    rows = np.arange(n)
    z = model.bias[None, :] + (model.alpha / enc.lengths)[:, None] * ll
    log_post = log_softmax(z)
    loss_g = -np.mean(ll[rows, enc.labels] / enc.lengths)
    loss_d = -np.mean(log_post[rows, enc.labels])
    return logp, ll, log_post, float(loss_g), float(loss_d)


def generative_loss(model: TabularCCLM, batch) -> float:
    """Mean over examples of the per-token negative log-likelihood under the true code."""
    _, _, _, loss_g, _ = _losses(model, _encode(model, as_examples(batch)))
    return loss_g


def class_posterior_offline(model: TabularCCLM, tokens, true_class=None, alpha=None,
                            biases=None) -> np.ndarray:
    """Bayes-rule posterior over all of the model's codes for a whole sequence.

    ``true_class`` is accepted for symmetry with the training examples; the
    normalisation always runs over every code of the model (two codes for a
    binarized model).
    """
    tokens = list(tokens)
    if not tokens:
        raise DataError("tokens must be nonempty")
    if true_class is not None:
        model.codes.index(true_class)
    a = model.alpha if alpha is None else float(alpha)
    b = model.bias if biases is None else np.asarray(biases, dtype=np.float64)
    ll = np.array([model.sequence_logprob(c, tokens) for c in range(model.n_classes)])
    return np.exp(log_softmax(b + (a / len(tokens)) * ll))


def discriminative_loss(model: TabularCCLM, batch) -> float:
    _, _, _, _, loss_d = _losses(model, _encode(model, as_examples(batch)))
    return loss_d


def hybrid_loss(model: TabularCCLM, batch, lam: float) -> tuple[float, float, float]:
    """(L_gd, L_g, L_d) with L_gd = lam * L_g + (1 - lam) * L_d."""
    if not 0 <= lam <= 1:
        raise ConfigError(f"lambda must be in [0, 1], got {lam}")
    _, _, _, loss_g, loss_d = _losses(model, _encode(model, as_examples(batch)))
    return lam * loss_g + (1 - lam) * loss_d, loss_g, loss_d


def _gradients(model: TabularCCLM, enc: _Encoded, lam: float) -> GradientBundle:
    logp, ll, log_post, loss_g, loss_d = _losses(model, enc)
    n, n_classes = ll.shape
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), enc.labels] = 1.0
    post = np.exp(log_post)
    # d L_d / d z, with z = b + (alpha / T) * ll
    dz = (post - onehot) / n
    # d L_gd / d ll
    w = (-lam / n) * onehot / enc.lengths[:, None] + (1 - lam) * dz * (model.alpha / enc.lengths)[:, None]

    # d ll[i, c] / d logits[c, ctx, :] = counts_i[ctx, :] - counts_i[ctx] * p[c, ctx, :]
    n_ctx, vocab_size = model.logits.shape[1:]
    cell = enc.ctx * vocab_size + enc.tok
    acc = np.stack([np.bincount(cell, weights=w[enc.ex, c], minlength=n_ctx * vocab_size)
                    for c in range(n_classes)]).reshape(model.logits.shape)
    grad_logits = acc - acc.sum(-1, keepdims=True) * np.exp(logp)
    grad_bias = (1 - lam) * dz.sum(0)
    grad_log_alpha = (1 - lam) * float(np.sum(dz * ll * (model.alpha / enc.lengths)[:, None]))
    bundle = GradientBundle(grad_logits, grad_log_alpha, grad_bias, loss_g, loss_d,
                            lam * loss_g + (1 - lam) * loss_d)
    if not np.all(np.isfinite(bundle.flat())):
        raise NumericalError("non-finite gradient")
    return bundle


def loss_gradients(model: TabularCCLM, batch, lam: float) -> GradientBundle:
    """Exact gradients of the hybrid loss w.r.t. logits, log(alpha) and biases."""
    if not 0 <= lam <= 1:
        raise ConfigError(f"lambda must be in [0, 1], got {lam}")
    return _gradients(model, _encode(model, as_examples(batch)), lam)


def binarize_example(tokens, class_name_token: int, class_set, rng: np.random.Generator,
                     force: bool | None = None):
    """Pair a sequence with a true or a randomly chosen false class name.

    Returns ``(code, prefixed_tokens, label)`` where ``code`` is ``"true"``
    or ``"false"``, ``prefixed_tokens`` starts with the chosen class-name
    token and ``label`` is the code index (0 = true, 1 = false).  ``force``
    pins the branch (True / False) instead of flipping a fair coin.
    """
    class_set = [int(c) for c in class_set]
    if class_name_token not in class_set:
        raise DataError("class-name token is not part of the class set")
    others = [c for c in class_set if c != class_name_token]
    if not others:
        raise DataError("no false class available: class set has a single member")
    truth = bool(rng.random() < 0.5) if force is None else bool(force)
    if truth:
        return "true", (class_name_token,) + tuple(tokens), 0
    name = others[int(rng.integers(len(others)))]
    return "false", (name,) + tuple(tokens), 1


class Adam:
    def __init__(self, lr: float, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return params - self.lr * grad


def _check_corpus(model: TabularCCLM, corpus, binarized: bool) -> None:
    n = corpus.vocab.size
    if model.vocab.tokens[:n] != corpus.vocab.tokens:
        raise VocabMismatchError("model vocab does not start with the corpus vocab")
    names = model.codes.class_names if binarized else model.codes.names
    if binarized != model.codes.binarized:
        raise ConfigError("binarized training needs a binarized model and vice versa")
    if model.n_classes > 1 and tuple(names) != tuple(corpus.class_names):
        raise DataError(f"model classes {names} do not match corpus classes {corpus.class_names}")


def corpus_examples(corpus, unlabeled: bool = False) -> list[TrainingExample]:
    return [TrainingExample(seq, 0 if unlabeled else c) for seq, c in corpus]


def train(model: TabularCCLM, corpus, config: TrainConfig, heldout=None):
    """Optimise the hybrid loss with minibatches; returns (trained copy, history).

    ``corpus`` is a :class:`~gedi.synth.LabeledCorpus` (a single-code model is
    trained on it unlabelled) or a list of examples.  In binarized mode every
    epoch draws fresh true / false pairings.  ``heldout``, if given, is a
    labelled corpus used for accuracy and perplexity after each epoch.
    """
    from .evaluate import accuracy, conditional_perplexity

    model = model.copy()
    if hasattr(corpus, "vocab"):
        _check_corpus(model, corpus, config.binarized)
        base_examples = corpus_examples(corpus, unlabeled=model.n_classes == 1)
    else:
        if config.binarized:
            raise ConfigError("binarized training needs a labelled corpus")
        base_examples = as_examples(corpus)
    if not base_examples:
        raise DataError("training corpus is empty")
    rng = np.random.default_rng(config.seed)
    opt = Adam(config.lr) if config.optimizer == "adam" else SGD(config.lr)
    shape = model.logits.shape
    n_logits = model.logits.size
    params = np.concatenate([model.logits.ravel(), [math.log(model.alpha)], model.bias])
    mask = np.ones_like(params)
    if not config.learn_alpha:
        mask[n_logits] = 0.0
    if not config.learn_bias:
        mask[n_logits + 1:] = 0.0

    def load(p):
        model.logits = p[:n_logits].reshape(shape).copy()
        model.alpha = float(math.exp(p[n_logits]))
        model.bias = p[n_logits + 1:].copy()

    if config.binarized:
        name_ids = [model.vocab.id(n) for n in model.codes.class_names]

    history = []
    for epoch in range(config.epochs):
        if config.binarized:
            examples = []
            for e in base_examples:
                _, toks, label = binarize_example(e.tokens, name_ids[e.label], name_ids, rng)
                examples.append(TrainingExample(toks, label))
            encoded = _encode(model, examples)
        elif epoch == 0:
            encoded = _encode(model, base_examples)
        perm = rng.permutation(len(encoded.lengths))
        for start in range(0, len(perm), config.batch_size):
            grads = _gradients(model, _subset(encoded, perm[start:start + config.batch_size]),
                               config.lam)
            params = opt.step(params, grads.flat() * mask)
            if not np.all(np.isfinite(params)):
                raise NumericalError(f"training diverged in epoch {epoch}")
            load(params)
        _, _, _, l_g, l_d = _losses(model, encoded)
        l_gd = config.lam * l_g + (1 - config.lam) * l_d
        if not all(map(math.isfinite, (l_gd, l_g, l_d))):
            raise NumericalError(f"non-finite loss after epoch {epoch}: L_g={l_g} L_d={l_d}")
        row = {"epoch": epoch + 1, "loss_g": l_g, "loss_d": l_d, "loss_gd": l_gd,
               "alpha": model.alpha}
        if heldout is not None:
            row["heldout_accuracy"] = accuracy(model, heldout) if model.n_classes > 1 else None
            row["heldout_perplexity"] = conditional_perplexity(model, heldout)
        log.debug("epoch %d: %s", epoch + 1, row)
        history.append(row)
    return model, history
