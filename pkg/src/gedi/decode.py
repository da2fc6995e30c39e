"""Guided and direct greedy decoding.

Guided decoding keeps one state per control code in the contrast set, turns
the guide's next-token rows into a class posterior for every candidate
token, reweights the base model's distribution by that posterior, filters
low-posterior candidates, and picks the highest repetition-penalised score.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cclm import LMState, TabularCCLM, log_softmax
from .errors import (
    ConfigError,
    ContractViolation,
    DataError,
    DegenerateDistributionError,
    NumericalError,
    ParseError,
    VocabMismatchError,
)

SCORE_EPS = 1e-6

PRESETS = {
    "paper-default": dict(omega=30.0, rho=0.2, tau=0.8, rep_penalty=1.2),
    "detox-style": dict(omega=30.0, rho=0.2, tau=0.97, rep_penalty=1.2, target_bias=2.0),
    "strong-penalty": dict(omega=30.0, rho=0.2, tau=0.8, rep_penalty=1.5),
}


@dataclass(frozen=True)
class GenerationConfig:
    """Decoding hyper-parameters.

    ``biases`` maps control-code names to prior-bias overrides;
    ``target_bias``, when set, overrides the bias of whichever code is the
    desired one for the current request.  ``alpha`` overrides the guide's
    learned length scale.
    """

    omega: float = 30.0
    rho: float = 0.2
    tau: float = 0.8
    rep_penalty: float = 1.2
    biases: dict | None = None
    target_bias: float | None = None
    alpha: float | None = None
    max_new_tokens: int = 20
    mode: str = "guided"
    filtering: bool = True

    def __post_init__(self):
        if not self.omega >= 0:
            raise ConfigError(f"omega must be >= 0, got {self.omega}")
        if not 0 <= self.rho <= 1:
            raise ConfigError(f"rho must be in [0, 1], got {self.rho}")
        if not 0 <= self.tau <= 1:
            raise ConfigError(f"tau must be in [0, 1], got {self.tau}")
        if not self.rep_penalty >= 1:
            raise ConfigError(f"repetition penalty must be >= 1, got {self.rep_penalty}")
        if self.alpha is not None and not self.alpha > 0:
            raise ConfigError(f"alpha override must be > 0, got {self.alpha}")
        if not (isinstance(self.max_new_tokens, int) and self.max_new_tokens >= 1):
            raise ConfigError(f"max_new_tokens must be a positive integer, got {self.max_new_tokens}")
        if self.mode not in ("guided", "direct"):
            raise ConfigError(f"mode must be 'guided' or 'direct', got {self.mode!r}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "GenerationConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})

    def with_overrides(self, overrides: dict) -> "GenerationConfig":
        names = {f.name for f in dataclasses.fields(self)}
        unknown = set(overrides) - names
        if unknown:
            raise ConfigError(f"unknown generation config keys: {sorted(unknown)}")
        return dataclasses.replace(self, **overrides)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class GuideState:
    """Per-code guide states for the contrast set; all share the same t."""

    codes: tuple[int, ...]
    states: tuple[LMState, ...]

    @property
    def t(self) -> int:
        return self.states[0].t


@dataclass
class StepTrace:
    step: int
    posteriors: np.ndarray        # (V, K) class posterior for each candidate
    target_index: int             # column of the desired code
    kept: tuple[int, ...]
    weighted: np.ndarray
    final: np.ndarray
    chosen: int
    guide_passes: int
    base_passes: int
    contrast_size: int

    @property
    def target_posteriors(self) -> np.ndarray:
        return self.posteriors[:, self.target_index]

    def summary(self, vocab=None) -> dict:
        return {
            "step": self.step,
            "chosen": vocab.name(self.chosen) if vocab is not None else self.chosen,
            "target_posterior": float(self.target_posteriors[self.chosen]),
            "kept": len(self.kept),
            "guide_passes": self.guide_passes,
            "base_passes": self.base_passes,
        }


class PassCounter:
    """Delegating wrapper that counts next-token distribution evaluations."""

    def __init__(self, model):
        self.model = model
        self.calls = 0

    def __getattr__(self, name):
        return getattr(self.model, name)

    def next_token_logprobs(self, state):
        self.calls += 1
        return self.model.next_token_logprobs(state)


def make_guide_state(guide: TabularCCLM, codes, prefix=()) -> GuideState:
    codes = tuple(guide.codes.index(c) for c in codes)
    if len(codes) < 2:
        raise ConfigError("a contrast set needs at least two control codes")
    states = tuple(guide.consume(guide.init_state(c), prefix) for c in codes)
    return GuideState(codes, states)


def advance_guide(guide, gstate: GuideState, token, rows=None) -> GuideState:
    if rows is None:
        states = tuple(guide.advance(s, token) for s in gstate.states)
    else:
        states = tuple(guide.advance(s, token, r) for s, r in zip(gstate.states, rows))
    return GuideState(gstate.codes, states)


def candidate_class_posteriors(guide, gstate: GuideState, biases=None, alpha_override=None,
                               return_log: bool = False, return_rows: bool = False,
                               n_candidates: int | None = None):
    """Posterior over the contrast set for every candidate next token.

    Uses each code's cumulative log-likelihood plus the candidate's
    next-token log-probability, scaled by alpha / t where t counts the
    candidate itself, plus the code's prior bias, then a max-subtracted
    softmax over codes.  Exactly one next-token evaluation is made per code.

    ``biases`` is a full per-code vector (defaults to the guide's learned
    bias).  Returns an array of shape (V, K); with ``return_log`` the
    log-posteriors are returned as well, with ``return_rows`` also the
    per-code next-token rows.  ``n_candidates`` limits scoring to the first
    token ids (a binarized guide's vocabulary extends the base's with the
    class-name tokens, which are never candidates).
    """
    rows = np.stack([guide.next_token_logprobs(s) for s in gstate.states])
    full_rows = rows
    if n_candidates is not None:
        rows = rows[:, :n_candidates]
    cum = np.array([s.cumll for s in gstate.states])
    t = gstate.t + 1
    alpha = guide.alpha if alpha_override is None else float(alpha_override)
    bias = guide.bias if biases is None else np.asarray(biases, dtype=np.float64)
    b = bias[list(gstate.codes)]
    scores = b[:, None] + (alpha / t) * (cum[:, None] + rows)
    if not np.all(np.isfinite(scores)):
        raise NumericalError("non-finite guide score while computing class posteriors")
    log_post = log_softmax(scores.T)
    post = np.exp(log_post)
    out = [post]
    if return_log:
        out.append(log_post)
    if return_rows:
        out.append(full_rows)
    return out[0] if len(out) == 1 else tuple(out)


def weighted_posterior(base_logprobs, target_posteriors, omega: float,
                       target_log_posteriors=None) -> np.ndarray:
    """Normalise P_LM(x) * P(c | x)^omega over the vocabulary, in log space."""
    if omega < 0:
        raise ConfigError("omega must be >= 0")
    base = np.asarray(base_logprobs, dtype=np.float64)
    if target_log_posteriors is None:
        post = np.asarray(target_posteriors, dtype=np.float64)
        if post.shape != base.shape:
            raise ContractViolation("base log-probs and posteriors differ in length")
        if np.any(post < 0) or np.any(post > 1):
            raise ContractViolation("posteriors must lie in [0, 1]")
        with np.errstate(divide="ignore"):
            log_post = np.log(post)
    else:
        log_post = np.asarray(target_log_posteriors, dtype=np.float64)
        if log_post.shape != base.shape:
            raise ContractViolation("base log-probs and posteriors differ in length")
    log_w = base if omega == 0 else base + omega * log_post
    if np.any(np.isnan(log_w)):
        raise NumericalError("NaN in weighted posterior")
    top = np.max(log_w)
    if not np.isfinite(top):
        raise DegenerateDistributionError("every candidate has zero weighted probability")
    w = np.exp(log_w - top)
    return w / w.sum()


def mass_floor_set(weighted, target_posteriors, rho: float) -> np.ndarray:
    """Smallest head of the posterior ranking holding at least rho weighted mass.

    Ranking is by descending posterior, ties to the lower token id.  With
    rho = 0 the head is the single top-posterior token; if rho is never
    reached (rounding) every token is returned.
    """
    order = np.argsort(-np.asarray(target_posteriors), kind="stable")
    if rho <= 0:
        return order[:1]
    cum = np.cumsum(np.asarray(weighted)[order])
    hits = np.nonzero(cum >= rho)[0]
    m = hits[0] + 1 if hits.size else len(order)
    return order[:m]


def filter_candidates(weighted, target_posteriors, rho: float, tau: float):
    """Keep the mass-floor head plus every token with posterior > tau.

    Returns ``(kept, dist)``: the sorted kept token ids and the weighted
    distribution with everything else zeroed and the rest renormalised.
    """
    if not 0 <= rho <= 1 or not 0 <= tau <= 1:
        raise ConfigError("rho and tau must lie in [0, 1]")
    weighted = np.asarray(weighted, dtype=np.float64)
    post = np.asarray(target_posteriors, dtype=np.float64)
    mask = post > tau
    mask[mass_floor_set(weighted, post, rho)] = True
    dist = np.where(mask, weighted, 0.0)
    total = dist.sum()
    if not total > 0:
        raise DegenerateDistributionError("filtering removed all probability mass")
    return np.flatnonzero(mask), dist / total


def positive_scores(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    return p - p.min() + SCORE_EPS


def apply_repetition_penalty(scores, history, r: float) -> np.ndarray:
    """Divide the score of every token seen in ``history`` by ``r`` (once)."""
    scores = np.array(scores, dtype=np.float64)
    if np.any(~(scores > 0)):
        raise ContractViolation("repetition penalty needs strictly positive scores")
    if r < 1:
        raise ConfigError("repetition penalty must be >= 1")
    seen = sorted(set(int(t) for t in history))
    if seen and r != 1:
        scores[seen] /= r
    return scores


def _greedy(scores, allowed=None) -> int:
    if allowed is not None:
        scores = np.where(allowed, scores, -np.inf)
    return int(np.argmax(scores))


def _resolve_target(guide: TabularCCLM, target, contrast):
    """(contrast code ids, column of the desired code, guide-only prefix tokens)."""
    codes = guide.codes
    if codes.binarized:
        if isinstance(target, str):
            if target not in codes.class_names:
                raise DataError(f"unknown class name {target!r} for binarized guide")
            name = target
        else:
            if not 0 <= int(target) < len(codes.class_names):
                raise DataError(f"class index {target} out of range for binarized guide")
            name = codes.class_names[int(target)]
        return (0, 1), 0, (guide.vocab.id(name),)
    t = codes.index(target)
    if contrast is None:
        contrast = tuple(range(codes.size))
    elif contrast == "pair":
        anti = codes.anti_code(t)
        if anti is None:
            raise ConfigError("no anti code defined for a pairwise contrast")
        contrast = (t, anti)
    else:
        contrast = tuple(codes.index(c) for c in contrast)
    if t not in contrast:
        raise ConfigError("target code must be part of the contrast set")
    return contrast, contrast.index(t), ()


def _bias_vector(guide: TabularCCLM, config: GenerationConfig, target_code: int) -> np.ndarray:
    bias = guide.bias.copy()
    for name, value in (config.biases or {}).items():
        bias[guide.codes.index(name)] = float(value)
    if config.target_bias is not None:
        bias[target_code] = config.target_bias
    return bias


def gedi_generate(base: TabularCCLM, guide: TabularCCLM, target_class, prompt,
                  config: GenerationConfig, contrast=None):
    """Greedy guided generation.  Returns (generated token ids, step traces)."""
    if (guide.vocab.tokens[:base.vocab.size] != base.vocab.tokens
            or guide.vocab.eos != base.vocab.eos):
        raise VocabMismatchError("the guide vocabulary must start with the base vocabulary")
    if base.n_classes != 1:
        raise ConfigError("the base model must be unconditional (a single control code)")
    prompt = [base._check_token(t) for t in prompt]
    codes, target_col, guide_prefix = _resolve_target(guide, target_class, contrast)
    bias = _bias_vector(guide, config, codes[target_col])
    eos = base.vocab.eos_id

    base_state = base.consume(base.init_state(0), prompt)
    gstate = make_guide_state(guide, codes, list(guide_prefix) + prompt)
    counted_base, counted_guide = PassCounter(base), PassCounter(guide)
    history = list(prompt)
    out, traces = [], []
    for step in range(config.max_new_tokens):
        counted_base.calls = counted_guide.calls = 0
        base_lp = counted_base.next_token_logprobs(base_state)
        post, log_post, rows = candidate_class_posteriors(
            counted_guide, gstate, bias, config.alpha, return_log=True, return_rows=True,
            n_candidates=base.vocab.size)
        weighted = weighted_posterior(base_lp, post[:, target_col], config.omega,
                                      log_post[:, target_col])
        if config.filtering:
            kept, final = filter_candidates(weighted, post[:, target_col], config.rho, config.tau)
        else:
            kept, final = np.arange(len(weighted)), weighted
        allowed = np.zeros(len(final), dtype=bool)
        allowed[kept] = True
        scores = apply_repetition_penalty(positive_scores(final), history, config.rep_penalty)
        tok = _greedy(scores, allowed)
        traces.append(StepTrace(step, post, target_col, tuple(int(k) for k in kept), weighted,
                                final, tok, counted_guide.calls, counted_base.calls, len(codes)))
        base_state = base.advance(base_state, tok, base_lp)
        gstate = advance_guide(guide, gstate, tok, rows)
        history.append(tok)
        out.append(tok)
        if tok == eos:
            break
    return out, traces


def direct_generate(cclm: TabularCCLM, class_id, prompt, config: GenerationConfig) -> list[int]:
    """Greedy generation straight from P(x_t | x_<t, c) with the repetition penalty.

    For a binarized model ``class_id`` names a class; generation runs under
    the ``true`` code with that class-name token as the first token.
    """
    prompt = [cclm._check_token(t) for t in prompt]
    if cclm.codes.binarized:
        _, _, prefix = _resolve_target(cclm, class_id, None)
        state = cclm.consume(cclm.init_state(0), list(prefix) + prompt)
    else:
        state = cclm.consume(cclm.init_state(class_id), prompt)
    eos = cclm.vocab.eos_id
    history = list(prompt)
    out = []
    for _ in range(config.max_new_tokens):
        lp = cclm.next_token_logprobs(state)
        scores = apply_repetition_penalty(positive_scores(np.exp(lp)), history, config.rep_penalty)
        tok = _greedy(scores)
        state = cclm.advance(state, tok, lp)
        history.append(tok)
        out.append(tok)
        if tok == eos:
            break
    return out


# -- request / record files ------------------------------------------------
#
# Requests, one JSON object per line:
#   {"prompt": ["A", "B"], "target_class": "class0", "config": {"omega": 10}}
# Output records add:
#   "tokens": [...generated token names...],
#   "trace": [{"step", "chosen", "target_posterior", "kept", "guide_passes",
#              "base_passes"}, ...],          (guided mode only)
#   "passes": {"base": int, "guide": int, "contrast_size": int},
#   "config": the effective GenerationConfig as a dict.


@dataclass
class GenerationRequest:
    prompt: list[str]
    target_class: str
    config: dict = dataclasses.field(default_factory=dict)


def read_requests(path) -> list[GenerationRequest]:
    requests = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            req = GenerationRequest(list(d["prompt"]), str(d["target_class"]),
                                    dict(d.get("config", {})))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ParseError(f"bad request record: {exc}", line=lineno, path=path) from None
        requests.append(req)
    return requests


def write_requests(path, requests) -> None:
    with open(path, "w") as fh:
        for r in requests:
            fh.write(json.dumps({"prompt": r.prompt, "target_class": r.target_class,
                                 "config": r.config}) + "\n")


def run_request(req: GenerationRequest, config: GenerationConfig, guide: TabularCCLM | None,
                base: TabularCCLM | None = None) -> dict:
    cfg = config.with_overrides(req.config)
    vocab = guide.vocab if guide is not None else base.vocab
    prompt = vocab.encode(req.prompt)
    record = {"prompt": req.prompt, "target_class": req.target_class}
    if cfg.mode == "guided":
        if base is None or guide is None:
            raise ConfigError("guided mode needs both a base model and a guide")
        tokens, traces = gedi_generate(base, guide, req.target_class, prompt, cfg)
        record["tokens"] = vocab.decode(tokens)
        record["trace"] = [tr.summary(vocab) for tr in traces]
        record["passes"] = {
            "base": sum(tr.base_passes for tr in traces),
            "guide": sum(tr.guide_passes for tr in traces),
            "contrast_size": traces[0].contrast_size if traces else 0,
        }
    else:
        model = guide if guide is not None else base
        tokens = direct_generate(model, req.target_class, prompt, cfg)
        record["tokens"] = vocab.decode(tokens)
        record["passes"] = {"base": 0, "guide": len(tokens), "contrast_size": 1}
    record["config"] = cfg.to_dict()
    return record
