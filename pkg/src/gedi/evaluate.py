"""Classification, label fidelity, perplexity, cost auditing and lambda sweeps."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cclm import ControlCodeSet, TabularCCLM, tabular_init
from .decode import GenerationConfig, StepTrace, direct_generate
from .errors import ConfigError, DataError, InvariantViolation
from .synth import LabeledCorpus, SourceSpec, assign_splits, oracle_posterior
from .train import TrainConfig, class_posterior_offline, train


def class_scores(classifier, tokens) -> np.ndarray:
    """Per-class scores used for the decision.

    A standard CC-LM yields its Bayes posterior, a source spec the exact
    oracle posterior, and a binarized CC-LM P(true | class name, tokens)
    for every class name (these need not sum to one).
    """
    tokens = list(tokens)
    if not tokens:
        raise DataError("tokens must be nonempty")
    if isinstance(classifier, SourceSpec):
        return oracle_posterior(classifier, tokens)
    if classifier.codes.binarized:
        vocab = classifier.vocab
        return np.array([class_posterior_offline(classifier, [vocab.id(name)] + tokens)[0]
                         for name in classifier.codes.class_names])
    return class_posterior_offline(classifier, tokens)


# Scores this close to the maximum count as tied.  Equal likelihoods summed
# in a different order can differ in the last bit.
TIE_TOLERANCE = 1e-12


def classify(classifier, tokens) -> tuple[int, np.ndarray]:
    """Argmax class (ties to the lowest id) and the per-class scores."""
    scores = class_scores(classifier, tokens)
    return int(np.flatnonzero(scores >= scores.max() - TIE_TOLERANCE)[0]), scores


def classifier_name(classifier) -> str:
    if isinstance(classifier, SourceSpec):
        return f"oracle:{classifier.name}"
    kind = "binarized-cclm" if classifier.codes.binarized else "cclm"
    return f"{kind}:order{classifier.order}"


def accuracy(classifier, corpus: LabeledCorpus) -> float:
    if len(corpus) == 0:
        raise DataError("cannot score an empty corpus")
    hits = sum(classify(classifier, seq)[0] == c for seq, c in corpus)
    return hits / len(corpus)


@dataclass
class FidelityReport:
    overall: float
    per_class: dict
    n: int
    classifier: str

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def label_fidelity(generations, classifier, class_names=None) -> FidelityReport:
    """Fraction of (control class, tokens) pairs the classifier assigns to their control class."""
    generations = list(generations)
    if not generations:
        raise DataError("no generations to score")
    hits, totals = {}, {}
    for control, tokens in generations:
        control = int(control)
        totals[control] = totals.get(control, 0) + 1
        hits[control] = hits.get(control, 0) + int(classify(classifier, tokens)[0] == control)
    label = (lambda c: class_names[c]) if class_names else str
    per_class = {label(c): hits[c] / totals[c] for c in sorted(totals)}
    return FidelityReport(sum(hits.values()) / len(generations), per_class, len(generations),
                          classifier_name(classifier))


def _conditioned_nll(model: TabularCCLM, tokens, label: int) -> float:
    if model.codes.binarized:
        name = model.vocab.id(model.codes.class_names[label])
        start = model.advance(model.init_state(0), name)
        return -(model.consume(start, tokens).cumll - start.cumll)
    if model.n_classes == 1:
        label = 0
    return -model.sequence_logprob(label, tokens)


def conditional_perplexity(model: TabularCCLM, corpus: LabeledCorpus) -> float:
    """exp of the token-weighted mean NLL given each sequence's true code."""
    if len(corpus) == 0:
        raise DataError("cannot score an empty corpus")
    nll = 0.0
    count = 0
    for seq, c in corpus:
        nll += _conditioned_nll(model, seq, c)
        count += len(seq)
    if count == 0:
        raise DataError("corpus contains no tokens")
    return math.exp(nll / count)


@dataclass
class CostReport:
    tokens: int
    base_passes: int
    guide_passes: int
    contrast_size: int
    prompt_base_passes: int = 0
    prompt_guide_passes: int = 0
    wall_time_per_token: float | None = None

    def to_dict(self, include_timing: bool = False) -> dict:
        d = dataclasses.asdict(self)
        if not include_timing:
            d.pop("wall_time_per_token")
        return d


def audit_cost(traces, prompt_tokens: int = 0, guide_prefix_tokens: int = 0,
               wall_time: float | None = None) -> CostReport:
    """Aggregate per-step pass counts and enforce base = 1, guide = |contrast| per step."""
    traces = list(traces)
    if not traces:
        return CostReport(0, 0, 0, 0)
    size = traces[0].contrast_size
    for tr in traces:
        if tr.contrast_size != size:
            raise InvariantViolation("contrast set size changed within one run")
        if tr.base_passes != 1:
            raise InvariantViolation(
                f"step {tr.step}: {tr.base_passes} base passes, expected 1")
        if tr.guide_passes != tr.contrast_size:
            raise InvariantViolation(
                f"step {tr.step}: {tr.guide_passes} guide passes, expected {tr.contrast_size}")
    n = len(traces)
    return CostReport(
        tokens=n,
        base_passes=sum(tr.base_passes for tr in traces),
        guide_passes=sum(tr.guide_passes for tr in traces),
        contrast_size=size,
        prompt_base_passes=prompt_tokens,
        prompt_guide_passes=(prompt_tokens + guide_prefix_tokens) * size,
        wall_time_per_token=None if wall_time is None else wall_time / n,
    )


def audit_records(records) -> CostReport:
    """Pass-count audit over the 'trace' entries of generation output records."""
    traces = []
    for rec in records:
        size = rec["passes"]["contrast_size"]
        for s in rec.get("trace", []):
            traces.append(StepTrace(s["step"], np.empty((0, size)), 0, (), np.empty(0),
                                    np.empty(0), -1, s["guide_passes"], s["base_passes"], size))
    if traces:
        sizes = {tr.contrast_size for tr in traces}
        if len(sizes) > 1:
            raise InvariantViolation("records mix contrast set sizes")
    return audit_cost(traces)


# -- lambda sweep ----------------------------------------------------------

@dataclass(frozen=True)
class SweepConfig:
    order: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)
    classifier_lam: float = 1.0
    split_seed: int = 0
    prompt_len: int = 3
    generation: GenerationConfig = field(
        default_factory=lambda: GenerationConfig(mode="direct", max_new_tokens=12))
    binarized: bool = False


def fresh_model(corpus: LabeledCorpus, order: int, binarized: bool = False,
                unlabeled: bool = False) -> TabularCCLM:
    if unlabeled:
        return tabular_init(corpus.vocab, order, ControlCodeSet(("lm",)))
    if binarized:
        vocab = corpus.vocab.extended(corpus.class_names)
        return tabular_init(vocab, order, ControlCodeSet.binary_pair(corpus.class_names))
    return tabular_init(corpus.vocab, order, ControlCodeSet(corpus.class_names))


def splits_of(corpus: LabeledCorpus, seed: int):
    if not all(tag in ("A", "B", "val") for tag in corpus.splits):
        corpus = assign_splits(corpus, seed)
    return corpus.subset("A"), corpus.subset("B"), corpus.subset("val")


def direct_generations(model: TabularCCLM, prompts: LabeledCorpus, prompt_len: int,
                       config: GenerationConfig):
    """Generate once per (validation prompt, class); returns (class, prompt + output) pairs."""
    out = []
    n_classes = len(prompts.class_names)
    for seq, _ in prompts:
        prompt = list(seq[:prompt_len])
        for c in range(n_classes):
            target = model.codes.class_names[c] if model.codes.binarized else c
            out.append((c, prompt + direct_generate(model, target, prompt, config)))
    return out


def lambda_sweep(corpus: LabeledCorpus, lambdas, config: SweepConfig,
                 source: SourceSpec | None = None) -> list[dict]:
    """Train one model per lambda on split A and score it on the validation split.

    Label fidelity of direct generation is judged by a CC-LM trained on
    split B (and by the exact source when ``source`` is given).
    """
    lambdas = [float(x) for x in lambdas]
    for lam in lambdas:
        if not 0 <= lam <= 1:
            raise ConfigError(f"lambda values must lie in [0, 1], got {lam}")
    split_a, split_b, val = splits_of(corpus, config.split_seed)
    clf_cfg = dataclasses.replace(config.train, lam=config.classifier_lam, binarized=False)
    classifier, _ = train(fresh_model(split_b, config.order), split_b, clf_cfg)
    rows = []
    for lam in lambdas:
        cfg = dataclasses.replace(config.train, lam=lam, binarized=config.binarized)
        model, _ = train(fresh_model(split_a, config.order, config.binarized), split_a, cfg)
        gens = direct_generations(model, val, config.prompt_len, config.generation)
        row = {
            "lambda": lam,
            "accuracy": accuracy(model, val),
            "perplexity": conditional_perplexity(model, val),
            "label_fidelity": label_fidelity(gens, classifier).overall,
            "alpha": model.alpha,
        }
        if source is not None:
            row["oracle_label_fidelity"] = label_fidelity(gens, source).overall
        rows.append(row)
    return rows


# -- report files ----------------------------------------------------------
#
# Metric blocks are JSON objects written with sorted keys, one per file.
# Sweep tables are tab-separated with a header row, one row per lambda.

def write_report(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")


def write_table(path, rows: list[dict], meta: dict | None = None) -> None:
    if not rows:
        raise DataError("no rows to write")
    columns = list(rows[0])
    lines = []
    for key, value in sorted((meta or {}).items()):
        lines.append(f"# {key}={json.dumps(value, sort_keys=True, separators=(',', ':'))}")
    lines.append("\t".join(columns))
    for row in rows:
        lines.append("\t".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                               for c in columns))
    Path(path).write_text("\n".join(lines) + "\n")


def read_table(path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    header = lines[0].split("\t")
    rows = []
    for ln in lines[1:]:
        values = ln.split("\t")
        rows.append({h: (float(v) if v not in ("None",) else None) for h, v in zip(header, values)})
    return rows
