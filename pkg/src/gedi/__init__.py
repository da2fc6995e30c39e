"""Guided decoding with class-conditional tabular language models used as
Bayes-rule discriminators, plus hybrid generative/discriminative training."""

from .cclm import (
    ControlCodeSet,
    LMState,
    TabularCCLM,
    Vocab,
    load_checkpoint,
    save_checkpoint,
    tabular_init,
)
from .decode import (
    GenerationConfig,
    GuideState,
    StepTrace,
    apply_repetition_penalty,
    candidate_class_posteriors,
    direct_generate,
    filter_candidates,
    gedi_generate,
    weighted_posterior,
)
from .evaluate import audit_cost, classify, conditional_perplexity, label_fidelity, lambda_sweep
from .synth import (
    LabeledCorpus,
    SourceSpec,
    half_split,
    load_corpus,
    oracle_posterior,
    s1,
    s2,
    sample_corpus,
    save_corpus,
)
from .train import (
    TrainConfig,
    binarize_example,
    class_posterior_offline,
    discriminative_loss,
    generative_loss,
    hybrid_loss,
    loss_gradients,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "ControlCodeSet", "LMState", "TabularCCLM", "Vocab", "load_checkpoint", "save_checkpoint",
    "tabular_init",
    "GenerationConfig", "GuideState", "StepTrace", "apply_repetition_penalty",
    "candidate_class_posteriors", "direct_generate", "filter_candidates", "gedi_generate",
    "weighted_posterior",
    "audit_cost", "classify", "conditional_perplexity", "label_fidelity", "lambda_sweep",
    "LabeledCorpus", "SourceSpec", "half_split", "load_corpus", "oracle_posterior", "s1", "s2",
    "sample_corpus", "save_corpus",
    "TrainConfig", "binarize_example", "class_posterior_offline", "discriminative_loss",
    "generative_loss", "hybrid_loss", "loss_gradients", "train",
]
