"""Command-line entry point: ``gedi {synth,train,generate,classify,evaluate,sweep}``.

Exit codes: 0 success, 1 usage / configuration error, 2 data error,
3 numerical error.  ``GEDI_SEED`` sets the default seed; ``--seed`` wins.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time

from . import __version__
from .cclm import checkpoint_metadata, load_checkpoint, save_checkpoint
from .decode import PRESETS, GenerationConfig, GenerationRequest, read_requests, run_request
from .errors import ConfigError, DataError, GediError, InvariantViolation, NumericalError
from .evaluate import (
    SweepConfig,
    accuracy,
    audit_records,
    classify,
    conditional_perplexity,
    fresh_model,
    label_fidelity,
    lambda_sweep,
    write_report,
    write_table,
)
from .synth import SOURCES, assign_splits, load_corpus, load_source, sample_corpus, save_corpus, save_source
from .train import TrainConfig, train

log = logging.getLogger("gedi")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _default_seed() -> int:
    raw = os.environ.get("GEDI_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"GEDI_SEED must be an integer, got {raw!r}") from None


def _lambdas(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad lambda list {text!r}") from None


def _bias_pair(text: str) -> tuple[str, float]:
    name, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected NAME=VALUE, got {text!r}")
    try:
        return name, float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad bias value in {text!r}") from None


def _add_train_flags(p):
    p.add_argument("--order", type=int, default=1)
    p.add_argument("--lambda", dest="lam", type=float, default=0.6)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--learn-bias", action="store_true")
    p.add_argument("--fixed-alpha", action="store_true", help="do not learn alpha")
    p.add_argument("--binarized", action="store_true")
    p.add_argument("--seed", type=int, default=None)


def _train_config(args, seed) -> TrainConfig:
    return TrainConfig(lam=args.lam, lr=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                       seed=seed, optimizer=args.optimizer, learn_bias=args.learn_bias,
                       learn_alpha=not args.fixed_alpha, binarized=args.binarized)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gedi", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="sample a labelled corpus from a synthetic source")
    p.add_argument("--source", choices=sorted(SOURCES), required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--source-out", default=None, help="default: <out>.source.json")
    p.add_argument("--no-split", action="store_true", help="leave split tags unassigned")

    p = sub.add_parser("train", help="train a CC-LM with the hybrid loss")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="A", help="split tag to train on, or 'all'")
    p.add_argument("--heldout-split", default=None)
    p.add_argument("--unlabeled", action="store_true", help="train a single-code base LM")
    p.add_argument("--alpha-init", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics-out", default=None)
    _add_train_flags(p)

    p = sub.add_parser("generate", help="guided or direct greedy generation")
    p.add_argument("--guide", required=True, help="CC-LM checkpoint (the generator in direct mode)")
    p.add_argument("--base", default=None, help="unconditional base LM checkpoint (guided mode)")
    p.add_argument("--requests", default=None, help="JSONL request file")
    p.add_argument("--corpus", default=None, help="build prompts from this corpus instead")
    p.add_argument("--split", default="val")
    p.add_argument("--prompt-len", type=int, default=4)
    p.add_argument("--limit", type=int, default=None, help="use at most this many prompts")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("guided", "direct"), default="guided")
    p.add_argument("--preset", choices=sorted(PRESETS), default="paper-default")
    p.add_argument("--omega", type=float, default=None)
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--rep-penalty", type=float, default=None)
    p.add_argument("--bias", type=_bias_pair, action="append", default=[],
                   help="prior-bias override NAME=VALUE (repeatable)")
    p.add_argument("--target-bias", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None, help="override the guide's alpha")
    p.add_argument("--max-new-tokens", type=int, default=12)
    p.add_argument("--no-filter", action="store_true")

    p = sub.add_parser("classify", help="classify sequences with a CC-LM")
    p.add_argument("--model", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--corpus")
    group.add_argument("--tokens", help="whitespace-separated token names")
    p.add_argument("--split", default="val")
    p.add_argument("--out", default=None)

    p = sub.add_parser("evaluate", help="label fidelity and cost of generation records")
    p.add_argument("--generations", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--classifier", help="CC-LM checkpoint used as external classifier")
    group.add_argument("--source", help="source spec file: score with the exact oracle")
    p.add_argument("--model", default=None, help="also report accuracy/perplexity of this model")
    p.add_argument("--corpus", default=None)
    p.add_argument("--split", default="val")
    p.add_argument("--out", required=True)
    p.add_argument("--timing", action="store_true", help="include wall-clock figures")

    p = sub.add_parser("sweep", help="train and evaluate one model per lambda")
    p.add_argument("--corpus", required=True)
    p.add_argument("--lambdas", type=_lambdas, required=True)
    p.add_argument("--source", default=None, help="source spec for oracle label fidelity")
    p.add_argument("--classifier-lambda", type=float, default=1.0)
    p.add_argument("--prompt-len", type=int, default=3)
    p.add_argument("--max-new-tokens", type=int, default=12)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    return parser


def _seed(args) -> int:
    return args.seed if getattr(args, "seed", None) is not None else _default_seed()


def cmd_synth(args) -> None:
    seed = _seed(args)
    spec = SOURCES[args.source](seed)
    corpus = sample_corpus(spec, args.n, seed)
    if not args.no_split:
        corpus = assign_splits(corpus, seed)
    save_corpus(corpus, args.out)
    save_source(spec, args.source_out or args.out + ".source.json")
    log.info("wrote %d records to %s", len(corpus), args.out)


def _select(corpus, split):
    if split == "all":
        return corpus
    sub = corpus.subset(split)
    if len(sub) == 0:
        raise DataError(f"corpus has no sequences tagged {split!r}")
    return sub


def cmd_train(args) -> None:
    seed = _seed(args)
    cfg = _train_config(args, seed)
    corpus = load_corpus(args.corpus)
    data = _select(corpus, args.split)
    model = fresh_model(data, args.order, binarized=args.binarized, unlabeled=args.unlabeled)
    if args.alpha_init <= 0:
        raise UsageError("--alpha-init must be > 0")
    model.alpha = args.alpha_init
    heldout = _select(corpus, args.heldout_split) if args.heldout_split else None
    model, history = train(model, data, cfg, heldout)
    meta = {"config": json.dumps(dataclasses.asdict(cfg), sort_keys=True),
            "seed": seed, "order": args.order, "split": args.split,
            "unlabeled": int(args.unlabeled), "corpus": json.dumps(corpus.provenance, sort_keys=True)}
    save_checkpoint(model, args.out, meta)
    if args.metrics_out:
        with open(args.metrics_out, "w") as fh:
            for row in history:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def _generation_config(args) -> GenerationConfig:
    overrides = {"mode": args.mode, "max_new_tokens": args.max_new_tokens,
                 "filtering": not args.no_filter}
    for name in ("omega", "rho", "tau", "rep_penalty", "target_bias", "alpha"):
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    if args.bias:
        overrides["biases"] = dict(args.bias)
    return GenerationConfig.preset(args.preset, **overrides)


def _requests_from_corpus(corpus, guide, prompt_len, limit):
    names = guide.codes.class_names if guide.codes.binarized else guide.codes.names
    seqs = corpus.sequences if limit is None else corpus.sequences[:limit]
    return [GenerationRequest(corpus.vocab.decode(seq[:prompt_len]), name)
            for seq in seqs for name in names]


def cmd_generate(args) -> None:
    config = _generation_config(args)
    guide = load_checkpoint(args.guide)
    base = load_checkpoint(args.base) if args.base else None
    if config.mode == "guided" and base is None:
        raise UsageError("guided mode needs --base")
    if args.requests:
        requests = read_requests(args.requests)
    elif args.corpus:
        corpus = _select(load_corpus(args.corpus), args.split)
        requests = _requests_from_corpus(corpus, guide, args.prompt_len, args.limit)
    else:
        raise UsageError("give either --requests or --corpus")
    with open(args.out, "w") as fh:
        for req in requests:
            fh.write(json.dumps(run_request(req, config, guide, base), sort_keys=True) + "\n")


def cmd_classify(args) -> None:
    model = load_checkpoint(args.model)
    names = model.codes.class_names if model.codes.binarized else model.codes.names
    if args.tokens is not None:
        pred, scores = classify(model, model.vocab.encode(args.tokens.split()))
        report = {"predicted": names[pred], "scores": [float(s) for s in scores]}
    else:
        corpus = _select(load_corpus(args.corpus), args.split)
        report = {"accuracy": accuracy(model, corpus), "n": len(corpus),
                  "perplexity": conditional_perplexity(model, corpus)}
    report["model"] = args.model
    text = json.dumps(report, sort_keys=True)
    if args.out:
        write_report(args.out, report)
    else:
        print(text)


def _read_records(path):
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: {exc}") from None
    if not records:
        raise DataError(f"{path}: no generation records")
    return records


def cmd_evaluate(args) -> None:
    start = time.perf_counter()
    records = _read_records(args.generations)
    if args.source:
        classifier = load_source(args.source)
        names, vocab = classifier.class_names, classifier.vocab
    else:
        classifier = load_checkpoint(args.classifier)
        codes = classifier.codes
        names, vocab = (codes.class_names if codes.binarized else codes.names), classifier.vocab
    pairs = []
    for rec in records:
        if rec["target_class"] not in names:
            raise DataError(f"classifier does not know class {rec['target_class']!r}")
        tokens = [t for t in rec["prompt"] + rec["tokens"] if t in vocab.tokens]
        pairs.append((names.index(rec["target_class"]), vocab.encode(tokens)))
    fidelity = label_fidelity(pairs, classifier, names)
    cost = audit_records(records) if any("trace" in r for r in records) else None
    report = {
        "label_fidelity": fidelity.to_dict(),
        "inputs": {"generations": os.path.basename(args.generations),
                   "classifier": os.path.basename(args.classifier or args.source)},
        "generation_config": records[0].get("config"),
    }
    if cost is not None:
        report["cost"] = cost.to_dict()
    if args.model and args.corpus:
        model = load_checkpoint(args.model)
        corpus = _select(load_corpus(args.corpus), args.split)
        report["model"] = {"accuracy": accuracy(model, corpus) if model.n_classes > 1 else None,
                           "perplexity": conditional_perplexity(model, corpus),
                           "train_metadata": checkpoint_metadata(args.model)}
    if args.timing:
        elapsed = time.perf_counter() - start
        report["timing"] = {"evaluate_seconds": elapsed}
    write_report(args.out, report)


def cmd_sweep(args) -> None:
    seed = _seed(args)
    corpus = load_corpus(args.corpus)
    source = load_source(args.source) if args.source else None
    gen = GenerationConfig(mode="direct", max_new_tokens=args.max_new_tokens)
    cfg = SweepConfig(order=args.order, train=_train_config(args, seed),
                      classifier_lam=args.classifier_lambda, split_seed=seed,
                      prompt_len=args.prompt_len, generation=gen, binarized=args.binarized)
    rows = lambda_sweep(corpus, args.lambdas, cfg, source)
    meta = {"seed": seed, "train": dataclasses.asdict(cfg.train), "order": args.order,
            "classifier_lambda": args.classifier_lambda, "corpus": corpus.provenance}
    write_table(args.out, rows, meta)


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "generate": cmd_generate,
            "classify": cmd_classify, "evaluate": cmd_evaluate, "sweep": cmd_sweep}


def run(argv) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        COMMANDS[args.command](args)
    except (ConfigError, argparse.ArgumentTypeError) as exc:
        print(f"gedi: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"gedi: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, InvariantViolation, OSError, KeyError) as exc:
        print(f"gedi: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except GediError as exc:
        print(f"gedi: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
