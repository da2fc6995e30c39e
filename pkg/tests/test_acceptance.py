"""Acceptance suite: nine end-to-end checks, each printed as one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py`` (lines appear in the terminal
summary) or directly with ``python tests/test_acceptance.py``.
"""

import dataclasses
import itertools
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import ACCEPTANCE_RESULTS  # noqa: E402
from oracles import (  # noqa: E402
    brute_force_filter,
    brute_force_posteriors,
    finite_difference_gradients,
    random_gradient_instance,
    random_model,
    relative_error,
    uniform_base,
)

from gedi.cclm import ControlCodeSet, Vocab, tabular_init  # noqa: E402
from gedi.decode import (  # noqa: E402
    GenerationConfig,
    advance_guide,
    candidate_class_posteriors,
    direct_generate,
    filter_candidates,
    gedi_generate,
    make_guide_state,
    weighted_posterior,
)
from gedi.evaluate import (  # noqa: E402
    SweepConfig,
    accuracy,
    audit_cost,
    fresh_model,
    label_fidelity,
    lambda_sweep,
    splits_of,
)
from gedi.synth import s1, s2, sample_corpus  # noqa: E402
from gedi.train import TrainConfig, loss_gradients, train  # noqa: E402


def bayes_oracle_equivalence():
    worst = 0.0
    for n_classes in (2, 3):
        guide = random_model(np.random.default_rng(n_classes), 3, n_classes, 1, alpha=1.7,
                             bias=True)
        codes = tuple(range(n_classes))
        for length in range(5):
            for seq in itertools.product(range(3), repeat=length):
                # walk the incremental state along seq, checking every prefix
                gstate = make_guide_state(guide, codes)
                for t in range(length + 1):
                    post = candidate_class_posteriors(guide, gstate)
                    ref = brute_force_posteriors(guide, codes, seq[:t], biases=guide.bias)
                    worst = max(worst, float(np.abs(post - ref).max()))
                    if t < length:
                        gstate = advance_guide(guide, gstate, seq[t])
    return worst <= 1e-9, f"max abs error {worst:.2e} (tolerance 1e-9)"


def gradient_correctness():
    worst = 0.0
    for seed in range(20):
        model, batch, lam = random_gradient_instance(seed)
        analytic = loss_gradients(model, batch, lam).flat()
        numeric = finite_difference_gradients(model, batch, lam, h=1e-5)
        worst = max(worst, float(relative_error(analytic, numeric).max()))
    return worst <= 1e-4, f"max relative error {worst:.2e} over 20 instances (tolerance 1e-4)"


def lambda_sweep_directionality():
    spec = s2(0)
    corpus = sample_corpus(spec, 4000, 0)
    cfg = SweepConfig(order=0, train=TrainConfig(epochs=25, batch_size=128, seed=0),
                      split_seed=0)
    rows = {row["lambda"]: row for row in lambda_sweep(corpus, [0.05, 0.5, 1.0], cfg, spec)}
    acc_ok = rows[0.5]["accuracy"] >= rows[1.0]["accuracy"]
    ppl_ok = rows[1.0]["perplexity"] <= rows[0.05]["perplexity"]
    detail = (f"accuracy lambda=0.5 {rows[0.5]['accuracy']:.4f} vs 1.0 {rows[1.0]['accuracy']:.4f}; "
              f"perplexity lambda=1.0 {rows[1.0]['perplexity']:.4f} vs 0.05 "
              f"{rows[0.05]['perplexity']:.4f}")
    return acc_ok and ppl_ok, detail


def guidance_efficacy():
    spec = s1()
    corpus = sample_corpus(spec, 2000, 0)
    split_a, _, val = splits_of(corpus, 0)
    base, _ = train(fresh_model(corpus, 0, unlabeled=True), corpus,
                    TrainConfig(lam=1.0, epochs=10, seed=0))
    guide, _ = train(fresh_model(split_a, 0), split_a, TrainConfig(lam=0.6, epochs=10, seed=0))
    cfg = GenerationConfig.preset("paper-default", max_new_tokens=12)
    prompts = [list(seq[:4]) for seq in val.sequences][:200]
    guided, unguided = [], []
    for prompt in prompts:
        plain = direct_generate(base, 0, prompt, cfg)
        for target in (0, 1):
            tokens, _ = gedi_generate(base, guide, target, prompt, cfg)
            guided.append((target, prompt + tokens))
            unguided.append((target, prompt + plain))
    fid_guided = label_fidelity(guided, spec).overall
    fid_plain = label_fidelity(unguided, spec).overall
    ok = len(prompts) == 200 and fid_guided >= 0.95 and abs(fid_plain - 0.5) <= 0.10
    return ok, (f"guided fidelity {fid_guided:.3f} (>= 0.95), unguided {fid_plain:.3f} "
                f"(0.5 +- 0.10), {len(prompts)} prompts per class")


def pass_count_efficiency():
    cfg = GenerationConfig.preset("paper-default", max_new_tokens=20)
    seen = []
    for vocab_size in (2, 8, 64):
        rng = np.random.default_rng(vocab_size)
        guide = random_model(rng, vocab_size, 2, 1)
        base = tabular_init(guide.vocab, 1, ControlCodeSet(("lm",)))
        _, traces = gedi_generate(base, guide, 0, [0], cfg)
        report = audit_cost(traces)
        seen.append(report.guide_passes / report.tokens)
        for n_classes in (2, 4):
            names = tuple(f"topic{i}" for i in range(n_classes))
            vocab = Vocab(tuple(f"w{i}" for i in range(vocab_size)))
            bin_guide = tabular_init(vocab.extended(names), 1, ControlCodeSet.binary_pair(names),
                                     "noise", rng_seed=n_classes, noise_scale=1.0)
            _, traces = gedi_generate(uniform_base(vocab, 1), bin_guide, names[-1], [0], cfg)
            report = audit_cost(traces)
            seen.append(report.guide_passes / report.tokens)
    ok = all(x == 2 for x in seen)
    return ok, f"guide passes per token {sorted(set(seen))} over 9 configurations (expected 2)"


def filtering_contract():
    rng = np.random.default_rng(2024)
    failures = 0
    for case in range(1000):
        n = int(rng.integers(1, 30))
        weighted = rng.dirichlet(np.full(n, rng.choice([0.1, 1.0, 5.0])))
        post = rng.random(n)
        if case % 4 == 0:
            post = np.round(post * 4) / 4
        rho = float(rng.choice([0.0, 1.0, rng.random()]))
        tau = float(rng.choice([0.0, 1.0, rng.random()]))
        kept, dist = filter_candidates(weighted, post, rho, tau)
        ok = (set(np.flatnonzero(post > tau)) <= set(kept)
              and weighted[kept].sum() >= min(rho, weighted.sum()) - 1e-12
              and abs(dist.sum() - 1.0) <= 1e-12
              and list(kept) == brute_force_filter(weighted, post, rho, tau))
        failures += not ok
    return failures == 0, f"{1000 - failures}/1000 random cases satisfy all four properties"


def numerical_stability():
    rng = np.random.default_rng(77)
    bad = 0
    for _ in range(100):
        guide = random_model(rng, int(rng.integers(2, 9)), int(rng.integers(2, 5)), 1)
        guide.logits = rng.uniform(-1e4, 1e4, size=guide.logits.shape)
        guide.alpha = float(rng.uniform(0.1, 10.0))
        codes = tuple(range(guide.n_classes))
        prefix = list(rng.integers(0, guide.vocab.size, size=rng.integers(0, 6)))
        post, log_post = candidate_class_posteriors(guide, make_guide_state(guide, codes, prefix),
                                                    return_log=True)
        base_lp = rng.uniform(-1e4, 1e4, size=guide.vocab.size)
        base_lp -= np.logaddexp.reduce(base_lp)
        w = weighted_posterior(base_lp, post[:, 0], 30.0, log_post[:, 0])
        finite = all(np.all(np.isfinite(x)) for x in (post, log_post, w))
        bad += not (finite and abs(w.sum() - 1) <= 1e-12)
    return bad == 0, f"{100 - bad}/100 cases finite and normalised with logits up to 1e4"


def binarized_equivalence():
    spec = s2(0)
    corpus = sample_corpus(spec, 4000, 0)
    split_a, _, val = splits_of(corpus, 0)
    cfg = TrainConfig(lam=0.6, epochs=25, batch_size=128, seed=0)
    standard, _ = train(fresh_model(split_a, 1), split_a, cfg)
    binarized, _ = train(fresh_model(split_a, 1, binarized=True), split_a,
                         dataclasses.replace(cfg, binarized=True))
    acc_std, acc_bin = accuracy(standard, val), accuracy(binarized, val)
    gap = abs(acc_std - acc_bin)
    return gap <= 0.05, (f"standard {acc_std:.4f}, binarized {acc_bin:.4f}, gap "
                         f"{100 * gap:.2f} points (<= 5)")


def _pipeline(workdir: Path):
    cli = [sys.executable, "-m", "gedi.cli"]
    steps = [
        ["synth", "--source", "s1", "--n", "400", "--seed", "5", "--out", "corpus.txt"],
        ["train", "--corpus", "corpus.txt", "--split", "all", "--unlabeled", "--order", "0",
         "--epochs", "5", "--seed", "5", "--out", "base.ckpt"],
        ["train", "--corpus", "corpus.txt", "--split", "A", "--order", "0", "--epochs", "5",
         "--lambda", "0.6", "--seed", "5", "--out", "guide.ckpt", "--metrics-out", "train.jsonl"],
        ["generate", "--guide", "guide.ckpt", "--base", "base.ckpt", "--corpus", "corpus.txt",
         "--split", "val", "--preset", "paper-default", "--out", "generations.jsonl"],
        ["evaluate", "--generations", "generations.jsonl", "--source",
         "corpus.txt.source.json", "--model", "guide.ckpt", "--corpus", "corpus.txt",
         "--out", "report.json"],
    ]
    for step in steps:
        subprocess.run(cli + step, cwd=workdir, check=True, capture_output=True)
    return {p.name: p.read_bytes() for p in sorted(workdir.iterdir())}


def end_to_end_determinism(tmp_root: Path):
    first, second = tmp_root / "run1", tmp_root / "run2"
    first.mkdir()
    second.mkdir()
    out1, out2 = _pipeline(first), _pipeline(second)
    differing = [name for name in out1 if out1[name] != out2.get(name)]
    ok = not differing and set(out1) == set(out2) and "report.json" in out1
    return ok, (f"{len(out1)} artifacts compared byte for byte, "
                f"{len(differing)} differ {differing if differing else ''}").rstrip()


CRITERIA = [
    (1, "bayes-oracle equivalence", bayes_oracle_equivalence, 5),
    (2, "gradient correctness", gradient_correctness, 30),
    (3, "lambda-sweep directionality", lambda_sweep_directionality, 300),
    (4, "guidance efficacy", guidance_efficacy, 120),
    (5, "pass-count efficiency", pass_count_efficiency, 60),
    (6, "filtering contract", filtering_contract, 10),
    (7, "numerical stability", numerical_stability, 5),
    (8, "binarized-mode equivalence", binarized_equivalence, 300),
    (9, "end-to-end determinism", end_to_end_determinism, 300),
]


def evaluate_criterion(number, title, check, limit, *args):
    start = time.perf_counter()
    ok, detail = check(*args)
    elapsed = time.perf_counter() - start
    ok = ok and elapsed < limit
    line = f"[{'PASS' if ok else 'FAIL'}] {number}. {title}: {detail}; {elapsed:.1f}s (limit {limit}s)"
    ACCEPTANCE_RESULTS[number] = line
    print(line)
    return ok, line


@pytest.mark.parametrize("number,title,check,limit", CRITERIA,
                         ids=[title.replace(" ", "_") for _, title, _, _ in CRITERIA])
def test_acceptance(number, title, check, limit, tmp_path):
    args = (tmp_path,) if check is end_to_end_determinism else ()
    ok, line = evaluate_criterion(number, title, check, limit, *args)
    assert ok, line


if __name__ == "__main__":
    import tempfile

    results = []
    for number, title, check, limit in CRITERIA:
        with tempfile.TemporaryDirectory() as tmp:
            args = (Path(tmp),) if check is end_to_end_determinism else ()
            results.append(evaluate_criterion(number, title, check, limit, *args)[0])
    sys.exit(0 if all(results) else 1)
