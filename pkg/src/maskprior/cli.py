"""Command-line driver.

Subcommands: gen-data, precompute, train, decode, eval-gap, eval-cll, bench.
Flags mirror the config field names one-to-one; a JSON config file with the
same field names can seed any subcommand (explicit flags win).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .decoding import DecodeConfig, decode_block, decode_full
from .denoiser import CountSource, OracleSource, TemplateDistribution, UniformSource, train_count_denoiser
from .harness import (
    BenchRow,
    CorpusSpec,
    bench_overhead,
    cll_curve,
    gap_experiment,
    gen_corpus,
    load_corpus,
)
from .hmm import HmmParams, load_hmm, save_hmm
from .training import TrainConfig, precompute_potentials, train_prior
from . import reports

DEFAULT_HIDDEN_STATES = 1024  # matches the deployed prior scale; tests use far less


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text())


def _merged(args: argparse.Namespace, config: dict, name: str, default):
    value = getattr(args, name.replace("-", "_"), None)
    if value is not None:
        return value
    return config.get(name.replace("-", "_"), default)


def _corpus_arrays(path: str, split: str | None = None):
    records = load_corpus(path)
    if split:
        records = [r for r in records if r.split == split] or records
    return records


def _build_source(kind: str, records, radius: int, smoothing: float,
                  vocab: int | None):
    data = np.stack([r.tokens for r in records]) if records else None
    if kind == "oracle":
        if data is None:
            raise SystemExit("oracle source needs a nonempty corpus")
        v = vocab if vocab else int(data.max()) + 1
        return OracleSource(TemplateDistribution.from_corpus(data, v))
    if kind == "count":
        if data is None:
            raise SystemExit("count source needs a nonempty corpus")
        return train_count_denoiser(data, radius, smoothing)
    if kind == "uniform":
        if vocab is None:
            if data is None:
                raise SystemExit("uniform source needs --vocab or a corpus")
            vocab = int(data.max()) + 1
        return UniformSource(vocab)
    raise SystemExit(f"unknown source kind {kind!r}")


def _add_source_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--source", choices=("oracle", "count", "uniform"),
                   default="oracle")
    p.add_argument("--radius", type=int, default=2,
                   help="context radius of the count source")
    p.add_argument("--smoothing", type=float, default=1e-6)
    p.add_argument("--vocab", type=int, default=None)


def cmd_gen_data(args: argparse.Namespace) -> int:
    spec_obj = json.loads(Path(args.spec).read_text())
    templates = None
    if "templates" in spec_obj:
        templates = [(t["tokens"], t.get("prob", 1.0)) for t in spec_obj["templates"]]
    spec = CorpusSpec(
        vocab=spec_obj["vocab"],
        length=spec_obj["length"],
        size=args.size if args.size is not None else spec_obj.get("size", 1000),
        templates=templates,
        markov_init=spec_obj.get("markov_init"),
        markov_transition=spec_obj.get("markov_transition"),
        heldout_fraction=spec_obj.get("heldout_fraction", 0.0),
        prompt_len=spec_obj.get("prompt_len", 0),
    )
    rng = np.random.default_rng(args.seed)
    _, summary = gen_corpus(spec, rng, args.out)
    summary_path = Path(args.out).with_suffix(".summary.json")
    reports.write_json(summary_path, summary)
    print(f"wrote {spec.size} sequences to {args.out}")
    print(f"summary: {summary_path}")
    return 0


def cmd_precompute(args: argparse.Namespace) -> int:
    records = _corpus_arrays(args.corpus, args.split)
    source = _build_source(args.source, records, args.radius, args.smoothing,
                           args.vocab)
    rng = np.random.default_rng(args.seed)
    dataset = [r.tokens for r in records]
    prompts = [r.prompt_len for r in records]
    count = precompute_potentials(dataset, source, args.draws, rng, args.out,
                                  manifest_path=args.manifest,
                                  prompt_lengths=prompts)
    print(f"wrote {count} potential records to {args.out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config_file = _load_config(args.config)
    config = TrainConfig(
        weight_mode=_merged(args, config_file, "weight-mode", "inverse_t"),
        optimizer_mode=_merged(args, config_file, "optimizer-mode", "em"),
        epochs=_merged(args, config_file, "epochs", 100),
        batch_size=_merged(args, config_file, "batch-size", 32),
        learning_rate=_merged(args, config_file, "learning-rate", 0.5),
        seed=_merged(args, config_file, "seed", 0),
        window_length=_merged(args, config_file, "window-length", None),
        param_floor=_merged(args, config_file, "param-floor", 1e-6),
    )
    records = _corpus_arrays(args.corpus, "train")
    source = _build_source(args.source, records, args.radius, args.smoothing,
                           args.vocab)
    prior, history = train_prior(
        [r.tokens for r in records], source, config,
        num_states=args.hidden_states,
        prompt_lengths=[r.prompt_len for r in records],
    )
    save_hmm(prior, args.out)
    if args.history:
        history.write_csv(args.history)
    final = history.epochs[-1].objective if history.epochs else float("nan")
    print(f"trained prior (N={prior.num_states}, V={prior.vocab}) -> {args.out}")
    print(f"final objective: {final:.6f}"
          + (f" (ascent fallback at epoch {history.fallback_epoch})"
             if history.fallback_epoch is not None else ""))
    return 0


def cmd_decode(args: argparse.Namespace) -> int:
    config_file = _load_config(args.config)
    cfg = DecodeConfig(
        length=_merged(args, config_file, "length", 512),
        steps=_merged(args, config_file, "steps", 32),
        block_size=_merged(args, config_file, "block-size", 32),
        window=_merged(args, config_file, "window", 32),
        gamma=_merged(args, config_file, "gamma", 0.5),
        temperature=_merged(args, config_file, "temperature", 0.2),
        heuristic=_merged(args, config_file, "heuristic", "confidence"),
        sampler=_merged(args, config_file, "sampler", "latent"),
        seed=_merged(args, config_file, "seed", 0),
    )
    prior = load_hmm(args.prior) if args.prior else None
    records = _corpus_arrays(args.corpus) if args.corpus else []
    source = _build_source(args.source, records, args.radius, args.smoothing,
                           args.vocab)
    prompt = None
    if args.prompt:
        prompt = np.array([int(x) for x in args.prompt.split(",")], dtype=np.int64)
    run = decode_block if args.mode == "block" else decode_full
    tokens, trace = run(prior, source, cfg, prompt)
    out = {"tokens": [int(t) for t in tokens]}
    if args.out:
        Path(args.out).write_text(json.dumps(out) + "\n")
    else:
        print(json.dumps(out))
    if args.trace:
        trace.write_jsonl(args.trace)
    return 0


def cmd_eval_gap(args: argparse.Namespace) -> int:
    records = _corpus_arrays(args.corpus)
    data = np.stack([r.tokens for r in records])
    vocab = args.vocab if args.vocab else int(data.max()) + 1
    dist = TemplateDistribution.from_corpus(data, vocab)
    source = _build_source(args.source, records, args.radius, args.smoothing, vocab)
    prior = load_hmm(args.prior)
    rng = np.random.default_rng(args.seed)
    report = gap_experiment(prior, source, dist, args.samples, rng)
    paths = reports.emit_gap_report(report, args.out)
    print(f"factorized gap: {report.kl_joint_vs_factorized:.4f} nats; "
          f"coupled gap: {report.kl_joint_vs_coupled:.4f} nats")
    print(f"cross-mode rate: factorized {report.incoherence_rate_factorized:.3f}, "
          f"coupled {report.incoherence_rate_coupled:.3f}")
    print("wrote " + ", ".join(str(p) for p in paths.values()))
    return 0


def cmd_eval_cll(args: argparse.Namespace) -> int:
    train_records = _corpus_arrays(args.corpus, "train")
    held_records = [r for r in load_corpus(args.corpus) if r.split == "heldout"]
    if not held_records:
        held_records = train_records
    source = _build_source(args.source, train_records, args.radius,
                           args.smoothing, args.vocab)
    prior = load_hmm(args.prior)
    rng = np.random.default_rng(args.seed)
    curve = cll_curve(prior, source, [r.tokens for r in held_records],
                      args.draws, rng)
    paths = reports.emit_cll_report(curve, args.out)
    cross = curve.crossover_bin()
    print("no empirical crossover" if cross is None
          else f"empirical crossover at bin {cross} "
               f"(ratio > {curve.bin_edges[cross]:.2f})")
    print("wrote " + ", ".join(str(p) for p in paths.values()))
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    rng = np.random.default_rng(args.seed)
    vocab = args.vocab or 64
    length = args.length
    prior = load_hmm(args.prior) if args.prior else HmmParams.random(
        args.hidden_states, vocab, rng)
    templates = rng.integers(0, vocab, size=(args.backbone_templates, length))
    dist = TemplateDistribution.from_corpus(templates, vocab)
    source = OracleSource(dist)
    prompt = templates[0][: length // 2].copy()
    cfg = DecodeConfig(length=length, steps=args.steps, block_size=args.window,
                       window=args.window, gamma=1.0, temperature=0.2,
                       sampler=args.sampler, seed=args.seed)
    rows = bench_overhead(prior, source, [("full-diffusion", cfg, "full")],
                          prompt=prompt, repetitions=args.reps)
    paths = reports.emit_bench_report(rows, args.out)
    for row in rows:
        print(f"{row.label}: baseline {row.baseline_mean_s:.4f}s, "
              f"coupled {row.coupled_mean_s:.4f}s, overhead {row.overhead:+.2%}")
    print("wrote " + ", ".join(str(p) for p in paths.values()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskprior",
        description="Structural-prior coupling for masked-token decoding",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="sample a synthetic corpus")
    p.add_argument("--spec", required=True, help="JSON corpus spec")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("precompute", help="cache potential grids for a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--draws", type=int, default=1)
    p.add_argument("--split", default="train")
    p.add_argument("--seed", type=int, default=0)
    _add_source_args(p)
    p.set_defaults(func=cmd_precompute)

    p = sub.add_parser("train", help="fit the structural prior")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--history", default=None, help="epoch CSV path")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--hidden-states", type=int, default=DEFAULT_HIDDEN_STATES)
    p.add_argument("--weight-mode", choices=("uniform", "inverse_t"), default=None)
    p.add_argument("--optimizer-mode", choices=("em", "ascent"), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--window-length", type=int, default=None)
    p.add_argument("--param-floor", type=float, default=None)
    _add_source_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="generate sequences")
    p.add_argument("--mode", choices=("block", "full"), default="block")
    p.add_argument("--prior", default=None, help="CODDHMM1 file; omit for baseline")
    p.add_argument("--corpus", default=None, help="corpus backing the source")
    p.add_argument("--config", default=None)
    p.add_argument("--length", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--block-size", type=int, default=None)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--heuristic",
                   choices=("random", "confidence", "margin", "entropy"),
                   default=None)
    p.add_argument("--sampler", choices=("latent", "ao", "alg1"), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--prompt", default=None, help="comma-separated token ids")
    p.add_argument("--out", default=None)
    p.add_argument("--trace", default=None, help="step trace JSONL path")
    _add_source_args(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval-gap", help="one-shot misspecification gap report")
    p.add_argument("--prior", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--samples", type=int, default=20000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="report path prefix")
    _add_source_args(p)
    p.set_defaults(func=cmd_eval_gap)

    p = sub.add_parser("eval-cll", help="conditional log-likelihood curve")
    p.add_argument("--prior", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--draws", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="report path prefix")
    _add_source_args(p)
    p.set_defaults(func=cmd_eval_cll)

    p = sub.add_parser("bench", help="decode overhead benchmark")
    p.add_argument("--prior", default=None)
    p.add_argument("--hidden-states", type=int, default=256)
    p.add_argument("--length", type=int, default=512)
    p.add_argument("--steps", type=int, default=32)
    p.add_argument("--window", type=int, default=32)
    p.add_argument("--sampler", choices=("latent", "ao", "alg1"), default="latent")
    p.add_argument("--backbone-templates", type=int, default=8192)
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--vocab", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="report path prefix")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
