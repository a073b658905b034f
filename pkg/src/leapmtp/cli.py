"""Command-line pipeline: train, bench, profile, simulate, distill.

Everything is driven by a run-config file (see runconfig); paths inside the
config resolve relative to the config file. Outputs are CSV plus binary
checkpoints. Any invariant violation (losslessness failure, divergence,
malformed config) exits nonzero without writing benchmark numbers.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import spectree, theory
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import BOS_ID, Corpus, load_corpus, save_corpus, split_corpus
from .decode import STRATEGIES, decode_loop, write_stats_csv
from .model import TransformerLM
from .runconfig import ConfigError, RunConfig, parse_config
from .training import LeapSchedule, self_distill, train, write_loss_history

__all__ = ["main"]


class PipelineError(RuntimeError):
    pass


def _resolve(cfg_path: Path, value: str) -> Path:
    path = Path(value)
    return path if path.is_absolute() else (cfg_path.parent / path)


def _load_config(args) -> tuple[RunConfig, Path, Path]:
    cfg_path = Path(args.config).resolve()
    cfg = parse_config(cfg_path)
    if args.seed is not None:
        cfg.override("seed", args.seed)
    if args.out is not None:
        cfg.override("paths.output_dir", args.out)
    out_dir = _resolve(cfg_path, cfg["paths.output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    return cfg, cfg_path, out_dir


def _load_split_corpus(cfg: RunConfig, cfg_path: Path):
    corpus_path = _resolve(cfg_path, cfg["paths.corpus"])
    if not corpus_path.exists():
        raise PipelineError(f"corpus not found: {corpus_path}")
    corpus = load_corpus(corpus_path)
    return split_corpus(corpus, cfg["training.val_fraction"], cfg["seed"])


def _prompts_from_file(path: Path, prompt_len: int) -> list[list[int]]:
    corpus = load_corpus(path)
    prompts = []
    for doc in corpus.documents:
        if len(doc) == 0:
            continue
        prompts.append([BOS_ID] + doc[:prompt_len].tolist())
    if not prompts:
        raise PipelineError(f"no usable prompts in {path}")
    return prompts


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg, cfg_path, out_dir = _load_config(args)
    ckpt_dir = _resolve(cfg_path, cfg["paths.checkpoint_dir"])
    train_corpus, _val = _load_split_corpus(cfg, cfg_path)

    if args.init is not None:
        model = load_checkpoint(args.init)
    elif args.stage == "full":
        warmup_ckpt = ckpt_dir / "warmup.ckpt"
        if not warmup_ckpt.exists():
            raise PipelineError(
                f"full stage requires a warmup checkpoint at {warmup_ckpt} "
                "(run `train --stage warmup` first or pass --init)"
            )
        model = load_checkpoint(warmup_ckpt)
    else:
        model = TransformerLM.init(cfg.model_config(), seed=cfg["seed"])

    if model.config != cfg.model_config():
        raise PipelineError("checkpoint model config does not match run config")

    tcfg = cfg.training_config(args.stage)
    model, history = train(model, train_corpus, tcfg)
    ckpt_path = ckpt_dir / f"{args.stage}.ckpt"
    save_checkpoint(model, ckpt_path)
    loss_path = out_dir / f"loss_{args.stage}.csv"
    write_loss_history(history, loss_path)
    final = history[-1].loss if history else float("nan")
    print(f"stage {args.stage}: {len(history)} steps, final loss {final:.4f}")
    print(f"checkpoint -> {ckpt_path}")
    print(f"loss history -> {loss_path}")
    return 0


def _default_checkpoint(cfg: RunConfig, cfg_path: Path, explicit) -> TransformerLM:
    if explicit is not None:
        return load_checkpoint(explicit)
    ckpt = _resolve(cfg_path, cfg["paths.checkpoint_dir"]) / "full.ckpt"
    if not ckpt.exists():
        raise PipelineError(f"no checkpoint at {ckpt}; pass --checkpoint")
    return load_checkpoint(ckpt)


def cmd_bench(args) -> int:
    cfg, cfg_path, out_dir = _load_config(args)
    model = _default_checkpoint(cfg, cfg_path, args.checkpoint)
    prompts = _prompts_from_file(_resolve(cfg_path, args.prompts),
                                 cfg["decode.prompt_len"])
    _train_corpus, val = _load_split_corpus(cfg, cfg_path)

    profile = spectree.estimate_profile(
        model, val, top_ranks=cfg["decode.top_ranks"], min_positions=1000
    )
    tree = spectree.default_tree(
        model.config, profile, budget=cfg["decode.tree_budget"],
        max_children=cfg["decode.tree_max_children"],
        max_depth=cfg["decode.tree_max_depth"],
    )
    max_new = cfg["decode.max_new"]

    rows = []
    aggregate: dict[str, dict] = {
        s: dict(tokens=0, passes=0, seconds=0.0) for s in STRATEGIES
    }
    for pid, prompt in enumerate(prompts):
        reference = None
        ar_tps = None
        for strategy in STRATEGIES:
            out, stats = decode_loop(model, prompt, strategy, max_new, tree=tree)
            if strategy == "ar":
                reference, ar_tps = out, stats.tokens_per_sec
            elif out != reference:
                first_diff = next(
                    i for i, (a, b) in enumerate(zip(out, reference)) if a != b
                )
                raise PipelineError(
                    f"losslessness violated: strategy {strategy} diverged from "
                    f"ar on prompt {pid} at position {first_diff}"
                )
            rows.append(dict(
                strategy=strategy, prompt_id=pid, tokens=stats.tokens_emitted,
                passes=stats.verification_passes,
                mean_accept=f"{stats.mean_accept_length:.4f}",
                tokens_per_sec=f"{stats.tokens_per_sec:.2f}",
                speedup=f"{stats.tokens_per_sec / ar_tps:.4f}" if ar_tps else "1.0000",
            ))
            agg = aggregate[strategy]
            agg["tokens"] += stats.tokens_emitted
            agg["passes"] += stats.verification_passes
            agg["seconds"] += stats.wall_seconds

    stats_path = out_dir / "bench.csv"
    write_stats_csv(rows, stats_path)
    spectree.save_profile(profile, out_dir / "bench_accuracy.csv")
    gamma_hat = theory.fit_gamma(np.arange(1, profile.depth + 1), profile.top1)

    ar_tps_total = aggregate["ar"]["tokens"] / aggregate["ar"]["seconds"]
    print(f"benchmarked {len(prompts)} prompts, max_new={max_new}; "
          f"all strategies token-identical to ar")
    print(f"fitted attenuation gamma_hat = {gamma_hat:.4f} "
          f"(gamma_hat * n^2 = {gamma_hat * model.config.n_pred_heads ** 2:.3f})")
    for strategy in STRATEGIES:
        agg = aggregate[strategy]
        mean_accept = agg["tokens"] / agg["passes"] if agg["passes"] else 0.0
        tps = agg["tokens"] / agg["seconds"] if agg["seconds"] else 0.0
        print(f"  {strategy:9s} mean_accept={mean_accept:6.3f} "
              f"tokens/s={tps:9.1f} speedup={tps / ar_tps_total:6.3f}")
    print(f"report -> {stats_path}")
    return 0


def cmd_profile(args) -> int:
    cfg, cfg_path, out_dir = _load_config(args)
    model = _default_checkpoint(cfg, cfg_path, args.checkpoint)
    _train_corpus, val = _load_split_corpus(cfg, cfg_path)

    profile = spectree.estimate_profile(
        model, val, top_ranks=cfg["decode.top_ranks"], min_positions=1000
    )
    profile_path = out_dir / "profile.csv"
    spectree.save_profile(profile, profile_path)
    gamma_hat = theory.fit_gamma(np.arange(1, profile.depth + 1), profile.top1)

    half_a = Corpus(documents=val.documents[0::2], tokenizer=val.tokenizer)
    half_b = Corpus(documents=val.documents[1::2], tokenizer=val.tokenizer)
    pa = spectree.estimate_profile(model, half_a,
                                   top_ranks=cfg["decode.top_ranks"],
                                   min_positions=500)
    pb = spectree.estimate_profile(model, half_b,
                                   top_ranks=cfg["decode.top_ranks"],
                                   min_positions=500)
    consistency = float(np.max(np.abs(pa.top1 - pb.top1)))

    print("per-position top-1 accuracy:",
          " ".join(f"{v:.3f}" for v in profile.top1))
    print(f"fitted gamma_hat = {gamma_hat:.4f}")
    print(f"split-halves max |top-1 difference| = {consistency:.4f}")
    print(f"profile -> {profile_path}")
    return 0


def cmd_simulate(args) -> int:
    cfg, _cfg_path, out_dir = _load_config(args)
    gammas = cfg["theory.gammas"]
    strides = cfg["theory.strides"]
    if not gammas or not strides:
        raise ConfigError("theory.gammas and theory.strides must be non-empty")
    n_heads = cfg["theory.n_heads"]

    curves_path = out_dir / "theory_curves.csv"
    theory.emit_curves(gammas, strides, n_heads, curves_path)

    crossover_path = out_dir / "theory_crossover.csv"
    with open(crossover_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n", "gamma_star", "gamma_star_n2",
                         "delta_at_half", "delta_at_double"])
        for n in range(cfg["theory.crossover_n_min"],
                       cfg["theory.crossover_n_max"] + 1):
            gstar = theory.crossover_gamma(n, stride=2, tol=1e-9)
            lo = theory.delta_decomposition(theory.AttenuationParams(gstar / 2, n, 2))
            hi = theory.delta_decomposition(theory.AttenuationParams(2 * gstar, n, 2))
            writer.writerow([n, f"{gstar:.9f}", f"{gstar * n * n:.6f}",
                             f"{lo.delta:.6e}", f"{hi.delta:.6e}"])

    bounds_path = out_dir / "theory_bounds.csv"
    with open(bounds_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["gamma", "n", "delta1_abs", "delta1_upper", "upper_holds",
                         "delta2", "delta2_lower", "above_lower"])
        for gamma in np.geomspace(1e-3, 1.0, 20):
            for n in (2, 4, 8, 16):
                diag = theory.bound_diagnostics(
                    theory.AttenuationParams(float(gamma), n, 2))
                if not diag.delta1_ok:
                    raise PipelineError(
                        f"exact bound violated at gamma={gamma}, n={n}")
                writer.writerow([f"{gamma:.6g}", n, f"{diag.delta1_abs:.6e}",
                                 f"{diag.delta1_upper:.6e}", diag.delta1_ok,
                                 f"{diag.delta2:.6e}", f"{diag.delta2_lower:.6e}",
                                 diag.delta2_above_lower])

    print(f"curves -> {curves_path}")
    print(f"crossover sweep -> {crossover_path}")
    print(f"bound diagnostics -> {bounds_path}")
    return 0


def cmd_distill(args) -> int:
    cfg, cfg_path, out_dir = _load_config(args)
    model = _default_checkpoint(cfg, cfg_path, args.checkpoint)
    prompts_path = _resolve(cfg_path, args.prompts)
    if not prompts_path.exists():
        raise PipelineError(f"prompts file not found: {prompts_path}")
    prompts = load_corpus(prompts_path)
    max_new = args.max_new if args.max_new is not None else cfg["decode.max_new"]
    distilled = self_distill(model, prompts, max_new=max_new, seed=cfg["seed"])
    out_path = out_dir / "distilled.txt"
    save_corpus(distilled, out_path)
    print(f"distilled {len(distilled)} documents "
          f"({distilled.total_tokens} tokens) -> {out_path}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="leapmtp",
        description="Leap multi-token prediction: training, decoding, theory.",
    )
    parser.add_argument("--config", required=True, help="run config file")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--out", default=None, help="override output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training stage")
    p_train.add_argument("--stage", choices=["warmup", "full"], required=True)
    p_train.add_argument("--init", default=None,
                         help="start from this checkpoint instead of the default")
    p_train.set_defaults(func=cmd_train)

    p_bench = sub.add_parser("bench", help="decode benchmark across strategies")
    p_bench.add_argument("--checkpoint", default=None)
    p_bench.add_argument("--prompts", required=True)
    p_bench.set_defaults(func=cmd_bench)

    p_profile = sub.add_parser("profile", help="per-position head accuracy")
    p_profile.add_argument("--checkpoint", default=None)
    p_profile.set_defaults(func=cmd_profile)

    p_sim = sub.add_parser("simulate", help="acceptance-length theory sweeps")
    p_sim.set_defaults(func=cmd_simulate)

    p_distill = sub.add_parser("distill", help="greedy self-distillation corpus")
    p_distill.add_argument("--checkpoint", default=None)
    p_distill.add_argument("--prompts", required=True)
    p_distill.add_argument("--max-new", type=int, default=None)
    p_distill.set_defaults(func=cmd_distill)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (PipelineError, ConfigError, ValueError, OSError,
            FloatingPointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
