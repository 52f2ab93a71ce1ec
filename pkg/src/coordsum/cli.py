"""Command-line pipelines: file-mediated stages over the library modules.

Each subcommand reads one INI run configuration, takes an exclusive lock on
its output directory, writes its artifacts plus a manifest of content
hashes, and exits 0. Failures print a single machine-parseable line
``category: message`` on stderr with a category-specific exit code:

    2 config-error    malformed or unknown configuration
    3 missing-file    a referenced input does not exist
    4 hash-mismatch   an input no longer matches its producing manifest
    5 output-exists   an output path is already occupied
    6 lock-held       another process owns the output directory
    1 run-error       any other library failure
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path


def _apply_thread_env() -> None:
    """Honor BRIO_THREADS before numpy initializes its thread pools."""
    raw = os.environ.get("BRIO_THREADS")
    if raw is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, raw)


def _build_parser() -> argparse.ArgumentParser:
    from .runconfig import help_text

    parser = argparse.ArgumentParser(
        prog="coordsum",
        description="Desk-scale contrastive coordination training for seq2seq models.",
        epilog="configuration keys (INI sections, with defaults):\n" + help_text(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    stages = {
        "make-data": "synthesize the train/valid/test splits and vocabulary",
        "train-mle": "likelihood-train a model from scratch",
        "gen-candidates": "decode a diverse candidate cache for a split",
        "train-brio": "coordination fine-tuning from a candidate cache",
        "rerank": "select candidates by a model's sequence scores",
        "evaluate": "generation metrics plus optional coordination/novelty",
        "sweep": "gamma-coefficient or beam-width sweep",
        "loop": "iterated generation and fine-tuning rounds",
        "few-shot": "fine-tune on sampled subsets, averaged over repeats",
        "calibrate": "token-level calibration (ECE and reliability)",
    }
    for name, help_line in stages.items():
        p = sub.add_parser(name, help=help_line)
        p.add_argument("--config", default=None,
                       help="INI run configuration (defaults apply when omitted)")
    return parser


# ---------------------------------------------------------------------------
# Shared stage plumbing
# ---------------------------------------------------------------------------


def _require_file(path: Path) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"input does not exist: {path}")
    return path


def _check_against_producer(path: Path) -> None:
    """If a sibling manifest declared this file as output, verify its hash."""
    from .manifest import HashMismatch, file_hash, read_manifest

    producer = path.parent / "manifest.json"
    if not producer.is_file():
        return
    record = read_manifest(producer)
    recorded = record.get("outputs", {}).get(str(path))
    if recorded is not None and recorded != file_hash(path):
        raise HashMismatch(f"input hash changed since it was produced: {path}")


def _input(path: Path) -> Path:
    _require_file(path)
    _check_against_producer(path)
    return path


def _collect_outputs(out_dir: Path) -> list[Path]:
    from .manifest import LOCK_NAME

    skip = {LOCK_NAME, "manifest.json"}
    return sorted(p for p in out_dir.rglob("*") if p.is_file() and p.name not in skip)


def _run_stage(args, driver) -> int:
    """Parse config, lock the output directory, run, write the manifest."""
    from .manifest import output_lock, prepare_out_dir, write_manifest
    from .runconfig import parse_runconfig

    cfg = parse_runconfig(args.config)
    out_dir = cfg.path("out_dir")
    with output_lock(out_dir):
        prepare_out_dir(out_dir)
        inputs = driver(cfg, out_dir)
        if args.config:
            inputs = [Path(args.config), *inputs]
        write_manifest(out_dir / "manifest.json", list(inputs),
                       _collect_outputs(out_dir), cfg.resolved, cfg.seed)
    return 0


def _load_vocab(cfg):
    from .corpus import load_vocab

    return load_vocab(_input(cfg.path("vocab")))


def _load_split(cfg, key: str, vocab, split: str):
    from .corpus import load_dataset_tsv

    return load_dataset_tsv(_input(cfg.path(key)), vocab, split)


def _load_ckpt(cfg, key: str = "checkpoint"):
    from .model import load_checkpoint

    return load_checkpoint(_input(cfg.path(key)))


def _named_checkpoints(cfg) -> tuple[dict, list[Path]]:
    """The main checkpoint plus extra_checkpoints, keyed by file stem."""
    paths = [cfg.path("checkpoint")]
    extra = cfg.paths.get("extra_checkpoints", "")
    paths.extend(Path(p.strip()) for p in extra.split(",") if p.strip())
    from .model import load_checkpoint

    ckpts = {}
    for p in paths:
        _input(p)
        name = p.stem
        if name in ckpts:
            name = f"{p.parent.name}/{p.stem}"
        while name in ckpts:
            name = f"{name}:{len(ckpts)}"
        ckpts[name] = load_checkpoint(p)
    return ckpts, paths


def _write_train_figure(out_dir: Path, log_path: Path, title: str) -> None:
    import json

    from .figures import loss_curves, save_figure

    records = [json.loads(line) for line in log_path.read_text().splitlines() if line]
    save_figure(loss_curves(records, title), out_dir / "train_log.png")


# ---------------------------------------------------------------------------
# Stage drivers (each returns the list of input paths it consumed)
# ---------------------------------------------------------------------------


def _cmd_make_data(cfg, out_dir: Path) -> list[Path]:
    from .corpus import generate_synthetic_dataset, save_dataset_tsv, save_vocab

    vocab = cfg.task.build_vocab()
    save_vocab(vocab, out_dir / "vocab.txt")
    for split, n_key in (("train", "n_train"), ("valid", "n_valid"), ("test", "n_test")):
        dataset = generate_synthetic_dataset(cfg.seed, cfg.data_sizes[n_key],
                                             cfg.task, split)
        save_dataset_tsv(dataset, vocab, out_dir / f"{split}.tsv")
    return []


def _cmd_train_mle(cfg, out_dir: Path) -> list[Path]:
    from .model import Checkpoint, init_parameters, save_checkpoint
    from .numerics import RngState, derive_seed
    from .train import train_mle

    vocab = _load_vocab(cfg)
    train_ds = _load_split(cfg, "train_data", vocab, "train")
    valid_ds = (_load_split(cfg, "valid_data", vocab, "valid")
                if cfg.paths.get("valid_data") else None)
    model_cfg = cfg.model_config(len(vocab.tokens))
    start = Checkpoint(config=model_cfg,
                       params=init_parameters(model_cfg, RngState(derive_seed(cfg.seed, "init"))))
    log_path = out_dir / "train_log.jsonl"
    ckpt = train_mle(start, train_ds, cfg.train, valid_ds, log_path)
    save_checkpoint(out_dir / "model.ckpt", ckpt)
    _write_train_figure(out_dir, log_path, "likelihood training")
    inputs = [cfg.path("vocab"), cfg.path("train_data")]
    if cfg.paths.get("valid_data"):
        inputs.append(cfg.path("valid_data"))
    return inputs


def _cmd_gen_candidates(cfg, out_dir: Path) -> list[Path]:
    from .train import build_candidate_sets

    vocab = _load_vocab(cfg)
    dataset = _load_split(cfg, "data", vocab, "test")
    ckpt = _load_ckpt(cfg)
    build_candidate_sets(ckpt, dataset, cfg.train, out_dir / "candidates.jsonl")
    return [cfg.path("vocab"), cfg.path("data"), cfg.path("checkpoint")]


def _cmd_train_brio(cfg, out_dir: Path) -> list[Path]:
    from .decode import read_candidate_cache
    from .model import save_checkpoint
    from .train import train_brio

    vocab = _load_vocab(cfg)
    train_ds = _load_split(cfg, "train_data", vocab, "train")
    valid_ds = (_load_split(cfg, "valid_data", vocab, "valid")
                if cfg.paths.get("valid_data") else None)
    ckpt = _load_ckpt(cfg)
    cand_sets = read_candidate_cache(_input(cfg.path("cache")))
    log_path = out_dir / "train_log.jsonl"
    tuned = train_brio(ckpt, train_ds, cand_sets, cfg.train,
                       cfg.run["brio_mode"], valid_ds, log_path)
    save_checkpoint(out_dir / "model.ckpt", tuned)
    _write_train_figure(out_dir, log_path, "coordination fine-tuning")
    inputs = [cfg.path("vocab"), cfg.path("train_data"), cfg.path("checkpoint"),
              cfg.path("cache")]
    if cfg.paths.get("valid_data"):
        inputs.append(cfg.path("valid_data"))
    return inputs


def _cmd_rerank(cfg, out_dir: Path) -> list[Path]:
    import numpy as np

    from .decode import read_candidate_cache
    from .figures import grouped_bars, save_figure
    from .metrics import rouge_l, rouge_n
    from .reports import (embed_provenance, provenance_lines, render_table,
                          write_csv, write_json_report, write_text_report)
    from .train import rerank_select

    vocab = _load_vocab(cfg)
    dataset = _load_split(cfg, "data", vocab, "test")
    ckpt = _load_ckpt(cfg)
    cand_sets = read_candidate_cache(_input(cfg.path("cache")))
    choices = rerank_select(ckpt, dataset, cand_sets, cfg.train.length_alpha)
    lines = []
    rows = []
    for choice in choices:
        ref = dataset.examples[choice.example_index].reference
        words = " ".join(vocab.tokens[t] for t in choice.candidate.tokens)
        lines.append(f"{choice.example_index}\t{choice.f_score!r}\t{words}")
        rows.append({
            "example": choice.example_index,
            "f_score": choice.f_score,
            "rouge1": 100.0 * rouge_n(choice.candidate.tokens, ref, 1).f1,
            "rouge2": 100.0 * rouge_n(choice.candidate.tokens, ref, 2).f1,
            "rougeL": 100.0 * rouge_l(choice.candidate.tokens, ref).f1,
        })
    (out_dir / "selections.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    summary = {key: float(np.mean([r[key] for r in rows]))
               for key in ("rouge1", "rouge2", "rougeL")}
    report = embed_provenance(
        {"kind": "rerank", "alpha": cfg.train.length_alpha,
         "n_examples": len(rows), "summary": summary},
        cfg.resolved, cfg.seed)
    write_json_report(out_dir / "rerank.json", report)
    headers = ["metric", "value"]
    table = [[k, summary[k]] for k in ("rouge1", "rouge2", "rougeL")]
    write_text_report(out_dir / "rerank.txt",
                      ["rerank report", provenance_lines(report),
                       render_table(headers, table)])
    write_csv(out_dir / "rerank.csv",
              ["example", "f_score", "rouge1", "rouge2", "rougeL"],
              [[r["example"], r["f_score"], r["rouge1"], r["rouge2"], r["rougeL"]]
               for r in rows])
    save_figure(grouped_bars(["rouge1", "rouge2", "rougeL"],
                             {"reranked": [summary[k] for k in ("rouge1", "rouge2", "rougeL")]},
                             "F1", "rerank selection quality"),
                out_dir / "rerank.png")
    return [cfg.path("vocab"), cfg.path("data"), cfg.path("checkpoint"), cfg.path("cache")]


def _cmd_evaluate(cfg, out_dir: Path) -> list[Path]:
    from .decode import read_candidate_cache
    from .figures import grouped_bars, save_figure
    from .harness import run_coordination_report, run_novelty_report
    from .reports import (embed_provenance, provenance_lines, render_table,
                          write_csv, write_json_report, write_text_report)
    from .train import evaluate_generation

    vocab = _load_vocab(cfg)
    dataset = _load_split(cfg, "data", vocab, "test")
    ckpts, paths = _named_checkpoints(cfg)
    rows = []
    for name in sorted(ckpts):
        summary = evaluate_generation(ckpts[name], dataset, cfg.train.beam)["summary"]
        rows.append({"model": name, **{k: summary[k] for k in
                                       ("rouge1", "rouge2", "rougeL", "f_score")}})
    report = embed_provenance({"kind": "evaluate", "rows": rows},
                              cfg.resolved, cfg.seed)
    write_json_report(out_dir / "evaluate.json", report)
    headers = ["model", "rouge1", "rouge2", "rougeL", "f_score"]
    table = [[r[h] for h in headers] for r in rows]
    write_text_report(out_dir / "evaluate.txt",
                      ["evaluate report", provenance_lines(report),
                       render_table(headers, table)])
    write_csv(out_dir / "evaluate.csv", headers, table)
    save_figure(grouped_bars([r["model"] for r in rows],
                             {"ROUGE-1": [r["rouge1"] for r in rows]},
                             "F1", "generation quality"),
                out_dir / "evaluate.png")
    inputs = [cfg.path("vocab"), cfg.path("data"), *paths]
    if cfg.paths.get("cache"):
        cand_sets = read_candidate_cache(_input(cfg.path("cache")))
        generator = sorted(ckpts)[0]
        run_coordination_report(generator, ckpts, dataset, cfg.train,
                                eval_sets=cand_sets,
                                alpha_sweep=cfg.run["alpha_sweep"],
                                include_own=False, out_dir=out_dir,
                                meta=cfg.resolved)
        inputs.append(cfg.path("cache"))
    if cfg.run["novelty_buckets"] >= 1:
        run_novelty_report(ckpts, dataset, cfg.run["novelty_buckets"],
                           cfg.train.beam, out_dir=out_dir, meta=cfg.resolved,
                           seed=cfg.seed)
    return inputs


def _cmd_sweep(cfg, out_dir: Path) -> list[Path]:
    from .harness import HarnessError, run_beam_sweep, run_coefficient_sweep

    vocab = _load_vocab(cfg)
    dataset = _load_split(cfg, "data", vocab, "test")
    kind = cfg.run["sweep_kind"]
    if kind == "gamma":
        train_ds = _load_split(cfg, "train_data", vocab, "train")
        valid_ds = (_load_split(cfg, "valid_data", vocab, "valid")
                    if cfg.paths.get("valid_data") else None)
        ckpt = _load_ckpt(cfg)
        run_coefficient_sweep(ckpt, train_ds, dataset, cfg.run["sweep_gammas"],
                              cfg.train, cfg.run["brio_mode"], valid_ds,
                              out_dir=out_dir, meta=cfg.resolved)
        inputs = [cfg.path("vocab"), cfg.path("train_data"), cfg.path("data"),
                  cfg.path("checkpoint")]
        if cfg.paths.get("valid_data"):
            inputs.append(cfg.path("valid_data"))
        return inputs
    if kind == "beam":
        ckpts, paths = _named_checkpoints(cfg)
        run_beam_sweep(ckpts, dataset, cfg.run["beam_widths"], cfg.train.beam,
                       out_dir=out_dir, meta=cfg.resolved, seed=cfg.seed)
        return [cfg.path("vocab"), cfg.path("data"), *paths]
    raise HarnessError(f"unknown sweep kind {kind!r}")


def _cmd_loop(cfg, out_dir: Path) -> list[Path]:
    from .harness import run_loop_report

    vocab = _load_vocab(cfg)
    train_ds = _load_split(cfg, "train_data", vocab, "train")
    dataset = _load_split(cfg, "data", vocab, "test")
    valid_ds = (_load_split(cfg, "valid_data", vocab, "valid")
                if cfg.paths.get("valid_data") else None)
    ckpt = _load_ckpt(cfg)
    run_loop_report(ckpt, train_ds, dataset, cfg.train, cfg.run["loop_rounds"],
                    out_dir / "rounds", cfg.run["brio_mode"], valid_ds,
                    out_dir=out_dir, meta=cfg.resolved)
    inputs = [cfg.path("vocab"), cfg.path("train_data"), cfg.path("data"),
              cfg.path("checkpoint")]
    if cfg.paths.get("valid_data"):
        inputs.append(cfg.path("valid_data"))
    return inputs


def _cmd_few_shot(cfg, out_dir: Path) -> list[Path]:
    from .harness import run_few_shot_report

    vocab = _load_vocab(cfg)
    train_ds = _load_split(cfg, "train_data", vocab, "train")
    dataset = _load_split(cfg, "data", vocab, "test")
    ckpt = _load_ckpt(cfg)
    run_few_shot_report(ckpt, train_ds, dataset, cfg.train, cfg.run["few_shot_k"],
                        cfg.run["few_shot_repeats"], out_dir=out_dir,
                        meta=cfg.resolved)
    return [cfg.path("vocab"), cfg.path("train_data"), cfg.path("data"),
            cfg.path("checkpoint")]


def _cmd_calibrate(cfg, out_dir: Path) -> list[Path]:
    from .harness import run_calibration_report

    vocab = _load_vocab(cfg)
    dataset = _load_split(cfg, "data", vocab, "test")
    ckpts, paths = _named_checkpoints(cfg)
    run_calibration_report(ckpts, dataset, cfg.run["calibration_buckets"],
                           cfg.train.beam, out_dir=out_dir, meta=cfg.resolved,
                           seed=cfg.seed)
    return [cfg.path("vocab"), cfg.path("data"), *paths]


_DRIVERS = {
    "make-data": _cmd_make_data,
    "train-mle": _cmd_train_mle,
    "gen-candidates": _cmd_gen_candidates,
    "train-brio": _cmd_train_brio,
    "rerank": _cmd_rerank,
    "evaluate": _cmd_evaluate,
    "sweep": _cmd_sweep,
    "loop": _cmd_loop,
    "few-shot": _cmd_few_shot,
    "calibrate": _cmd_calibrate,
}


def main(argv=None) -> int:
    _apply_thread_env()
    parser = _build_parser()
    args = parser.parse_args(argv)

    from .manifest import HashMismatch, LockHeld, OutputExists
    from .runconfig import ConfigError

    try:
        return _run_stage(args, _DRIVERS[args.command])
    except ConfigError as exc:
        print(f"config-error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing-file: {exc}", file=sys.stderr)
        return 3
    except HashMismatch as exc:
        print(f"hash-mismatch: {exc}", file=sys.stderr)
        return 4
    except OutputExists as exc:
        print(f"output-exists: {exc}", file=sys.stderr)
        return 5
    except LockHeld as exc:
        print(f"lock-held: {exc}", file=sys.stderr)
        return 6
    except (ValueError, RuntimeError) as exc:
        print(f"run-error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
