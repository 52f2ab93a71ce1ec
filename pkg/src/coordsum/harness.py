"""Experiment harness: sweeps, coordination, calibration, novelty, loop.

Each run_* operation computes one analysis report as a plain dict and, when
an output directory is given, writes the JSON report, a plain-text table
rendering, CSV for the tabular core, and matplotlib figures. Reports embed
the caller's resolved configuration so a run is reproducible from its own
output.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Dataset
from .decode import BeamConfig, Candidate, CandidateSet, beam_search
from .figures import (grouped_bars, line_plot, reliability_diagram, save_figure)
from .metrics import (MetricError, expected_calibration_error, align_token_labels,
                      novelty, ranking_accuracy, rouge_n, spearman_over_examples)
from .model import Checkpoint, TransformerScorer, const_parameters, load_checkpoint
from .reports import (embed_provenance, provenance_lines, render_table,
                      write_csv, write_json_report, write_text_report)
from .train import (TrainConfig, build_candidate_sets, candidate_scores,
                    evaluate_generation, few_shot_finetune, loop_finetune,
                    train_brio)


class HarnessError(ValueError):
    """Raised when an experiment specification cannot be run."""


@dataclass(frozen=True)
class ExperimentSpec:
    """What to run: kind, participating checkpoints, split, sweep, output."""

    kind: str
    checkpoints: tuple[str, ...]
    split: str
    sweep_values: tuple[float, ...]
    output_dir: str

    def validate(self) -> None:
        if not self.sweep_values:
            raise HarnessError("sweep values must be non-empty")
        for path in (*self.checkpoints, self.split):
            if path and not Path(path).is_file():
                raise HarnessError(f"referenced file missing: {path}")


# ---------------------------------------------------------------------------
# Shared measurement helpers
# ---------------------------------------------------------------------------


def decode_split(ckpt: Checkpoint, dataset: Dataset, beam_cfg: BeamConfig) -> list[Candidate]:
    """Top beam hypothesis for every example."""
    cfg = replace(beam_cfg, n_groups=1, n_candidates=beam_cfg.beam_width)
    scorer = TransformerScorer(ckpt.params, ckpt.config)
    return [beam_search(scorer, ex.source, cfg)[0] for ex in dataset.examples]


def coordination_stats(
    ckpt: Checkpoint, dataset: Dataset, cand_sets: Sequence[CandidateSet], alpha: float
) -> dict:
    """Rank agreement of the model's sequence scores with candidate quality.

    spearman_avg averages per-example rho between recomputed f and quality;
    accuracy is over best-vs-worst candidate pairs (skipping examples whose
    extremes tie on quality), on a 0-100 scale.
    """
    params = const_parameters(ckpt.params)
    rank_pairs = []
    extreme_pairs = []
    for cand_set in cand_sets:
        source = dataset.examples[cand_set.example_index].source
        f = candidate_scores(params, ckpt.config, source, cand_set.candidates, alpha).values
        q = np.asarray([c.quality for c in cand_set.candidates], dtype=np.float64)
        rank_pairs.append((np.asarray(f, dtype=np.float64), q))
        best, worst = cand_set.candidates[0], cand_set.candidates[-1]
        if best.tie_group != worst.tie_group:
            extreme_pairs.append((float(f[0]), float(f[-1])))
    agreement = spearman_over_examples(rank_pairs)
    return {
        "alpha": alpha,
        "spearman_avg": agreement.mean_rho,
        "degenerate_examples": agreement.degenerate_count,
        "accuracy": ranking_accuracy(extreme_pairs) if extreme_pairs else float("nan"),
        "n_examples": len(rank_pairs),
        "n_extreme_pairs": len(extreme_pairs),
    }


def _fname_safe(name: str) -> str:
    """Model names may carry path separators; artifact filenames must not."""
    return "".join(c if c.isalnum() or c in "._-" else "-" for c in name)


def _write_outputs(out_dir: str | Path | None, name: str, report: dict,
                   sections: list[str],
                   csvs: dict[str, tuple[Sequence[str], Sequence[Sequence]]],
                   figs: dict[str, object]) -> dict:
    if out_dir is None:
        return report
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = {"json": str(write_json_report(out_dir / f"{name}.json", report))}
    text = [f"{name} report", provenance_lines(report), *sections]
    artifacts["text"] = str(write_text_report(out_dir / f"{name}.txt", text))
    for fname, (headers, rows) in csvs.items():
        artifacts[fname] = str(write_csv(out_dir / fname, headers, rows))
    for fname, fig in figs.items():
        artifacts[fname] = str(save_figure(fig, out_dir / fname))
    report["artifacts"] = artifacts
    write_json_report(out_dir / f"{name}.json", report)
    return report


def _meta(report: dict, meta: dict | None, seed: int) -> dict:
    return embed_provenance(report, meta if meta is not None else {}, seed)


# ---------------------------------------------------------------------------
# Coefficient sweep (gamma grid)
# ---------------------------------------------------------------------------


def run_coefficient_sweep(
    mle_ckpt: Checkpoint,
    train_dataset: Dataset,
    eval_dataset: Dataset,
    gammas: Sequence[float],
    cfg: TrainConfig,
    mode: str = "mul",
    valid_dataset: Dataset | None = None,
    out_dir: str | Path | None = None,
    meta: dict | None = None,
) -> dict:
    """Fine-tune once per gamma from the same start; report ROUGE + coordination.

    The gamma grid must include 0 so the sweep is anchored at continued MLE.
    Candidates for training and evaluation are generated once from the MLE
    checkpoint and shared across all gamma arms.
    """
    if not gammas:
        raise HarnessError("gamma list must be non-empty")
    if not any(g == 0.0 for g in gammas):
        raise HarnessError("gamma list must include 0 as the baseline anchor")
    train_sets = build_candidate_sets(mle_ckpt, train_dataset, cfg)
    eval_sets = build_candidate_sets(mle_ckpt, eval_dataset, cfg)
    rows = []
    for gamma in gammas:
        arm_cfg = replace(cfg, gamma=float(gamma))
        tuned = train_brio(mle_ckpt, train_dataset, train_sets, arm_cfg, mode, valid_dataset)
        generation = evaluate_generation(tuned, eval_dataset, cfg.beam)["summary"]
        coord = coordination_stats(tuned, eval_dataset, eval_sets, cfg.length_alpha)
        rows.append({
            "gamma": float(gamma),
            "rouge1": generation["rouge1"],
            "rouge2": generation["rouge2"],
            "rougeL": generation["rougeL"],
            "spearman_avg": coord["spearman_avg"],
            "accuracy": coord["accuracy"],
        })
    report = _meta({"kind": "coefficient-sweep", "mode": mode, "rows": rows},
                   meta, cfg.seed)
    headers = ["gamma", "rouge1", "rouge2", "rougeL", "spearman_avg", "accuracy"]
    table_rows = [[r[h] for h in headers] for r in rows]
    figs = {}
    if len(rows) > 1:
        xs = [r["gamma"] for r in rows]
        figs["sweep_rouge.png"] = line_plot(
            xs, {"ROUGE-1": [r["rouge1"] for r in rows]},
            "gamma", "ROUGE-1 F1", "generation quality vs gamma")
        figs["sweep_coordination.png"] = line_plot(
            xs, {"spearman_avg": [r["spearman_avg"] for r in rows]},
            "gamma", "mean rank correlation", "coordination vs gamma")
    return _write_outputs(out_dir, "coefficient_sweep", report,
                          [render_table(headers, table_rows)],
                          {"coefficient_sweep.csv": (headers, table_rows)}, figs)


# ---------------------------------------------------------------------------
# Beam-width sweep
# ---------------------------------------------------------------------------


def run_beam_sweep(
    ckpts: dict[str, Checkpoint],
    eval_dataset: Dataset,
    widths: Sequence[int],
    beam_cfg: BeamConfig,
    out_dir: str | Path | None = None,
    meta: dict | None = None,
    seed: int = 0,
) -> dict:
    """Decode the split at each beam width for each model; ROUGE-1/2 per cell.

    Asserts the decoder's width monotonicity: for every example, the best
    cumulative log-probability found never decreases as the beam widens.
    """
    if list(widths) != sorted(widths):
        raise HarnessError("beam widths must be sorted ascending")
    if not widths:
        raise HarnessError("width list must be non-empty")
    rows = []
    for name in sorted(ckpts):
        ckpt = ckpts[name]
        scorer = TransformerScorer(ckpt.params, ckpt.config)
        best_sum = np.full(len(eval_dataset.examples), -np.inf)
        for width in widths:
            cfg = replace(beam_cfg, beam_width=int(width), n_groups=1,
                          n_candidates=int(width))
            r1 = r2 = 0.0
            for i, ex in enumerate(eval_dataset.examples):
                hyps = beam_search(scorer, ex.source, cfg)
                top = max(h.sum_logprob for h in hyps)
                if top < best_sum[i] - 1e-9:
                    raise HarnessError(
                        f"beam monotonicity violated on example {i} at width {width}")
                best_sum[i] = max(best_sum[i], top)
                r1 += 100.0 * rouge_n(hyps[0].tokens, ex.reference, 1).f1
                r2 += 100.0 * rouge_n(hyps[0].tokens, ex.reference, 2).f1
            n = len(eval_dataset.examples)
            rows.append({"model": name, "width": int(width),
                         "rouge1": r1 / n, "rouge2": r2 / n})
    report = _meta({"kind": "beam-sweep", "rows": rows}, meta, seed)
    headers = ["model", "width", "rouge1", "rouge2"]
    table_rows = [[r[h] for h in headers] for r in rows]
    figs = {}
    if len(widths) > 1:
        series = {name: [r["rouge1"] for r in rows if r["model"] == name]
                  for name in sorted(ckpts)}
        figs["beam_sweep.png"] = line_plot(list(widths), series, "beam width",
                                           "ROUGE-1 F1", "generation vs beam width",
                                           logx=True)
    return _write_outputs(out_dir, "beam_sweep", report,
                          [render_table(headers, table_rows)],
                          {"beam_sweep.csv": (headers, table_rows)}, figs)


# ---------------------------------------------------------------------------
# Coordination report (rank correlation + ranking accuracy)
# ---------------------------------------------------------------------------


def _choose_alpha(ckpt: Checkpoint, dataset: Dataset, cand_sets: Sequence[CandidateSet],
                  alphas: Sequence[float]) -> float:
    best_alpha, best_rho = None, -np.inf
    for alpha in alphas:
        rho = coordination_stats(ckpt, dataset, cand_sets, float(alpha))["spearman_avg"]
        if rho > best_rho:
            best_alpha, best_rho = float(alpha), rho
    return best_alpha


def run_coordination_report(
    generator_name: str,
    scorers: dict[str, Checkpoint],
    eval_dataset: Dataset,
    cfg: TrainConfig,
    eval_sets: Sequence[CandidateSet] | None = None,
    alpha_sweep: Sequence[float] = (),
    valid_dataset: Dataset | None = None,
    valid_sets: Sequence[CandidateSet] | None = None,
    include_own: bool = True,
    out_dir: str | Path | None = None,
    meta: dict | None = None,
) -> dict:
    """Score one generator's candidates under several models.

    Every scorer recomputes f over the shared candidate cache (candidates
    from ``generator_name``'s model) and, when ``include_own`` is set, over
    candidates decoded from the scorer itself. With a non-empty
    ``alpha_sweep`` and a validation split, each scorer picks the alpha
    maximizing validation spearman_avg; otherwise cfg.length_alpha applies.
    """
    if generator_name not in scorers:
        raise HarnessError("the generator checkpoint must be among the scorers")
    generator = scorers[generator_name]
    if eval_sets is None:
        eval_sets = build_candidate_sets(generator, eval_dataset, cfg)
    if alpha_sweep:
        if valid_dataset is None:
            raise HarnessError("alpha sweep requires a validation split")
        if valid_sets is None:
            valid_sets = build_candidate_sets(generator, valid_dataset, cfg)
    rows = []
    for name in sorted(scorers):
        ckpt = scorers[name]
        alpha = (_choose_alpha(ckpt, valid_dataset, valid_sets, alpha_sweep)
                 if alpha_sweep else cfg.length_alpha)
        stats = coordination_stats(ckpt, eval_dataset, eval_sets, alpha)
        rows.append({"scorer": name, "candidates": generator_name, **stats})
        if include_own and name != generator_name:
            own_sets = build_candidate_sets(ckpt, eval_dataset, cfg)
            own = coordination_stats(ckpt, eval_dataset, own_sets, alpha)
            rows.append({"scorer": name, "candidates": "own", **own})
    report = _meta({"kind": "coordination", "generator": generator_name,
                    "rows": rows}, meta, cfg.seed)
    headers = ["scorer", "candidates", "alpha", "spearman_avg", "accuracy",
               "n_examples", "n_extreme_pairs", "degenerate_examples"]
    table_rows = [[r[h] for h in headers] for r in rows]
    gen_rows = [r for r in rows if r["candidates"] == generator_name]
    figs = {}
    if len(gen_rows) > 1:
        names = [r["scorer"] for r in gen_rows]
        figs["coordination.png"] = grouped_bars(
            names,
            {"spearman_avg": [r["spearman_avg"] for r in gen_rows],
             "accuracy/100": [r["accuracy"] / 100.0 for r in gen_rows]},
            "agreement with quality", f"scoring candidates from {generator_name}")
    return _write_outputs(out_dir, "coordination", report,
                          [render_table(headers, table_rows)],
                          {"coordination.csv": (headers, table_rows)}, figs)


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------


def run_calibration_report(
    ckpts: dict[str, Checkpoint],
    eval_dataset: Dataset,
    n_buckets: int,
    beam_cfg: BeamConfig,
    out_dir: str | Path | None = None,
    meta: dict | None = None,
    seed: int = 0,
) -> dict:
    """Token-level calibration of beam outputs against references (ECE)."""
    if n_buckets < 1:
        raise HarnessError("need at least one calibration bucket")
    rows = []
    per_model = {}
    for name in sorted(ckpts):
        ckpt = ckpts[name]
        decoded = decode_split(ckpt, eval_dataset, beam_cfg)
        confidences: list[float] = []
        labels: list[bool] = []
        for ex, cand in zip(eval_dataset.examples, decoded):
            content_labels = align_token_labels(cand.tokens, ex.reference)
            content_conf = [float(np.exp(lp)) for tok, lp
                            in zip(cand.tokens[1:], cand.token_logprobs)
                            if tok not in (0, 1, 2)]
            if len(content_conf) != len(content_labels):
                raise HarnessError("alignment does not cover decoded content")
            confidences.extend(content_conf)
            labels.extend(content_labels)
        calib = expected_calibration_error(confidences, labels, n_buckets)
        per_model[name] = calib
        rows.append({"model": name, "ece": calib.ece, "accuracy": calib.accuracy,
                     "confidence": calib.confidence, "n_tokens": calib.n})
    report = _meta({
        "kind": "calibration",
        "n_buckets": n_buckets,
        "rows": rows,
        "buckets": {name: [vars(b) for b in calib.buckets]
                    for name, calib in per_model.items()},
    }, meta, seed)
    headers = ["model", "ece", "accuracy", "confidence", "n_tokens"]
    table_rows = [[r[h] for h in headers] for r in rows]
    csvs = {"calibration.csv": (headers, table_rows)}
    figs = {}
    for name, calib in per_model.items():
        bucket_rows = [[b.lower, b.upper, b.count, b.accuracy, b.confidence]
                       for b in calib.buckets]
        csvs[f"reliability_{_fname_safe(name)}.csv"] = (
            ["lower", "upper", "count", "accuracy", "confidence"], bucket_rows)
        figs[f"reliability_{_fname_safe(name)}.png"] = reliability_diagram(
            calib.buckets, f"reliability: {name} (ECE {calib.ece:.4f})")
    return _write_outputs(out_dir, "calibration", report,
                          [render_table(headers, table_rows)], csvs, figs)


# ---------------------------------------------------------------------------
# Novelty
# ---------------------------------------------------------------------------


def _mean_novelty(sources: Sequence, outputs: Sequence, n: int) -> tuple[float, int]:
    vals = []
    skipped = 0
    for src, out in zip(sources, outputs):
        try:
            vals.append(novelty(src, out, n))
        except MetricError:
            skipped += 1
    return (float(np.mean(vals)) if vals else float("nan")), skipped


def run_novelty_report(
    ckpts: dict[str, Checkpoint],
    eval_dataset: Dataset,
    n_buckets: int,
    beam_cfg: BeamConfig,
    out_dir: str | Path | None = None,
    meta: dict | None = None,
    seed: int = 0,
) -> dict:
    """Novel n-gram ratios plus per-bucket ROUGE grouped by reference novelty."""
    if n_buckets < 1:
        raise HarnessError("need at least one novelty bucket")
    sources = [ex.source for ex in eval_dataset.examples]
    references = [ex.reference for ex in eval_dataset.examples]
    rows = []
    decoded = {}
    for name in sorted(ckpts):
        outputs = [c.tokens for c in decode_split(ckpts[name], eval_dataset, beam_cfg)]
        decoded[name] = outputs
        n1, skip1 = _mean_novelty(sources, outputs, 1)
        n2, skip2 = _mean_novelty(sources, outputs, 2)
        rows.append({"text": name, "novel_unigrams": n1, "novel_bigrams": n2,
                     "skipped": skip1 + skip2})
    ref_n1, ref_skip1 = _mean_novelty(sources, references, 1)
    ref_n2, ref_skip2 = _mean_novelty(sources, references, 2)
    rows.append({"text": "reference", "novel_unigrams": ref_n1,
                 "novel_bigrams": ref_n2, "skipped": ref_skip1 + ref_skip2})

    # Bucket examples by reference novelty (bigram; unigram when degenerate).
    ref_novelty = []
    for src, ref in zip(sources, references):
        try:
            ref_novelty.append(novelty(src, ref, 2))
        except MetricError:
            try:
                ref_novelty.append(novelty(src, ref, 1))
            except MetricError:
                ref_novelty.append(0.0)
    order = np.argsort(np.asarray(ref_novelty), kind="stable")
    buckets = [chunk for chunk in np.array_split(order, n_buckets)]
    bucket_rows = []
    for b, idx in enumerate(buckets):
        row = {"bucket": b, "count": int(len(idx)),
               "mean_ref_novelty": float(np.mean([ref_novelty[i] for i in idx]))
               if len(idx) else float("nan")}
        for name, outputs in decoded.items():
            vals = [100.0 * rouge_n(outputs[i], references[i], 1).f1 for i in idx]
            row[f"rouge1_{name}"] = float(np.mean(vals)) if vals else float("nan")
        bucket_rows.append(row)
    report = _meta({"kind": "novelty", "rows": rows, "bucket_rows": bucket_rows},
                   meta, seed)
    headers = ["text", "novel_unigrams", "novel_bigrams", "skipped"]
    table_rows = [[r[h] for h in headers] for r in rows]
    bucket_headers = list(bucket_rows[0]) if bucket_rows else []
    bucket_table = [[r[h] for h in bucket_headers] for r in bucket_rows]
    figs = {}
    if bucket_rows and decoded:
        figs["novelty_buckets.png"] = grouped_bars(
            [f"b{r['bucket']}" for r in bucket_rows],
            {name: [r[f"rouge1_{name}"] for r in bucket_rows] for name in decoded},
            "ROUGE-1 F1", "performance by reference novelty bucket")
    return _write_outputs(out_dir, "novelty", report,
                          [render_table(headers, table_rows),
                           render_table(bucket_headers, bucket_table)],
                          {"novelty.csv": (bucket_headers, bucket_table)}, figs)


# ---------------------------------------------------------------------------
# Loop and few-shot wrappers
# ---------------------------------------------------------------------------


def run_loop_report(
    start_ckpt: Checkpoint,
    train_dataset: Dataset,
    eval_dataset: Dataset,
    cfg: TrainConfig,
    n_rounds: int,
    workdir: str | Path,
    mode: str = "mul",
    valid_dataset: Dataset | None = None,
    eval_sets: Sequence[CandidateSet] | None = None,
    out_dir: str | Path | None = None,
    meta: dict | None = None,
) -> dict:
    """Iterated generation/fine-tuning with per-round coordination metrics.

    All rounds are scored against one fixed evaluation cache (candidates from
    the starting checkpoint) so rounds are directly comparable.
    """
    if eval_sets is None:
        eval_sets = build_candidate_sets(start_ckpt, eval_dataset, cfg)
    final, rounds = loop_finetune(start_ckpt, train_dataset, cfg, n_rounds,
                                  workdir, mode, valid_dataset)
    rows = []
    base = coordination_stats(start_ckpt, eval_dataset, eval_sets, cfg.length_alpha)
    base_gen = evaluate_generation(start_ckpt, eval_dataset, cfg.beam)["summary"]
    rows.append({"round": 0, "spearman_avg": base["spearman_avg"],
                 "accuracy": base["accuracy"], "rouge1": base_gen["rouge1"]})
    for info in rounds:
        ckpt = load_checkpoint(info["checkpoint"])
        coord = coordination_stats(ckpt, eval_dataset, eval_sets, cfg.length_alpha)
        generation = evaluate_generation(ckpt, eval_dataset, cfg.beam)["summary"]
        rows.append({"round": info["round"], "spearman_avg": coord["spearman_avg"],
                     "accuracy": coord["accuracy"], "rouge1": generation["rouge1"]})
    report = _meta({"kind": "loop", "mode": mode, "rows": rows, "rounds": rounds},
                   meta, cfg.seed)
    headers = ["round", "spearman_avg", "accuracy", "rouge1"]
    table_rows = [[r[h] for h in headers] for r in rows]
    figs = {}
    if len(rows) > 1:
        figs["loop.png"] = line_plot(
            [r["round"] for r in rows],
            {"spearman_avg": [r["spearman_avg"] for r in rows]},
            "round", "mean rank correlation", "coordination across loop rounds")
    return _write_outputs(out_dir, "loop", report,
                          [render_table(headers, table_rows)],
                          {"loop.csv": (headers, table_rows)}, figs)


def run_few_shot_report(
    ckpt: Checkpoint,
    train_dataset: Dataset,
    eval_dataset: Dataset,
    cfg: TrainConfig,
    k: int,
    n_repeats: int,
    out_dir: str | Path | None = None,
    meta: dict | None = None,
) -> dict:
    """Few-shot fine-tuning summary plus the untuned baseline row."""
    result = few_shot_finetune(ckpt, train_dataset, eval_dataset, cfg, k, n_repeats)
    baseline = evaluate_generation(ckpt, eval_dataset, cfg.beam)["summary"]
    report = _meta({"kind": "few-shot", "baseline": baseline, **result}, meta, cfg.seed)
    headers = ["repeat", "rouge1", "rouge2", "rougeL"]
    table_rows = [[r["repeat"], r["rouge1"], r["rouge2"], r["rougeL"]]
                  for r in result["repeats"]]
    summary = result["summary"]
    sections = [
        render_table(headers, table_rows),
        render_table(["metric", "baseline", "mean", "stddev"],
                     [[key, baseline[key], summary[f"{key}_mean"], summary[f"{key}_std"]]
                      for key in ("rouge1", "rouge2", "rougeL")]),
    ]
    figs = {
        "few_shot.png": grouped_bars(
            ["rouge1", "rouge2", "rougeL"],
            {"baseline": [baseline[k_] for k_ in ("rouge1", "rouge2", "rougeL")],
             "few-shot mean": [summary[f"{k_}_mean"] for k_ in ("rouge1", "rouge2", "rougeL")]},
            "F1", f"few-shot fine-tuning (k={k}, {n_repeats} repeats)")
    }
    return _write_outputs(out_dir, "few_shot", report, sections,
                          {"few_shot.csv": (headers, table_rows)}, figs)
