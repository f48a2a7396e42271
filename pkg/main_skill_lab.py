"""
Main Skill Injection Lab - one entry point for the whole pipeline

    uv run main_skill_lab.py --config configs/skill_lm.toml --out runs/demo reproduce

Every subcommand reads and writes artifacts under --out:

    data/       train_full.txt, train.txt (subsample), validation.txt, ood_*.txt
    pretrain/   anchor checkpoint, metrics, corpus_split.json
    anchor/     anchor Fisher scores
    fisher/     per-task Fisher scores
    overlap/    per-layer overlap CSVs
    inject/     injected checkpoint, metrics, validation curve
    sweep/      one directory per λ₂ plus sweep_summary.csv
    schedules/  one directory per λ₁ schedule plus schedules.csv
    eval/       eval.csv, magnitudes.csv, samples.txt, retention.json
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import lab_config
from lab_config import LabConfig, get_config, load_config, set_config, traced_stage
from skill_lab.data import (
    ArithmeticExample,
    CorpusSplitManifest,
    CorpusWindow,
    corpus_windows,
    deduplicate,
    generate,
    mask_result,
    mask_window,
    read_corpus_text,
    read_dataset,
    read_split_manifest,
    split_corpus,
    split_stratified,
    subsample,
    write_dataset,
    write_split_manifest,
)
from skill_lab.errors import DataError, IntegrityError, LabError
from skill_lab.evaluate import (
    EvalReport,
    build_retention_report,
    compare_runs,
    comparison_csv,
    exact_match_eval,
    retention_probe,
)
from skill_lab.fisher import cross_task_overlap, estimate_fisher, load_fisher, save_fisher
from skill_lab.model import Checkpoint, load_checkpoint
from skill_lab.train import compute_anchor, inject, lambda1_schedule_sweep, pretrain, sweep_lambda2
from skill_lab.artifacts import dump_json, write_model_json, write_text

logger = logging.getLogger("skill_lab")


def _slug(label: str) -> str:
    return label.strip("[)").replace(",", "-")


def _snapshot() -> Dict[str, Any]:
    return get_config().model_dump(mode="json")


# ---------------------------------------------------------------------------
# Artifact lookup
# ---------------------------------------------------------------------------

def data_paths(out: Path) -> Dict[str, Path]:
    config = get_config()
    paths = {
        "train_full": out / "data" / "train_full.txt",
        "train": out / "data" / "train.txt",
        "validation": out / "data" / "validation.txt",
    }
    for r in config.data.ood_ranges:
        paths[f"ood{r.label}"] = out / "data" / f"ood_{_slug(r.label)}.txt"
    return paths


def load_examples(paths: Sequence[Path]) -> List[ArithmeticExample]:
    examples: List[ArithmeticExample] = []
    for path in paths:
        loaded, _ = read_dataset(path)
        examples += loaded
    return examples


def eval_sets(out: Path) -> List[Path]:
    """Validation (in-domain) plus every OOD dataset"""
    paths = data_paths(out)
    return [paths["validation"]] + [p for k, p in paths.items() if k.startswith("ood")]


def corpus_split(config: LabConfig, vocab) -> Tuple[List[CorpusWindow], List[CorpusWindow], CorpusSplitManifest]:
    text = read_corpus_text(config.data.corpus)
    windows = corpus_windows(text, config.data.window_len, vocab)
    return split_corpus(windows, config.data.heldout_fraction)


def heldout_for(checkpoint: Checkpoint, out: Path) -> Tuple[List[CorpusWindow], CorpusSplitManifest]:
    """Held-out windows of the configured corpus, checked against the pretraining split manifest"""
    manifest = read_split_manifest(out / "pretrain" / "corpus_split.json")
    _, heldout, current = corpus_split(get_config(), checkpoint.vocab)
    if current.corpus_hash != manifest.corpus_hash:
        raise IntegrityError(f"corpus {get_config().data.corpus} differs from the one the anchor was pretrained on")
    return heldout, manifest


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args: argparse.Namespace, out: Path) -> Dict[str, Any]:
    """
    Generate the training pool, its stratified validation split, the n/4
    training subsample and one dataset per OOD range

    Returns:
        Dictionary with the example count of every written file
    """
    config = get_config().data
    count = args.count or config.train_count + config.validation_count
    gen_config = config.gen_config(count)
    pool = deduplicate(generate(gen_config, workers=config.workers))
    val_fraction = config.validation_count / (config.train_count + config.validation_count)
    train_full, validation = split_stratified(pool, val_fraction, seed=config.seed)
    paths = data_paths(out)
    full_manifest = write_dataset(paths["train_full"], train_full, gen_config)
    train = subsample(train_full, config.subsample_fraction, seed=config.seed)
    write_dataset(paths["train"], train, gen_config, derived_from=full_manifest.content_hash)
    write_dataset(paths["validation"], validation, gen_config, derived_from=full_manifest.content_hash)
    counts = {"train_full": len(train_full), "train": len(train), "validation": len(validation)}
    for ood_config in config.ood_configs():
        key = f"ood{ood_config.range.label}"
        examples = generate(ood_config, workers=config.workers)
        write_dataset(paths[key], examples, ood_config)
        counts[key] = len(examples)
    logger.info("wrote datasets to %s: %s", out / "data", counts)
    return {"datasets": counts}


def cmd_pretrain(args: argparse.Namespace, out: Path) -> Dict[str, Any]:
    config = get_config()
    vocab = config.model.vocab()
    train_windows, _, manifest = corpus_split(config, vocab)
    stage_dir = out / "pretrain"
    write_split_manifest(stage_dir / "corpus_split.json", manifest)
    result = pretrain(config.pretrain, config.model.build(vocab), vocab, train_windows, stage_dir, _snapshot())
    return {"checkpoint": str(stage_dir / "checkpoint.json"), "hash": result.checkpoint.content_hash}


def _anchor_path(args: argparse.Namespace, out: Path) -> Path:
    return Path(args.anchor) if getattr(args, "anchor", None) else out / "pretrain" / "checkpoint.json"


def _anchor_fisher_path(args: argparse.Namespace, out: Path) -> Path:
    return Path(args.anchor_fisher) if getattr(args, "anchor_fisher", None) else out / "anchor" / "anchor_fisher.json"


def cmd_anchor(args: argparse.Namespace, out: Path) -> Dict[str, Any]:
    config = get_config()
    anchor = load_checkpoint(_anchor_path(args, out))
    train_windows, _, _ = corpus_split(config, anchor.vocab)
    path = _anchor_fisher_path(args, out)
    scores = compute_anchor(
        anchor, train_windows, config.fisher.sample_cap, config.pretrain.mask_fraction,
        config.pretrain.seed, config.fisher.workers, path,
    )
    return {"anchor_fisher": str(path), "samples": scores.sample_count}


def cmd_fisher(args: argparse.Namespace, out: Path) -> Dict[str, Any]:
    """Fisher scores of any checkpoint on an arithmetic dataset or a text corpus"""
    config = get_config()
    checkpoint = load_checkpoint(args.checkpoint or _anchor_path(args, out))
    model = checkpoint.model()
    if args.data:
        samples = [mask_result(e, model.vocab, model.config.max_seq_len) for e in load_examples(args.data)]
    else:
        text = read_corpus_text(args.corpus or config.data.corpus)
        windows = corpus_windows(text, config.data.window_len, model.vocab)
        samples = [mask_window(w, model.vocab, config.pretrain.mask_fraction, key=f"{args.task}") for w in windows]
    scores = estimate_fisher(
        model, checkpoint.theta, samples, config.fisher.sample_cap, workers=config.fisher.workers, task_id=args.task
    )
    path = out / "fisher" / f"fisher_{args.task}.json"
    save_fisher(path, scores)
    return {"fisher": str(path), "samples": scores.sample_count}


def cmd_overlap(args: argparse.Namespace, out: Path) -> Dict[str, Any]:
    base = load_fisher(args.base)
    others = [load_fisher(p) for p in args.others]
    n = args.n or get_config().fisher.overlap_n
    report = cross_task_overlap(base, others, n)
    detail, summary = report.write(out / "overlap")
    return {"overlap": str(detail), "summary": str(summary), "layers": [entry.layer for entry in report.layers]}


def _inject_inputs(args: argparse.Namespace, out: Path):
    config = get_config()
    anchor = load_checkpoint(_anchor_path(args, out))
    fisher_path = _anchor_fisher_path(args, out)
    anchor_fisher = load_fisher(fisher_path) if fisher_path.exists() or config.inject.lambda2 > 0 else None
    paths = data_paths(out)
    train = load_examples([Path(args.train)] if getattr(args, "train", None) else [paths["train"]])
    validation = load_examples([paths["validation"]]) if paths["validation"].exists() else None
    return config, anchor, anchor_fisher, train, validation


def cmd_inject(args: argparse.Namespace, out: Path) -> Dict[str, Any]:
    config, anchor, anchor_fisher, train, validation = _inject_inputs(args, out)
    stage_dir = out / "inject"
    result = inject(config.inject, anchor, anchor_fisher, train, validation, stage_dir, _snapshot())
    last = result.epochs[-1] if result.epochs else None
    return {
        "checkpoint": str(stage_dir / "checkpoint.json"),
        "hash": result.checkpoint.content_hash,
        "final_ce": last.ce if last else None,
        "lambda2": config.inject.lambda2,
    }


def cmd_sweep(args: argparse.Namespace, out: Path) -> Dict[str, Any]:
    config, anchor, anchor_fisher, train, validation = _inject_inputs(args, out)
    if anchor_fisher is None:
        anchor_fisher = load_fisher(_anchor_fisher_path(args, out))
    heldout, manifest = heldout_for(anchor, out)
    result = sweep_lambda2(
        config.inject,
        config.sweep.grid,
        anchor,
        anchor_fisher,
        train,
        load_examples(eval_sets(out)),
        validation,
        heldout,
        manifest,
        config.eval,
        config.sweep.convergence_ce,
        config.sweep.workers,
        out / "sweep",
        _snapshot(),
    )
    return {
        "selected_lambda2": result.selected,
        "runs": [{"lambda2": e.lambda2, "converged": e.converged, "error": e.error} for e in result.entries],
    }


def cmd_schedules(args: argparse.Namespace, out: Path) -> Dict[str, Any]:
    config, anchor, anchor_fisher, train, validation = _inject_inputs(args, out)
    if not validation:
        raise DataError(f"comparing λ₁ schedules needs {data_paths(out)['validation']}")
    results = lambda1_schedule_sweep(
        config.inject, config.sweep.schedules, anchor, anchor_fisher, train, validation, out / "schedules"
    )
    return {name: result.validation[-1].reg if result.validation else None for name, result in results.items()}


def cmd_eval(args: argparse.Namespace, out: Path) -> Dict[str, Any]:
    config = get_config()
    checkpoint_arg = getattr(args, "checkpoint", None)
    checkpoint_path = Path(checkpoint_arg) if checkpoint_arg else out / "inject" / "checkpoint.json"
    checkpoint = load_checkpoint(checkpoint_path)
    model = checkpoint.model()
    data_args = getattr(args, "data", None)
    paths = [Path(p) for p in data_args] if data_args else eval_sets(out)
    report = exact_match_eval(model, checkpoint.theta, load_examples(paths), config.eval)
    report_dir = getattr(args, "report_dir", None)
    stage_dir = Path(report_dir) if report_dir else out / "eval"
    report.write(stage_dir)
    summary: Dict[str, Any] = {"accuracy": {label: r.accuracy for label, r in report.ranges.items()}}

    anchor_path = _anchor_path(args, out)
    if anchor_path.exists() and (out / "pretrain" / "corpus_split.json").exists():
        anchor = load_checkpoint(anchor_path)
        heldout, manifest = heldout_for(anchor, out)

        def probe(c: Checkpoint):
            return retention_probe(
                c.model(), c.theta, heldout, manifest, config.eval.probe_mask_fraction, config.inject.seed,
                config.eval.batch_size,
            )

        retention = build_retention_report(probe(anchor), probe(checkpoint))
        write_model_json(stage_dir / "retention.json", retention)
        summary["retention_delta"] = retention.accuracy_delta
    return summary


def cmd_compare(args: argparse.Namespace, out: Path) -> Dict[str, Any]:
    reports = [EvalReport.read(p) for p in args.reports]
    summaries = compare_runs(reports)
    path = write_text(out / "comparison.csv", comparison_csv(summaries))
    return {"comparison": str(path), "metrics": {s.metric: {"mean": s.mean, "std": s.std} for s in summaries}}


def cmd_reproduce(args: argparse.Namespace, out: Path) -> Dict[str, Any]:
    """
    Run the whole pipeline with the loaded configuration

    gen-data, pretrain, anchor, λ₂ sweep, then a final inject with the
    selected λ₂ (the configured one when nothing converges) and eval.
    """
    steps = {}
    for name, handler in (("gen-data", cmd_gen_data), ("pretrain", cmd_pretrain), ("anchor", cmd_anchor)):
        with traced_stage(name):
            steps[name] = handler(args, out)
    with traced_stage("sweep"):
        steps["sweep"] = cmd_sweep(args, out)
    selected = steps["sweep"]["selected_lambda2"]
    if selected is not None:
        config = get_config()
        set_config(config.model_copy(update={"inject": config.inject.model_copy(update={"lambda2": selected})}))
    with traced_stage("inject"):
        steps["inject"] = cmd_inject(args, out)
    with traced_stage("eval"):
        steps["eval"] = cmd_eval(args, out)
    return steps


COMMANDS: Dict[str, Callable[[argparse.Namespace, Path], Dict[str, Any]]] = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "anchor": cmd_anchor,
    "fisher": cmd_fisher,
    "overlap": cmd_overlap,
    "inject": cmd_inject,
    "sweep": cmd_sweep,
    "schedules": cmd_schedules,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "reproduce": cmd_reproduce,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="main_skill_lab.py",
        description="Inject an arithmetic skill into a small masked language model without erasing its linguistics",
    )
    parser.add_argument("--config", help="TOML preset (see configs/)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override applied after the config file, repeatable")
    parser.add_argument("--out", help=f"output directory (default: ${lab_config.OUTPUT_ROOT_ENV})")
    parser.add_argument("--seed", type=int, help="replace every seed in the configuration")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("--quiet", action="store_true", help="warnings only; print a JSON summary on stdout")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate arithmetic datasets")
    gen.add_argument("--count", type=int, help="size of the generated training pool")

    sub.add_parser("pretrain", help="masked-character pretraining on the corpus")

    anchor = sub.add_parser("anchor", help="Fisher scores of the pretrained anchor")
    anchor.add_argument("--anchor", help="anchor checkpoint")

    fisher = sub.add_parser("fisher", help="Fisher scores of a checkpoint on a task")
    fisher.add_argument("--checkpoint", help="checkpoint to score (default: the anchor)")
    fisher.add_argument("--task", required=True, help="task id recorded with the scores")
    source = fisher.add_mutually_exclusive_group()
    source.add_argument("--data", nargs="+", help="arithmetic dataset files")
    source.add_argument("--corpus", help="text corpus file")

    overlap = sub.add_parser("overlap", help="per-layer overlap of top-n Fisher parameters")
    overlap.add_argument("--base", required=True, help="Fisher scores selecting the parameters")
    overlap.add_argument("--others", nargs="+", required=True, help="Fisher scores to compare")
    overlap.add_argument("--n", type=int, help="parameters per layer (default: fisher.overlap_n)")

    for name, help_text in (
        ("inject", "inject the arithmetic skill"),
        ("sweep", "λ₂ sweep with evaluation and retention probe"),
        ("schedules", "compare λ₁ schedules on validation reg"),
    ):
        stage = sub.add_parser(name, help=help_text)
        stage.add_argument("--anchor", help="anchor checkpoint")
        stage.add_argument("--anchor-fisher", help="anchor Fisher scores")
        stage.add_argument("--train", help="training dataset (default: the n/4 subsample)")
        if name == "inject":
            stage.add_argument("--lambda2", type=float, help="shortcut for --set inject.lambda2=…")

    evaluate = sub.add_parser("eval", help="exact match, magnitudes and retention probe")
    evaluate.add_argument("--checkpoint", help="checkpoint to evaluate (default: inject output)")
    evaluate.add_argument("--anchor", help="anchor checkpoint for the retention probe")
    evaluate.add_argument("--data", nargs="+", help="dataset files (default: validation and OOD sets)")
    evaluate.add_argument("--report-dir", help="report directory (default: <out>/eval)")

    compare = sub.add_parser("compare", help="mean and std of eval reports across runs")
    compare.add_argument("reports", nargs="+", help="eval report directories or eval_summary.json files")

    reproduce = sub.add_parser("reproduce", help="run the whole pipeline")
    reproduce.add_argument("--count", type=int, help="size of the generated training pool")
    return parser


def configure_logging(verbose: bool, quiet: bool) -> None:
    level = logging.WARNING if quiet else logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse arguments, run one subcommand and map lab errors to exit codes

    Returns:
        0 on success, the failing error's exit code otherwise
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    out = Path(args.out) if args.out else lab_config.output_root()
    if out is None:
        parser.error(f"--out is required (or set ${lab_config.OUTPUT_ROOT_ENV})")
    configure_logging(args.verbose, args.quiet)

    try:
        overrides = list(args.overrides)
        if getattr(args, "lambda2", None) is not None:
            overrides.append(f"inject.lambda2={args.lambda2!r}")
        config = load_config(args.config, overrides)
        if args.seed is not None:
            config = config.with_seed(args.seed)
        set_config(config)
        lab_config.setup_tracing()
        with traced_stage(args.command, config=config.name):
            summary = COMMANDS[args.command](args, out)
    except LabError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code

    if args.quiet:
        sys.stdout.write(dump_json({"command": args.command, "out": str(out), **summary}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
