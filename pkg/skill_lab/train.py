"""
Train - linguistic pretraining, anchor Fisher, skill injection and sweeps

The protocol has two phases:

1. pretrain a masked character model on a text corpus, freeze it as the
   anchor θ*, and score its parameters with the empirical Fisher;
2. inject the arithmetic skill by minimising ce + λ₁·reg + λ₂·ewc on the
   subsampled arithmetic data, where ewc pulls back towards θ*.

Every phase is deterministic under its seed: the same config and data give a
bit-identical checkpoint and metrics file.
"""
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from tqdm import tqdm

from . import numerics as nx
from .artifacts import (
    LAB_VERSION,
    PathLike,
    array_to_blob,
    render_csv,
    sha256_bytes,
    sha256_file,
    sha256_text,
    write_model_json,
    write_text,
)
from .data import (
    ArithmeticExample,
    CorpusSplitManifest,
    CorpusWindow,
    MaskedBatch,
    MaskedInstance,
    collate,
    mask_result,
    mask_window,
    windows_hash,
)
from .errors import ConfigError, DataError, IntegrityError, LabError, NonFiniteLossError
from .evaluate import (
    EvalConfig,
    EvalReport,
    RetentionEntry,
    RetentionReport,
    build_retention_report,
    exact_match_eval,
    retention_probe,
)
from .fisher import DEFAULT_SAMPLE_CAP, FisherScores, estimate_fisher, save_fisher
from .losses import (
    SCHEDULE_PRESETS,
    Lambda1Schedule,
    LossBreakdown,
    RegressionMode,
    ce_loss,
    combine,
    ewc_loss,
    reg_loss,
    schedule_preset,
    soft_decode_numeral,
    total_loss,
    update_lambda1,
)
from .model import (
    Checkpoint,
    MaskedLanguageModel,
    ModelConfig,
    ParameterVector,
    Vocabulary,
    init_parameters,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA2_GRID = (1e-3, 1e-5, 1e-7, 1e-9)

# (theta, batch, λ₁) -> (ce, reg, ewc, flat gradient)
StepFn = Callable[[ParameterVector, MaskedBatch, float], Tuple[float, float, float, np.ndarray]]


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    phase: Literal["pretrain", "inject"] = "inject"
    epochs: int = Field(default=30, ge=0)
    batch_size: int = Field(default=32, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    grad_clip: Optional[float] = Field(default=1.0, gt=0)
    lambda1_schedule: str = "ema-slow"
    lambda2: float = Field(default=1e-5, ge=0)
    regression: RegressionMode = Field(default_factory=RegressionMode)
    seed: int = 0
    mask_fraction: float = Field(default=0.15, gt=0, lt=1)
    anchor_checkpoint: Optional[str] = None
    anchor_fisher: Optional[str] = None
    train_data: Optional[str] = None
    validation_data: Optional[str] = None

    @field_validator("lambda1_schedule")
    @classmethod
    def _known_schedule(cls, name: str) -> str:
        if name not in SCHEDULE_PRESETS:
            raise ValueError(f"unknown λ₁ schedule {name!r}; choose from {sorted(SCHEDULE_PRESETS)}")
        return name

    def schedule(self) -> Lambda1Schedule:
        return schedule_preset(self.lambda1_schedule)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, theta: ParameterVector) -> "AdamState":
        return cls(m=np.zeros_like(theta.values), v=np.zeros_like(theta.values))


def clip_by_global_norm(grad: np.ndarray, max_norm: Optional[float]) -> Tuple[np.ndarray, float]:
    norm = float(np.sqrt(np.sum(np.square(grad, dtype=np.float64))))
    if max_norm is not None and norm > max_norm:
        grad = (grad * (max_norm / norm)).astype(grad.dtype)
    return grad, norm


def adam_update(theta: ParameterVector, grad: np.ndarray, state: AdamState, config: TrainConfig) -> ParameterVector:
    """One bias-corrected Adam step, no weight decay"""
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    state.m = b1 * state.m + (1 - b1) * grad
    state.v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = state.m / (1 - b1 ** state.step)
    v_hat = state.v / (1 - b2 ** state.step)
    values = theta.values - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)
    return ParameterVector(values.astype(theta.values.dtype), theta.manifest)


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    """Shuffled index batches; the order depends only on (seed, epoch)"""
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


class EpochSummary(BaseModel):
    epoch: int
    steps: int
    ce: float
    reg: float
    ewc: float
    lambda1: float
    lambda2: float
    total: float


class ValidationPoint(BaseModel):
    epoch: int
    ce: float
    reg: float


class RunManifest(BaseModel):
    phase: str
    lab_version: str = LAB_VERSION
    config: Dict[str, Any]
    dataset_hashes: Dict[str, str] = Field(default_factory=dict)
    init_hash: str
    final_checkpoint_hash: str
    epochs: List[EpochSummary] = Field(default_factory=list)
    validation: List[ValidationPoint] = Field(default_factory=list)
    artifacts: Dict[str, str] = Field(default_factory=dict)
    scale_note: str = ""
    wall_clock_seconds: float = 0.0


@dataclass
class StepRecord:
    step: int
    epoch: int
    loss: LossBreakdown


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    trace: List[StepRecord]
    epochs: List[EpochSummary]
    manifest: RunManifest
    validation: List[ValidationPoint] = field(default_factory=list)


def scale_note(config: ModelConfig) -> str:
    return (
        f"desk scale: d_model={config.d_model}, n_layers={config.n_layers}, "
        f"n_heads={config.n_heads}, max_seq_len={config.max_seq_len}"
    )


def metrics_csv(trace: Sequence[StepRecord]) -> str:
    header = ["step", "epoch", "ce", "reg", "ewc", "lambda1", "lambda2", "total"]
    rows = [
        [r.step, r.epoch, r.loss.ce, r.loss.reg, r.loss.ewc, r.loss.lambda1, r.loss.lambda2, r.loss.total]
        for r in trace
    ]
    return render_csv(header, rows)


def validation_csv(points: Sequence[ValidationPoint]) -> str:
    return render_csv(["epoch", "ce", "reg"], [[p.epoch, p.ce, p.reg] for p in points])


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(np.asarray(values, dtype=np.float64))) if values else 0.0


def _run_epochs(
    model: MaskedLanguageModel,
    theta: ParameterVector,
    config: TrainConfig,
    instances_for_epoch: Callable[[int], Sequence[MaskedInstance]],
    step_fn: StepFn,
    schedule: Lambda1Schedule,
    lambda2: float,
    validate: Optional[Callable[[int, ParameterVector], ValidationPoint]] = None,
    label: str = "train",
) -> Tuple[ParameterVector, List[StepRecord], List[EpochSummary], List[ValidationPoint]]:
    state = AdamState.zeros_like(theta)
    trace: List[StepRecord] = []
    summaries: List[EpochSummary] = []
    validation: List[ValidationPoint] = []
    step = 0
    disable = not logger.isEnabledFor(logging.INFO)
    for epoch in tqdm(range(config.epochs), desc=label, disable=disable):
        instances = instances_for_epoch(epoch)
        rows: List[LossBreakdown] = []
        for index in epoch_batches(len(instances), config.batch_size, config.seed, epoch):
            batch = collate([instances[i] for i in index], model.vocab)
            ce, reg, ewc, grad = step_fn(theta, batch, schedule.current)
            if not all(math.isfinite(v) for v in (ce, reg, ewc)) or not np.all(np.isfinite(grad)):
                raise NonFiniteLossError(
                    f"{label}: non-finite loss at epoch {epoch}, step {step} (ce={ce}, reg={reg}, ewc={ewc})",
                    step=step,
                    epoch=epoch,
                )
            breakdown = total_loss(ce, reg, ewc, schedule.current, lambda2)
            grad, _ = clip_by_global_norm(grad, config.grad_clip)
            theta = adam_update(theta, grad, state, config)
            trace.append(StepRecord(step=step, epoch=epoch, loss=breakdown))
            rows.append(breakdown)
            step += 1

        summary = EpochSummary(
            epoch=epoch,
            steps=len(rows),
            ce=_mean([r.ce for r in rows]),
            reg=_mean([r.reg for r in rows]),
            ewc=_mean([r.ewc for r in rows]),
            lambda1=schedule.current,
            lambda2=lambda2,
            total=_mean([r.total for r in rows]),
        )
        summaries.append(summary)
        schedule = update_lambda1(schedule, summary.ce, summary.reg)
        if validate is not None:
            validation.append(validate(epoch, theta))
        logger.info(
            "%s epoch %d: ce=%.4f reg=%.4f ewc=%.4g λ₁=%.6f", label, epoch, summary.ce, summary.reg, summary.ewc,
            summary.lambda1,
        )
    return theta, trace, summaries, validation


def _ce_step(model: MaskedLanguageModel) -> StepFn:
    def step(theta: ParameterVector, batch: MaskedBatch, lambda1: float):
        record = nx.ComputationRecord()
        bound = theta.bind(record)
        logits = model.forward(batch.ids, bound)
        ce = ce_loss(logits, batch.targets, (batch.batch_index, batch.position_index))
        record.backward(ce)
        return ce.item(), 0.0, 0.0, bound.flat_grad()

    return step


def _inject_step(
    model: MaskedLanguageModel,
    config: TrainConfig,
    anchor: ParameterVector,
    fisher: Optional[FisherScores],
) -> StepFn:
    digit_ids = model.vocab.digit_ids

    def step(theta: ParameterVector, batch: MaskedBatch, lambda1: float):
        record = nx.ComputationRecord()
        bound = theta.bind(record)
        logits = model.forward(batch.ids, bound)
        positions = (batch.batch_index, batch.position_index)
        ce = ce_loss(logits, batch.targets, positions)
        # zero-weighted terms are measured on detached values so they stay out of the graph
        decoded_from = logits if lambda1 else nx.Tensor(logits.data)
        y_hat = soft_decode_numeral(decoded_from, positions, batch.place_values, digit_ids, batch.size)
        reg = reg_loss(batch.target_values, y_hat, config.regression)
        ewc = None
        if fisher is not None:
            ewc = ewc_loss(bound if config.lambda2 else theta, anchor, fisher)
        record.backward(combine(ce, reg, ewc, lambda1, config.lambda2))
        return ce.item(), reg.item(), ewc.item() if ewc is not None else 0.0, bound.flat_grad()

    return step


def _validation_fn(
    model: MaskedLanguageModel, examples: Sequence[ArithmeticExample], config: TrainConfig
) -> Callable[[int, ParameterVector], ValidationPoint]:
    instances = [mask_result(e, model.vocab, model.config.max_seq_len) for e in examples]
    digit_ids = model.vocab.digit_ids

    def validate(epoch: int, theta: ParameterVector) -> ValidationPoint:
        ce_values, reg_values = [], []
        for start in range(0, len(instances), config.batch_size):
            batch = collate(instances[start:start + config.batch_size], model.vocab)
            logits = model.forward(batch.ids, theta)
            positions = (batch.batch_index, batch.position_index)
            ce_values.append(ce_loss(logits, batch.targets, positions).item())
            y_hat = soft_decode_numeral(logits, positions, batch.place_values, digit_ids, batch.size)
            reg_values.append(reg_loss(batch.target_values, y_hat, config.regression).item())
        return ValidationPoint(epoch=epoch, ce=_mean(ce_values), reg=_mean(reg_values))

    return validate


def _examples_hash(examples: Sequence[ArithmeticExample]) -> str:
    return sha256_text("".join(e.text + "\n" for e in examples))


def _finish(
    phase: str,
    model: MaskedLanguageModel,
    init: ParameterVector,
    theta: ParameterVector,
    config: TrainConfig,
    trace: List[StepRecord],
    summaries: List[EpochSummary],
    validation: List[ValidationPoint],
    dataset_hashes: Dict[str, str],
    started: float,
    out_dir: Optional[PathLike],
    snapshot: Optional[Dict[str, Any]],
) -> TrainResult:
    provenance = {"phase": phase, "seed": config.seed, "init_hash": init.content_hash(), **dataset_hashes}
    checkpoint = Checkpoint(theta=theta, config=model.config, vocab=model.vocab, provenance=provenance)
    manifest = RunManifest(
        phase=phase,
        config=snapshot if snapshot is not None else {"train": config.model_dump(mode="json")},
        dataset_hashes=dataset_hashes,
        init_hash=init.content_hash(),
        final_checkpoint_hash=checkpoint.content_hash,
        epochs=summaries,
        validation=validation,
        scale_note=scale_note(model.config),
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_checkpoint(out_dir / "checkpoint.json", theta, model.config, model.vocab, provenance)
        write_text(out_dir / "metrics.csv", metrics_csv(trace))
        if validation:
            write_text(out_dir / "validation.csv", validation_csv(validation))
        for name in ("checkpoint.json", "checkpoint.bin", "metrics.csv", "validation.csv"):
            if (out_dir / name).exists():
                manifest.artifacts[name] = sha256_file(out_dir / name)
    manifest.wall_clock_seconds = time.perf_counter() - started
    if out_dir is not None:
        write_model_json(Path(out_dir) / "run_manifest.json", manifest)
    return TrainResult(checkpoint=checkpoint, trace=trace, epochs=summaries, manifest=manifest, validation=validation)


def pretrain(
    config: TrainConfig,
    model_config: ModelConfig,
    vocab: Vocabulary,
    windows: Sequence[CorpusWindow],
    out_dir: Optional[PathLike] = None,
    snapshot: Optional[Dict[str, Any]] = None,
) -> TrainResult:
    """
    Masked-character pretraining on corpus windows (λ₁ = λ₂ = 0)

    Masks are redrawn every epoch from (seed, epoch, window index).
    Zero epochs return the initial parameters.
    """
    if config.phase != "pretrain":
        raise ConfigError(f"pretrain needs phase='pretrain', got {config.phase!r}")
    if not windows:
        raise DataError("pretraining corpus yields no windows")
    started = time.perf_counter()
    model = MaskedLanguageModel(model_config, vocab)
    init = init_parameters(model_config)

    def instances_for_epoch(epoch: int) -> List[MaskedInstance]:
        return [mask_window(w, vocab, config.mask_fraction, key=f"{config.seed}:epoch{epoch}") for w in windows]

    theta, trace, summaries, _ = _run_epochs(
        model, init, config, instances_for_epoch, _ce_step(model), schedule_preset("off"), 0.0, label="pretrain"
    )
    return _finish(
        "pretrain", model, init, theta, config, trace, summaries, [],
        {"corpus": windows_hash(windows)}, started, out_dir, snapshot,
    )


def compute_anchor(
    anchor: Checkpoint,
    windows: Sequence[CorpusWindow],
    sample_cap: int = DEFAULT_SAMPLE_CAP,
    mask_fraction: float = 0.15,
    seed: int = 0,
    workers: int = 1,
    out_path: Optional[PathLike] = None,
) -> FisherScores:
    """Fisher scores of the anchor on masked windows of its own pretraining corpus"""
    model = anchor.model()
    samples = [mask_window(w, anchor.vocab, mask_fraction, key=f"{seed}:anchor") for w in windows]
    scores = estimate_fisher(model, anchor.theta, samples, sample_cap=sample_cap, workers=workers, task_id="linguistic")
    if out_path is not None:
        save_fisher(out_path, scores)
    return scores


def _check_inject(config: TrainConfig, anchor: Checkpoint, anchor_fisher: Optional[FisherScores]) -> None:
    if config.phase != "inject":
        raise ConfigError(f"inject needs phase='inject', got {config.phase!r}")
    if config.regression.decode != "soft":
        raise ConfigError("training needs regression.decode='soft'; hard decoding blocks gradients")
    if config.regression.space != "linear":
        raise ConfigError("log-space numeral regression is not implemented; use regression.space='linear'")
    if anchor_fisher is None and config.lambda2 > 0:
        raise ConfigError(f"lambda2={config.lambda2} needs anchor Fisher scores")
    if anchor_fisher is not None and anchor_fisher.manifest != anchor.theta.manifest:
        raise IntegrityError(
            f"anchor Fisher scores ({anchor_fisher.task_id!r}) do not match the anchor checkpoint's slice manifest"
        )


def inject(
    config: TrainConfig,
    anchor: Checkpoint,
    anchor_fisher: Optional[FisherScores],
    train_examples: Sequence[ArithmeticExample],
    validation_examples: Optional[Sequence[ArithmeticExample]] = None,
    out_dir: Optional[PathLike] = None,
    snapshot: Optional[Dict[str, Any]] = None,
) -> TrainResult:
    """
    Continue training the anchor on arithmetic with ce + λ₁·reg + λ₂·ewc

    Args:
        config: Inject-phase settings (schedule, λ₂, optimiser)
        anchor: Pretrained checkpoint; training starts from and is pulled towards it
        anchor_fisher: Anchor Fisher scores; optional only when λ₂ = 0
        train_examples: Arithmetic training examples (the subsample)
        validation_examples: When given, validation ce and reg are measured every epoch
        out_dir: Where checkpoint, metrics and run manifest are written
        snapshot: Effective configuration to echo into the run manifest

    Returns:
        TrainResult with the injected checkpoint and the per-step trace
    """
    _check_inject(config, anchor, anchor_fisher)
    if not train_examples:
        raise DataError("injection needs at least one arithmetic example")
    started = time.perf_counter()
    model = anchor.model()
    instances = [mask_result(e, model.vocab, model.config.max_seq_len) for e in train_examples]
    validate = _validation_fn(model, validation_examples, config) if validation_examples else None
    hashes = {"train": _examples_hash(train_examples), "anchor": anchor.content_hash}
    if validation_examples:
        hashes["validation"] = _examples_hash(validation_examples)
    if anchor_fisher is not None:
        hashes["anchor_fisher"] = sha256_bytes(array_to_blob(anchor_fisher.values, "<f8"))

    theta, trace, summaries, validation = _run_epochs(
        model,
        anchor.theta,
        config,
        lambda epoch: instances,
        _inject_step(model, config, anchor.theta, anchor_fisher),
        config.schedule(),
        config.lambda2,
        validate,
        label="inject",
    )
    return _finish(
        "inject", model, anchor.theta, theta, config, trace, summaries, validation, hashes, started, out_dir, snapshot
    )


def finetune_ce(
    config: TrainConfig,
    init: Checkpoint,
    train_examples: Sequence[ArithmeticExample],
    out_dir: Optional[PathLike] = None,
) -> TrainResult:
    """Plain masked cross-entropy fine-tuning on arithmetic examples"""
    if not train_examples:
        raise DataError("fine-tuning needs at least one arithmetic example")
    started = time.perf_counter()
    model = init.model()
    instances = [mask_result(e, model.vocab, model.config.max_seq_len) for e in train_examples]
    theta, trace, summaries, _ = _run_epochs(
        model, init.theta, config, lambda epoch: instances, _ce_step(model), schedule_preset("off"), 0.0,
        label="finetune",
    )
    return _finish(
        "finetune", model, init.theta, theta, config, trace, summaries, [],
        {"train": _examples_hash(train_examples)}, started, out_dir, None,
    )


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

class SweepEntry(BaseModel):
    lambda2: float
    converged: bool = False
    final_ce: Optional[float] = None
    eval: Optional[EvalReport] = None
    retention: Optional[RetentionReport] = None
    manifest: Optional[RunManifest] = None
    error: Optional[str] = None


class SweepResult(BaseModel):
    entries: List[SweepEntry]
    selected: Optional[float] = None
    convergence_ce: float

    def summary_csv(self) -> str:
        labels = sorted({label for e in self.entries if e.eval for label in e.eval.ranges})
        header = ["lambda2", "converged", "final_ce"] + [f"accuracy{label}" for label in labels]
        header += ["retention_accuracy", "retention_delta", "selected", "error"]
        rows = []
        for entry in self.entries:
            accuracies = [entry.eval.accuracy(label) if entry.eval and label in entry.eval.ranges else "" for label in labels]
            retention = entry.retention
            rows.append(
                [entry.lambda2, entry.converged, entry.final_ce if entry.final_ce is not None else ""]
                + accuracies
                + [
                    retention.injected.accuracy if retention else "",
                    retention.accuracy_delta if retention else "",
                    entry.lambda2 == self.selected,
                    entry.error or "",
                ]
            )
        return render_csv(header, rows)

    def write(self, directory: PathLike) -> Path:
        directory = Path(directory)
        write_text(directory / "sweep_summary.csv", self.summary_csv())
        write_model_json(directory / "sweep.json", self)
        return directory


@dataclass
class SweepJob:
    config: TrainConfig
    anchor: Checkpoint
    anchor_fisher: Optional[FisherScores]
    train: Sequence[ArithmeticExample]
    validation: Optional[Sequence[ArithmeticExample]]
    eval_examples: Sequence[ArithmeticExample]
    heldout: Sequence[CorpusWindow]
    split_manifest: Optional[CorpusSplitManifest]
    anchor_retention: Optional[RetentionEntry]
    eval_config: EvalConfig
    convergence_ce: float
    out_dir: Optional[str]
    snapshot: Optional[Dict[str, Any]]


def _converged(result: TrainResult, threshold: float) -> Tuple[bool, Optional[float]]:
    if not result.epochs:
        return False, None
    final_ce = result.epochs[-1].ce
    return math.isfinite(final_ce) and final_ce <= threshold, final_ce


def run_sweep_point(job: SweepJob) -> SweepEntry:
    """Inject, evaluate and probe one λ₂ value; lab errors are recorded, not raised"""
    lambda2 = job.config.lambda2
    try:
        result = inject(job.config, job.anchor, job.anchor_fisher, job.train, job.validation, job.out_dir, job.snapshot)
        model = result.checkpoint.model()
        report = exact_match_eval(model, result.checkpoint.theta, job.eval_examples, job.eval_config)
        retention = None
        if job.anchor_retention is not None and job.split_manifest is not None:
            probe = retention_probe(
                model, result.checkpoint.theta, job.heldout, job.split_manifest,
                job.eval_config.probe_mask_fraction, job.config.seed, job.eval_config.batch_size,
            )
            retention = build_retention_report(job.anchor_retention, probe)
        if job.out_dir is not None:
            report.write(job.out_dir)
            if retention is not None:
                write_model_json(Path(job.out_dir) / "retention.json", retention)
        converged, final_ce = _converged(result, job.convergence_ce)
        return SweepEntry(
            lambda2=lambda2, converged=converged, final_ce=final_ce, eval=report, retention=retention,
            manifest=result.manifest,
        )
    except LabError as exc:
        logger.error("λ₂=%g failed: %s", lambda2, exc)
        return SweepEntry(lambda2=lambda2, error=f"{type(exc).__name__}: {exc}")


def select_lambda2(entries: Sequence[SweepEntry]) -> Optional[float]:
    """Smallest λ₂ whose run converges"""
    converged = [e.lambda2 for e in entries if e.converged]
    return min(converged) if converged else None


def sweep_lambda2(
    base: TrainConfig,
    grid: Sequence[float],
    anchor: Checkpoint,
    anchor_fisher: Optional[FisherScores],
    train_examples: Sequence[ArithmeticExample],
    eval_examples: Sequence[ArithmeticExample],
    validation_examples: Optional[Sequence[ArithmeticExample]] = None,
    heldout: Sequence[CorpusWindow] = (),
    split_manifest: Optional[CorpusSplitManifest] = None,
    eval_config: Optional[EvalConfig] = None,
    convergence_ce: float = 0.25,
    workers: int = 1,
    out_dir: Optional[PathLike] = None,
    snapshot: Optional[Dict[str, Any]] = None,
) -> SweepResult:
    """
    One inject run per λ₂ (same seed), each evaluated and probed for retention

    Runs are independent; with workers > 1 they execute in separate
    processes, each writing to `<out_dir>/lambda2=<value>/`.
    """
    if not grid:
        raise ConfigError("λ₂ grid is empty")
    eval_config = eval_config or EvalConfig()
    anchor_retention = None
    if split_manifest is not None and heldout:
        anchor_retention = retention_probe(
            anchor.model(), anchor.theta, heldout, split_manifest,
            eval_config.probe_mask_fraction, base.seed, eval_config.batch_size,
        )
    jobs = [
        SweepJob(
            config=base.model_copy(update={"lambda2": float(value)}),
            anchor=anchor,
            anchor_fisher=anchor_fisher,
            train=list(train_examples),
            validation=list(validation_examples) if validation_examples else None,
            eval_examples=list(eval_examples),
            heldout=list(heldout),
            split_manifest=split_manifest,
            anchor_retention=anchor_retention,
            eval_config=eval_config,
            convergence_ce=convergence_ce,
            out_dir=str(Path(out_dir) / f"lambda2={value:g}") if out_dir is not None else None,
            snapshot=snapshot,
        )
        for value in grid
    ]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            entries = list(pool.map(run_sweep_point, jobs))
    else:
        entries = [run_sweep_point(job) for job in jobs]

    result = SweepResult(entries=entries, selected=select_lambda2(entries), convergence_ce=convergence_ce)
    if result.selected is None:
        logger.warning("no λ₂ in %s converged to ce ≤ %g", list(grid), convergence_ce)
    else:
        logger.info("selected λ₂ = %g", result.selected)
    if out_dir is not None:
        result.write(out_dir)
    return result


def lambda1_schedule_sweep(
    base: TrainConfig,
    schedules: Sequence[str],
    anchor: Checkpoint,
    anchor_fisher: Optional[FisherScores],
    train_examples: Sequence[ArithmeticExample],
    validation_examples: Sequence[ArithmeticExample],
    out_dir: Optional[PathLike] = None,
) -> Dict[str, TrainResult]:
    """Inject once per λ₁ schedule and compare validation reg curves"""
    if not validation_examples:
        raise DataError("comparing λ₁ schedules needs validation examples")
    results: Dict[str, TrainResult] = {}
    rows = []
    for name in schedules:
        config = base.model_copy(update={"lambda1_schedule": name})
        run_dir = Path(out_dir) / f"schedule={name}" if out_dir is not None else None
        result = inject(config, anchor, anchor_fisher, train_examples, validation_examples, run_dir)
        results[name] = result
        for summary, point in zip(result.epochs, result.validation):
            rows.append([name, point.epoch, summary.lambda1, point.ce, point.reg])
    if out_dir is not None:
        write_text(Path(out_dir) / "schedules.csv", render_csv(["schedule", "epoch", "lambda1", "val_ce", "val_reg"], rows))
    return results
