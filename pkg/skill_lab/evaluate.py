"""
Evaluate - exact-match arithmetic accuracy, magnitude analysis and the
linguistic retention probe

Predictions are greedy: every masked result position takes its argmax
symbol, and the joined string is compared with the canonical target.
"""
import json
import logging
import math
import re
from collections import Counter
from decimal import Decimal
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from tqdm import tqdm

from .artifacts import PathLike, read_model_json, render_csv, sha256_text, write_text
from .data import ArithmeticExample, CorpusSplitManifest, CorpusWindow, collate, mask_result, mask_window, windows_hash
from .errors import DataError, IntegrityError
from .losses import ce_loss
from .model import MaskedLanguageModel, ParameterVector, predict_masked

logger = logging.getLogger(__name__)

DECADE_FLOOR = Decimal("0.01")
_NUMERAL = re.compile(r"^\d+(\.\d+)?$")


class EvalConfig(BaseModel):
    batch_size: int = Field(default=64, ge=1)
    samples: int = Field(default=10, ge=0)
    probe_mask_fraction: float = Field(default=0.15, gt=0, lt=1)


def canonicalize_numeral(text: str) -> Optional[str]:
    """
    Canonical form of a predicted numeral, or None when it does not parse

    Leading zeros collapse to a single integer digit; the fractional digits
    are kept exactly as predicted, so "5.1" and "5.10" stay different.
    """
    text = text.strip()
    if not _NUMERAL.match(text):
        return None
    integer, dot, fraction = text.partition(".")
    integer = integer.lstrip("0") or "0"
    return integer + dot + fraction


def decade(value: Decimal) -> int:
    """floor(log10(max(|value|, 0.01)))"""
    return max(abs(value), DECADE_FLOOR).adjusted()


class MagnitudeHistogram(BaseModel):
    predicted: Dict[int, int] = Field(default_factory=dict)
    target: Dict[int, int] = Field(default_factory=dict)
    unparseable: int = 0
    mean_abs_decade_error: Optional[float] = None
    modal_predicted_decade: Optional[int] = None
    modal_target_decade: Optional[int] = None

    @property
    def count(self) -> int:
        return sum(self.predicted.values()) + self.unparseable

    @property
    def mode_matches(self) -> bool:
        return self.modal_predicted_decade is not None and self.modal_predicted_decade == self.modal_target_decade


def _mode(counter: Counter) -> Optional[int]:
    if not counter:
        return None
    # highest count, then the lowest decade
    return min(counter, key=lambda d: (-counter[d], d))


def magnitude_histogram(predictions: Sequence[str], targets: Sequence[str]) -> MagnitudeHistogram:
    if len(predictions) != len(targets):
        raise DataError(f"{len(predictions)} predictions for {len(targets)} targets")
    predicted: Counter = Counter()
    target: Counter = Counter()
    errors = []
    unparseable = 0
    for prediction, truth in zip(predictions, targets):
        truth_decade = decade(Decimal(truth))
        target[truth_decade] += 1
        canonical = canonicalize_numeral(prediction)
        if canonical is None:
            unparseable += 1
            continue
        predicted_decade = decade(Decimal(canonical))
        predicted[predicted_decade] += 1
        errors.append(abs(predicted_decade - truth_decade))
    return MagnitudeHistogram(
        predicted=dict(sorted(predicted.items())),
        target=dict(sorted(target.items())),
        unparseable=unparseable,
        mean_abs_decade_error=float(np.mean(errors)) if errors else None,
        modal_predicted_decade=_mode(predicted),
        modal_target_decade=_mode(target),
    )


class RangeResult(BaseModel):
    label: str
    accuracy: float = Field(ge=0, le=1)
    count: int
    matches: int
    parse_failures: int

    @property
    def parse_failure_rate(self) -> float:
        return self.parse_failures / self.count if self.count else 0.0


class EvalReport(BaseModel):
    model_hash: str = ""
    ranges: Dict[str, RangeResult] = Field(default_factory=dict)
    magnitudes: Dict[str, MagnitudeHistogram] = Field(default_factory=dict)
    samples: List[str] = Field(default_factory=list)

    def accuracy(self, label: str) -> float:
        return self.ranges[label].accuracy

    def eval_csv(self) -> str:
        rows = [[r.label, r.accuracy, r.count, r.parse_failure_rate] for r in self.ranges.values()]
        return render_csv(["range", "accuracy", "count", "parse_failure_rate"], rows)

    def magnitudes_csv(self) -> str:
        rows = []
        for label, histogram in self.magnitudes.items():
            for series, counts in (("predicted", histogram.predicted), ("target", histogram.target)):
                rows += [[label, series, d, c] for d, c in counts.items()]
            rows.append([label, "predicted", "unparseable", histogram.unparseable])
        return render_csv(["range", "series", "decade", "count"], rows)

    def write(self, directory: PathLike) -> Path:
        directory = Path(directory)
        write_text(directory / "eval.csv", self.eval_csv())
        write_text(directory / "magnitudes.csv", self.magnitudes_csv())
        write_text(directory / "samples.txt", "".join(line + "\n" for line in self.samples))
        write_text(directory / "eval_summary.json", self.model_dump_json(indent=2) + "\n")
        return directory

    @classmethod
    def read(cls, path: PathLike) -> "EvalReport":
        path = Path(path)
        return read_model_json(path / "eval_summary.json" if path.is_dir() else path, cls)


def predict_numerals(
    model: MaskedLanguageModel,
    theta: ParameterVector,
    examples: Sequence[ArithmeticExample],
    batch_size: int = 64,
) -> List[str]:
    """Greedy decode of every example's masked result span"""
    predictions: List[str] = []
    disable = not logger.isEnabledFor(logging.INFO)
    for start in tqdm(range(0, len(examples), batch_size), desc="eval", disable=disable, leave=False):
        chunk = examples[start:start + batch_size]
        batch = collate([mask_result(e, model.vocab, model.config.max_seq_len) for e in chunk], model.vocab)
        logits = model.forward(batch.ids, theta)
        symbols = predict_masked(logits, batch.batch_index, batch.position_index, model.vocab)
        per_example: List[List[str]] = [[] for _ in chunk]
        for row, symbol in zip(batch.batch_index, symbols):
            per_example[row].append(symbol)
        predictions += ["".join(chars) for chars in per_example]
    return predictions


def _head(example: ArithmeticExample) -> str:
    return example.text[: example.result_span[0]].rstrip()


def qualitative_samples(
    examples: Sequence[ArithmeticExample],
    predictions: Dict[str, Sequence[str]],
    k: int = 10,
) -> List[str]:
    """
    "prompt → prediction | target" lines for the first k examples

    With several models the prediction column lists each model by name.
    """
    lines = []
    for i, example in enumerate(examples[:k]):
        if len(predictions) == 1:
            shown = next(iter(predictions.values()))[i]
        else:
            shown = "; ".join(f"{name}: {values[i]}" for name, values in predictions.items())
        lines.append(f"{_head(example)} → {shown} | {example.result_text}")
    return lines


def exact_match_eval(
    model: MaskedLanguageModel,
    theta: ParameterVector,
    examples: Sequence[ArithmeticExample],
    config: Optional[EvalConfig] = None,
) -> EvalReport:
    """Per-range exact-match accuracy, magnitude histograms and sample lines"""
    config = config or EvalConfig()
    predictions = predict_numerals(model, theta, examples, config.batch_size)
    grouped: Dict[str, List[Tuple[ArithmeticExample, str]]] = {}
    for example, prediction in zip(examples, predictions):
        label = example.range_label or "unlabelled"
        grouped.setdefault(label, []).append((example, prediction))

    report = EvalReport(model_hash=theta.content_hash())
    for label, pairs in grouped.items():
        canonical = [canonicalize_numeral(p) for _, p in pairs]
        matches = sum(c == e.result_text for (e, _), c in zip(pairs, canonical))
        report.ranges[label] = RangeResult(
            label=label,
            accuracy=matches / len(pairs),
            count=len(pairs),
            matches=matches,
            parse_failures=sum(c is None for c in canonical),
        )
        report.magnitudes[label] = magnitude_histogram([p for _, p in pairs], [e.result_text for e, _ in pairs])
        logger.info("%s: exact match %.4f over %d examples", label, matches / len(pairs), len(pairs))

    # first k of every range, so OOD prompts show up next to in-domain ones
    for label, pairs in grouped.items():
        report.samples += qualitative_samples(
            [e for e, _ in pairs], {"model": [p for _, p in pairs]}, config.samples
        )
    return report


class RetentionEntry(BaseModel):
    model_hash: str
    accuracy: float = Field(ge=0, le=1)
    mean_ce: float
    masked_positions: int
    mask_hash: str
    heldout_hash: str


class RetentionReport(BaseModel):
    anchor: RetentionEntry
    injected: RetentionEntry
    accuracy_delta: float
    ce_delta: float


def probe_samples(heldout: Sequence[CorpusWindow], vocab, mask_fraction: float, seed: int):
    samples = [mask_window(w, vocab, mask_fraction, key=f"{seed}:probe") for w in heldout]
    mask_hash = sha256_text(json.dumps([[s.window_index, s.masked_positions] for s in samples]))
    return samples, mask_hash


def retention_probe(
    model: MaskedLanguageModel,
    theta: ParameterVector,
    heldout: Sequence[CorpusWindow],
    split_manifest: CorpusSplitManifest,
    mask_fraction: float = 0.15,
    seed: int = 0,
    batch_size: int = 64,
) -> RetentionEntry:
    """Masked-character accuracy and mean CE over fixed masks of the held-out windows"""
    if windows_hash(heldout) != split_manifest.heldout_hash:
        raise IntegrityError("held-out corpus windows do not match the corpus split manifest")
    samples, mask_hash = probe_samples(heldout, model.vocab, mask_fraction, seed)
    correct = 0
    total = 0
    ce_sum = 0.0
    for start in range(0, len(samples), batch_size):
        batch = collate(samples[start:start + batch_size], model.vocab)
        logits = model.forward(batch.ids, theta)
        ce = ce_loss(logits, batch.targets, (batch.batch_index, batch.position_index))
        best = np.argmax(logits.data[batch.batch_index, batch.position_index], axis=-1)
        correct += int(np.sum(best == batch.targets))
        ce_sum += float(ce.item()) * len(batch.targets)
        total += len(batch.targets)
    entry = RetentionEntry(
        model_hash=theta.content_hash(),
        accuracy=correct / total,
        mean_ce=ce_sum / total,
        masked_positions=total,
        mask_hash=mask_hash,
        heldout_hash=split_manifest.heldout_hash,
    )
    logger.info("retention probe %s: accuracy %.4f, ce %.4f", entry.model_hash[:12], entry.accuracy, entry.mean_ce)
    return entry


def build_retention_report(anchor: RetentionEntry, injected: RetentionEntry) -> RetentionReport:
    if anchor.mask_hash != injected.mask_hash or anchor.heldout_hash != injected.heldout_hash:
        raise IntegrityError("retention entries were measured on different held-out masks")
    return RetentionReport(
        anchor=anchor,
        injected=injected,
        accuracy_delta=injected.accuracy - anchor.accuracy,
        ce_delta=injected.mean_ce - anchor.mean_ce,
    )


class MetricSummary(BaseModel):
    metric: str
    mean: float
    std: float
    best_run: int
    values: List[float]


def run_metrics(report: EvalReport, retention: Optional[RetentionReport] = None) -> Dict[str, float]:
    metrics = {f"accuracy{label}": result.accuracy for label, result in report.ranges.items()}
    for label, histogram in report.magnitudes.items():
        if histogram.mean_abs_decade_error is not None:
            metrics[f"decade_error{label}"] = histogram.mean_abs_decade_error
    if retention is not None:
        metrics["retention_accuracy"] = retention.injected.accuracy
        metrics["retention_delta"] = retention.accuracy_delta
    return metrics


def compare_runs(
    reports: Sequence[EvalReport], retention: Optional[Sequence[RetentionReport]] = None
) -> List[MetricSummary]:
    """Mean and population standard deviation of every metric across runs"""
    if not reports:
        raise DataError("compare_runs needs at least one report")
    labels = set(reports[0].ranges)
    for i, report in enumerate(reports[1:], start=1):
        if set(report.ranges) != labels:
            raise DataError(f"report {i} covers ranges {sorted(report.ranges)}, report 0 covers {sorted(labels)}")
    if retention is not None and len(retention) != len(reports):
        raise DataError(f"{len(retention)} retention reports for {len(reports)} eval reports")

    per_run = [run_metrics(r, retention[i] if retention else None) for i, r in enumerate(reports)]
    metrics = list(per_run[0])
    for i, run in enumerate(per_run[1:], start=1):
        if set(run) != set(metrics):
            raise DataError(f"report {i} has metrics {sorted(run)}, report 0 has {sorted(metrics)}")
    summaries = []
    for metric in metrics:
        values = [run[metric] for run in per_run]
        lower_is_better = metric.startswith("decade_error")
        scored = [(-v if lower_is_better else v) for v in values]
        best = int(np.nanargmax(scored)) if not all(math.isnan(v) for v in values) else 0
        summaries.append(
            MetricSummary(
                metric=metric,
                mean=float(np.mean(values)),
                std=float(np.std(values)),
                best_run=best,
                values=values,
            )
        )
    return summaries


def comparison_csv(summaries: Sequence[MetricSummary]) -> str:
    width = max(len(s.values) for s in summaries) if summaries else 0
    header = ["metric", "mean", "std", "best_run"] + [f"run_{i}" for i in range(width)]
    return render_csv(header, [[s.metric, s.mean, s.std, s.best_run] + list(s.values) for s in summaries])

