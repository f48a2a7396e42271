"""
Fisher - per-parameter sensitivity scores and cross-task overlap

The empirical diagonal Fisher of a task is the mean over samples of the
squared gradient of that sample's masked cross-entropy:

    F_i = (1/N) Σ_samples (∂L/∂θ_i)²

The same scores anchor the EWC penalty and drive the overlap analysis, which
asks how sensitive one task's most crucial parameters are for other tasks.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel
from tqdm import tqdm

from . import numerics as nx
from .artifacts import (
    PathLike,
    array_to_blob,
    blob_to_array,
    read_bytes,
    read_model_json,
    render_csv,
    sha256_bytes,
    verify_hash,
    write_bytes,
    write_model_json,
    write_text,
)
from .data import MaskedInstance, collate
from .errors import ConfigError, DataError, IntegrityError, NonFiniteLossError
from .losses import ce_loss
from .model import MaskedLanguageModel, ParameterManifest, ParameterVector, SliceSpec

logger = logging.getLogger(__name__)

FISHER_FORMAT = "skill-lab-fisher/1"
DEFAULT_SAMPLE_CAP = 2048


@dataclass
class FisherScores:
    values: np.ndarray
    manifest: ParameterManifest
    task_id: str
    sample_count: int
    model_hash: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size != self.manifest.total:
            raise IntegrityError(
                f"Fisher scores for {self.task_id!r} have {self.values.size} entries, "
                f"manifest expects {self.manifest.total}"
            )
        if np.any(self.values < 0) or not np.all(np.isfinite(self.values)):
            raise IntegrityError(f"Fisher scores for {self.task_id!r} must be finite and non-negative")

    def __len__(self) -> int:
        return int(self.values.size)

    def group(self, name: str) -> np.ndarray:
        start, stop = self.manifest.groups()[name]
        return self.values[start:stop]


class FisherManifest(BaseModel):
    format_version: str = FISHER_FORMAT
    task_id: str
    sample_count: int
    model_hash: str
    slices: List[SliceSpec]
    blob_bytes: int
    content_hash: str


def fisher_blob_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".bin")


def save_fisher(path: PathLike, scores: FisherScores) -> Path:
    """Write `<path>` (JSON manifest) and `<path>.bin` (little-endian float64 scores)"""
    blob = array_to_blob(scores.values, "<f8")
    manifest = FisherManifest(
        task_id=scores.task_id,
        sample_count=scores.sample_count,
        model_hash=scores.model_hash,
        slices=list(scores.manifest.slices),
        blob_bytes=len(blob),
        content_hash=sha256_bytes(blob),
    )
    write_bytes(fisher_blob_path(path), blob)
    write_model_json(path, manifest)
    logger.info("saved Fisher scores for %s (%d samples) to %s", scores.task_id, scores.sample_count, path)
    return Path(path)


def load_fisher(path: PathLike) -> FisherScores:
    manifest = read_model_json(path, FisherManifest)
    if manifest.format_version != FISHER_FORMAT:
        raise IntegrityError(f"{path}: unsupported Fisher format {manifest.format_version!r}")
    slices = ParameterManifest(slices=manifest.slices)
    blob_path = fisher_blob_path(path)
    blob = read_bytes(blob_path)
    values = blob_to_array(blob, "<f8", slices.total, blob_path)
    verify_hash(blob, manifest.content_hash, blob_path)
    return FisherScores(
        values=values,
        manifest=slices,
        task_id=manifest.task_id,
        sample_count=manifest.sample_count,
        model_hash=manifest.model_hash,
    )


def sample_gradient(
    model: MaskedLanguageModel, theta: ParameterVector, instance: MaskedInstance, loss_scale: float = 1.0
) -> np.ndarray:
    """Flat gradient of one sample's masked cross-entropy, as float64"""
    batch = collate([instance], model.vocab)
    record = nx.ComputationRecord()
    bound = theta.bind(record)
    logits = model.forward(batch.ids, bound)
    loss = ce_loss(logits, batch.targets, (batch.batch_index, batch.position_index))
    if loss_scale != 1.0:
        loss = nx.scale(loss, loss_scale)
    if not np.isfinite(loss.item()):
        raise NonFiniteLossError(f"non-finite loss while scoring sample {model.vocab.decode(instance.input_ids)!r}")
    record.backward(loss)
    return bound.flat_grad().astype(np.float64)


def _squared_gradient_sum(
    model: MaskedLanguageModel,
    theta: ParameterVector,
    samples: Sequence[MaskedInstance],
    loss_scale: float,
    progress: Optional[tqdm] = None,
) -> np.ndarray:
    total = np.zeros(theta.manifest.total, dtype=np.float64)
    for instance in samples:
        g = sample_gradient(model, theta, instance, loss_scale)
        total += g * g
        if progress is not None:
            progress.update(1)
    return total


def estimate_fisher(
    model: MaskedLanguageModel,
    theta: ParameterVector,
    samples: Sequence[MaskedInstance],
    sample_cap: int = DEFAULT_SAMPLE_CAP,
    loss_scale: float = 1.0,
    workers: int = 1,
    task_id: str = "task",
) -> FisherScores:
    """
    Empirical diagonal Fisher over the first min(len(samples), sample_cap) samples

    Args:
        model: Model whose masked cross-entropy is differentiated
        theta: Parameters, held fixed for the whole estimate
        samples: Masked instances with ground-truth targets
        sample_cap: Upper bound on the number of samples used
        loss_scale: Multiplier applied to every per-sample loss
        workers: Threads scoring contiguous sample blocks
        task_id: Name recorded with the scores

    Returns:
        FisherScores aligned to theta's manifest
    """
    if sample_cap < 1:
        raise ConfigError(f"sample_cap must be at least 1, got {sample_cap}")
    samples = list(samples)[:sample_cap]
    if not samples:
        raise DataError(f"cannot estimate Fisher scores for {task_id!r} from an empty dataset")

    workers = max(1, min(workers, len(samples)))
    bounds = np.linspace(0, len(samples), workers + 1).astype(int)
    blocks = [samples[bounds[i]:bounds[i + 1]] for i in range(workers)]
    disable = not logger.isEnabledFor(logging.INFO)
    with tqdm(total=len(samples), desc=f"fisher[{task_id}]", disable=disable, leave=False) as bar:
        if workers == 1:
            partials = [_squared_gradient_sum(model, theta, samples, loss_scale, bar)]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_squared_gradient_sum, model, theta, block, loss_scale, bar) for block in blocks]
                partials = [future.result() for future in futures]

    total = np.zeros(theta.manifest.total, dtype=np.float64)
    for partial in partials:
        total += partial
    logger.info("Fisher scores for %s over %d samples: max %.3e", task_id, len(samples), total.max() / len(samples))
    return FisherScores(
        values=total / len(samples),
        manifest=theta.manifest,
        task_id=task_id,
        sample_count=len(samples),
        model_hash=theta.content_hash(),
    )


def top_n(scores: Union[FisherScores, np.ndarray], n: int) -> np.ndarray:
    """Indices of the n largest scores, ties to the lowest index, sorted ascending"""
    values = scores.values if isinstance(scores, FisherScores) else np.asarray(scores)
    if not 1 <= n <= values.size:
        raise ConfigError(f"n must lie in [1, {values.size}], got {n}")
    order = np.argsort(-values, kind="stable")
    return np.sort(order[:n])


@dataclass
class LayerOverlap:
    layer: str
    indices: np.ndarray
    base_scores: np.ndarray
    other_scores: Dict[str, np.ndarray] = field(default_factory=dict)
    overlap_count: Dict[str, int] = field(default_factory=dict)

    def summary(self, task_id: str) -> Dict[str, float]:
        values = self.other_scores[task_id]
        return {
            "mean": float(np.mean(values)),
            "median": float(np.median(values)),
            "max": float(np.max(values)),
        }


@dataclass
class OverlapReport:
    base_task: str
    n: int
    global_indices: np.ndarray
    layers: List[LayerOverlap]
    tasks: List[str]

    def layer(self, name: str) -> LayerOverlap:
        for entry in self.layers:
            if entry.layer == name:
                return entry
        raise KeyError(name)

    def to_csv(self) -> str:
        header = ["layer", "rank", "param_index", "base_score"] + [f"score_{task}" for task in self.tasks]
        rows = []
        for entry in self.layers:
            # rank 1 is the base task's highest score in the layer
            ranked = sorted(range(len(entry.indices)), key=lambda i: (-entry.base_scores[i], entry.indices[i]))
            for rank, i in enumerate(ranked, start=1):
                rows.append(
                    [entry.layer, rank, int(entry.indices[i]), float(entry.base_scores[i])]
                    + [float(entry.other_scores[task][i]) for task in self.tasks]
                )
        return render_csv(header, rows)

    def summary_csv(self) -> str:
        rows = []
        for entry in self.layers:
            for task in self.tasks:
                stats = entry.summary(task)
                rows.append([entry.layer, task, stats["mean"], stats["median"], stats["max"], entry.overlap_count[task]])
        return render_csv(["layer", "task", "mean", "median", "max", "overlap_count"], rows)

    def write(self, directory: PathLike) -> Tuple[Path, Path]:
        directory = Path(directory)
        detail = write_text(directory / f"overlap_{self.base_task}.csv", self.to_csv())
        summary = write_text(directory / f"overlap_{self.base_task}_summary.csv", self.summary_csv())
        return detail, summary


def _encoder_layers(manifest: ParameterManifest) -> Dict[str, Tuple[int, int]]:
    groups = manifest.groups()
    layers = {name: bounds for name, bounds in groups.items() if name.startswith("layer.")}
    return layers or groups


def cross_task_overlap(
    base: FisherScores,
    others: Sequence[FisherScores],
    n: int,
    layer_manifest: Optional[ParameterManifest] = None,
) -> OverlapReport:
    """
    Per encoder layer, the base task's top-n parameters and every other task's scores at them

    When a layer holds fewer than n parameters the whole layer is selected.
    Manifests without `layer.*` groups fall back to every group.
    """
    if n < 1:
        raise ConfigError(f"n must be at least 1, got {n}")
    manifest = layer_manifest or base.manifest
    for scores in [base, *others]:
        if scores.manifest != manifest:
            raise IntegrityError(f"Fisher scores for {scores.task_id!r} use a different slice manifest")
    tasks = [scores.task_id for scores in others]
    if len(set(tasks)) != len(tasks):
        raise ConfigError(f"comparison task ids must be unique, got {tasks}")

    layers = []
    for name, (start, stop) in _encoder_layers(manifest).items():
        n_layer = min(n, stop - start)
        base_local = base.values[start:stop]
        local = top_n(base_local, n_layer)
        entry = LayerOverlap(layer=name, indices=local + start, base_scores=base_local[local])
        for scores in others:
            other_local = scores.values[start:stop]
            entry.other_scores[scores.task_id] = other_local[local]
            shared = np.intersect1d(local, top_n(other_local, n_layer))
            entry.overlap_count[scores.task_id] = int(shared.size)
        layers.append(entry)

    return OverlapReport(
        base_task=base.task_id,
        n=n,
        global_indices=top_n(base, min(n, len(base))),
        layers=layers,
        tasks=tasks,
    )
