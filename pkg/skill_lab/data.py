"""
Data - arithmetic skill examples and the linguistic corpus

Arithmetic examples are binary "a op b = c" expressions over decimal
operands. All arithmetic is done on integers scaled by 10**decimal_places, so
results are exact and their text rendering is canonical.

The linguistic corpus is any UTF-8 text file cut into fixed windows with a
share of characters replaced by [MASK] for masked-character prediction.
"""
import logging
import math
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from decimal import ROUND_CEILING, Decimal
from pathlib import Path
from typing import Dict, Iterator, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from .artifacts import PathLike, read_bytes, read_model_json, read_text, sha256_text, write_model_json, write_text
from .errors import ConfigError, DataError, IntegrityError
from .model import Vocabulary, encode, pad_batch

logger = logging.getLogger(__name__)

GENERATION_BLOCK = 1024
DATASET_FORMAT = "skill-lab-dataset/1"
_EXAMPLE_PATTERN = re.compile(r"^(\d+(?:\.\d+)?) ([+-]) (\d+(?:\.\d+)?) = (\d+(?:\.\d+)?)$")


class NumeralRange(BaseModel):
    """Half-open operand range [lo, hi)"""
    lo: Decimal
    hi: Decimal

    @model_validator(mode="after")
    def _ordered(self) -> "NumeralRange":
        if not 0 < self.lo < self.hi:
            raise ValueError(f"numeral range needs 0 < lo < hi, got lo={self.lo}, hi={self.hi}")
        return self

    @property
    def label(self) -> str:
        return f"[{_plain(self.lo)},{_plain(self.hi)})"

    def contains(self, value: Decimal) -> bool:
        return self.lo <= value < self.hi

    def overlaps(self, other: "NumeralRange") -> bool:
        return self.lo < other.hi and other.lo < self.hi


class GenConfig(BaseModel):
    range: NumeralRange
    operators: List[Literal["+", "-"]] = Field(default_factory=lambda: ["+", "-"])
    decimal_places: int = Field(default=2, ge=0)
    count: int = Field(gt=0)
    seed: int = 0

    @field_validator("operators")
    @classmethod
    def _non_empty(cls, operators: List[str]) -> List[str]:
        if not operators:
            raise ValueError("operator set is empty")
        return operators


class ArithmeticExample(BaseModel, frozen=True):
    operand_a: Decimal
    operand_b: Decimal
    operator: Literal["+", "-"]
    result: Decimal
    text: str
    result_span: Tuple[int, int]
    range_label: Optional[str] = None

    @property
    def prompt(self) -> str:
        """Text with the result replaced by one [MASK] per character"""
        start, stop = self.result_span
        return self.text[:start] + "[MASK]" * (stop - start)

    @property
    def result_text(self) -> str:
        start, stop = self.result_span
        return self.text[start:stop]


@dataclass
class MaskedInstance:
    """Token ids with some positions replaced by [MASK], plus what they hid"""
    input_ids: List[int]
    masked_positions: List[int]
    target_ids: List[int]
    place_values: Optional[List[float]] = None
    target_value: Optional[float] = None

    def unmask(self) -> List[int]:
        ids = list(self.input_ids)
        for pos, target in zip(self.masked_positions, self.target_ids):
            ids[pos] = target
        return ids


@dataclass
class CorpusSample(MaskedInstance):
    window_index: int = 0


@dataclass
class MaskedBatch:
    """Padded id matrix plus flattened masked positions across the batch"""
    ids: np.ndarray
    batch_index: np.ndarray
    position_index: np.ndarray
    targets: np.ndarray
    place_values: Optional[np.ndarray] = None
    target_values: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return int(self.ids.shape[0])


def _plain(value: Decimal) -> str:
    text = format(value, "f")
    return text.rstrip("0").rstrip(".") if "." in text else text


def format_scaled(value: int, decimal_places: int) -> str:
    """Render an integer scaled by 10**decimal_places as a fixed-point string"""
    if decimal_places == 0:
        return str(value)
    unit = 10 ** decimal_places
    return f"{value // unit}.{value % unit:0{decimal_places}d}"


def _scale_bound(value: Decimal, decimal_places: int) -> int:
    return int((value * (Decimal(10) ** decimal_places)).to_integral_value(rounding=ROUND_CEILING))


def _build_example(a: int, b: int, operator: str, decimal_places: int, range_label: Optional[str]) -> ArithmeticExample:
    if operator == "-" and b > a:
        a, b = b, a
    c = a + b if operator == "+" else a - b
    a_text, b_text, c_text = (format_scaled(v, decimal_places) for v in (a, b, c))
    head = f"{a_text} {operator} {b_text} = "
    unit = Decimal(10) ** -decimal_places if decimal_places else Decimal(1)
    return ArithmeticExample(
        operand_a=Decimal(a) * unit,
        operand_b=Decimal(b) * unit,
        operator=operator,
        result=Decimal(c) * unit,
        text=head + c_text,
        result_span=(len(head), len(head) + len(c_text)),
        range_label=range_label,
    )


def make_example(operand_a: str, operator: str, operand_b: str, decimal_places: int = 2,
                 range_label: Optional[str] = None) -> ArithmeticExample:
    """Example from operand strings, e.g. make_example("61176.23", "-", "46741.95")"""
    scale = Decimal(10) ** decimal_places
    a = int(Decimal(operand_a) * scale)
    b = int(Decimal(operand_b) * scale)
    return _build_example(a, b, operator, decimal_places, range_label)


def parse_example(text: str, range_label: Optional[str] = None) -> ArithmeticExample:
    match = _EXAMPLE_PATTERN.match(text)
    if not match:
        raise DataError(f"not a canonical arithmetic example: {text!r}")
    a_text, operator, b_text, c_text = match.groups()
    decimal_places = len(c_text.partition(".")[2])
    example = make_example(a_text, operator, b_text, decimal_places, range_label)
    if example.text != text:
        raise DataError(f"example {text!r} is not canonical (expected {example.text!r})")
    return example


def _generate_block(config: GenConfig, block: int) -> List[ArithmeticExample]:
    rng = random.Random(f"{config.seed}:{block}")
    lo = _scale_bound(config.range.lo, config.decimal_places)
    hi = _scale_bound(config.range.hi, config.decimal_places)
    label = config.range.label
    start = block * GENERATION_BLOCK
    stop = min(start + GENERATION_BLOCK, config.count)
    examples = []
    for _ in range(start, stop):
        operator = rng.choice(config.operators)
        a = rng.randrange(lo, hi)
        b = rng.randrange(lo, hi)
        examples.append(_build_example(a, b, operator, config.decimal_places, label))
    return examples


def generate(config: GenConfig, workers: int = 1) -> List[ArithmeticExample]:
    """Examples with operands uniform over the range at the configured precision"""
    blocks = range(math.ceil(config.count / GENERATION_BLOCK))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda b: _generate_block(config, b), blocks))
    else:
        parts = [_generate_block(config, b) for b in blocks]
    examples = [example for part in parts for example in part]
    logger.info("generated %d examples in %s", len(examples), config.range.label)
    return examples


def operand_decade(example: ArithmeticExample) -> int:
    """floor(log10) of the larger operand"""
    return max(example.operand_a, example.operand_b).adjusted()


def deduplicate(examples: Sequence[ArithmeticExample]) -> List[ArithmeticExample]:
    seen = set()
    unique = []
    for example in examples:
        if example.text not in seen:
            seen.add(example.text)
            unique.append(example)
    return unique


def split_stratified(
    examples: Sequence[ArithmeticExample], val_fraction: float, seed: int = 0
) -> Tuple[List[ArithmeticExample], List[ArithmeticExample]]:
    """
    Train/validation split with disjoint expressions and every operand decade in both parts

    Args:
        examples: Generated examples; duplicate texts are dropped first
        val_fraction: Share of examples for validation, 0 < val_fraction < 1
        seed: Shuffle seed

    Returns:
        (train, validation), each in input order
    """
    if not 0 < val_fraction < 1:
        raise ConfigError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    unique = deduplicate(examples)
    n = len(unique)
    n_val = round(n * val_fraction)
    if n < 2 or n_val < 1 or n_val > n - 1:
        raise DataError(f"{n} unique examples cannot be split with val_fraction={val_fraction}")

    strata: Dict[int, List[int]] = {}
    for i, example in enumerate(unique):
        strata.setdefault(operand_decade(example), []).append(i)

    splittable = {d: idx for d, idx in strata.items() if len(idx) >= 2}
    for decade, idx in strata.items():
        if len(idx) < 2:
            logger.warning("decade 10^%d has a single example; it stays in training", decade)
    pool = sum(len(idx) for idx in splittable.values())
    if not splittable or n_val > pool - len(splittable):
        raise DataError(f"too few examples per decade to place {n_val} in validation and keep every decade in training")

    # largest-remainder allocation, at least one per stratum on each side
    quotas = {d: n_val * len(idx) / pool for d, idx in splittable.items()}
    alloc = {d: min(max(1, math.floor(q)), len(splittable[d]) - 1) for d, q in quotas.items()}
    order = sorted(splittable, key=lambda d: (-(quotas[d] - math.floor(quotas[d])), d))
    while sum(alloc.values()) != n_val:
        step = 1 if sum(alloc.values()) < n_val else -1
        changed = False
        for decade in order:
            target = alloc[decade] + step
            if 1 <= target <= len(splittable[decade]) - 1:
                alloc[decade] = target
                changed = True
                if sum(alloc.values()) == n_val:
                    break
        if not changed:
            raise DataError("cannot balance the validation split across decades")

    rng = random.Random(f"{seed}:split")
    val_index = set()
    for decade in sorted(splittable):
        members = list(splittable[decade])
        rng.shuffle(members)
        val_index.update(members[: alloc[decade]])

    train = [e for i, e in enumerate(unique) if i not in val_index]
    validation = [e for i, e in enumerate(unique) if i in val_index]
    return train, validation


def subsample(examples: Sequence, fraction: float = 0.25, seed: int = 0) -> list:
    """floor(fraction * n) items drawn uniformly without replacement, kept in input order"""
    if not 0 < fraction <= 1:
        raise ConfigError(f"subsample fraction must lie in (0, 1], got {fraction}")
    k = math.floor(fraction * len(examples))
    chosen = sorted(random.Random(f"{seed}:subsample").sample(range(len(examples)), k))
    return [examples[i] for i in chosen]


def place_values(result_text: str) -> List[float]:
    """Place value of each result character; 0 for the decimal point"""
    integer_part = result_text.partition(".")[0]
    values = []
    exponent = len(integer_part) - 1
    for ch in result_text:
        if ch == ".":
            values.append(0.0)
            continue
        values.append(10.0 ** exponent)
        exponent -= 1
    return values


def mask_result(example: ArithmeticExample, vocab: Vocabulary, max_seq_len: Optional[int] = None) -> MaskedInstance:
    """Replace exactly the result characters with [MASK]"""
    ids = encode(example.text, vocab, max_seq_len)
    start, stop = example.result_span
    positions = list(range(start, stop))
    targets = [ids[p] for p in positions]
    masked = list(ids)
    for p in positions:
        masked[p] = vocab.mask_id
    return MaskedInstance(
        input_ids=masked,
        masked_positions=positions,
        target_ids=targets,
        place_values=place_values(example.result_text),
        target_value=float(example.result),
    )


def collate(instances: Sequence[MaskedInstance], vocab: Vocabulary) -> MaskedBatch:
    if not instances:
        raise DataError("cannot collate an empty batch")
    ids = pad_batch([inst.input_ids for inst in instances], vocab.pad_id)
    batch_index = np.concatenate([np.full(len(inst.masked_positions), row) for row, inst in enumerate(instances)])
    position_index = np.concatenate([np.asarray(inst.masked_positions) for inst in instances])
    targets = np.concatenate([np.asarray(inst.target_ids) for inst in instances])
    place = None
    values = None
    if all(inst.place_values is not None for inst in instances):
        place = np.concatenate([np.asarray(inst.place_values, dtype=np.float64) for inst in instances])
        values = np.asarray([inst.target_value for inst in instances], dtype=np.float64)
    return MaskedBatch(
        ids=ids,
        batch_index=batch_index.astype(np.int64),
        position_index=position_index.astype(np.int64),
        targets=targets.astype(np.int64),
        place_values=place,
        target_values=values,
    )


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------

class DatasetManifest(BaseModel):
    format_version: str = DATASET_FORMAT
    gen_config: Optional[GenConfig] = None
    seed: Optional[int] = None
    count: int
    range_label: Optional[str] = None
    content_hash: str
    derived_from: Optional[str] = None


def manifest_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def write_dataset(
    path: PathLike,
    examples: Sequence[ArithmeticExample],
    gen_config: Optional[GenConfig] = None,
    derived_from: Optional[str] = None,
) -> DatasetManifest:
    """One canonical example per line plus a sidecar manifest"""
    text = "".join(example.text + "\n" for example in examples)
    labels = {example.range_label for example in examples}
    manifest = DatasetManifest(
        gen_config=gen_config,
        seed=gen_config.seed if gen_config else None,
        count=len(examples),
        range_label=labels.pop() if len(labels) == 1 else None,
        content_hash=sha256_text(text),
        derived_from=derived_from,
    )
    write_text(path, text)
    write_model_json(manifest_path(path), manifest)
    return manifest


def read_dataset(path: PathLike) -> Tuple[List[ArithmeticExample], DatasetManifest]:
    text = read_text(path)
    manifest = read_model_json(manifest_path(path), DatasetManifest)
    if sha256_text(text) != manifest.content_hash:
        raise IntegrityError(f"dataset {path} does not match the hash in its manifest")
    examples = [parse_example(line, manifest.range_label) for line in text.splitlines() if line]
    if len(examples) != manifest.count:
        raise IntegrityError(f"dataset {path} holds {len(examples)} examples, manifest says {manifest.count}")
    return examples, manifest


# ---------------------------------------------------------------------------
# Linguistic corpus
# ---------------------------------------------------------------------------

@dataclass
class CorpusWindow:
    index: int
    text: str
    ids: List[int]


class CorpusSplitManifest(BaseModel):
    corpus_hash: str
    window_len: int
    train_windows: int
    heldout_windows: int
    heldout_hash: str


def read_corpus_text(path: PathLike) -> str:
    """Decoded file text, character for character (line endings included); unknown characters encode to [UNK]"""
    try:
        text = read_bytes(path).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DataError(f"corpus {path} is not valid UTF-8 text") from exc
    if not text:
        raise DataError(f"corpus {path} is empty")
    return text


def corpus_windows(text: str, window_len: int, vocab: Vocabulary) -> List[CorpusWindow]:
    """Consecutive windows with stride window_len; a trailing partial window is dropped"""
    if window_len <= 0:
        raise ConfigError(f"window_len must be positive, got {window_len}")
    windows = []
    for index, start in enumerate(range(0, len(text) - window_len + 1, window_len)):
        chunk = text[start:start + window_len]
        windows.append(CorpusWindow(index=index, text=chunk, ids=encode(chunk, vocab)))
    return windows


def mask_window(window: CorpusWindow, vocab: Vocabulary, mask_fraction: float, key: str) -> CorpusSample:
    """Mask floor(mask_fraction * maskable) positions (at least one); [UNK] is never a target"""
    candidates = [i for i, t in enumerate(window.ids) if t not in (vocab.pad_id, vocab.unk_id)]
    if not candidates:
        raise DataError(f"corpus window {window.index} has no maskable characters")
    count = min(len(candidates), max(1, math.floor(mask_fraction * len(candidates))))
    rng = random.Random(f"{key}:{window.index}")
    positions = sorted(rng.sample(candidates, count))
    masked = list(window.ids)
    for p in positions:
        masked[p] = vocab.mask_id
    return CorpusSample(
        input_ids=masked,
        masked_positions=positions,
        target_ids=[window.ids[p] for p in positions],
        window_index=window.index,
    )


def load_corpus(
    path: PathLike,
    window_len: int,
    vocab: Vocabulary,
    mask_fraction: float = 0.15,
    seed: int = 0,
) -> Iterator[CorpusSample]:
    """Stream masked windows of a plain-text file"""
    text = read_corpus_text(path)
    for window in corpus_windows(text, window_len, vocab):
        yield mask_window(window, vocab, mask_fraction, key=f"{seed}")


def windows_hash(windows: Sequence[CorpusWindow]) -> str:
    return sha256_text("\n".join(w.text for w in windows))


def split_corpus(
    windows: Sequence[CorpusWindow], heldout_fraction: float = 0.1
) -> Tuple[List[CorpusWindow], List[CorpusWindow], CorpusSplitManifest]:
    """Hold out the tail windows for the retention probe"""
    if not 0 < heldout_fraction < 1:
        raise ConfigError(f"heldout_fraction must lie in (0, 1), got {heldout_fraction}")
    if len(windows) < 2:
        raise DataError(f"corpus yields {len(windows)} window(s); at least 2 are needed to hold some out")
    n_heldout = max(1, math.floor(len(windows) * heldout_fraction))
    train = list(windows[:-n_heldout])
    heldout = list(windows[-n_heldout:])
    manifest = CorpusSplitManifest(
        corpus_hash=windows_hash(windows),
        window_len=len(windows[0].text),
        train_windows=len(train),
        heldout_windows=len(heldout),
        heldout_hash=windows_hash(heldout),
    )
    return train, heldout, manifest


def write_split_manifest(path: PathLike, manifest: CorpusSplitManifest) -> None:
    write_model_json(path, manifest)


def read_split_manifest(path: PathLike) -> CorpusSplitManifest:
    return read_model_json(path, CorpusSplitManifest)
