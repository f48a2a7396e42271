"""
Shared lab configuration.

The entry point loads a TOML preset, applies `--set key=value` overrides and
calls set_config() once; every pipeline stage then reads the same effective
configuration through get_config().

Stage tracing goes to LangWatch when LANGWATCH_API_KEY is set and is a no-op
otherwise.
"""

import os
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Literal, Optional, Sequence

import dotenv
import langwatch
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from skill_lab.data import GenConfig, NumeralRange
from skill_lab.errors import ConfigError
from skill_lab.evaluate import EvalConfig
from skill_lab.model import ModelConfig, Vocabulary, arithmetic_vocabulary, default_vocabulary
from skill_lab.train import DEFAULT_LAMBDA2_GRID, TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

dotenv.load_dotenv()

OUTPUT_ROOT_ENV = "SKILL_LAB_OUTPUT_ROOT"
DEFAULT_CORPUS = Path(__file__).resolve().parent / "corpus" / "sample_corpus.txt"


class ModelSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    vocabulary: Literal["default", "arithmetic"] = "default"
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 128
    max_seq_len: int = 64
    init_std: float = 0.02
    dtype: Literal["float32", "float64"] = "float32"
    seed: int = 0

    def vocab(self) -> Vocabulary:
        return default_vocabulary() if self.vocabulary == "default" else arithmetic_vocabulary()

    def build(self, vocab: Vocabulary) -> ModelConfig:
        fields = self.model_dump(exclude={"vocabulary"})
        return ModelConfig(vocab_size=len(vocab), **fields)


class DataSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    train_range: NumeralRange = NumeralRange(lo=1, hi=8000)
    ood_ranges: List[NumeralRange] = Field(
        default_factory=lambda: [
            NumeralRange(lo=8000, hi=10_000),
            NumeralRange(lo=10_000, hi=100_000),
            NumeralRange(lo=100_000, hi=1_000_000),
        ]
    )
    operators: List[Literal["+", "-"]] = Field(default_factory=lambda: ["+", "-"])
    decimal_places: int = 2
    train_count: int = Field(default=16_000, gt=0)
    validation_count: int = Field(default=800, gt=0)
    ood_count: int = Field(default=500, gt=0)
    subsample_fraction: float = Field(default=0.25, gt=0, le=1)
    seed: int = 0
    workers: int = Field(default=1, ge=1)
    corpus: str = str(DEFAULT_CORPUS)
    window_len: int = Field(default=64, gt=0)
    heldout_fraction: float = Field(default=0.1, gt=0, lt=1)

    def gen_config(self, count: Optional[int] = None) -> GenConfig:
        return GenConfig(
            range=self.train_range,
            operators=self.operators,
            decimal_places=self.decimal_places,
            count=count or self.train_count + self.validation_count,
            seed=self.seed,
        )

    def ood_configs(self) -> List[GenConfig]:
        # offset seeds keep OOD draws independent of the training draw
        return [
            GenConfig(
                range=r,
                operators=self.operators,
                decimal_places=self.decimal_places,
                count=self.ood_count,
                seed=self.seed + 1 + i,
            )
            for i, r in enumerate(self.ood_ranges)
        ]


class FisherConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    sample_cap: int = Field(default=2048, ge=1)
    workers: int = Field(default=1, ge=1)
    overlap_n: int = Field(default=800, ge=1)


class SweepConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    grid: List[float] = Field(default_factory=lambda: list(DEFAULT_LAMBDA2_GRID))
    convergence_ce: float = Field(default=0.25, gt=0)
    workers: int = Field(default=1, ge=1)
    schedules: List[str] = Field(default_factory=lambda: ["off", "const-1e-3", "const-1e-4", "ema-slow", "ema-fast"])


class LabConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "desk_default"
    model: ModelSection = Field(default_factory=ModelSection)
    data: DataSection = Field(default_factory=DataSection)
    pretrain: TrainConfig = Field(
        default_factory=lambda: TrainConfig(phase="pretrain", lambda1_schedule="off", lambda2=0.0)
    )
    inject: TrainConfig = Field(default_factory=TrainConfig)
    fisher: FisherConfig = Field(default_factory=FisherConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)

    def with_seed(self, seed: int) -> "LabConfig":
        """Same config with every seed replaced"""
        raw = self.model_dump(mode="json")
        for section in ("model", "data", "pretrain", "inject"):
            raw[section]["seed"] = seed
        return LabConfig.model_validate(raw)


def parse_value(text: str) -> Any:
    """A TOML literal (number, bool, array, quoted string), else the raw text"""
    try:
        return tomllib.loads(f"value = {text}")["value"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(raw: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Apply dotted `section.key=value` overrides to a parsed config mapping"""
    for override in overrides:
        key, sep, value = override.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override {override!r} is not of the form key=value")
        node = raw
        parts = key.strip().split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {override!r}: {part!r} is not a section")
            node = child
        node[parts[-1]] = parse_value(value.strip())
    return raw


def _describe(exc: ValidationError) -> str:
    return "; ".join(f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors())


def load_config(path: Optional[str] = None, overrides: Sequence[str] = ()) -> LabConfig:
    raw: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "rb") as handle:
                raw = tomllib.load(handle)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config {path} is not valid TOML: {exc}") from exc
    raw = apply_overrides(raw, overrides)
    try:
        return LabConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration{f' in {path}' if path else ''}: {_describe(exc)}") from exc


_config: Optional[LabConfig] = None


def set_config(config: LabConfig) -> None:
    global _config
    _config = config


def get_config() -> LabConfig:
    if _config is None:
        raise RuntimeError("lab_config.set_config() must be called before running a pipeline stage")
    return _config


def output_root() -> Optional[Path]:
    value = os.getenv(OUTPUT_ROOT_ENV)
    return Path(value) if value else None


_tracing = False


def setup_tracing() -> bool:
    """Enable LangWatch stage tracing when an API key is configured"""
    global _tracing
    if not os.getenv("LANGWATCH_API_KEY"):
        return False
    langwatch.setup()
    _tracing = True
    return True


@contextmanager
def traced_stage(stage: str, **metadata: Any) -> Iterator[None]:
    if not _tracing:
        yield
        return
    with langwatch.trace(name=stage):
        langwatch.get_current_trace().update(metadata={"labels": [f"stage_{stage}"], **metadata})
        yield
