"""
Pipeline tests for the skill injection lab - desk_default, bert_arith, skill_lm_no_ewc and skill_lm

Each seed pretrains one anchor on the corpus and computes its Fisher scores;
every configuration then injects arithmetic from a copy of that anchor and is
evaluated on the in-domain and OOD sets plus the held-out corpus probe.
These runs take minutes per seed; select them with `-m pipeline_test`.

Set SKILL_LAB_PIPELINE_CORPUS to pretrain on a larger text file than the
bundled sample corpus. The forgetting and retention checks only hold for a
corpus of at least 100 KB and are skipped without one.
"""
import pytest
import os
import shutil
import sys
from pathlib import Path

# Add parent directory to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from main_skill_lab import main
from skill_lab.artifacts import read_model_json
from skill_lab.evaluate import EvalReport, RetentionReport
from skill_lab.model import default_vocabulary
from skill_lab.train import SweepResult

ROOT = Path(__file__).resolve().parent.parent
CORPUS_ENV = "SKILL_LAB_PIPELINE_CORPUS"
SEEDS = (0, 1, 2)
IN_DOMAIN = "[1,8000)"
NEAR_OOD = "[8000,10000)"
MID_OOD = "[10000,100000)"
MIN_CORPUS_BYTES = 100_000


def _large_corpus() -> bool:
    corpus = os.getenv(CORPUS_ENV)
    return bool(corpus) and Path(corpus).is_file() and Path(corpus).stat().st_size >= MIN_CORPUS_BYTES


needs_large_corpus = pytest.mark.skipif(
    not _large_corpus(), reason=f"set {CORPUS_ENV} to a text file of at least {MIN_CORPUS_BYTES} bytes"
)


def _argv(out: Path, preset: str, seed: int, *command: str) -> list:
    argv = ["--config", str(ROOT / "configs" / f"{preset}.toml"), "--out", str(out), "--seed", str(seed), "--quiet"]
    corpus = os.getenv(CORPUS_ENV)
    if corpus:
        argv += ["--set", f'data.corpus="{corpus}"']
    return argv + list(command)


def _run(out: Path, preset: str, seed: int, *command: str) -> None:
    code = main(_argv(out, preset, seed, *command))
    assert code == 0, f"{preset} seed {seed} failed at {command[0]} with exit code {code}"


class PipelineRuns:
    """Anchors and configuration runs, built on first use and shared by every test in the module"""

    def __init__(self, root: Path):
        self.root = root
        self._done = set()

    def anchor(self, seed: int) -> Path:
        out = self.root / f"seed={seed}" / "anchor_run"
        if ("anchor", seed) not in self._done:
            for command in ("gen-data", "pretrain", "anchor"):
                _run(out, "desk_default", seed, command)
            self._done.add(("anchor", seed))
        return out

    def configuration(self, preset: str, seed: int) -> Path:
        out = self.root / f"seed={seed}" / preset
        if (preset, seed) in self._done:
            return out
        shutil.copytree(self.anchor(seed), out)
        if preset == "skill_lm":
            _run(out, preset, seed, "sweep")
            selected = self.sweep(preset, seed).selected
            assert selected is not None, f"skill_lm seed {seed}: no λ₂ in the sweep converged"
            _run(out, preset, seed, "inject", "--lambda2", repr(selected))
        else:
            _run(out, preset, seed, "inject")
        _run(out, preset, seed, "eval")
        self._done.add((preset, seed))
        return out

    def sweep(self, preset: str, seed: int) -> SweepResult:
        return read_model_json(self.root / f"seed={seed}" / preset / "sweep" / "sweep.json", SweepResult)

    def report(self, preset: str, seed: int) -> EvalReport:
        return EvalReport.read(self.configuration(preset, seed) / "eval")

    def retention(self, preset: str, seed: int) -> RetentionReport:
        return read_model_json(self.configuration(preset, seed) / "eval" / "retention.json", RetentionReport)


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    return PipelineRuns(tmp_path_factory.mktemp("pipeline"))


@pytest.mark.pipeline_test
@needs_large_corpus
@pytest.mark.parametrize("seed", SEEDS)
def test_bert_arith_forgets_linguistics(runs, seed):
    retention = runs.retention("bert_arith", seed)
    assert retention.accuracy_delta <= -0.10, (
        f"Forgetting test failed for seed {seed}: retention delta {retention.accuracy_delta:+.4f}"
    )


@pytest.mark.pipeline_test
@needs_large_corpus
@pytest.mark.parametrize("seed", SEEDS)
def test_selected_lambda2_recovers_retention(runs, seed):
    retention = runs.retention("skill_lm", seed)
    assert retention.accuracy_delta >= -0.03, (
        f"Retention recovery test failed for seed {seed}: retention delta {retention.accuracy_delta:+.4f}"
    )
    skill = runs.report("skill_lm", seed).accuracy(IN_DOMAIN)
    baseline = runs.report("bert_arith", seed).accuracy(IN_DOMAIN)
    assert skill >= 0.8 * baseline, (
        f"In-domain accuracy test failed for seed {seed}: skill_lm {skill:.4f} vs bert_arith {baseline:.4f}"
    )


@pytest.mark.pipeline_test
def test_ema_schedule_lowers_near_ood_decade_error(runs):
    wins = []
    for seed in SEEDS:
        with_reg = runs.report("skill_lm_no_ewc", seed).magnitudes[NEAR_OOD].mean_abs_decade_error
        without = runs.report("bert_arith", seed).magnitudes[NEAR_OOD].mean_abs_decade_error
        wins.append(with_reg is not None and without is not None and with_reg < without)
    assert sum(wins) >= 2, f"Decade error test failed: EMA schedule wins {wins} across seeds {SEEDS}"


@pytest.mark.pipeline_test
def test_skill_lm_predicts_the_modal_decade(runs):
    matches = [runs.report("skill_lm", seed).magnitudes[MID_OOD].mode_matches for seed in SEEDS]
    assert sum(matches) >= 2, f"Modal decade test failed: matches {matches} across seeds {SEEDS}"


@pytest.mark.pipeline_test
@needs_large_corpus
@pytest.mark.parametrize("seed", SEEDS)
def test_pretrained_anchor_beats_chance(runs, seed):
    chance = 1.0 / len(default_vocabulary())
    anchor = runs.retention("desk_default", seed).anchor.accuracy
    assert anchor > 5 * chance, f"Pretraining test failed for seed {seed}: masked-char accuracy {anchor:.4f}"


@pytest.mark.pipeline_test
@pytest.mark.parametrize("seed", SEEDS)
def test_desk_default_learns_in_domain_arithmetic(runs, seed):
    accuracy = runs.report("desk_default", seed).accuracy(IN_DOMAIN)
    assert accuracy > 0.9, f"In-domain accuracy test failed for seed {seed}: {accuracy:.4f}"
