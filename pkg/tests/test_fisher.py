"""
Tests for Fisher estimation and cross-task overlap

Covers:
- estimate_fisher against a per-sample brute force, with and without workers
- sample caps, loss scaling and empty input
- score file round trip and corruption
- top-n selection with ties
- per-layer overlap on a hand-built two-layer manifest
"""

import pytest
import os
import sys

import numpy as np

# Add parent directory to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from skill_lab import numerics as nx
from skill_lab.data import GenConfig, NumeralRange, collate, generate, make_example, mask_result
from skill_lab.errors import ConfigError, DataError, IntegrityError
from skill_lab.fisher import (
    FisherScores,
    cross_task_overlap,
    estimate_fisher,
    fisher_blob_path,
    load_fisher,
    save_fisher,
    top_n,
)
from skill_lab.losses import ce_loss
from skill_lab.model import (
    MaskedLanguageModel,
    ModelConfig,
    ParameterManifest,
    SliceSpec,
    arithmetic_vocabulary,
    init_parameters,
)


def tiny_setup():
    vocab = arithmetic_vocabulary()
    config = ModelConfig(vocab_size=len(vocab), d_model=4, n_layers=1, n_heads=2, d_ff=8,
                         max_seq_len=24, seed=1, init_std=0.3, dtype="float64")
    model = MaskedLanguageModel(config, vocab)
    samples = [mask_result(make_example(a, op, b), vocab)
               for a, op, b in [("1.25", "+", "2.50"), ("9.00", "-", "3.75"), ("4.10", "+", "0.05")]]
    return model, init_parameters(config), samples


def brute_force_fisher(model, theta, samples):
    total = np.zeros(len(theta))
    for instance in samples:
        batch = collate([instance], model.vocab)
        record = nx.ComputationRecord()
        bound = theta.bind(record)
        logits = model.forward(batch.ids, bound)
        record.backward(ce_loss(logits, batch.targets, (batch.batch_index, batch.position_index)))
        grad = bound.flat_grad()
        total += grad * grad
    return total / len(samples)


def two_layer_manifest():
    return ParameterManifest(slices=[
        SliceSpec(name="layer.0.w", group="layer.0", offset=0, shape=(5,)),
        SliceSpec(name="layer.1.w", group="layer.1", offset=5, shape=(5,)),
    ])


@pytest.mark.unit_test
def test_estimate_matches_brute_force():
    model, theta, samples = tiny_setup()
    expected = brute_force_fisher(model, theta, samples)
    scores = estimate_fisher(model, theta, samples, task_id="arith")
    np.testing.assert_allclose(scores.values, expected, rtol=1e-12, atol=0)
    assert scores.sample_count == 3 and scores.task_id == "arith"
    assert scores.model_hash == theta.content_hash()
    assert np.all(scores.values >= 0)


@pytest.mark.unit_test
def test_estimate_matches_brute_force_on_sixty_four_samples():
    model, theta, _ = tiny_setup()
    examples = generate(GenConfig(range=NumeralRange(lo=1, hi=100), count=64, seed=5))
    samples = [mask_result(e, model.vocab) for e in examples]
    scores = estimate_fisher(model, theta, samples, workers=2)
    np.testing.assert_allclose(scores.values, brute_force_fisher(model, theta, samples), rtol=1e-6, atol=1e-15)
    assert scores.sample_count == 64, "Fisher sample count test failed"


@pytest.mark.unit_test
def test_workers_do_not_change_the_estimate():
    model, theta, samples = tiny_setup()
    single = estimate_fisher(model, theta, samples, workers=1)
    threaded = estimate_fisher(model, theta, samples, workers=2)
    np.testing.assert_allclose(threaded.values, single.values, rtol=1e-12, atol=0)


@pytest.mark.unit_test
def test_sample_cap_and_loss_scale():
    model, theta, samples = tiny_setup()
    capped = estimate_fisher(model, theta, samples, sample_cap=2)
    assert capped.sample_count == 2
    np.testing.assert_allclose(capped.values, brute_force_fisher(model, theta, samples[:2]), rtol=1e-12)

    scaled = estimate_fisher(model, theta, samples, loss_scale=2.0)
    np.testing.assert_allclose(scaled.values, 4 * brute_force_fisher(model, theta, samples), rtol=1e-10)


@pytest.mark.unit_test
def test_estimate_rejects_empty_input_and_bad_cap():
    model, theta, samples = tiny_setup()
    with pytest.raises(DataError):
        estimate_fisher(model, theta, [])
    with pytest.raises(ConfigError):
        estimate_fisher(model, theta, samples, sample_cap=0)


@pytest.mark.unit_test
def test_scores_validate_their_values():
    manifest = two_layer_manifest()
    with pytest.raises(IntegrityError):
        FisherScores(np.ones(9), manifest, task_id="t", sample_count=1)
    with pytest.raises(IntegrityError):
        FisherScores(-np.ones(10), manifest, task_id="t", sample_count=1)


@pytest.mark.unit_test
def test_score_file_round_trip_and_corruption(tmp_path):
    scores = FisherScores(np.arange(10, dtype=float), two_layer_manifest(), task_id="linguistic",
                          sample_count=4, model_hash="abc")
    path = save_fisher(tmp_path / "fisher.json", scores)
    loaded = load_fisher(path)
    np.testing.assert_array_equal(loaded.values, scores.values)
    assert (loaded.task_id, loaded.sample_count, loaded.model_hash) == ("linguistic", 4, "abc")
    assert loaded.manifest == scores.manifest

    blob = fisher_blob_path(path)
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(IntegrityError):
        load_fisher(path)


@pytest.mark.unit_test
def test_top_n_selection():
    assert top_n(np.array([3.0, 1.0, 2.0]), 2).tolist() == [0, 2], "Top-n test failed"
    assert top_n(np.array([1.0, 1.0, 1.0]), 2).tolist() == [0, 1], "Top-n tie test failed"
    assert top_n(np.array([3.0, 1.0, 2.0]), 3).tolist() == [0, 1, 2]
    with pytest.raises(ConfigError):
        top_n(np.array([3.0, 1.0]), 3)


@pytest.mark.unit_test
def test_per_layer_overlap_on_a_two_layer_manifest(tmp_path):
    manifest = two_layer_manifest()
    base = FisherScores(np.array([5, 1, 4, 2, 3, 0.1, 0.5, 0.2, 0.9, 0.3]), manifest, "linguistic", 1)
    other = FisherScores(np.array([0, 9, 1, 8, 2, 1, 8, 2, 3, 9], dtype=float), manifest, "arith", 1)
    report = cross_task_overlap(base, [other], n=2)

    assert report.global_indices.tolist() == [0, 2]
    layer0, layer1 = report.layer("layer.0"), report.layer("layer.1")
    assert layer0.indices.tolist() == [0, 2]
    assert layer0.other_scores["arith"].tolist() == [0.0, 1.0]
    assert layer0.overlap_count["arith"] == 0
    assert layer1.indices.tolist() == [6, 8]
    assert layer1.other_scores["arith"].tolist() == [8.0, 3.0]
    assert layer1.overlap_count["arith"] == 1, "Overlap count test failed"
    assert layer1.summary("arith") == {"mean": 5.5, "median": 5.5, "max": 8.0}

    detail, summary = report.write(tmp_path)
    lines = detail.read_text().splitlines()
    assert lines[0] == "layer,rank,param_index,base_score,score_arith"
    assert lines[1].startswith("layer.0,1,0,5.0,")
    assert lines[3].startswith("layer.1,1,8,0.9,")
    assert summary.name == "overlap_linguistic_summary.csv"


@pytest.mark.unit_test
def test_overlap_selects_whole_layer_when_n_is_large():
    manifest = two_layer_manifest()
    base = FisherScores(np.arange(10, dtype=float), manifest, "linguistic", 1)
    report = cross_task_overlap(base, [FisherScores(np.ones(10), manifest, "arith", 1)], n=800)
    assert report.layer("layer.0").indices.tolist() == [0, 1, 2, 3, 4]
    assert report.layer("layer.0").overlap_count["arith"] == 5


@pytest.mark.unit_test
def test_overlap_rejects_mismatched_manifests_and_duplicate_tasks():
    manifest = two_layer_manifest()
    base = FisherScores(np.ones(10), manifest, "linguistic", 1)
    model, theta, _ = tiny_setup()
    foreign = FisherScores(np.ones(len(theta)), theta.manifest, "arith", 1)
    with pytest.raises(IntegrityError):
        cross_task_overlap(base, [foreign], n=2)
    twin = FisherScores(np.ones(10), manifest, "arith", 1)
    with pytest.raises(ConfigError):
        cross_task_overlap(base, [twin, twin], n=2)
