"""
Tests for arithmetic data and the linguistic corpus

Covers:
- exact example construction and canonical text
- seeded generation inside the configured operand range
- stratified splitting and n/4 subsampling
- result masking, dataset files and their integrity checks
- corpus windows, masking counts and the held-out split
"""

import pytest
import os
import sys
from decimal import Decimal

# Add parent directory to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from skill_lab.data import (
    GenConfig,
    NumeralRange,
    collate,
    corpus_windows,
    generate,
    load_corpus,
    make_example,
    manifest_path,
    mask_result,
    mask_window,
    operand_decade,
    parse_example,
    place_values,
    read_corpus_text,
    read_dataset,
    split_corpus,
    split_stratified,
    subsample,
    write_dataset,
)
from skill_lab.errors import ConfigError, DataError, IntegrityError
from skill_lab.model import arithmetic_vocabulary, default_vocabulary


@pytest.mark.unit_test
def test_example_text_and_result_span():
    example = make_example("61176.23", "-", "46741.95")
    assert example.text == "61176.23 - 46741.95 = 14434.28", f"Example text test failed: {example.text!r}"
    assert example.result == Decimal("14434.28")
    assert example.result_text == "14434.28"
    assert example.prompt == "61176.23 - 46741.95 = " + "[MASK]" * 8


@pytest.mark.unit_test
def test_subtraction_swaps_operands_to_stay_non_negative():
    example = make_example("1.00", "-", "5.00")
    assert example.text == "5.00 - 1.00 = 4.00"


@pytest.mark.unit_test
def test_parse_example_rejects_non_canonical_text():
    assert parse_example("12.50 + 0.75 = 13.25").result == Decimal("13.25")
    with pytest.raises(DataError):
        parse_example("12.5 + 0.75 = 13.25")
    with pytest.raises(DataError):
        parse_example("two plus two")


@pytest.mark.unit_test
def test_generation_is_seeded_and_in_range():
    config = GenConfig(range=NumeralRange(lo=1, hi=8000), count=300, seed=7)
    first = generate(config)
    assert [e.text for e in first] == [e.text for e in generate(config, workers=3)]
    assert len(first) == 300
    for example in first:
        assert config.range.contains(example.operand_a) and config.range.contains(example.operand_b)
        assert example.range_label == "[1,8000)"
        check = example.operand_a + example.operand_b if example.operator == "+" else example.operand_a - example.operand_b
        assert check == example.result, f"Exact arithmetic test failed for {example.text}"
        assert example.result >= 0


@pytest.mark.unit_test
def test_numeral_range_validation():
    with pytest.raises(ValueError):
        NumeralRange(lo=10, hi=5)
    assert NumeralRange(lo=8000, hi=10_000).overlaps(NumeralRange(lo=1, hi=8000)) is False


@pytest.mark.unit_test
def test_split_keeps_disjoint_expressions():
    examples = [make_example(f"{1000 + i}.00", "+", "1.00") for i in range(100)]
    train, validation = split_stratified(examples + examples[:5], val_fraction=0.1, seed=1)
    assert (len(train), len(validation)) == (90, 10), f"Split size test failed: {len(train)}/{len(validation)}"
    assert not {e.text for e in train} & {e.text for e in validation}


@pytest.mark.unit_test
def test_split_puts_every_decade_in_both_parts():
    examples = [make_example(f"{base + i}.00", "+", "1.00") for base in (10, 100, 1000) for i in range(20)]
    train, validation = split_stratified(examples, val_fraction=0.25, seed=0)
    decades = {operand_decade(e) for e in examples}
    assert {operand_decade(e) for e in train} == decades
    assert {operand_decade(e) for e in validation} == decades, "Stratification test failed"


@pytest.mark.unit_test
def test_split_rejects_bad_fraction():
    examples = [make_example(f"{1000 + i}.00", "+", "1.00") for i in range(10)]
    with pytest.raises(ConfigError):
        split_stratified(examples, val_fraction=1.5)


@pytest.mark.unit_test
def test_subsample_takes_a_quarter():
    items = list(range(165_000))
    picked = subsample(items, 0.25, seed=0)
    assert len(picked) == 41_250, f"Subsample size test failed: {len(picked)}"
    assert picked == sorted(picked)
    assert picked == subsample(items, 0.25, seed=0)


@pytest.mark.unit_test
def test_mask_result_masks_exactly_the_result():
    vocab = arithmetic_vocabulary()
    example = make_example("61176.23", "-", "46741.95")
    instance = mask_result(example, vocab)
    assert instance.masked_positions == list(range(22, 30))
    assert vocab.decode(instance.target_ids) == "14434.28"
    assert vocab.decode(instance.input_ids[:22]) == "61176.23 - 46741.95 = "
    assert all(instance.input_ids[p] == vocab.mask_id for p in instance.masked_positions)
    assert vocab.decode(instance.unmask()) == example.text


@pytest.mark.unit_test
def test_place_values():
    assert place_values("14434.28") == [1e4, 1e3, 1e2, 10.0, 1.0, 0.0, 0.1, 0.01]


@pytest.mark.unit_test
def test_collate_flattens_masked_positions():
    vocab = arithmetic_vocabulary()
    batch = collate([mask_result(make_example("1.00", "+", "2.00"), vocab),
                     mask_result(make_example("10.00", "+", "20.00"), vocab)], vocab)
    assert batch.ids.shape == (2, len("10.00 + 20.00 = 30.00"))
    assert batch.batch_index.tolist() == [0] * 4 + [1] * 5
    assert batch.target_values.tolist() == [3.0, 30.0]


@pytest.mark.unit_test
def test_dataset_file_round_trip_and_tamper_check(tmp_path):
    config = GenConfig(range=NumeralRange(lo=1, hi=8000), count=20, seed=2)
    examples = generate(config)
    path = tmp_path / "train.txt"
    write_dataset(path, examples, config)
    loaded, manifest = read_dataset(path)
    assert [e.text for e in loaded] == [e.text for e in examples]
    assert manifest.count == 20 and manifest.range_label == "[1,8000)"
    assert manifest_path(path).exists()

    path.write_text(path.read_text() + "1.00 + 1.00 = 2.00\n")
    with pytest.raises(IntegrityError):
        read_dataset(path)


@pytest.mark.unit_test
def test_corpus_windows_drop_the_partial_tail():
    vocab = default_vocabulary()
    assert len(corpus_windows("a" * 640, 64, vocab)) == 10
    assert len(corpus_windows("a" * 650, 64, vocab)) == 10


@pytest.mark.unit_test
def test_mask_window_count_and_determinism():
    vocab = default_vocabulary()
    window = corpus_windows("abcdefghij" * 6, 60, vocab)[0]
    sample = mask_window(window, vocab, 0.15, key="0")
    assert len(sample.masked_positions) == 9, f"Mask count test failed: {len(sample.masked_positions)}"
    assert sample.masked_positions == mask_window(window, vocab, 0.15, key="0").masked_positions
    assert vocab.decode(sample.unmask()) == window.text


@pytest.mark.unit_test
def test_mask_window_masks_at_least_one_character():
    vocab = default_vocabulary()
    window = corpus_windows("abc", 3, vocab)[0]
    assert len(mask_window(window, vocab, 0.15, key="0").masked_positions) == 1


@pytest.mark.unit_test
def test_split_corpus_holds_out_the_tail():
    vocab = default_vocabulary()
    windows = corpus_windows("".join(chr(97 + i % 26) for i in range(640)), 64, vocab)
    train, heldout, manifest = split_corpus(windows, 0.1)
    assert (len(train), len(heldout)) == (9, 1)
    assert heldout[0].index == 9
    assert manifest.heldout_windows == 1 and manifest.window_len == 64


@pytest.mark.unit_test
def test_generation_properties_over_ten_thousand_examples():
    vocab = arithmetic_vocabulary()
    train_config = GenConfig(range=NumeralRange(lo=1, hi=8000), count=10_000, seed=3)
    ood_config = GenConfig(range=NumeralRange(lo=8000, hi=10_000), count=2_000, seed=4)
    train = generate(train_config, workers=4)
    ood = generate(ood_config)
    assert not train_config.range.overlaps(ood_config.range)
    assert all(train_config.range.contains(e.operand_a) and train_config.range.contains(e.operand_b) for e in train)
    assert all(not train_config.range.contains(max(e.operand_a, e.operand_b)) for e in ood)
    for example in train + ood:
        assert vocab.decode(mask_result(example, vocab).unmask()) == example.text
    regenerated = "".join(e.text + "\n" for e in generate(train_config))
    assert regenerated == "".join(e.text + "\n" for e in train), "Regeneration test failed"


@pytest.mark.unit_test
def test_load_corpus_windows_the_file_as_written(tmp_path):
    vocab = default_vocabulary()
    path = tmp_path / "corpus.txt"
    path.write_bytes(("a" * 639 + "\n").encode("utf-8"))
    samples = list(load_corpus(path, 64, vocab, seed=0))
    assert len(samples) == 10, f"Corpus window count test failed: {len(samples)}"

    path.write_bytes(("ab  " * 160).encode("utf-8"))
    assert len(list(load_corpus(path, 64, vocab, seed=0))) == 10

    path.write_bytes(("x" * 63 + "\r\n").encode("utf-8"))
    assert len(read_corpus_text(path)) == 65
    last = list(load_corpus(path, 64, vocab, seed=0))[0]
    assert last.input_ids[-1] == vocab.unk_id
    assert 63 not in last.masked_positions, "[UNK] must never be a mask target"


@pytest.mark.unit_test
def test_load_corpus_rejects_empty_files(tmp_path):
    path = tmp_path / "empty.txt"
    path.write_bytes(b"")
    with pytest.raises(DataError):
        list(load_corpus(path, 64, default_vocabulary()))


@pytest.mark.unit_test
def test_single_example_decade_stays_in_training(caplog):
    examples = [make_example(f"{1000 + i}.00", "+", "1.00") for i in range(20)]
    lone = make_example("15.00", "+", "1.00")
    with caplog.at_level("WARNING", logger="skill_lab.data"):
        train, validation = split_stratified(examples + [lone], val_fraction=0.1, seed=0)
    assert lone in train and lone not in validation, "Single-example decade test failed"
    assert len(validation) == 2
    assert "single example" in caplog.text
