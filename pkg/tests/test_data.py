import pytest
from pydantic import ValidationError

from app.core.exceptions import DataError
from app.crud.corpus import read_contrastive, read_split, write_contrastive, write_split
from app.data.bpe import apply_bpe, learn_bpe, undo_bpe
from app.data.synthetic import (
    contrastive_records,
    gen_corpus,
    segment_pair,
    split_sizes,
    translate_lexicon,
    zipf_probabilities,
)
from app.data.vocab import BOS_ID, EOS_ID, PAD_ID, UNK_ID, Vocabulary
from app.schemas.data import DataConfig, SentencePair, Task, TokenTag


def test_vocabulary_orders_by_frequency():
    """Test ordinary ids follow descending count with alphabetical ties"""
    vocab = Vocabulary.build([["b", "a", "a"], ["c", "a", "b"], ["d"]])
    assert vocab.itos[:4] == ["<pad>", "<s>", "</s>", "<unk>"]
    assert vocab.itos[4:] == ["a", "b", "c", "d"]
    assert vocab.frequency_rank(vocab.stoi["a"]) == 0
    assert vocab.frequency_rank(PAD_ID) == len(vocab)
    assert vocab.count(vocab.stoi["b"]) == 2


def test_vocabulary_encode_decode():
    """Test unknown tokens map to UNK and decoding stops at EOS"""
    vocab = Vocabulary.build([["a", "b"]])
    assert vocab.encode("a zz") == [vocab.stoi["a"], UNK_ID]
    assert vocab.decode([BOS_ID, vocab.stoi["a"], vocab.stoi["b"], EOS_ID, vocab.stoi["a"]]) == "a b"
    with pytest.raises(DataError):
        vocab.decode([99])


def test_vocabulary_save_load(tmp_path):
    """Test vocabulary persistence keeps tokens, counts and merges"""
    vocab = Vocabulary.build([["ab", "c"]], merges=[("a", "b</w>")])
    vocab.save(tmp_path / "vocab.json")
    loaded = Vocabulary.load(tmp_path / "vocab.json")
    assert loaded.itos == vocab.itos
    assert loaded.counts == vocab.counts
    assert loaded.merges == [("a", "b</w>")]


def test_vocabulary_missing_file(tmp_path):
    """Test loading a missing vocabulary names the path"""
    with pytest.raises(DataError) as info:
        Vocabulary.load(tmp_path / "nope.json")
    assert "nope.json" in info.value.message


def test_bpe_learns_frequent_pairs_until_threshold():
    """Test merge learning stops when the best pair falls below the threshold"""
    merges = learn_bpe(["ab ab ab", "abc"], n_merges=10, vocab_threshold=2)
    assert merges == [("a", "b</w>")]


def test_bpe_ties_pick_smallest_pair():
    """Test equally frequent pairs are merged in sorted order"""
    assert learn_bpe(["xy yz"], n_merges=1, vocab_threshold=1) == [("x", "y</w>")]


def test_apply_and_undo_bpe():
    """Test segmentation marks continued units and undo restores the words"""
    merges = [("a", "b</w>")]
    segmented = apply_bpe("ab abc", merges)
    assert segmented == "ab a@@ b@@ c"
    assert undo_bpe(segmented) == "ab abc"


def test_bpe_empty_corpus():
    """Test learning from an empty corpus is a data error"""
    with pytest.raises(DataError):
        learn_bpe([], 5)


def test_split_sizes():
    """Test split arithmetic including the minimum corpus"""
    assert split_sizes(12, 0.05, 0.05) == (10, 1, 1)
    with pytest.raises(DataError):
        split_sizes(2, 0.05, 0.05)


def test_data_config_rejects_tiny_corpus():
    """Test corpora below three sentences are rejected at validation"""
    with pytest.raises(ValidationError):
        DataConfig(size=2)


def test_zipf_probabilities_sum_to_one():
    """Test the Zipfian sampling distribution is normalized and decreasing"""
    p = zipf_probabilities(5, 1.0)
    assert p.sum() == pytest.approx(1.0)
    assert all(p[i] > p[i + 1] for i in range(4))


def test_gen_corpus_deterministic(copy_data_config):
    """Test the same seed yields the same corpus and another seed a different one"""
    a = gen_corpus(copy_data_config)
    b = gen_corpus(copy_data_config)
    c = gen_corpus(copy_data_config, seed=2)
    assert a.splits == b.splits
    assert a.splits != c.splits


def test_gen_corpus_unique_sources(copy_data_config):
    """Test all source sentences are distinct across splits"""
    corpus = gen_corpus(copy_data_config)
    sources = [tuple(p.src) for pairs in corpus.splits.values() for p in pairs]
    assert len(sources) == len(set(sources)) == 60
    assert corpus.sizes() == {"train": 48, "valid": 6, "test": 6}


def test_copy_and_reverse_tasks(copy_data_config):
    """Test copy targets equal sources and reverse targets are reversed"""
    for pair in gen_corpus(copy_data_config).splits["train"]:
        assert pair.tgt == pair.src
    for pair in gen_corpus(copy_data_config, task=Task.REVERSE).splits["train"]:
        assert pair.tgt == pair.src[::-1]


def test_lexicon_senses_follow_trigger(lexicon_data_config):
    """Test ambiguous words take sense 1 exactly when their trigger is present"""
    corpus = gen_corpus(lexicon_data_config)
    seen_ambiguous = False
    for pair in corpus.splits["train"]:
        for word, translated, tag in zip(pair.src, pair.tgt, pair.tgt_tags):
            if tag is TokenTag.AMBIGUOUS:
                seen_ambiguous = True
                index = word[1:]
                expected = "1" if f"g{index}" in pair.src else "2"
                assert translated == f"{word}'{expected}"
            else:
                assert translated == f"{word}'"
    assert seen_ambiguous


def test_translate_lexicon():
    """Test the gold lexicon translation"""
    assert translate_lexicon(["n1", "a0", "g0"]) == ["n1'", "a0'1", "g0'"]
    assert translate_lexicon(["a1", "g0"]) == ["a1'2", "g0'"]


def test_contrastive_records_flip_senses():
    """Test one record per ambiguous sentence with each sense flipped"""
    pair = SentencePair(
        src=["n1", "a0", "g0"],
        tgt=["n1'", "a0'1", "g0'"],
        src_tags=[TokenTag.CONTENT, TokenTag.AMBIGUOUS, TokenTag.TRIGGER],
        tgt_tags=[TokenTag.CONTENT, TokenTag.AMBIGUOUS, TokenTag.TRIGGER],
    )
    plain = SentencePair(src=["n1"], tgt=["n1'"], src_tags=[TokenTag.CONTENT], tgt_tags=[TokenTag.CONTENT])
    records = contrastive_records([pair, plain])
    assert len(records) == 1
    assert records[0].correct == "n1' a0'1 g0'"
    assert records[0].incorrect == ["n1' a0'2 g0'"]


def test_segment_pair_replicates_tags():
    """Test every subword inherits the tag of its word"""
    pair = SentencePair(src=["abc"], tgt=["ab"], src_tags=[TokenTag.TRIGGER], tgt_tags=[TokenTag.CONTENT])
    segmented = segment_pair(pair, [("a", "b</w>")])
    assert segmented.src == ["a@@", "b@@", "c"]
    assert segmented.src_tags == [TokenTag.TRIGGER] * 3
    assert segmented.tgt == ["ab"]


def test_split_files_round_trip(tmp_path, lexicon_data_config):
    """Test corpus splits and contrastive records persist with tags"""
    corpus = gen_corpus(lexicon_data_config)
    write_split(tmp_path, "test", corpus.splits["test"])
    assert read_split(tmp_path, "test") == corpus.splits["test"]
    records = contrastive_records(corpus.splits["train"])
    write_contrastive(tmp_path / "contrastive.jsonl", records)
    assert read_contrastive(tmp_path / "contrastive.jsonl") == records


def test_read_split_missing_file(tmp_path):
    """Test a missing reference file is reported with its path"""
    with pytest.raises(DataError) as info:
        read_split(tmp_path, "test")
    assert "test.src" in info.value.message
