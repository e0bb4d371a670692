"""Corpus format, relabeling, vocabulary, generator, split and batching."""

import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stman import corpus as cp


def make_dialogue(did="d1", sat="met", rows=(("user", "hello there", "neutral"),)):
    utts = [cp.Utterance(sp, toks.split(), sen) for sp, toks, sen in rows]
    return cp.Dialogue(did, sat, utts)


# ----------------------------------------------------------------- parsing


def test_parse_two_line_file(tmp_path):
    path = tmp_path / "c.jsonl"
    cp.write_corpus([make_dialogue("a"), make_dialogue("b")], path)
    got = cp.parse_corpus(path)
    assert [d.id for d in got] == ["a", "b"]


def test_roundtrip_is_identity(tmp_path):
    dialogues = cp.generate_synthetic(25, 0.8, seed=3)
    path = tmp_path / "c.jsonl"
    cp.write_corpus(dialogues, path)
    assert cp.parse_corpus(path) == dialogues


def test_unknown_satisfaction_names_allowed_set(tmp_path):
    path = tmp_path / "c.jsonl"
    rec = {"id": "x", "satisfaction": "ok",
           "utterances": [{"speaker": "user", "tokens": ["hi"], "sentiment": "neutral"}]}
    path.write_text(json.dumps(rec) + "\n")
    with pytest.raises(cp.ParseError) as exc:
        cp.parse_corpus(path)
    msg = str(exc.value)
    assert "line 1" in msg
    for label in ("unsatisfied", "met", "well_satisfied"):
        assert label in msg


@pytest.mark.parametrize("mutate, needle", [
    (lambda r: r.update(utterances=[]), "non-empty list"),
    (lambda r: r["utterances"][0].update(tokens=[]), "tokens"),
    (lambda r: r["utterances"][0].update(speaker="bot"), "speaker"),
    (lambda r: r["utterances"][0].update(sentiment="meh"), "sentiment"),
    (lambda r: r.pop("id"), "id"),
])
def test_parse_rejects_bad_records(tmp_path, mutate, needle):
    rec = {"id": "x", "satisfaction": "met",
           "utterances": [{"speaker": "user", "tokens": ["hi"], "sentiment": "neutral"}]}
    mutate(rec)
    path = tmp_path / "c.jsonl"
    path.write_text(json.dumps(rec) + "\n")
    with pytest.raises(cp.ParseError, match=needle):
        cp.parse_corpus(path)


def test_parse_reports_line_number_of_bad_json(tmp_path):
    path = tmp_path / "c.jsonl"
    good = {"id": "x", "satisfaction": "met",
            "utterances": [{"speaker": "user", "tokens": ["hi"], "sentiment": "neutral"}]}
    path.write_text(json.dumps(good) + "\n{oops\n")
    with pytest.raises(cp.ParseError, match="line 2"):
        cp.parse_corpus(path)


# -------------------------------------------------------------- relabeling


def test_relabel_alternating_with_repeat():
    roles = ["U", "S", "U", "S", "U", "S", "U", "U", "S"]
    assert cp.relabel_speaker_turns(roles) == [0, 1, 0, 1, 0, 1, 0, 0, 1]


def test_relabel_trivial_cases():
    assert cp.relabel_speaker_turns(["U"]) == [0]
    assert cp.relabel_speaker_turns(["U", "U", "U"]) == [0, 0, 0]
    with pytest.raises(ValueError):
        cp.relabel_speaker_turns([])


@given(st.lists(st.sampled_from(["user", "staff"]), min_size=1, max_size=30))
def test_relabel_parity_counts_role_changes(roles):
    flags = cp.relabel_speaker_turns(roles)
    assert len(flags) == len(roles)
    changes = 0
    for t in range(len(roles)):
        if t > 0 and roles[t] != roles[t - 1]:
            changes += 1
        assert flags[t] == changes % 2


# -------------------------------------------------------------- vocabulary


def test_vocab_min_count_threshold():
    d = make_dialogue(rows=(("user", "a a b", "neutral"),))
    vocab = cp.build_vocab([d], min_count=2)
    assert "a" in vocab and "b" not in vocab
    assert vocab.id_of("b") == cp.UNK_ID
    assert vocab.id_of("a") == 2


def test_vocab_min_count_one_keeps_all():
    d = make_dialogue(rows=(("user", "a a b", "neutral"),))
    vocab = cp.build_vocab([d], min_count=1)
    assert "a" in vocab and "b" in vocab


def test_vocab_order_frequency_desc_then_lexicographic():
    d = make_dialogue(rows=(("user", "b b c a a z", "neutral"),))
    vocab = cp.build_vocab([d])
    # a and b tie at count 2 -> lexicographic; then c and z tie at 1
    assert [tok for tok, _ in vocab.items()] == ["a", "b", "c", "z"]
    assert [i for _, i in vocab.items()] == [2, 3, 4, 5]


def test_vocab_deterministic_assignment():
    dialogues = cp.generate_synthetic(30, 0.9, seed=11)
    v1 = cp.build_vocab(dialogues)
    v2 = cp.build_vocab(list(dialogues))
    assert v1.items() == v2.items()


def test_vocab_save_load_roundtrip(tmp_path):
    vocab = cp.build_vocab(cp.generate_synthetic(20, 0.5, seed=1))
    path = tmp_path / "vocab.tsv"
    cp.save_vocab(vocab, path)
    assert cp.load_vocab(path).items() == vocab.items()


# --------------------------------------------------------------- generator


def final_user_sentiment(d):
    for u in reversed(d.utterances):
        if u.speaker == "user":
            return u.sentiment
    raise AssertionError("dialogue without user utterance")


def test_generator_same_seed_byte_identical(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    cp.write_corpus(cp.generate_synthetic(50, 0.7, seed=42), a)
    cp.write_corpus(cp.generate_synthetic(50, 0.7, seed=42), b)
    assert a.read_bytes() == b.read_bytes()
    assert len(a.read_bytes()) > 0


def test_generator_structural_contracts():
    dialogues = cp.generate_synthetic(80, 0.5, seed=5)
    assert len(dialogues) == 80
    assert len({d.id for d in dialogues}) == 80
    for d in dialogues:
        assert 4 <= len(d.utterances) <= 14
        assert d.utterances[0].speaker == "user"
        for u in d.utterances:
            assert 3 <= len(u.tokens) <= 8
            assert u.sentiment in cp.SENTIMENTS
    assert cp.generate_synthetic(0, 0.5, seed=5) == []
    with pytest.raises(ValueError):
        cp.generate_synthetic(5, 1.5, seed=0)


def test_generator_q1_final_sentiment_is_exact():
    dialogues = cp.generate_synthetic(300, 1.0, seed=9)
    hits = sum(
        d.satisfaction == cp.canonical_satisfaction(final_user_sentiment(d))
        for d in dialogues
    )
    assert hits == 300


def test_generator_q1_label_marginals_match():
    dialogues = cp.generate_synthetic(400, 1.0, seed=13)
    sat_counts = {s: 0 for s in cp.SATISFACTIONS}
    sent_counts = {s: 0 for s in cp.SENTIMENTS}
    for d in dialogues:
        sat_counts[d.satisfaction] += 1
        sent_counts[final_user_sentiment(d)] += 1
    for sent, sat in zip(cp.SENTIMENTS, cp.SATISFACTIONS):
        assert sent_counts[sent] == sat_counts[sat]


def test_generator_q08_agreement_by_counting():
    dialogues = cp.generate_synthetic(1000, 0.8, seed=21)
    agree = 0
    for d in dialogues:
        if d.satisfaction == cp.canonical_satisfaction(final_user_sentiment(d)):
            agree += 1
    assert 0.76 <= agree / 1000 <= 0.84


# ------------------------------------------------------------------ splits


def test_split_disjoint_exhaustive_and_sized():
    dialogues = cp.generate_synthetic(600, 0.9, seed=2)
    split = cp.split_corpus(dialogues, seed=7)
    assert len(split.dev) == 60 and len(split.test) == 60 and len(split.train) == 480
    ids = [d.id for part in (split.train, split.dev, split.test) for d in part]
    assert sorted(ids) == sorted(d.id for d in dialogues)
    again = cp.split_corpus(dialogues, seed=7)
    assert [d.id for d in again.dev] == [d.id for d in split.dev]
    other = cp.split_corpus(dialogues, seed=8)
    assert [d.id for d in other.dev] != [d.id for d in split.dev]


# ---------------------------------------------------------------- batching


def test_batchify_single_dialogue_large_batch():
    dialogues = cp.generate_synthetic(1, 0.9, seed=4)
    vocab = cp.build_vocab(dialogues)
    batches = cp.batchify(dialogues, vocab, 32)
    assert len(batches) == 1 and batches[0].size == 1


def test_batchify_padding_and_masks():
    d1 = make_dialogue("a", "met", (("user", "x y", "neutral"),
                                    ("staff", "p", "neutral")))
    d2 = make_dialogue("b", "well_satisfied", (("user", "x y z w", "positive"),))
    vocab = cp.build_vocab([d1, d2])
    (batch,) = cp.batchify([d1, d2], vocab, 8)
    assert batch.ids.shape == (2, 2, 4)
    # second dialogue has one utterance: the second row is an all-PAD placeholder
    assert not batch.utt_valid[1, 1]
    assert np.all(batch.ids[1, 1] == cp.PAD_ID)
    assert not batch.tok_valid[1, 1].any()
    # token padding inside a real utterance
    assert batch.ids[0, 1, 0] != cp.PAD_ID
    assert np.all(batch.ids[0, 1, 1:] == cp.PAD_ID)
    assert batch.tok_valid[0, 1, 0] and not batch.tok_valid[0, 1, 1:].any()
    # roles, turns, labels
    assert batch.is_user[0, 0] and not batch.is_user[0, 1]
    assert list(batch.turn[0]) == [0, 1]
    assert batch.sat[1] == cp.SATISFACTIONS.index("well_satisfied")
    assert batch.sent[0, 1] == cp.SENTIMENTS.index("neutral")


def test_batchify_chunking_preserves_order():
    dialogues = cp.generate_synthetic(10, 0.9, seed=6)
    vocab = cp.build_vocab(dialogues)
    batches = cp.batchify(dialogues, vocab, 4)
    assert [b.size for b in batches] == [4, 4, 2]
    flat = [did for b in batches for did in b.dialogue_ids]
    assert flat == [d.id for d in dialogues]
