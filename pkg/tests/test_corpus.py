import json

import numpy as np
import pytest

from slotgen.corpus import (
    CorpusSpec,
    FeatureSynthesizer,
    bucket_name,
    default_spec,
    dialogues_from_manifest,
    generate_corpus,
    read_manifest,
    split_zero_shot,
    synth_features,
    train_counts,
    write_manifest,
)
from slotgen.tokenizer import build_vocab


def tiny_spec(seed=0, **overrides):
    base = dict(
        slots=["person", "city"],
        entities={"person": ["soha", "mario", "ada"], "city": ["oslo", "lima"]},
        templates={"person": ["call {} now", "text {} please"],
                   "city": ["weather in {}"]},
        filler_templates=["what time is it", "never mind"],
        freq_plan={"soha": 3, "mario": 2, "ada": 0, "oslo": 1, "lima": 0},
        n_train=20, n_valid=6, n_test=18, n_valid_entity=0,
        test_occurrences={"0": 2, "1": 2, "2-4": 2, "5-29": 2, "30+": 2},
        n_dialogues=4, dialogue_split=(2, 1, 1),
        seed=seed,
    )
    base.update(overrides)
    return CorpusSpec(**base)


def test_plan_counts_exact():
    corpus = generate_corpus(tiny_spec())
    counts = train_counts(corpus.train)
    assert counts.get("soha", 0) == 3
    assert counts.get("mario", 0) == 2
    assert counts.get("ada", 0) == 0
    assert counts.get("oslo", 0) == 1


def test_unseen_entity_in_test_only():
    corpus = generate_corpus(tiny_spec())
    assert all("ada" not in u.transcript for u in corpus.train)
    assert any(("person", "ada") in u.gold for u in corpus.test)


def test_determinism_byte_identical(tmp_path):
    a, b = generate_corpus(tiny_spec(seed=5)), generate_corpus(tiny_spec(seed=5))
    pa, pb = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_manifest(pa, a.train + a.valid + a.test)
    write_manifest(pb, b.train + b.valid + b.test)
    assert pa.read_bytes() == pb.read_bytes()


def test_gold_in_transcript_property():
    corpus = generate_corpus(default_spec(seed=1))
    for utt in corpus.train + corpus.valid + corpus.test:
        words = utt.transcript.split()
        for _, value in utt.gold:
            vw = value.split()
            assert any(words[i:i + len(vw)] == vw for i in range(len(words) - len(vw) + 1)), (
                utt.transcript, value)


def test_bucket_integrity():
    corpus = generate_corpus(default_spec(seed=2))
    counts = train_counts(corpus.train)
    for utt in corpus.test:
        for _, value in utt.gold:
            assert utt.bucket == bucket_name(counts.get(value, 0))


def test_default_spec_sizes():
    corpus = generate_corpus(default_spec(seed=0))
    assert len(corpus.train) == 3000
    assert len(corpus.valid) == 300
    assert len(corpus.test) == 500
    assert len(corpus.kb.slots) == 5
    assert sum(len(v) for v in corpus.kb.entities.values()) == 60
    n_dlg = (len(corpus.dialogues_train) + len(corpus.dialogues_valid)
             + len(corpus.dialogues_test))
    assert n_dlg == 300
    assert all(2 <= len(d.turns) <= 4 for d in corpus.dialogues_train)


def test_unrealizable_plan_reports_entities():
    spec = tiny_spec()
    spec.freq_plan["ghost"] = 2
    with pytest.raises(ValueError, match="ghost"):
        generate_corpus(spec)


def test_plan_exceeding_budget():
    spec = tiny_spec(n_train=3)
    with pytest.raises(ValueError, match="budget"):
        generate_corpus(spec)


# ----------------------------------------------------------------- features

def test_features_deterministic_with_zero_sigma():
    v = build_vocab(["hello world"])
    a = synth_features("hello world", v, seed_global=3, sigma=0.0)
    b = synth_features("hello world", v, seed_global=3, sigma=0.0)
    assert np.array_equal(a, b)


def test_features_frame_count():
    v = build_vocab(["hello world"])
    n = len(v.encode_text("hello world"))
    feats = synth_features("hello world", v, seed_global=3)
    assert feats.shape == (3 * n, 16)


def test_features_distinct_prototypes():
    v = build_vocab(["abcdefghij"])
    synth = FeatureSynthesizer(v, seed=0)
    protos = synth.prototypes
    for i in range(len(v)):
        for j in range(i + 1, len(v)):
            assert np.linalg.norm(protos[i] - protos[j]) > 0


def test_features_noise_varies_per_utterance():
    v = build_vocab(["hello"])
    synth = FeatureSynthesizer(v, seed=0, sigma=0.1)
    a = synth.features("hello", "utt-a")
    b = synth.features("hello", "utt-b")
    assert not np.array_equal(a, b)
    assert np.array_equal(a, synth.features("hello", "utt-a"))


def test_homophone_pairs_near_identical():
    v = build_vocab(["cat kat"])
    plain = FeatureSynthesizer(v, seed=0)
    homo = FeatureSynthesizer(v, seed=0, homophone_pairs=[("c", "k")], homophone_eps=0.05)
    c, k = v.index["c"], v.index["k"]
    assert np.linalg.norm(plain.prototypes[c] - plain.prototypes[k]) > 1.0
    assert np.linalg.norm(homo.prototypes[c] - homo.prototypes[k]) < 0.5


# ---------------------------------------------------------------- zero-shot

def test_zero_shot_split_partition():
    corpus = generate_corpus(tiny_spec())
    train2, test2 = split_zero_shot(corpus.train, corpus.kb, ["city"])
    assert len(train2) + len(test2) == len(corpus.train)
    assert all(all(s != "city" for s, _ in u.gold) for u in train2)
    assert all(any(s == "city" for s, _ in u.gold) or "oslo" in u.transcript
               or "lima" in u.transcript for u in test2)


def test_zero_shot_absent_slot():
    corpus = generate_corpus(tiny_spec())
    spec2 = tiny_spec()
    spec2.entities["person"].append("nobody")
    # a slot whose entities never occur in the data
    kb = corpus.kb
    kb.entities["empty"] = []
    kb.slots.append("empty")
    train2, test2 = split_zero_shot(corpus.train, kb, ["empty"])
    assert train2 == corpus.train and test2 == []


def test_zero_shot_all_slots_leaves_fillers():
    corpus = generate_corpus(tiny_spec())
    train2, test2 = split_zero_shot(corpus.train, corpus.kb, corpus.kb.slots)
    assert all(u.gold == [] for u in train2)


def test_zero_shot_unknown_slot():
    corpus = generate_corpus(tiny_spec())
    with pytest.raises(ValueError, match="unknown slots"):
        split_zero_shot(corpus.train, corpus.kb, ["nope"])


# ---------------------------------------------------------------- manifests

def test_manifest_roundtrip(tmp_path):
    corpus = generate_corpus(tiny_spec())
    path = tmp_path / "m.jsonl"
    write_manifest(path, corpus.test)
    back = read_manifest(path)
    assert back == corpus.test


def test_manifest_field_order(tmp_path):
    corpus = generate_corpus(tiny_spec())
    path = tmp_path / "m.jsonl"
    write_manifest(path, corpus.test[:1])
    rec = json.loads(path.read_text().splitlines()[0])
    assert list(rec)[:3] == ["id", "transcript", "gold"]


def test_dialogue_states_cumulative_and_canonical():
    corpus = generate_corpus(default_spec(seed=3))
    for dlg in corpus.dialogues_test:
        state = {}
        for turn, expected in zip(dlg.turns, dlg.gold_states):
            for slot, value in turn.gold:
                state[slot] = corpus.kb.canonical(value)
            assert state == expected


def test_dialogues_from_manifest_roundtrip(tmp_path):
    corpus = generate_corpus(default_spec(seed=3))
    utts = [t for d in corpus.dialogues_test for t in d.turns]
    path = tmp_path / "dlg.jsonl"
    write_manifest(path, utts)
    rebuilt = dialogues_from_manifest(read_manifest(path), corpus.kb)
    assert len(rebuilt) == len(corpus.dialogues_test)
    by_id = {d.dialogue_id: d for d in rebuilt}
    for d in corpus.dialogues_test:
        assert by_id[d.dialogue_id].gold_states == d.gold_states
