import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slotgen.kb import (
    BiasingConfig,
    KnowledgeBase,
    build_prefix_tree,
    build_subtree,
    cursor_for,
    load_kb,
    load_aliases,
    sample_training_biasing,
    write_kb,
)
from slotgen.tokenizer import build_vocab


@pytest.fixture
def vocab():
    return build_vocab(["soha sophia mario rihanna a ab aab mario kart"])


# ---------------------------------------------------------------- load_kb

def test_load_kb_basic(tmp_path):
    p = tmp_path / "kb.tsv"
    p.write_text("# comment\nperson\tmario|soha|rihanna\ngame_name\tmario kart\n")
    kb = load_kb(p)
    assert kb.slots == ["person", "game_name"]
    assert kb.entities["person"] == ["mario", "soha", "rihanna"]
    assert kb.entities["game_name"] == ["mario kart"]


def test_load_kb_dedupes_and_empty_list(tmp_path):
    p = tmp_path / "kb.tsv"
    p.write_text("person\tsoha|soha|mario\nempty_slot\t\n")
    kb = load_kb(p)
    assert kb.entities["person"] == ["soha", "mario"]
    assert kb.entities["empty_slot"] == []


def test_load_kb_malformed_line_reports_number(tmp_path):
    p = tmp_path / "kb.tsv"
    p.write_text("person\tmario\nbadline\n")
    with pytest.raises(ValueError, match=":2:"):
        load_kb(p)


def test_load_kb_vocab_validation(tmp_path, vocab):
    p = tmp_path / "kb.tsv"
    p.write_text("person\tzz\n")
    with pytest.raises(ValueError, match="'z'"):
        load_kb(p, vocab=vocab)


def test_kb_roundtrip(tmp_path):
    kb = KnowledgeBase(slots=["a", "b"], entities={"a": ["x y", "z"], "b": []})
    write_kb(tmp_path / "kb.tsv", kb)
    back = load_kb(tmp_path / "kb.tsv")
    assert back.slots == kb.slots and back.entities == kb.entities


def test_aliases_idempotent(tmp_path):
    p = tmp_path / "alias.tsv"
    p.write_text("the derby\tderby restaurant\n")
    aliases = load_aliases(p)
    assert aliases["the derby"] == "derby restaurant"
    assert aliases["derby restaurant"] == "derby restaurant"


def test_aliases_non_idempotent_rejected():
    with pytest.raises(ValueError, match="idempotent"):
        KnowledgeBase(slots=["s"], entities={"s": []}, aliases={"a": "b", "b": "c"})


# ------------------------------------------------------------ prefix tree

def test_tree_shared_prefix(vocab):
    tree = build_prefix_tree(["soha", "sophia"], vocab, slot="person")
    s = vocab.encode_word("soha")[0]
    root_kids = tree.children[0]
    assert set(root_kids) == {s}
    so = tree.children[root_kids[s]]
    assert len(so) == 1  # 'o'
    o_node = next(iter(so.values()))
    assert len(tree.children[o_node]) == 2  # branch h / p
    assert tree.entities == {"soha", "sophia"}


def test_tree_single_char_entity(vocab):
    tree = build_prefix_tree(["a"], vocab)
    assert len(tree) == 2
    end = tree.children[0][vocab.encode_word("a")[0]]
    assert tree.entity_end[end] == "a"


def test_tree_empty(vocab):
    tree = build_prefix_tree([], vocab)
    assert len(tree) == 1 and tree.entities == set()


def test_tree_node_budget(vocab):
    ents = ["soha", "sophia", "mario"]
    tree = build_prefix_tree(ents, vocab)
    assert len(tree) <= 1 + sum(len(vocab.encode_text(e)) for e in ents)


def test_subtree_matches_fresh_tree(vocab):
    full = build_prefix_tree(sorted(["rihanna", "soha", "mario"]), vocab, slot="person")
    sub = build_subtree("person", {"rihanna", "soha"}, vocab)
    assert sub.entities == {"rihanna", "soha"}
    same = build_subtree("person", {"rihanna", "soha", "mario"}, vocab)
    assert same.signature() == full.signature()
    bare = build_subtree("person", set(), vocab)
    assert len(bare) == 1


# ---------------------------------------------------------------- cursor

def test_valid_next_examples(vocab):
    tree = build_prefix_tree(["soha", "sophia"], vocab, slot="person")
    cur = cursor_for(tree)
    for t in vocab.encode_text("soha")[:2]:
        cur, _ = cur.advance(t)
    assert cur.valid_next() == {vocab.index["h"], vocab.index["p"]}

    mario = build_prefix_tree(["mario"], vocab)
    assert cursor_for(mario).valid_next() == {vocab.index["m"]}


def test_valid_next_at_leaf(vocab):
    tree = build_prefix_tree(["soha"], vocab, slot="person")
    leaf = len(tree) - 1
    from slotgen.kb import TreeCursor

    cur = TreeCursor(tree=tree, active=(leaf,))
    assert cur.valid_next() == set()


def test_advance_completion_resets(vocab):
    tree = build_prefix_tree(["soha"], vocab, slot="person")
    cur = cursor_for(tree)
    ids = vocab.encode_text("soha")
    for t in ids[:-1]:
        cur, res = cur.advance(t)
        assert res.completed == ()
    cur, res = cur.advance(ids[-1])
    assert res.completed == (("person", "soha"),)
    assert cur.active == ()  # back at root


def test_advance_mismatch_then_rematch(vocab):
    tree = build_prefix_tree(["soha"], vocab, slot="person")
    cur = cursor_for(tree)
    s, o = vocab.encode_text("soha")[:2]
    cur, _ = cur.advance(s)
    cur, _ = cur.advance(o)
    # mismatching token that IS a valid first token: fresh match from root
    cur, res = cur.advance(s)
    assert res.moved
    assert cur.valid_next() == {o}


def test_advance_no_match_resets(vocab):
    tree = build_prefix_tree(["soha"], vocab, slot="person")
    cur = cursor_for(tree)
    cur, res = cur.advance(vocab.encode_word("x")[0] if "x" in vocab.index else 999)
    assert not res.moved and res.completed == () and cur.active == ()


def test_overlapping_self_prefix_found(vocab):
    # entity "aab": stream a a a b must find the occurrence starting at pos 1
    v = build_vocab(["aab"])
    tree = build_prefix_tree(["aab"], v, slot="s")
    a = v.encode_text("aab")[0]
    a2 = v.encode_text("aab")[1]
    b = v.encode_text("aab")[2]
    assert a == a2
    cur = cursor_for(tree)
    hits = []
    for pos, t in enumerate([a, a, a, b]):
        cur, res = cur.advance(t)
        hits.extend((pos, e) for _, e in res.completed)
    assert hits == [(3, "aab")]


def test_entity_prefix_of_entity(vocab):
    v = build_vocab(["so soha"])
    tree = build_prefix_tree(["so", "soha"], v, slot="s")
    # "so" uses o with word-end marker; "soha" uses plain o, so paths differ
    cur = cursor_for(tree)
    hits = []
    for t in v.encode_text("so"):
        cur, res = cur.advance(t)
        hits.extend(res.completed)
    assert hits == [("s", "so")]


def test_peek_matches_advance(vocab):
    tree = build_prefix_tree(["soha", "sophia"], vocab, slot="person")
    cur = cursor_for(tree)
    rng = np.random.default_rng(0)
    stream = [int(t) for t in rng.choice(vocab.encode_text("soha sophia mario a"), size=40)]
    for t in stream:
        assert cur.peek_completions(t) == cur.advance(t)[1].completed
        cur, _ = cur.advance(t)


# ------------------------------------------- brute-force oracle (property)

def brute_force_occurrences(entity_ids: dict[str, list[int]], stream: list[int]):
    """(end position, entity) for every entity occurrence in the stream."""
    out = set()
    for entity, ids in entity_ids.items():
        n = len(ids)
        for start in range(len(stream) - n + 1):
            if stream[start : start + n] == ids:
                out.add((start + n - 1, entity))
    return out


def brute_force_valid_next(entity_ids: dict[str, list[int]], stream: list[int]):
    """Continuation tokens of the longest live suffix; entity first tokens when none."""
    for k in range(len(stream), 0, -1):
        suffix = stream[-k:]
        nxt = {ids[k] for ids in entity_ids.values() if len(ids) > k and ids[:k] == suffix}
        if nxt:
            return nxt
    return {ids[0] for ids in entity_ids.values() if ids}


# marked and unmarked single-character tokens over a tiny alphabet, so that
# self-overlapping prefixes and mid-stream entity starts occur often
ALPHABET = ("a", "b", "a*", "b*")
entity_strategy = st.lists(
    st.text(alphabet="ab", min_size=1, max_size=4), min_size=1, max_size=5, unique=True
)
stream_strategy = st.lists(st.sampled_from(ALPHABET), min_size=0, max_size=25)


def _setup(entities, stream_chars):
    from slotgen.tokenizer import WORD_END

    v = build_vocab([" ".join(entities) + " ab ba a b"])
    tree = build_prefix_tree(entities, v, slot="s")
    entity_ids = {e: v.encode_text(e) for e in entities}
    stream = [v.index[c[0] + (WORD_END if c.endswith("*") else "")] for c in stream_chars]
    return v, tree, entity_ids, stream


@settings(max_examples=200, deadline=None)
@given(entity_strategy, stream_strategy)
def test_cursor_matches_brute_force(entities, stream_chars):
    _, tree, entity_ids, stream = _setup(entities, stream_chars)
    cur = cursor_for(tree)
    found = set()
    for pos, t in enumerate(stream):
        cur, res = cur.advance(t)
        found.update((pos, e) for _, e in res.completed)
    assert found == brute_force_occurrences(entity_ids, stream)


@settings(max_examples=200, deadline=None)
@given(entity_strategy, stream_strategy)
def test_valid_next_matches_longest_suffix(entities, stream_chars):
    _, tree, entity_ids, stream = _setup(entities, stream_chars)
    cur = cursor_for(tree)
    consumed: list[int] = []
    for t in stream:
        cur, res = cur.advance(t)
        consumed.append(t)
        assert cur.valid_next() == brute_force_valid_next(entity_ids, consumed)


# -------------------------------------------------------------- sampling

@pytest.fixture
def kb3():
    return KnowledgeBase(
        slots=["person", "game", "city"],
        entities={
            "person": ["soha", "mario", "rihanna", "ada"],
            "game": ["chess", "go"],
            "city": ["rome", "oslo", "cairo"],
        },
    )


def test_biasing_no_drop_no_distractors(kb3):
    cfg = BiasingConfig(n_distractors_range=(0, 0), drop_rate=0.0)
    out = sample_training_biasing([("person", "soha")], kb3, cfg, np.random.default_rng(1))
    assert out == {"person": ["soha"]}


def test_biasing_full_drop(kb3):
    cfg = BiasingConfig(n_distractors_range=(3, 3), drop_rate=1.0)
    out = sample_training_biasing([("person", "soha")], kb3, cfg, np.random.default_rng(1))
    assert sum(len(v) for v in out.values()) == 3
    assert all(e != "soha" or s != "person" for s, es in out.items() for e in es)


def test_biasing_deterministic(kb3):
    cfg = BiasingConfig(n_distractors_range=(2, 5), drop_rate=0.3)
    ref = [("person", "soha"), ("city", "rome")]
    a = sample_training_biasing(ref, kb3, cfg, np.random.default_rng(7))
    b = sample_training_biasing(ref, kb3, cfg, np.random.default_rng(7))
    assert a == b


def test_biasing_truncates_to_pool(kb3):
    cfg = BiasingConfig(n_distractors_range=(50, 50), drop_rate=0.0, same_slot_only=True)
    out = sample_training_biasing([("game", "chess")], kb3, cfg, np.random.default_rng(0))
    assert set(out) == {"game"}
    assert sorted(out["game"]) == ["chess", "go"]


def test_biasing_same_slot_only(kb3):
    cfg = BiasingConfig(n_distractors_range=(2, 2), drop_rate=0.0, same_slot_only=True)
    out = sample_training_biasing([("city", "rome")], kb3, cfg, np.random.default_rng(3))
    assert set(out) == {"city"}


def test_biasing_explicit_slot_pool(kb3):
    cfg = BiasingConfig(n_distractors_range=(2, 2), drop_rate=0.0)
    out = sample_training_biasing([], kb3, cfg, np.random.default_rng(3), slots=["game"])
    assert set(out) == {"game"} and len(out["game"]) == 2
