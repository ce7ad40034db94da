"""Synthetic spoken task-oriented-dialogue corpus with controlled entity counts.

Single-turn utterances are carrier templates filled with KB entities; a
frequency plan fixes exactly how often each entity occurs in training
(0 = unseen, 1-4 = few-shot, 5+ = common).  "Audio" is synthesised from the
transcript: each subword token owns a prototype feature vector and emits a
fixed number of noisy frames, so features are reproducible from (seed, id).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .kb import KnowledgeBase
from .tokenizer import WORD_END, Vocabulary, build_vocab, normalize

BUCKETS = ("0", "1", "2-4", "5-29", "30+")


def bucket_name(count: int) -> str:
    if count <= 0:
        return "0"
    if count == 1:
        return "1"
    if count < 5:
        return "2-4"
    if count < 30:
        return "5-29"
    return "30+"


def derived_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary labels (independent of PYTHONHASHSEED)."""
    digest = hashlib.blake2s(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass
class Utterance:
    id: str
    transcript: str
    gold: list[tuple[str, str]]
    dialogue_id: str | None = None
    turn_idx: int | None = None
    bucket: str | None = None


@dataclass
class Dialogue:
    dialogue_id: str
    turns: list[Utterance]
    gold_states: list[dict[str, str]]  # cumulative canonical state per turn


@dataclass
class CorpusSpec:
    slots: list[str]
    entities: dict[str, list[str]]
    templates: dict[str, list[str]]
    filler_templates: list[str]
    freq_plan: dict[str, int]
    n_train: int = 3000
    n_valid: int = 300
    n_test: int = 500
    test_occurrences: dict[str, int] = field(
        default_factory=lambda: {"0": 6, "1": 10, "2-4": 4, "5-29": 4, "30+": 3}
    )
    n_valid_entity: int = 150
    n_dialogues: int = 300
    dialogue_split: tuple[int, int, int] = (200, 40, 60)
    aliases: dict[str, str] = field(default_factory=dict)
    alias_surfaces: dict[str, list[str]] = field(default_factory=dict)
    dialogue_openers: list[tuple[str, str]] | None = None
    dialogue_second: list[tuple[str, str]] | None = None
    dialogue_change: dict[str, str] | None = None
    dialogue_fillers: list[str] | None = None
    seed: int = 0
    noise_sigma: float = 0.1
    homophone_pairs: list[tuple[str, str]] = field(default_factory=list)
    homophone_eps: float = 0.15
    d_feat: int = 16
    frames_per_token: int = 3

    def validate(self) -> None:
        seen: set[str] = set()
        problems: list[str] = []
        for slot in self.slots:
            for e in self.entities[slot]:
                if e in seen:
                    problems.append(f"entity {e!r} appears in more than one slot")
                seen.add(e)
            if any(self.freq_plan.get(e, 0) > 0 for e in self.entities[slot]):
                if not self.templates.get(slot):
                    problems.append(f"slot {slot!r} has entities planned but no templates")
        unknown = [e for e in self.freq_plan if e not in seen]
        problems.extend(f"planned entity {e!r} not in the KB" for e in unknown)
        total = sum(self.freq_plan.values())
        if total > self.n_train:
            problems.append(f"plan needs {total} train utterances, budget is {self.n_train}")
        if problems:
            raise ValueError("unrealizable corpus spec: " + "; ".join(problems))


# ------------------------------------------------------------------ default

_PERSON = ["soha", "rihanna", "marco", "priya", "lena", "tariq",
           "wendel", "abbas", "yuki", "imani", "besnik", "zuleika"]
_GAME = ["mario kart", "chess blitz", "star fox", "zelda quest", "tetris", "pong",
         "halo wars", "myst", "doom eternal", "portal", "okami", "quake arena"]
_SONG = ["yellow river", "blue monday", "aqua vida", "solar wind", "night train",
         "cold fire", "mellow gold", "stone roses", "dark star", "iron sky",
         "velvet moon", "echo beach"]
_RESTAURANT = ["derby restaurant", "blue lagoon", "casa roma", "spice garden",
               "the olive tree", "red dragon", "mama rosa", "golden wok",
               "sushi zen", "taco loco", "bella napoli", "green fork"]
_CITY = ["oslo", "cairo", "lima", "porto", "denver", "quebec",
         "mumbai", "seoul", "athens", "havana", "krakow", "tbilisi"]

_TEMPLATES = {
    "person": ["call {} now", "send a text to {}", "phone {} please",
               "message {} about dinner", "remind {} tonight", "add {} to contacts"],
    "game_name": ["play the game {}", "launch {} for me", "open the game {}",
                  "start {} now", "download {} please", "is {} any fun"],
    "song_name": ["play the song {}", "put on {}", "i want to hear {}",
                  "queue {} next", "play {} loudly", "skip to {}"],
    "restaurant_name": ["book a table at {}", "reserve {} for tonight",
                        "find reviews for {}", "order from {}", "is {} open now",
                        "directions to {}"],
    "city": ["weather in {}", "what time is it in {}", "book a flight to {}",
             "traffic in {} please", "news from {}", "temperature in {} today"],
}

_FILLERS = ["what time is it", "set an alarm for seven", "turn on the lights",
            "thanks goodbye", "cancel that please", "how are you today",
            "tell me a joke", "stop the music", "volume up please",
            "never mind", "turn off the radio", "what can you do"]

# entity position in each slot list -> planned train occurrences
_PLAN_COUNTS = [140, 90, 60, 30, 20, 10, 4, 3, 2, 1, 0, 0]

_DIALOGUE_OPENERS = [("restaurant_name", "book a table at {}"),
                     ("restaurant_name", "i want dinner at {}"),
                     ("song_name", "play the song {}"),
                     ("game_name", "play the game {}"),
                     ("person", "call {} now")]
_DIALOGUE_SECOND = [("city", "make it in {}"), ("city", "i am in {}"),
                    ("person", "invite {} along")]
_DIALOGUE_CHANGE = {
    "restaurant_name": "actually change it to {}",
    "song_name": "actually play {} instead",
    "game_name": "actually launch {} instead",
    "person": "actually call {} instead",
    "city": "actually make it {}",
}
_DIALOGUE_FILLERS = ["yes that works", "thank you goodbye", "sounds good thanks"]

_ALIASES = {"the lagoon": "blue lagoon", "mama rosas": "mama rosa",
            "the derby": "derby restaurant"}
_ALIAS_SURFACES = {"blue lagoon": ["the lagoon"], "mama rosa": ["mama rosas"],
                   "derby restaurant": ["the derby"]}


def default_spec(seed: int = 0) -> CorpusSpec:
    """The desk-scale corpus: 5 slots, 60 entities, 3000/300/500 utterances."""
    entities = {"person": _PERSON, "game_name": _GAME, "song_name": _SONG,
                "restaurant_name": _RESTAURANT, "city": _CITY}
    plan: dict[str, int] = {}
    for slot_entities in entities.values():
        for entity, count in zip(slot_entities, _PLAN_COUNTS):
            plan[entity] = count
    return CorpusSpec(
        slots=list(entities),
        entities=entities,
        templates=dict(_TEMPLATES),
        filler_templates=list(_FILLERS),
        freq_plan=plan,
        aliases=dict(_ALIASES),
        alias_surfaces={k: list(v) for k, v in _ALIAS_SURFACES.items()},
        seed=seed,
    )


# ----------------------------------------------------------------- features

class FeatureSynthesizer:
    """Per-token prototype frames plus Gaussian noise, all seed-derived."""

    def __init__(self, vocab: Vocabulary, seed: int, d_feat: int = 16,
                 frames_per_token: int = 3, sigma: float = 0.1,
                 homophone_pairs: Sequence[tuple[str, str]] = (),
                 homophone_eps: float = 0.15):
        self.vocab = vocab
        self.seed = seed
        self.d_feat = d_feat
        self.frames_per_token = frames_per_token
        self.sigma = sigma
        rng = np.random.default_rng(derived_seed("prototypes", seed))
        self.prototypes = rng.standard_normal((len(vocab), d_feat))
        for a, b in homophone_pairs:
            for suffix in ("", WORD_END):
                ta, tb = a + suffix, b + suffix
                if ta in vocab.index and tb in vocab.index:
                    drift = rng.standard_normal(d_feat) * homophone_eps
                    self.prototypes[vocab.index[tb]] = self.prototypes[vocab.index[ta]] + drift

    def features(self, transcript: str, utt_key: str = "") -> np.ndarray:
        ids = self.vocab.encode_text(transcript)
        base = np.repeat(self.prototypes[ids], self.frames_per_token, axis=0)
        if self.sigma > 0.0:
            rng = np.random.default_rng(derived_seed("noise", self.seed, utt_key))
            base = base + rng.standard_normal(base.shape) * self.sigma
        return base


def synth_features(transcript: str, vocab: Vocabulary, seed_global: int,
                   utt_key: str = "", sigma: float = 0.1, d_feat: int = 16,
                   frames_per_token: int = 3) -> np.ndarray:
    synth = FeatureSynthesizer(vocab, seed_global, d_feat=d_feat,
                               frames_per_token=frames_per_token, sigma=sigma)
    return synth.features(transcript, utt_key)


# ---------------------------------------------------------------- generator

@dataclass
class Corpus:
    spec: CorpusSpec
    vocab: Vocabulary
    kb: KnowledgeBase
    train: list[Utterance]
    valid: list[Utterance]
    test: list[Utterance]
    dialogues_train: list[Dialogue]
    dialogues_valid: list[Dialogue]
    dialogues_test: list[Dialogue]

    def synthesizer(self) -> FeatureSynthesizer:
        s = self.spec
        return FeatureSynthesizer(self.vocab, s.seed, d_feat=s.d_feat,
                                  frames_per_token=s.frames_per_token,
                                  sigma=s.noise_sigma,
                                  homophone_pairs=s.homophone_pairs,
                                  homophone_eps=s.homophone_eps)


def _slot_of(spec: CorpusSpec, entity: str) -> str:
    for slot in spec.slots:
        if entity in spec.entities[slot]:
            return slot
    raise KeyError(entity)


def _entity_utterance(spec: CorpusSpec, rng, uid: str, entity: str,
                      bucket: str | None = None) -> Utterance:
    slot = _slot_of(spec, entity)
    template = spec.templates[slot][int(rng.integers(len(spec.templates[slot])))]
    return Utterance(id=uid, transcript=normalize(template.format(entity)),
                     gold=[(slot, entity)], bucket=bucket)


def _filler_utterance(spec: CorpusSpec, rng, uid: str, bucket: str | None = None) -> Utterance:
    text = spec.filler_templates[int(rng.integers(len(spec.filler_templates)))]
    return Utterance(id=uid, transcript=normalize(text), gold=[], bucket=bucket)


def _dialogue_templates(spec: CorpusSpec):
    """Spec-provided dialogue templates, restricted to slots the spec has."""
    openers = spec.dialogue_openers
    if openers is None:
        openers = [(s, t) for s, t in _DIALOGUE_OPENERS if s in spec.slots]
        if not openers:
            openers = [(s, spec.templates[s][0]) for s in spec.slots if spec.templates.get(s)]
    second = spec.dialogue_second
    if second is None:
        second = [(s, t) for s, t in _DIALOGUE_SECOND if s in spec.slots]
    change = spec.dialogue_change
    if change is None:
        change = {s: t for s, t in _DIALOGUE_CHANGE.items() if s in spec.slots}
    fillers = spec.dialogue_fillers or _DIALOGUE_FILLERS
    return openers, second, change, fillers


def _make_dialogue(spec: CorpusSpec, rng, did: str, entity_pool: dict[str, list[str]]) -> Dialogue:
    openers, second_templates, change, fillers = _dialogue_templates(spec)

    def pick(slot):
        pool = entity_pool[slot] or spec.entities[slot]
        return pool[int(rng.integers(len(pool)))]

    turns: list[tuple[str, list[tuple[str, str]]]] = []
    slot1, opener = openers[int(rng.integers(len(openers)))]
    e1 = pick(slot1)
    turns.append((opener.format(_surface(spec, rng, e1)), [(slot1, e1)]))
    if second_templates and rng.random() < 0.75:
        slot2, second = second_templates[int(rng.integers(len(second_templates)))]
        if slot2 != slot1:
            e2 = pick(slot2)
            turns.append((second.format(_surface(spec, rng, e2)), [(slot2, e2)]))
        else:
            turns.append((fillers[0], []))
    if slot1 in change and rng.random() < 0.35:
        alt = pick(slot1)
        if alt != e1:
            turns.append((change[slot1].format(_surface(spec, rng, alt)), [(slot1, alt)]))
    if len(turns) < 2 or rng.random() < 0.4:
        turns.append((fillers[int(rng.integers(len(fillers)))], []))

    utts: list[Utterance] = []
    states: list[dict[str, str]] = []
    state: dict[str, str] = {}
    aliases = spec.aliases
    for idx, (text, gold_surfaces) in enumerate(turns):
        utts.append(Utterance(id=f"{did}-t{idx}", transcript=normalize(text),
                              gold=list(gold_surfaces), dialogue_id=did, turn_idx=idx))
        for slot, surface in gold_surfaces:
            state[slot] = aliases.get(surface, surface)
        states.append(dict(state))
    return Dialogue(dialogue_id=did, turns=utts, gold_states=states)


def _surface(spec: CorpusSpec, rng, entity: str) -> str:
    variants = spec.alias_surfaces.get(entity)
    if variants and rng.random() < 0.3:
        return variants[int(rng.integers(len(variants)))]
    return entity


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Deterministically realize the spec; per-entity train counts are exact."""
    spec.validate()
    rng = np.random.default_rng(derived_seed("corpus", spec.seed))

    # gold surfaces in dialogues may be alias forms; include them in the KB text
    vocab_sources: list[str] = []
    for slot in spec.slots:
        vocab_sources.extend(spec.entities[slot])
        vocab_sources.append(slot.replace("_", " "))
    vocab_sources.extend(spec.aliases)
    vocab_sources.extend(s for ss in spec.alias_surfaces.values() for s in ss)
    vocab_sources.extend(t.replace("{}", " ") for ts in spec.templates.values() for t in ts)
    vocab_sources.extend(spec.filler_templates)
    openers, second, change, dlg_fillers = _dialogue_templates(spec)
    vocab_sources.extend(t.replace("{}", " ") for _, t in openers + second)
    vocab_sources.extend(t.replace("{}", " ") for t in change.values())
    vocab_sources.extend(dlg_fillers)
    vocab_sources.append("the is")
    vocab = build_vocab(vocab_sources)

    kb = KnowledgeBase(slots=list(spec.slots),
                       entities={s: list(spec.entities[s]) for s in spec.slots},
                       aliases=dict(spec.aliases))

    counts = {e: spec.freq_plan.get(e, 0) for s in spec.slots for e in spec.entities[s]}

    train: list[Utterance] = []
    for entity in counts:
        for k in range(counts[entity]):
            train.append(_entity_utterance(spec, rng, uid="", entity=entity))
    while len(train) < spec.n_train:
        train.append(_filler_utterance(spec, rng, uid=""))
    rng.shuffle(train)
    for i, utt in enumerate(train):
        utt.id = f"train-{i:05d}"

    valid: list[Utterance] = []
    valid_pool = [e for e, c in counts.items() if c >= 5]
    for k in range(min(spec.n_valid_entity, spec.n_valid)):
        entity = valid_pool[int(rng.integers(len(valid_pool)))]
        valid.append(_entity_utterance(spec, rng, uid="", entity=entity))
    while len(valid) < spec.n_valid:
        valid.append(_filler_utterance(spec, rng, uid=""))
    rng.shuffle(valid)
    for i, utt in enumerate(valid):
        utt.id = f"valid-{i:05d}"

    test: list[Utterance] = []
    for entity, count in counts.items():
        bucket = bucket_name(count)
        for k in range(spec.test_occurrences.get(bucket, 3)):
            test.append(_entity_utterance(spec, rng, uid="", entity=entity, bucket=bucket))
    while len(test) < spec.n_test:
        test.append(_filler_utterance(spec, rng, uid="", bucket=None))
    rng.shuffle(test)
    for i, utt in enumerate(test):
        utt.id = f"test-{i:05d}"

    # multi-turn: training dialogues stick to frequent entities so the
    # single-turn frequency plan stays authoritative for bucket labels
    frequent = {s: [e for e in spec.entities[s] if counts[e] >= 5] for s in spec.slots}
    mixed = {s: list(spec.entities[s]) for s in spec.slots}
    n_tr, n_va, n_te = spec.dialogue_split
    dialogues_train = [_make_dialogue(spec, rng, f"dlg-train-{i:04d}", frequent)
                       for i in range(n_tr)]
    dialogues_valid = [_make_dialogue(spec, rng, f"dlg-valid-{i:04d}", frequent)
                      for i in range(n_va)]
    dialogues_test = [_make_dialogue(spec, rng, f"dlg-test-{i:04d}", mixed)
                      for i in range(n_te)]

    return Corpus(spec=spec, vocab=vocab, kb=kb, train=train, valid=valid, test=test,
                  dialogues_train=dialogues_train, dialogues_valid=dialogues_valid,
                  dialogues_test=dialogues_test)


def train_counts(utterances: Iterable[Utterance]) -> dict[str, int]:
    """Occurrences of each gold value in a manifest (bucket ground truth)."""
    out: dict[str, int] = {}
    for utt in utterances:
        for _, value in utt.gold:
            out[value] = out.get(value, 0) + 1
    return out


# -------------------------------------------------------------- zero-shot

def split_zero_shot(utterances: Sequence[Utterance], kb: KnowledgeBase,
                    held_out_slots: Sequence[str]) -> tuple[list[Utterance], list[Utterance]]:
    """Hold out every utterance containing an entity of the given slots."""
    unknown = [s for s in held_out_slots if s not in kb.slots]
    if unknown:
        raise ValueError(f"unknown slots: {unknown}")
    held_entities = [kb.entities[s] for s in held_out_slots]

    def contains_held(utt: Utterance) -> bool:
        if any(slot in held_out_slots for slot, _ in utt.gold):
            return True
        words = utt.transcript.split()
        for entities in held_entities:
            for entity in entities:
                ew = entity.split()
                for start in range(len(words) - len(ew) + 1):
                    if words[start : start + len(ew)] == ew:
                        return True
        return False

    test_out = [u for u in utterances if contains_held(u)]
    train_out = [u for u in utterances if not contains_held(u)]
    if not train_out:
        raise ValueError("zero-shot split leaves an empty training set")
    return train_out, test_out


# ---------------------------------------------------------------- manifests

_FIELDS = ("id", "transcript", "gold", "dialogue_id", "turn_idx", "bucket")


def utterance_to_record(utt: Utterance) -> dict:
    rec = {
        "id": utt.id,
        "transcript": utt.transcript,
        "gold": [{"slot": s, "value": v} for s, v in utt.gold],
    }
    if utt.dialogue_id is not None:
        rec["dialogue_id"] = utt.dialogue_id
        rec["turn_idx"] = utt.turn_idx
    if utt.bucket is not None:
        rec["bucket"] = utt.bucket
    return rec


def write_manifest(path: str | Path, utterances: Iterable[Utterance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for utt in utterances:
            fh.write(json.dumps(utterance_to_record(utt)) + "\n")


def read_manifest(path: str | Path) -> list[Utterance]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        out.append(Utterance(
            id=rec["id"],
            transcript=rec["transcript"],
            gold=[(g["slot"], g["value"]) for g in rec["gold"]],
            dialogue_id=rec.get("dialogue_id"),
            turn_idx=rec.get("turn_idx"),
            bucket=rec.get("bucket"),
        ))
    return out


def save_corpus(corpus: Corpus, out_dir: str | Path) -> None:
    """Write manifests, KB, aliases, vocabulary and the spec to a directory."""
    from dataclasses import asdict

    from .kb import write_aliases, write_kb

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "train.jsonl", corpus.train)
    write_manifest(out / "valid.jsonl", corpus.valid)
    write_manifest(out / "test.jsonl", corpus.test)
    for name, dialogues in (("train", corpus.dialogues_train),
                            ("valid", corpus.dialogues_valid),
                            ("test", corpus.dialogues_test)):
        write_manifest(out / f"dialogues_{name}.jsonl",
                       [t for d in dialogues for t in d.turns])
    write_kb(out / "kb.tsv", corpus.kb)
    write_aliases(out / "aliases.tsv", corpus.kb.aliases)
    corpus.vocab.save(out / "vocab.txt")
    spec = asdict(corpus.spec)
    (out / "spec.json").write_text(json.dumps(spec, indent=1) + "\n")


def spec_from_json(path: str | Path) -> CorpusSpec:
    data = json.loads(Path(path).read_text())
    if "dialogue_split" in data:
        data["dialogue_split"] = tuple(data["dialogue_split"])
    if "homophone_pairs" in data:
        data["homophone_pairs"] = [tuple(p) for p in data["homophone_pairs"]]
    if "dialogue_openers" in data and data["dialogue_openers"] is not None:
        data["dialogue_openers"] = [tuple(p) for p in data["dialogue_openers"]]
    if "dialogue_second" in data and data["dialogue_second"] is not None:
        data["dialogue_second"] = [tuple(p) for p in data["dialogue_second"]]
    return CorpusSpec(**data)


def load_corpus(out_dir: str | Path) -> Corpus:
    """Rebuild a Corpus from a directory written by save_corpus."""
    from .kb import load_kb

    out = Path(out_dir)
    spec = spec_from_json(out / "spec.json")
    vocab = Vocabulary.load(out / "vocab.txt")
    kb = load_kb(out / "kb.tsv", vocab=vocab, alias_path=out / "aliases.tsv")
    dialogues = {}
    for name in ("train", "valid", "test"):
        turns = read_manifest(out / f"dialogues_{name}.jsonl")
        dialogues[name] = dialogues_from_manifest(turns, kb) if turns else []
        dialogues[name].sort(key=lambda d: d.dialogue_id)
    return Corpus(
        spec=spec, vocab=vocab, kb=kb,
        train=read_manifest(out / "train.jsonl"),
        valid=read_manifest(out / "valid.jsonl"),
        test=read_manifest(out / "test.jsonl"),
        dialogues_train=dialogues["train"],
        dialogues_valid=dialogues["valid"],
        dialogues_test=dialogues["test"],
    )


def dialogues_from_manifest(utterances: Sequence[Utterance],
                            kb: KnowledgeBase) -> list[Dialogue]:
    """Group a manifest by dialogue_id and rebuild cumulative gold states."""
    by_id: dict[str, list[Utterance]] = {}
    for utt in utterances:
        if utt.dialogue_id is None:
            raise ValueError(f"utterance {utt.id} has no dialogue_id")
        by_id.setdefault(utt.dialogue_id, []).append(utt)
    dialogues = []
    for did, turns in by_id.items():
        turns.sort(key=lambda u: u.turn_idx)
        state: dict[str, str] = {}
        states = []
        for turn in turns:
            for slot, value in turn.gold:
                state[slot] = kb.canonical(value)
            states.append(dict(state))
        dialogues.append(Dialogue(dialogue_id=did, turns=turns, gold_states=states))
    return dialogues
