"""The assembled slot-filling system and its checkpoint container.

Parameter groups: asr, tcpgen_shared_gcn, tcpgen_asr_head, tcpgen_svg_head,
clm, plm, svg.  One tree encoder is shared by both pointer generators; each
side has its own query/gate head.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .asr import AsrModel, PointerSide
from .autodiff import Tensor
from .config import RunConfig
from .corpus import derived_seed
from .kb import KnowledgeBase
from .layers import TreeGcn
from .lm import SlotPredictor, WordLm, WordVocab, build_word_vocab
from .svg import SvgModel
from .tcpgen import PointerHead
from .tokenizer import Vocabulary

MAGIC = b"SLOTGEN1"


class SlotFiller:
    """All sub-models plus the vocabularies they share."""

    def __init__(self, config: RunConfig, vocab: Vocabulary, word_vocab: WordVocab,
                 kb: KnowledgeBase, seed: int | None = None):
        cfg = config
        self.config = cfg
        self.vocab = vocab
        self.word_vocab = word_vocab
        self.kb = kb
        self.seed = cfg.seed if seed is None else seed
        dtype = np.float32 if cfg.dtype == "float32" else np.float64

        def rng(tag):
            return np.random.default_rng(derived_seed("init", self.seed, tag))

        V = len(vocab)
        self.asr = AsrModel(rng("asr"), V, d_feat=cfg.d_feat, d_emb=cfg.d_emb,
                            d_enc=cfg.d_enc, d_dec=cfg.d_dec, dtype=dtype)
        self.gcn = TreeGcn(rng("gcn"), cfg.d_emb, cfg.d_tree, dtype=dtype)
        self.head_asr = PointerHead(rng("head_asr"), cfg.d_enc + cfg.d_emb,
                                    cfg.d_dec, cfg.d_tree, dtype=dtype)
        self.head_svg = PointerHead(rng("head_svg"), cfg.d_svg, cfg.d_svg,
                                    cfg.d_tree, dtype=dtype)
        self.clm = SlotPredictor(rng("clm"), word_vocab, kb.slots,
                                 d_hidden=cfg.d_clm, dtype=dtype)
        self.plm = WordLm(rng("plm"), word_vocab, d_hidden=cfg.d_plm, dtype=dtype)
        self.svg = SvgModel(rng("svg"), V, d_dec=cfg.d_dec, d_plm=cfg.d_plm,
                            d_hidden=cfg.d_svg, dtype=dtype)

    # ------------------------------------------------------------ parameters
    def param_groups(self) -> dict[str, dict[str, Tensor]]:
        return {
            "asr": self.asr.parameters(),
            "tcpgen_shared_gcn": self.gcn.parameters(),
            "tcpgen_asr_head": self.head_asr.parameters(),
            "tcpgen_svg_head": self.head_svg.parameters(),
            "clm": self.clm.parameters(),
            "plm": self.plm.parameters(),
            "svg": self.svg.parameters(),
        }

    def parameters(self, groups: Sequence[str] | None = None) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for group, params in self.param_groups().items():
            if groups is None or group in groups:
                for name, p in params.items():
                    out[f"{group}.{name}"] = p
        return out

    def pointer_side(self, trees) -> PointerSide:
        return PointerSide(head=self.head_asr, gcn=self.gcn, trees=trees)

    # ----------------------------------------------------------- checkpoints
    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self)

    @classmethod
    def load(cls, path: str | Path, kb: KnowledgeBase | None = None) -> "SlotFiller":
        return load_checkpoint(path, kb=kb)


def save_checkpoint(path: str | Path, model: SlotFiller) -> None:
    """Binary container: magic, u32 header length, JSON header, raw arrays.

    The header records the config, seed, vocabularies and per-parameter
    (name, shape, dtype); array data is little-endian, in header order.
    """
    params = model.parameters()
    header = {
        "seed": model.seed,
        "config": model.config.to_dict(),
        "vocab": list(model.vocab.tokens),
        "word_vocab": list(model.word_vocab.words),
        "kb": {"slots": model.kb.slots, "entities": model.kb.entities,
               "aliases": model.kb.aliases},
        "params": [
            {"name": name, "shape": list(p.data.shape), "dtype": str(p.data.dtype)}
            for name, p in params.items()
        ],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in params.values():
            fh.write(np.ascontiguousarray(p.data).astype(p.data.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path: str | Path, kb: KnowledgeBase | None = None) -> SlotFiller:
    from .config import RunConfig

    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", raw[len(MAGIC) : len(MAGIC) + 4])
    off = len(MAGIC) + 4
    header = json.loads(raw[off : off + hlen].decode("utf-8"))
    off += hlen
    config = RunConfig.from_dict(header["config"])
    vocab = Vocabulary(tokens=tuple(header["vocab"]))
    word_vocab = WordVocab(words=tuple(header["word_vocab"]))
    if kb is None:
        kb = KnowledgeBase(slots=header["kb"]["slots"], entities=header["kb"]["entities"],
                           aliases=header["kb"]["aliases"])
    model = SlotFiller(config, vocab, word_vocab, kb, seed=header["seed"])
    params = model.parameters()
    for meta in header["params"]:
        name, shape, dtype = meta["name"], tuple(meta["shape"]), np.dtype(meta["dtype"])
        n_bytes = int(np.prod(shape)) * dtype.itemsize if shape else dtype.itemsize
        arr = np.frombuffer(raw[off : off + n_bytes],
                            dtype=dtype.newbyteorder("<")).reshape(shape)
        off += n_bytes
        if name not in params:
            raise ValueError(f"checkpoint parameter {name!r} not in model")
        if params[name].data.shape != arr.shape:
            raise ValueError(f"shape mismatch for {name!r}")
        params[name].data = arr.astype(dtype, copy=True)
    return model


def build_word_vocab_for(texts: Sequence[str]) -> WordVocab:
    return build_word_vocab(texts)
