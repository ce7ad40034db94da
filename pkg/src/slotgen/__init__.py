"""Audio-grounded generative slot filling with prefix-tree copy mechanisms."""

__version__ = "0.1.0"

from .tokenizer import Vocabulary, build_vocab, normalize  # noqa: F401
from .kb import (  # noqa: F401
    BiasingConfig,
    KnowledgeBase,
    PrefixTree,
    TreeCursor,
    build_prefix_tree,
    build_subtree,
    cursor_for,
    load_kb,
    sample_training_biasing,
)
