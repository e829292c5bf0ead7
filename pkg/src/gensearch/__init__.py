"""Generative search at desk scale: semantic-ID tokenization, an autoregressive
decoder trained jointly with the tokenizer, preference post-training and
trie-constrained retrieval over a simulated search log."""

__version__ = "0.1.0"
