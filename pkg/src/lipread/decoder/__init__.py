"""Decoding graphs, token-passing decoder and lattices."""
