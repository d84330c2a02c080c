"""Compositional symbolic abstraction and decentralized controller synthesis."""
