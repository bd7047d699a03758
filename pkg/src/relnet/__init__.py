"""Relation networks for detection: relation module, relation head, learned duplicate removal."""

__version__ = "0.1.0"
