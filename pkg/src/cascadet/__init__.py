"""Selective two-step cascade face detection: anchors, matching, losses,
cascade filtering, inference, evaluation, data handling and a toy detector."""

__version__ = "0.1.0"
